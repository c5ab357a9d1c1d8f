//! Motion files: one JSON header line followed by the frame payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{MotionSeq, PoseLayout};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Little-endian `f32`, row-major.
    #[default]
    Binary,
    /// One whitespace-separated line per frame.
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionHeader {
    pub format_version: u32,
    pub fps: f64,
    #[serde(rename = "F")]
    pub frames: usize,
    #[serde(rename = "D")]
    pub pose_dim: usize,
    pub layout: PoseLayout,
    pub encoding: Encoding,
}

pub fn write_motion(m: &MotionSeq, path: &Path, encoding: Encoding) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_motion_to(m, &mut w, encoding).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_motion(path: &Path) -> Result<MotionSeq> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_motion_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e,
    })
}

pub fn write_motion_to<W: Write>(m: &MotionSeq, w: &mut W, encoding: Encoding) -> Result<()> {
    let header = MotionHeader {
        format_version: FORMAT_VERSION,
        fps: m.fps(),
        frames: m.len(),
        pose_dim: m.layout().pose_dim(),
        layout: m.layout().clone(),
        encoding,
    };
    let io = |e| Error::io("<stream>", e);
    let line = serde_json::to_string(&header).map_err(|e| Error::parse("header", e.to_string()))?;
    writeln!(w, "{line}").map_err(io)?;
    match encoding {
        Encoding::Binary => {
            let mut buf = Vec::with_capacity(m.frames().len() * 4);
            for &v in m.frames().iter() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Encoding::Text => {
            for row in m.frames().rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", cells.join(" ")).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_motion_from<R: BufRead>(mut r: R) -> Result<MotionSeq> {
    let io = |e| Error::io("<stream>", e);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    if !line.ends_with('\n') {
        return Err(Error::parse("header", "missing header line"));
    }
    let header: MotionHeader =
        serde_json::from_str(&line).map_err(|e| Error::parse("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            "format_version",
            format!("unsupported version {}", header.format_version),
        ));
    }
    header
        .layout
        .validate()
        .map_err(|e| Error::parse("layout", e.to_string()))?;
    if header.layout.pose_dim() != header.pose_dim {
        return Err(Error::Integrity(format!(
            "layout width {} does not match declared D={}",
            header.layout.pose_dim(),
            header.pose_dim
        )));
    }
    let (f, d) = (header.frames, header.pose_dim);
    let mut data = Vec::with_capacity(f * d);
    match header.encoding {
        Encoding::Binary => {
            let mut bytes = Vec::new();
            r.read_to_end(&mut bytes).map_err(io)?;
            if bytes.len() < f * d * 4 {
                return Err(Error::parse(
                    "payload",
                    format!("expected {} bytes, found {}", f * d * 4, bytes.len()),
                ));
            }
            if bytes.len() > f * d * 4 {
                return Err(Error::Integrity(format!(
                    "payload has {} bytes, header declares {}",
                    bytes.len(),
                    f * d * 4
                )));
            }
            data.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
            );
        }
        Encoding::Text => {
            let mut rows = 0;
            for (i, line) in r.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let cells = line
                    .split_whitespace()
                    .enumerate()
                    .map(|(j, s)| {
                        s.parse::<f64>()
                            .map_err(|e| Error::parse(format!("frames[{i}][{j}]"), e.to_string()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if cells.len() != d {
                    return Err(Error::Integrity(format!(
                        "frame {i} has {} values, header declares D={d}",
                        cells.len()
                    )));
                }
                data.extend(cells);
                rows += 1;
            }
            if rows < f {
                return Err(Error::parse(
                    "payload",
                    format!("expected {f} frames, found {rows}"),
                ));
            }
            if rows > f {
                return Err(Error::Integrity(format!(
                    "payload has {rows} frames, header declares F={f}"
                )));
            }
        }
    }
    let frames = Array2::from_shape_vec((f, d), data).expect("payload length checked");
    MotionSeq::new(header.layout, frames, header.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn motion(f: usize, j: usize, seed: u32) -> MotionSeq {
        let frames = Array2::from_shape_fn((f, 3 * j), |(a, b)| {
            ((a * 31 + b * 7 + seed as usize) % 97) as f32 as f64 * 0.125 - 3.0
        });
        MotionSeq::new(PoseLayout::positions_only(j), frames, 20.0).unwrap()
    }

    fn round_trip(m: &MotionSeq, enc: Encoding) -> Result<MotionSeq> {
        let mut buf = Vec::new();
        write_motion_to(m, &mut buf, enc)?;
        read_motion_from(Cursor::new(buf))
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let m = motion(5, 3, 1);
        assert_eq!(round_trip(&m, Encoding::Binary).unwrap(), m);
    }

    #[test]
    fn text_round_trip_keeps_f64() {
        let frames = Array2::from_shape_fn((3, 6), |(a, b)| (a as f64 + 0.1) / (b as f64 + 3.0));
        let m = MotionSeq::new(PoseLayout::positions_only(2), frames, 12.5).unwrap();
        assert_eq!(round_trip(&m, Encoding::Text).unwrap(), m);
    }

    #[test]
    fn truncated_binary_is_a_parse_error() {
        let mut buf = Vec::new();
        write_motion_to(&motion(4, 2, 0), &mut buf, Encoding::Binary).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_motion_from(Cursor::new(buf)),
            Err(Error::Parse { field, .. }) if field == "payload"
        ));
    }

    #[test]
    fn truncated_header_is_a_parse_error() {
        let buf = br#"{"format_version":1,"fps":20.0"#.to_vec();
        assert!(matches!(
            read_motion_from(Cursor::new(buf)),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn missing_field_is_named() {
        let buf = b"{\"format_version\":1,\"F\":1,\"D\":3,\"layout\":{\"joints\":1,\"groups\":[{\"kind\":\"joint_positions\",\"offset\":0,\"width\":3}]},\"encoding\":\"text\"}\n1 2 3\n".to_vec();
        let err = read_motion_from(Cursor::new(buf)).unwrap_err();
        assert!(err.to_string().contains("fps"), "{err}");
    }

    #[test]
    fn wide_rows_are_an_integrity_error() {
        let layout = PoseLayout::new(1, &[super::super::GroupKind::RootKinematics], 0).unwrap();
        let header = MotionHeader {
            format_version: 1,
            fps: 20.0,
            frames: 1,
            pose_dim: 4,
            layout,
            encoding: Encoding::Text,
        };
        let mut buf = serde_json::to_string(&header).unwrap().into_bytes();
        buf.extend_from_slice(b"\n1 2 3 4 5\n");
        assert!(matches!(
            read_motion_from(Cursor::new(buf)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn declared_width_must_match_layout() {
        let header = MotionHeader {
            format_version: 1,
            fps: 20.0,
            frames: 1,
            pose_dim: 4,
            layout: PoseLayout::positions_only(2),
            encoding: Encoding::Binary,
        };
        let mut buf = serde_json::to_string(&header).unwrap().into_bytes();
        buf.push(b'\n');
        buf.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            read_motion_from(Cursor::new(buf)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.motion");
        let m = motion(7, 8, 3);
        write_motion(&m, &path, Encoding::Binary).unwrap();
        assert_eq!(read_motion(&path).unwrap(), m);
        assert!(matches!(
            read_motion(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn binary_round_trip_fuzz(
            f in 1usize..12,
            j in 1usize..5,
            fps in 1.0f64..120.0,
            vals in proptest::collection::vec(-1e6f32..1e6, 12 * 15),
        ) {
            let frames = Array2::from_shape_fn((f, 3 * j), |(a, b)| vals[a * 15 + b] as f64);
            let m = MotionSeq::new(PoseLayout::positions_only(j), frames, fps).unwrap();
            prop_assert_eq!(round_trip(&m, Encoding::Binary).unwrap(), m);
        }
    }
}
