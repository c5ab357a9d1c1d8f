//! Pose layouts, skeletons, 6D rotations and motion sequences.

mod corpus;
mod io;

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, Matrix};

pub use corpus::{
    derive_seed, generate_corpus, render_template, ClassTemplate, Corpus, CorpusSample, CorpusSpec,
    JointOscillation, Standardizer,
};
pub use io::{
    read_motion, read_motion_from, write_motion, write_motion_to, Encoding, MotionHeader,
};

/// Kind of a contiguous channel group inside a pose vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Root yaw velocity, root x/z velocity and root height.
    RootKinematics,
    /// Root x, y, z.
    RootCoords,
    /// `J × 3` joint positions.
    JointPositions,
    /// `J × 3` joint velocities.
    JointVelocities,
    /// `J × 6` joint rotations in the continuous 6D form.
    JointRotations,
    /// One flag per contact point.
    Contacts,
}

impl GroupKind {
    /// Channels per joint for per-joint groups.
    fn per_joint(self) -> Option<usize> {
        match self {
            GroupKind::JointPositions | GroupKind::JointVelocities => Some(3),
            GroupKind::JointRotations => Some(6),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub kind: GroupKind,
    pub offset: usize,
    pub width: usize,
}

/// Named channel groups laid out contiguously; `D` is the sum of widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseLayout {
    pub joints: usize,
    pub groups: Vec<ChannelGroup>,
}

impl PoseLayout {
    /// Lays out `kinds` back to back. `contacts` is the width of a
    /// [`GroupKind::Contacts`] group if one is listed.
    pub fn new(joints: usize, kinds: &[GroupKind], contacts: usize) -> Result<Self> {
        let mut offset = 0;
        let mut groups = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let width = match kind {
                GroupKind::RootKinematics => 4,
                GroupKind::RootCoords => 3,
                GroupKind::Contacts => contacts,
                k => k.per_joint().unwrap() * joints,
            };
            groups.push(ChannelGroup {
                kind,
                offset,
                width,
            });
            offset += width;
        }
        let layout = PoseLayout { joints, groups };
        layout.validate()?;
        Ok(layout)
    }

    /// `(j^p)` only.
    pub fn positions_only(joints: usize) -> Self {
        Self::new(joints, &[GroupKind::JointPositions], 0).expect("valid layout")
    }

    /// Root kinematics, joint positions, velocities and rotations.
    pub fn kinematic(joints: usize) -> Self {
        Self::new(
            joints,
            &[
                GroupKind::RootKinematics,
                GroupKind::JointPositions,
                GroupKind::JointVelocities,
                GroupKind::JointRotations,
            ],
            0,
        )
        .expect("valid layout")
    }

    /// Root coordinates plus joint rotations.
    pub fn root_and_rotations(joints: usize) -> Self {
        Self::new(
            joints,
            &[GroupKind::RootCoords, GroupKind::JointRotations],
            0,
        )
        .expect("valid layout")
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(Error::validation("layout.joints", "must be positive"));
        }
        if self.groups.is_empty() {
            return Err(Error::validation("layout.groups", "layout has no groups"));
        }
        let mut expected = 0;
        for (i, g) in self.groups.iter().enumerate() {
            if g.offset != expected {
                return Err(Error::validation(
                    format!("layout.groups[{i}].offset"),
                    format!("expected {expected}, got {}", g.offset),
                ));
            }
            let want = match g.kind {
                GroupKind::RootKinematics => Some(4),
                GroupKind::RootCoords => Some(3),
                GroupKind::Contacts => None,
                k => k.per_joint().map(|c| c * self.joints),
            };
            if want.is_some_and(|w| w != g.width) || g.width == 0 {
                return Err(Error::validation(
                    format!("layout.groups[{i}].width"),
                    format!("width {} invalid for {:?}", g.width, g.kind),
                ));
            }
            if self.groups[..i].iter().any(|o| o.kind == g.kind) {
                return Err(Error::validation(
                    format!("layout.groups[{i}].kind"),
                    "duplicate group",
                ));
            }
            expected += g.width;
        }
        Ok(())
    }

    pub fn pose_dim(&self) -> usize {
        self.groups.iter().map(|g| g.width).sum()
    }

    pub fn group(&self, kind: GroupKind) -> Option<&ChannelGroup> {
        self.groups.iter().find(|g| g.kind == kind)
    }

    /// Channel mask covering every channel owned by `joints`. Root-level
    /// groups belong to joint 0; contact flags belong to no joint.
    pub fn joint_mask(&self, joints: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.pose_dim()];
        for g in &self.groups {
            match g.kind.per_joint() {
                Some(c) => {
                    for &j in joints {
                        mask[g.offset + j * c..g.offset + (j + 1) * c].fill(true);
                    }
                }
                None if g.kind != GroupKind::Contacts && joints.contains(&0) => {
                    mask[g.offset..g.offset + g.width].fill(true);
                }
                None => {}
            }
        }
        mask
    }

    /// Whether `mask` selects whole groups of whole joints.
    pub fn mask_is_aligned(&self, mask: &[bool]) -> bool {
        if mask.len() != self.pose_dim() {
            return false;
        }
        self.groups.iter().all(|g| {
            let block = &mask[g.offset..g.offset + g.width];
            match g.kind.per_joint() {
                Some(c) => block.chunks(c).all(|ch| ch.iter().all(|&m| m == ch[0])),
                None if g.kind == GroupKind::Contacts => true,
                None => block.iter().all(|&m| m == block[0]),
            }
        })
    }
}

/// Kinematic tree with rest-pose bone offsets (in the parent's frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    /// `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
    /// Joints driven by the upper-body prompt in part control.
    pub upper: Vec<usize>,
    /// Joints driven by the lower-body prompt in part control.
    pub lower: Vec<usize>,
}

impl Default for Skeleton {
    /// Eight joints: pelvis (root), chest, two two-joint arms and two feet.
    fn default() -> Self {
        let joint = |n: &str| n.to_string();
        Skeleton {
            names: vec![
                joint("pelvis"),
                joint("chest"),
                joint("left_elbow"),
                joint("left_hand"),
                joint("right_elbow"),
                joint("right_hand"),
                joint("left_foot"),
                joint("right_foot"),
            ],
            parents: vec![
                None,
                Some(0),
                Some(1),
                Some(2),
                Some(1),
                Some(4),
                Some(0),
                Some(0),
            ],
            offsets: vec![
                [0.0, 0.9, 0.0],
                [0.0, 0.45, 0.0],
                [0.2, 0.0, 0.0],
                [0.25, 0.0, 0.0],
                [-0.2, 0.0, 0.0],
                [-0.25, 0.0, 0.0],
                [0.12, -0.85, 0.0],
                [-0.12, -0.85, 0.0],
            ],
            upper: vec![1, 2, 3, 4, 5],
            lower: vec![0, 6, 7],
        }
    }
}

impl Skeleton {
    pub fn joints(&self) -> usize {
        self.names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j == 0 || self.parents.len() != j || self.offsets.len() != j {
            return Err(Error::validation(
                "skeleton",
                "names, parents and offsets must have equal non-zero length",
            ));
        }
        for (i, p) in self.parents.iter().enumerate() {
            match p {
                None if i != 0 => {
                    return Err(Error::validation(
                        "skeleton.parents",
                        "only joint 0 may be root",
                    ))
                }
                Some(_) if i == 0 => {
                    return Err(Error::validation(
                        "skeleton.parents",
                        "joint 0 must be the root",
                    ))
                }
                Some(q) if *q >= i => {
                    return Err(Error::validation(
                        "skeleton.parents",
                        "parents must precede their children",
                    ))
                }
                _ => {}
            }
        }
        let mut parts: Vec<usize> = self.upper.iter().chain(&self.lower).copied().collect();
        parts.sort_unstable();
        if parts != (0..j).collect::<Vec<_>>() {
            return Err(Error::validation(
                "skeleton.upper/lower",
                "body parts must partition the joints",
            ));
        }
        Ok(())
    }

    /// World-space rest positions, one `[x, y, z]` per joint.
    pub fn rest_positions(&self) -> Vec<[f64; 3]> {
        let mut out: Vec<[f64; 3]> = Vec::with_capacity(self.joints());
        for (j, off) in self.offsets.iter().enumerate() {
            let base = self.parents[j].map_or([0.0; 3], |p| out[p]);
            out.push([base[0] + off[0], base[1] + off[1], base[2] + off[2]]);
        }
        out
    }
}

/// Rotation matrix from the continuous 6D form `[a1 | a2]` by Gram–Schmidt:
/// the columns are `b1 = a1/‖a1‖`, `b2 ∝ a2 − (b1·a2)b1` and `b3 = b1 × b2`.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if n1 < 1e-8 {
        return Err(Error::argument("6D rotation has a zero first column"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < 1e-8 {
        return Err(Error::argument(
            "6D rotation columns are parallel or the second is zero",
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// First two columns of a rotation matrix.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> [f64; 6] {
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// `F × D` pose states with their layout and frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSeq {
    layout: PoseLayout,
    frames: Matrix,
    fps: f64,
}

impl MotionSeq {
    pub fn new(layout: PoseLayout, frames: Matrix, fps: f64) -> Result<Self> {
        layout.validate()?;
        if frames.nrows() == 0 {
            return Err(Error::argument("motion must have at least one frame"));
        }
        if frames.ncols() != layout.pose_dim() {
            return Err(Error::Integrity(format!(
                "motion width {} does not match layout dimension {}",
                frames.ncols(),
                layout.pose_dim()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::argument("fps must be positive"));
        }
        ensure_finite(frames.iter(), "motion frames")?;
        Ok(MotionSeq {
            layout,
            frames,
            fps,
        })
    }

    pub fn layout(&self) -> &PoseLayout {
        &self.layout
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<MotionSeq> {
        if len == 0 || start + len > self.len() {
            return Err(Error::argument(format!(
                "frame range {start}..{} outside 0..{}",
                start + len,
                self.len()
            )));
        }
        MotionSeq::new(
            self.layout.clone(),
            self.frames.slice(s![start..start + len, ..]).to_owned(),
            self.fps,
        )
    }

    /// `F × 3J` joint positions. Taken directly from a position group when
    /// present, otherwise recovered by forward kinematics over `skeleton`.
    pub fn joint_positions(&self, skeleton: &Skeleton) -> Result<Matrix> {
        if let Some(g) = self.layout.group(GroupKind::JointPositions) {
            return Ok(self
                .frames
                .slice(s![.., g.offset..g.offset + g.width])
                .to_owned());
        }
        let rot = self
            .layout
            .group(GroupKind::JointRotations)
            .ok_or_else(|| {
                Error::argument("layout carries neither joint positions nor joint rotations")
            })?;
        if skeleton.joints() != self.layout.joints {
            return Err(Error::argument(format!(
                "skeleton has {} joints, layout has {}",
                skeleton.joints(),
                self.layout.joints
            )));
        }
        let roots = self.root_trajectory(skeleton)?;
        let j = self.layout.joints;
        let mut out = Array2::zeros((self.len(), 3 * j));
        for (f, pose) in self.frames.rows().into_iter().enumerate() {
            let mut global: Vec<Matrix3<f64>> = Vec::with_capacity(j);
            let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(j);
            for joint in 0..j {
                let o = rot.offset + 6 * joint;
                let r6: [f64; 6] = std::array::from_fn(|i| pose[o + i]);
                let local = rot6d_to_matrix(&r6)?;
                match skeleton.parents[joint] {
                    None => {
                        global.push(local);
                        pos.push(roots[f]);
                    }
                    Some(p) => {
                        let off = Vector3::from(skeleton.offsets[joint]);
                        pos.push(pos[p] + global[p] * off);
                        global.push(global[p] * local);
                    }
                }
                for a in 0..3 {
                    out[[f, 3 * joint + a]] = pos[joint][a];
                }
            }
        }
        Ok(out)
    }

    fn root_trajectory(&self, skeleton: &Skeleton) -> Result<Vec<Vector3<f64>>> {
        if let Some(g) = self.layout.group(GroupKind::RootCoords) {
            return Ok(self
                .frames
                .rows()
                .into_iter()
                .map(|r| Vector3::new(r[g.offset], r[g.offset + 1], r[g.offset + 2]))
                .collect());
        }
        if let Some(g) = self.layout.group(GroupKind::RootKinematics) {
            // Integrate yaw rate and root-frame planar velocity.
            let mut yaw = 0.0f64;
            let mut x = 0.0;
            let mut z = 0.0;
            let mut out = Vec::with_capacity(self.len());
            for r in self.frames.rows() {
                let (va, vx, vz, h) = (
                    r[g.offset],
                    r[g.offset + 1],
                    r[g.offset + 2],
                    r[g.offset + 3],
                );
                out.push(Vector3::new(x, h, z));
                yaw += va;
                x += yaw.cos() * vx + yaw.sin() * vz;
                z += -yaw.sin() * vx + yaw.cos() * vz;
            }
            return Ok(out);
        }
        let rest = skeleton.rest_positions()[0];
        Ok(vec![Vector3::from(rest); self.len()])
    }
}
