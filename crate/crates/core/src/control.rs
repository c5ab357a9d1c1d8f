//! Compositional sampling: different prompts for different channel groups
//! (body parts) or for different frame intervals of one sequence.
//!
//! Both controllers evaluate one noise prediction per prompt from the same
//! state, merge them, and optionally add a smoothing correction `λ·C` built
//! from the pairwise distance energy `E = Σ_{i<j} ‖ε_i − ε_j‖`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_loop, EpsModel, EpsQuery, InputView, NoiseMode, Schedule};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::text::TokenSeq;

/// Floor on pairwise distances in the correction.
pub const DISTANCE_FLOOR: f64 = 1e-8;

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Variable the energy is differentiated against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// The noise predictions themselves, in closed form.
    #[default]
    NoiseSpace,
    /// The network input `x_t`, by backpropagation through the denoiser.
    NetworkInput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Correction {
    pub mode: CorrectionMode,
    /// Add `λ·C` instead of subtracting it.
    pub add: bool,
}

impl Correction {
    fn apply(&self, base: &mut Matrix, lambda: f64, c: &Matrix) {
        let k = if self.add { lambda } else { -lambda };
        base.zip_mut_with(c, |b, &cv| *b += k * cv);
    }
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPart {
    pub tokens: TokenSeq,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub parts: Vec<BodyPart>,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default)]
    pub correction: Correction,
}

impl PartSpec {
    pub fn new(parts: Vec<BodyPart>) -> Self {
        PartSpec {
            parts,
            lambda1: DEFAULT_LAMBDA,
            correction: Correction::default(),
        }
    }

    /// Checks that the masks partition `width` channels exactly.
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::argument("part spec needs at least one part"));
        }
        if !self.lambda1.is_finite() {
            return Err(Error::argument("lambda1 must be finite"));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.mask.len() != width {
                return Err(Error::argument(format!(
                    "mask {i} has {} channels, motion has {width}",
                    p.mask.len()
                )));
            }
        }
        for c in 0..width {
            match self.parts.iter().filter(|p| p.mask[c]).count() {
                1 => {}
                0 => {
                    return Err(Error::argument(format!(
                        "channel {c} is not covered by any part"
                    )))
                }
                n => {
                    return Err(Error::argument(format!(
                        "channel {c} is claimed by {n} parts"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Frames `start..=end`, 1-indexed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub tokens: TokenSeq,
    pub start: usize,
    pub end: usize,
}

impl Interval {
    fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    fn rows(&self) -> std::ops::Range<usize> {
        self.start - 1..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineSpec {
    pub intervals: Vec<Interval>,
    pub total_length: usize,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default)]
    pub correction: Correction,
}

impl TimelineSpec {
    pub fn new(intervals: Vec<Interval>, total_length: usize) -> Self {
        TimelineSpec {
            intervals,
            total_length,
            lambda2: DEFAULT_LAMBDA,
            correction: Correction::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::argument("timeline needs at least one interval"));
        }
        if !self.lambda2.is_finite() {
            return Err(Error::argument("lambda2 must be finite"));
        }
        for (i, iv) in self.intervals.iter().enumerate() {
            if iv.start == 0 || iv.start > iv.end || iv.end > self.total_length {
                return Err(Error::argument(format!(
                    "interval {i} [{}, {}] is not within [1, {}]",
                    iv.start, iv.end, self.total_length
                )));
            }
        }
        if let Some(f) = self.coverage().iter().position(|&c| c == 0) {
            return Err(Error::argument(format!("frame {} is not covered", f + 1)));
        }
        Ok(())
    }

    /// Number of intervals covering each frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut count = vec![0; self.total_length];
        for iv in &self.intervals {
            for c in &mut count[iv.start.saturating_sub(1)..iv.end.min(self.total_length)] {
                *c += 1;
            }
        }
        count
    }

    /// `(i, j, overlap rows)` for every pair of intervals that share frames.
    fn overlaps(&self) -> Vec<(usize, usize, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        for (i, a) in self.intervals.iter().enumerate() {
            for (j, b) in self.intervals.iter().enumerate().skip(i + 1) {
                let lo = a.start.max(b.start);
                let hi = a.end.min(b.end);
                if lo <= hi {
                    out.push((i, j, lo - 1..hi));
                }
            }
        }
        out
    }
}

fn check_shapes(eps: &[Matrix]) -> Result<()> {
    let Some(first) = eps.first() else {
        return Err(Error::argument("no noise terms"));
    };
    if eps.iter().any(|e| e.dim() != first.dim()) {
        return Err(Error::argument("noise terms differ in shape"));
    }
    Ok(())
}

fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `g_k = Σ_{j≠k} (ε_k − ε_j) / max(‖ε_k − ε_j‖, δ)` for every `k`.
fn pairwise_directions(eps: &[Matrix]) -> Vec<Matrix> {
    let mut g: Vec<Matrix> = eps.iter().map(|e| Matrix::zeros(e.raw_dim())).collect();
    for i in 0..eps.len() {
        for j in i + 1..eps.len() {
            let d = &eps[i] - &eps[j];
            let n = frobenius(&d).max(DISTANCE_FLOOR);
            let unit = d / n;
            g[i] += &unit;
            g[j] -= &unit;
        }
    }
    g
}

/// Noise-space correction `C = Σ_k M_k ⊙ g_k`.
pub fn part_correction(eps_parts: &[Matrix], spec: &PartSpec) -> Result<Matrix> {
    check_shapes(eps_parts)?;
    let width = eps_parts[0].ncols();
    spec.validate(width)?;
    if eps_parts.len() != spec.parts.len() {
        return Err(Error::argument("one noise term per part required"));
    }
    let g = pairwise_directions(eps_parts);
    Ok(select_by_mask(&g, spec))
}

fn select_by_mask(terms: &[Matrix], spec: &PartSpec) -> Matrix {
    let mut out = terms[0].clone();
    for (term, part) in terms.iter().zip(&spec.parts).skip(1) {
        for (c, &on) in part.mask.iter().enumerate() {
            if on {
                out.column_mut(c).assign(&term.column(c));
            }
        }
    }
    // Channels of part 0 are already in place.
    out
}

/// Channel-wise merge of per-part predictions with the noise-space
/// correction.
pub fn combine_part_noise(eps_parts: &[Matrix], spec: &PartSpec) -> Result<Matrix> {
    combine_parts(eps_parts, spec, None)
}

fn combine_parts(
    eps_parts: &[Matrix],
    spec: &PartSpec,
    input_grad: Option<&Matrix>,
) -> Result<Matrix> {
    check_shapes(eps_parts)?;
    spec.validate(eps_parts[0].ncols())?;
    if eps_parts.len() != spec.parts.len() {
        return Err(Error::argument("one noise term per part required"));
    }
    let mut out = select_by_mask(eps_parts, spec);
    if eps_parts.len() > 1 && spec.lambda1 != 0.0 {
        let c = match input_grad {
            Some(c) => c.clone(),
            None => select_by_mask(&pairwise_directions(eps_parts), spec),
        };
        spec.correction.apply(&mut out, spec.lambda1, &c);
    }
    Ok(out)
}

/// Noise-space correction for a timeline: pair differences over each pair's
/// shared frames, summed over all terms. Every pair contributes equal and
/// opposite directions to its two terms, so the sum vanishes up to rounding.
pub fn time_correction(eps_padded: &[Matrix], spec: &TimelineSpec) -> Result<Matrix> {
    check_time_terms(eps_padded, spec)?;
    let mut g: Vec<Matrix> = eps_padded
        .iter()
        .map(|e| Matrix::zeros(e.raw_dim()))
        .collect();
    for (i, j, rows) in spec.overlaps() {
        let a = eps_padded[i].slice(ndarray::s![rows.clone(), ..]);
        let b = eps_padded[j].slice(ndarray::s![rows.clone(), ..]);
        let d = &a - &b;
        let unit = &d / frobenius(&d).max(DISTANCE_FLOOR);
        let mut gi = g[i].slice_mut(ndarray::s![rows.clone(), ..]);
        gi += &unit;
        let mut gj = g[j].slice_mut(ndarray::s![rows, ..]);
        gj -= &unit;
    }
    let mut c = Matrix::zeros(eps_padded[0].raw_dim());
    for gk in &g {
        c += gk;
    }
    Ok(c)
}

fn check_time_terms(eps_padded: &[Matrix], spec: &TimelineSpec) -> Result<()> {
    check_shapes(eps_padded)?;
    spec.validate()?;
    if eps_padded.len() != spec.intervals.len() {
        return Err(Error::argument("one noise term per interval required"));
    }
    if eps_padded[0].nrows() != spec.total_length {
        return Err(Error::argument(format!(
            "noise terms have {} frames, timeline has {}",
            eps_padded[0].nrows(),
            spec.total_length
        )));
    }
    for (i, (e, iv)) in eps_padded.iter().zip(&spec.intervals).enumerate() {
        let outside = e
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(f, _)| !iv.rows().contains(f))
            .any(|(_, r)| r.iter().any(|&v| v != 0.0));
        if outside {
            return Err(Error::argument(format!(
                "noise term {i} is non-zero outside its interval"
            )));
        }
    }
    Ok(())
}

/// Per-frame average of the zero-padded interval predictions over the
/// intervals covering each frame, plus the correction.
pub fn combine_time_noise(eps_padded: &[Matrix], spec: &TimelineSpec) -> Result<Matrix> {
    check_time_terms(eps_padded, spec)?;
    let local: Vec<Matrix> = eps_padded
        .iter()
        .zip(&spec.intervals)
        .map(|(e, iv)| e.slice(ndarray::s![iv.rows(), ..]).to_owned())
        .collect();
    let mut out = average_intervals(&local, spec, eps_padded[0].ncols());
    if spec.intervals.len() > 1 && spec.lambda2 != 0.0 {
        let c = time_correction(eps_padded, spec)?;
        spec.correction.apply(&mut out, spec.lambda2, &c);
    }
    Ok(out)
}

/// Averages unpadded interval predictions frame by frame. Only covering
/// terms enter each sum, so a frame with one owner is copied bit for bit.
fn average_intervals(local: &[Matrix], spec: &TimelineSpec, width: usize) -> Matrix {
    let mut out = Matrix::zeros((spec.total_length, width));
    let mut count = vec![0usize; spec.total_length];
    for (e, iv) in local.iter().zip(&spec.intervals) {
        for (k, f) in iv.rows().enumerate() {
            let src = e.row(k);
            let mut dst = out.row_mut(f);
            if count[f] == 0 {
                dst.assign(&src);
            } else {
                dst += &src;
            }
            count[f] += 1;
        }
    }
    for (f, &n) in count.iter().enumerate() {
        if n > 1 {
            out.row_mut(f).mapv_inplace(|v| v / n as f64);
        }
    }
    out
}

fn energy_term(tape: &mut Tape, a: Var, b: Var, acc: Option<Var>) -> Var {
    let d = tape.sub(a, b);
    let n = tape.norm(d, DISTANCE_FLOOR);
    match acc {
        Some(acc) => tape.add(acc, n),
        None => n,
    }
}

/// Samples with one prompt per body part. Returns one `frames × width`
/// state per seed, in the model's (normalized) space.
pub fn sample_parts<M: EpsModel + ?Sized>(
    model: &M,
    spec: &PartSpec,
    frames: usize,
    width: usize,
    sched: &Schedule,
    seeds: &[u64],
    mode: NoiseMode,
) -> Result<Vec<Matrix>> {
    spec.validate(width)?;
    let m = spec.parts.len();
    let network =
        spec.correction.mode == CorrectionMode::NetworkInput && m > 1 && spec.lambda1 != 0.0;
    reverse_loop(
        &vec![frames; seeds.len()],
        seeds,
        width,
        sched,
        mode,
        |t, states| {
            let queries: Vec<EpsQuery<'_>> = states
                .iter()
                .flat_map(|x| {
                    spec.parts.iter().map(move |p| EpsQuery {
                        x,
                        t,
                        tokens: &p.tokens,
                    })
                })
                .collect();
            let preds = model.predict(&queries)?;
            states
                .iter()
                .zip(preds.chunks(m))
                .map(|(x, eps)| {
                    if !network {
                        return combine_parts(eps, spec, None);
                    }
                    let views: Vec<InputView<'_>> = spec
                        .parts
                        .iter()
                        .map(|p| InputView {
                            start: 0,
                            len: frames,
                            tokens: &p.tokens,
                        })
                        .collect();
                    let grad = model.input_gradient(x, t, &views, &|tape, v| {
                        let mut acc = None;
                        for i in 0..v.len() {
                            for j in i + 1..v.len() {
                                acc = Some(energy_term(tape, v[i], v[j], acc));
                            }
                        }
                        acc.expect("at least two parts")
                    })?;
                    combine_parts(eps, spec, Some(&grad))
                })
                .collect()
        },
    )
}

/// Samples one sequence of `spec.total_length` frames where each interval
/// follows its own prompt. Each interval is denoised on its own slice of
/// the state with frame positions counted from the interval start.
pub fn sample_timeline<M: EpsModel + ?Sized>(
    model: &M,
    spec: &TimelineSpec,
    width: usize,
    sched: &Schedule,
    seeds: &[u64],
    mode: NoiseMode,
) -> Result<Vec<Matrix>> {
    spec.validate()?;
    let m = spec.intervals.len();
    let overlaps = spec.overlaps();
    let network = spec.correction.mode == CorrectionMode::NetworkInput
        && !overlaps.is_empty()
        && spec.lambda2 != 0.0;
    let shared: Vec<bool> = spec.coverage().iter().map(|&c| c > 1).collect();
    let frames = vec![spec.total_length; seeds.len()];
    reverse_loop(&frames, seeds, width, sched, mode, |t, states| {
        let slices: Vec<Matrix> = states
            .iter()
            .flat_map(|x| {
                spec.intervals
                    .iter()
                    .map(move |iv| x.slice(ndarray::s![iv.rows(), ..]).to_owned())
            })
            .collect();
        let queries: Vec<EpsQuery<'_>> = slices
            .iter()
            .zip(spec.intervals.iter().cycle())
            .map(|(x, iv)| EpsQuery {
                x,
                t,
                tokens: &iv.tokens,
            })
            .collect();
        let preds = model.predict(&queries)?;
        states
            .iter()
            .zip(preds.chunks(m))
            .map(|(x, eps)| {
                let mut out = average_intervals(eps, spec, width);
                if m == 1 || spec.lambda2 == 0.0 {
                    return Ok(out);
                }
                let c = if network {
                    let views: Vec<InputView<'_>> = spec
                        .intervals
                        .iter()
                        .map(|iv| InputView {
                            start: iv.start - 1,
                            len: iv.len(),
                            tokens: &iv.tokens,
                        })
                        .collect();
                    let mut g = model.input_gradient(x, t, &views, &|tape, v| {
                        let mut acc = None;
                        for (i, j, rows) in &overlaps {
                            let (a, b) = (&spec.intervals[*i], &spec.intervals[*j]);
                            let n = rows.len();
                            let va = tape.slice_rows(v[*i], rows.start + 1 - a.start, n);
                            let vb = tape.slice_rows(v[*j], rows.start + 1 - b.start, n);
                            acc = Some(energy_term(tape, va, vb, acc));
                        }
                        acc.expect("at least one overlap")
                    })?;
                    for (f, &s) in shared.iter().enumerate() {
                        if !s {
                            g.row_mut(f).fill(0.0);
                        }
                    }
                    g
                } else {
                    let padded: Vec<Matrix> = eps
                        .iter()
                        .zip(&spec.intervals)
                        .map(|(e, iv)| {
                            let mut p = Matrix::zeros((spec.total_length, width));
                            p.slice_mut(ndarray::s![iv.rows(), ..]).assign(e);
                            p
                        })
                        .collect();
                    time_correction(&padded, spec)?
                };
                spec.correction.apply(&mut out, spec.lambda2, &c);
                Ok(out)
            })
            .collect()
    })
}
