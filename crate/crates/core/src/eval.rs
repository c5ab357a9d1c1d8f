//! Sample-quality metrics over joint positions and a template-matching
//! oracle classifier for the synthetic corpus.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{render_template, CorpusSpec, MotionSeq, Skeleton};
use crate::numerics::Matrix;

/// Minimum frames for spectral features.
pub const MIN_FEATURE_FRAMES: usize = 8;

/// Frequencies (Hz) of the feature spectrum.
pub fn feature_grid() -> Vec<f64> {
    (1..=10).map(|k| 0.5 * k as f64).collect()
}

/// Frequencies (Hz) of the oracle signature.
pub fn oracle_grid() -> Vec<f64> {
    (2..=24).map(|k| 0.25 * k as f64).collect()
}

/// Covariance shrinkage added to both Gaussians in [`fid`].
pub const FID_SHRINKAGE: f64 = 1e-6;

pub const DEFAULT_PER_PROMPT: usize = 32;

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Single-sided amplitude of `x` at each frequency in `grid` under window `w`.
fn amplitude_spectrum(x: &[f64], w: &[f64], fps: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 2.0 / w.iter().sum::<f64>();
    grid.iter()
        .map(|&f| {
            let step = TAU * f / fps;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, (v, wn)) in x.iter().zip(w).enumerate() {
                let a = step * n as f64;
                re += v * wn * a.cos();
                im -= v * wn * a.sin();
            }
            norm * re.hypot(im)
        })
        .collect()
}

fn demean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Removes the least-squares line.
fn detrend(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - tm;
        num += dt * (v - xm);
        den += dt * dt;
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    x.iter()
        .enumerate()
        .map(|(i, v)| v - xm - slope * (i as f64 - tm))
        .collect()
}

fn positions(m: &MotionSeq, skeleton: &Skeleton) -> Result<Matrix> {
    if m.layout().joints != skeleton.joints() {
        return Err(Error::argument(format!(
            "motion has {} joints, skeleton has {}",
            m.layout().joints,
            skeleton.joints()
        )));
    }
    m.joint_positions(skeleton)
}

/// Fixed-length features: Hann-windowed amplitude per joint (axes combined
/// in quadrature) on [`feature_grid`], then per-channel mean and standard
/// deviation of joint positions. The window spans the whole sequence after
/// mean removal.
pub fn extract_features(m: &MotionSeq, skeleton: &Skeleton) -> Result<Vec<f64>> {
    let p = positions(m, skeleton)?;
    let f = p.nrows();
    if f < MIN_FEATURE_FRAMES {
        return Err(Error::argument(format!(
            "features need at least {MIN_FEATURE_FRAMES} frames, got {f}"
        )));
    }
    let grid = feature_grid();
    let w = hann(f);
    let joints = p.ncols() / 3;
    let mut out = Vec::with_capacity(joints * grid.len() + 2 * p.ncols());
    for j in 0..joints {
        let mut power = vec![0.0; grid.len()];
        for a in 0..3 {
            let col: Vec<f64> = p.column(3 * j + a).to_vec();
            let amp = amplitude_spectrum(&demean(&col), &w, m.fps(), &grid);
            for (pw, v) in power.iter_mut().zip(amp) {
                *pw += v * v;
            }
        }
        out.extend(power.into_iter().map(f64::sqrt));
    }
    for c in 0..p.ncols() {
        out.push(p.column(c).mean().unwrap_or(0.0));
    }
    for c in 0..p.ncols() {
        out.push(p.column(c).std(0.0));
    }
    Ok(out)
}

fn gaussian(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let Some(first) = feats.first() else {
        return Err(Error::argument("feature set is empty"));
    };
    let dim = first.len();
    if feats.iter().any(|v| v.len() != dim) {
        return Err(Error::argument("feature vectors differ in length"));
    }
    let n = feats.len() as f64;
    let data = DMatrix::from_fn(feats.len(), dim, |r, c| feats[r][c]);
    let mean = DVector::from_fn(dim, |c, _| data.column(c).sum() / n);
    let mut centered = data;
    for c in 0..dim {
        let m = mean[c];
        centered.column_mut(c).add_scalar_mut(-m);
    }
    let mut cov = centered.transpose() * &centered / n;
    for i in 0..dim {
        cov[(i, i)] += FID_SHRINKAGE;
    }
    Ok((mean, cov))
}

fn symmetric(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetric(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits (population covariance plus
/// [`FID_SHRINKAGE`]·I) of two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian(a)?;
    let (mb, cb) = gaussian(b)?;
    if ma.len() != mb.len() {
        return Err(Error::argument("feature sets differ in dimension"));
    }
    let sa = sqrt_psd(ca.clone());
    let inner = SymmetricEigen::new(symmetric(&sa * &cb * &sa));
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Mean of [`fid`] over paired groups, typically one group per class.
pub fn conditional_fid(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::argument(format!(
            "conditional FID needs matching non-empty group lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (ga, gb) in a.iter().zip(b) {
        total += fid(ga, gb)?;
    }
    Ok(total / a.len() as f64)
}

/// Mean over frames of the mean per-joint Euclidean distance, after
/// trimming both to the shorter length.
pub fn joint_distance(a: &Matrix, b: &Matrix) -> f64 {
    let f = a.nrows().min(b.nrows());
    let joints = a.ncols() / 3;
    let mut total = 0.0;
    for r in 0..f {
        let mut frame = 0.0;
        for j in 0..joints {
            let mut s = 0.0;
            for k in 0..3 {
                let d = a[[r, 3 * j + k]] - b[[r, 3 * j + k]];
                s += d * d;
            }
            frame += s.sqrt();
        }
        total += frame / joints as f64;
    }
    total / f as f64
}

/// Mean joint distance over disjoint random pairs. At most
/// `min(n_pairs, ⌊n/2⌋)` pairs are drawn.
pub fn diversity<R: Rng + ?Sized>(
    motions: &[MotionSeq],
    skeleton: &Skeleton,
    n_pairs: usize,
    rng: &mut R,
) -> Result<f64> {
    if motions.len() < 2 {
        return Err(Error::argument("diversity needs at least two motions"));
    }
    if n_pairs == 0 {
        return Err(Error::argument("diversity needs at least one pair"));
    }
    let pos = motions
        .iter()
        .map(|m| positions(m, skeleton))
        .collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..pos.len()).collect();
    idx.shuffle(rng);
    let pairs = n_pairs.min(idx.len() / 2);
    let sum: f64 = (0..pairs)
        .map(|k| joint_distance(&pos[idx[2 * k]], &pos[idx[2 * k + 1]]))
        .sum();
    Ok(sum / pairs as f64)
}

/// Mean over groups of the mean joint distance over all pairs in a group.
pub fn multimodality_of_groups(groups: &[Vec<MotionSeq>], skeleton: &Skeleton) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::argument("multimodality needs at least one group"));
    }
    let mut total = 0.0;
    for g in groups {
        if g.len() < 2 {
            return Err(Error::argument(
                "each prompt group needs at least two motions",
            ));
        }
        let pos = g
            .iter()
            .map(|m| positions(m, skeleton))
            .collect::<Result<Vec<_>>>()?;
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                s += joint_distance(&pos[i], &pos[j]);
                n += 1;
            }
        }
        total += s / n as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Draws `per_prompt` motions per prompt from `sampler(prompt, seed)` with
/// distinct seeds from `rng` and averages within-prompt pair distances.
pub fn multimodality<R, S>(
    mut sampler: S,
    prompts: &[String],
    per_prompt: usize,
    skeleton: &Skeleton,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    S: FnMut(&str, u64) -> Result<MotionSeq>,
{
    if per_prompt < 2 {
        return Err(Error::argument("per_prompt must be at least 2"));
    }
    let mut groups = Vec::with_capacity(prompts.len());
    let mut used = std::collections::HashSet::new();
    for p in prompts {
        let mut g = Vec::with_capacity(per_prompt);
        while g.len() < per_prompt {
            let seed: u64 = rng.random();
            if used.insert(seed) {
                g.push(sampler(p, seed)?);
            }
        }
        groups.push(g);
    }
    multimodality_of_groups(&groups, skeleton)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub class_id: usize,
    /// Second-best distance minus best distance.
    pub margin: f64,
    /// Classes ordered from nearest to farthest.
    pub ranking: Vec<usize>,
    pub distances: Vec<f64>,
}

/// Spectral signature of selected joints: for each joint and axis, the
/// Hann-windowed amplitude of the linearly detrended trajectory on
/// [`oracle_grid`].
fn signature(pos: &Matrix, fps: f64, joints: &[usize]) -> Vec<f64> {
    let grid = oracle_grid();
    let w = hann(pos.nrows());
    let mut out = Vec::with_capacity(joints.len() * 3 * grid.len());
    for &j in joints {
        for a in 0..3 {
            let col: Vec<f64> = pos.column(3 * j + a).to_vec();
            out.extend(amplitude_spectrum(&detrend(&col), &w, fps, &grid));
        }
    }
    out
}

/// Nearest template by signature distance, comparing against noise-free
/// renders of every class at the motion's own length and frame rate.
/// `joints` restricts the comparison; `None` uses every joint.
pub fn oracle_classify(
    m: &MotionSeq,
    spec: &CorpusSpec,
    joints: Option<&[usize]>,
) -> Result<OracleVerdict> {
    let sk = &spec.skeleton;
    let pos = positions(m, sk)?;
    let all: Vec<usize> = (0..sk.joints()).collect();
    let joints = joints.unwrap_or(&all);
    if joints.is_empty() || joints.iter().any(|&j| j >= sk.joints()) {
        return Err(Error::argument("joint selection is empty or out of range"));
    }
    let sig = signature(&pos, m.fps(), joints);
    let distances: Vec<f64> = spec
        .templates
        .iter()
        .map(|t| {
            let tsig = signature(&render_template(t, sk, m.len(), m.fps()), m.fps(), joints);
            sig.iter()
                .zip(&tsig)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut ranking: Vec<usize> = (0..distances.len()).collect();
    ranking.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let margin = match ranking.get(1) {
        Some(&second) => distances[second] - distances[ranking[0]],
        None => 0.0,
    };
    Ok(OracleVerdict {
        class_id: ranking[0],
        margin,
        ranking,
        distances,
    })
}

/// Fraction of `(prompt, motion)` pairs whose prompt class is among the
/// oracle's `k` nearest classes. All other classes act as distractors.
pub fn r_precision(generated: &[(String, MotionSeq)], spec: &CorpusSpec, k: usize) -> Result<f64> {
    if k == 0 || k >= spec.templates.len() {
        return Err(Error::argument(format!(
            "k must be in 1..{}",
            spec.templates.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::argument("no motions to score"));
    }
    let mut hits = 0usize;
    for (prompt, m) in generated {
        let class = spec
            .class_of_prompt(prompt)
            .ok_or_else(|| Error::argument(format!("prompt `{prompt}` is not a corpus class")))?;
        let v = oracle_classify(m, spec, None)?;
        if v.ranking[..k].contains(&class) {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Mean and 95% normal interval of repeated metric runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub runs: Vec<f64>,
}

impl RunSummary {
    /// `mean ± 1.96·s/√n` with the sample standard deviation `s`.
    pub fn from_runs(runs: Vec<f64>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::argument("no runs to summarize"));
        }
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let half = if runs.len() > 1 {
            let var = runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(RunSummary {
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
            runs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_corpus, PoseLayout};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_joint(rows: &[[f64; 3]]) -> MotionSeq {
        let frames = Array2::from_shape_fn((rows.len(), 3), |(r, c)| rows[r][c]);
        MotionSeq::new(PoseLayout::positions_only(1), frames, 20.0).unwrap()
    }

    fn one_joint_skeleton() -> Skeleton {
        Skeleton {
            names: vec!["root".into()],
            parents: vec![None],
            offsets: vec![[0.0; 3]],
            upper: vec![0],
            lower: vec![],
        }
    }

    #[test]
    fn fid_closed_form_one_dimensional() {
        let a = vec![vec![0.0], vec![2.0]];
        let b = vec![vec![1.0], vec![3.0]];
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..12).map(|_| rng.random::<f64>()).collect())
            .collect();
        assert!(fid(&a, &a).unwrap() <= 1e-8);
        assert!(fid(&a, &[]).is_err());
    }

    #[test]
    fn fid_grows_with_mean_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
            .collect();
        let shift = |c: f64| -> Vec<Vec<f64>> {
            a.iter()
                .map(|v| v.iter().map(|x| x + c).collect())
                .collect()
        };
        let mut last = 0.0;
        for c in [0.1, 0.5, 1.0, 3.0] {
            let d = fid(&a, &shift(c)).unwrap();
            assert!(d > last);
            last = d;
        }
        // Equal covariance, so only the mean term remains.
        assert!((fid(&a, &shift(1.0)).unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn conditional_fid_averages_groups() {
        let a = vec![vec![vec![0.0], vec![2.0]], vec![vec![5.0], vec![7.0]]];
        let b = vec![vec![vec![1.0], vec![3.0]], vec![vec![5.0], vec![7.0]]];
        assert!((conditional_fid(&a, &b).unwrap() - 0.5).abs() < 1e-9);
        assert!(conditional_fid(&a, &b[..1]).is_err());
        assert!(conditional_fid(&[], &[]).is_err());
    }

    #[test]
    fn diversity_hand_case() {
        let a = single_joint(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = single_joint(&[[0.0; 3], [0.0; 3]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = diversity(&[a, b], &one_joint_skeleton(), 1, &mut rng).unwrap();
        assert_eq!(d, 0.5);
    }

    #[test]
    fn diversity_edge_cases() {
        let a = single_joint(&[[0.3, 0.1, 0.0]; 4]);
        let sk = one_joint_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            diversity(&vec![a.clone(); 6], &sk, 3, &mut rng).unwrap(),
            0.0
        );
        assert!(diversity(&[a], &sk, 1, &mut rng).is_err());
    }

    #[test]
    fn diversity_is_seeded() {
        let ms: Vec<MotionSeq> = (0..10)
            .map(|i| single_joint(&[[i as f64, 0.0, 0.0], [0.0, i as f64 * 0.5, 0.0]]))
            .collect();
        let sk = one_joint_skeleton();
        let a = diversity(&ms, &sk, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = diversity(&ms, &sk, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multimodality_of_seed_blind_sampler_is_zero() {
        let m = single_joint(&[[1.0, 2.0, 3.0]; 3]);
        let sk = one_joint_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = multimodality(|_, _| Ok(m.clone()), &["a".into()], 4, &sk, &mut rng).unwrap();
        assert_eq!(v, 0.0);
        assert!(multimodality(|_, _| Ok(m.clone()), &["a".into()], 1, &sk, &mut rng).is_err());
    }

    #[test]
    fn multimodality_two_motion_expectation() {
        // Two motions at joint distance d = 2, chosen by seed parity.
        let a = single_joint(&[[0.0; 3]; 2]);
        let b = single_joint(&[[2.0, 0.0, 0.0]; 2]);
        let sk = one_joint_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prompts: Vec<String> = (0..16).map(|i| format!("p{i}")).collect();
        let v = multimodality(
            |_, seed| Ok(if seed % 2 == 0 { a.clone() } else { b.clone() }),
            &prompts,
            DEFAULT_PER_PROMPT,
            &sk,
            &mut rng,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn features_find_two_hertz() {
        let frames = Array2::from_shape_fn((64, 3), |(f, c)| {
            if c == 0 {
                (TAU * 2.0 * f as f64 / 20.0).sin()
            } else {
                0.0
            }
        });
        let m = MotionSeq::new(PoseLayout::positions_only(1), frames, 20.0).unwrap();
        let feats = extract_features(&m, &one_joint_skeleton()).unwrap();
        let grid = feature_grid();
        let peak = (0..grid.len())
            .max_by(|&a, &b| feats[a].total_cmp(&feats[b]))
            .unwrap();
        assert_eq!(grid[peak], 2.0);
        assert!((feats[peak] - 1.0).abs() < 0.05);
    }

    #[test]
    fn features_of_rest_pose() {
        let sk = Skeleton::default();
        let rest = sk.rest_positions();
        let frames = Array2::from_shape_fn((16, 24), |(_, c)| rest[c / 3][c % 3]);
        let m = MotionSeq::new(PoseLayout::positions_only(8), frames, 20.0).unwrap();
        let feats = extract_features(&m, &sk).unwrap();
        let nf = 8 * feature_grid().len();
        assert!(feats[..nf].iter().all(|v| v.abs() < 1e-12));
        for c in 0..24 {
            assert!((feats[nf + c] - rest[c / 3][c % 3]).abs() < 1e-12);
            assert!(feats[nf + 24 + c].abs() < 1e-12);
        }
        assert_eq!(extract_features(&m, &sk).unwrap(), feats);
        let short = m.slice_frames(0, 7).unwrap();
        assert!(matches!(
            extract_features(&short, &sk),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn oracle_recovers_noise_free_templates() {
        let spec = CorpusSpec {
            jitter: 0.0,
            samples_per_class: 4,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        for s in &corpus.samples {
            let v = oracle_classify(&s.motion, &spec, None).unwrap();
            assert_eq!(v.class_id, s.class_id);
            assert!(v.margin > 0.0);
            assert!(v.distances[s.class_id] < 1e-9);
        }
    }

    #[test]
    fn oracle_is_perfect_on_default_corpus() {
        let spec = CorpusSpec {
            samples_per_class: 8,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let pairs: Vec<(String, MotionSeq)> = corpus
            .samples
            .iter()
            .map(|s| (s.prompt.clone(), s.motion.clone()))
            .collect();
        assert_eq!(r_precision(&pairs, &spec, 1).unwrap(), 1.0);
        for s in &corpus.samples {
            for joints in [&spec.skeleton.upper, &spec.skeleton.lower] {
                let v = oracle_classify(&s.motion, &spec, Some(joints)).unwrap();
                assert_eq!(v.class_id, s.class_id);
            }
        }
    }

    #[test]
    fn r_precision_under_wrong_labels() {
        let spec = CorpusSpec {
            samples_per_class: 2,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let n = spec.templates.len();
        let shifted: Vec<(String, MotionSeq)> = corpus
            .samples
            .iter()
            .map(|s| {
                (
                    spec.templates[(s.class_id + 1) % n].prompt.clone(),
                    s.motion.clone(),
                )
            })
            .collect();
        assert_eq!(r_precision(&shifted, &spec, 1).unwrap(), 0.0);
        let unknown = vec![("a dog barks".to_string(), corpus.samples[0].motion.clone())];
        assert!(r_precision(&unknown, &spec, 1).is_err());
        assert!(r_precision(&shifted, &spec, n).is_err());
    }

    #[test]
    fn r_precision_at_chance_for_random_labels() {
        let spec = CorpusSpec {
            samples_per_class: 2,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let n = spec.templates.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(String, MotionSeq)> = (0..1024)
            .map(|i| {
                let s = &corpus.samples[i % corpus.samples.len()];
                (
                    spec.templates[rng.random_range(0..n)].prompt.clone(),
                    s.motion.clone(),
                )
            })
            .collect();
        let r = r_precision(&pairs, &spec, 1).unwrap();
        // Binomial sd at p = 1/8, n = 1024 is about 0.0103.
        assert!((r - 0.125).abs() < 0.04, "{r}");
    }

    #[test]
    fn oracle_checks_layout() {
        let m = single_joint(&[[0.0; 3]; 10]);
        assert!(matches!(
            oracle_classify(&m, &CorpusSpec::default(), None),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn noise_has_small_margin() {
        let spec = CorpusSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = Array2::from_shape_simple_fn((48, 24), || 0.01 * rng.random::<f64>());
        let m = MotionSeq::new(PoseLayout::positions_only(8), frames, 20.0).unwrap();
        let v = oracle_classify(&m, &spec, None).unwrap();
        let mut d = v.distances.clone();
        d.sort_by(f64::total_cmp);
        let gap = d[d.len() - 1] - d[0];
        assert!(v.margin >= 0.0 && v.margin < 0.5 * gap);
    }

    #[test]
    fn summary_interval() {
        let s = RunSummary::from_runs(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        let half = 1.96 * (5.0f64 / 3.0).sqrt() / 2.0;
        assert!((s.ci_high - 2.5 - half).abs() < 1e-12);
        assert!((2.5 - s.ci_low - half).abs() < 1e-12);
        assert!(RunSummary::from_runs(vec![]).is_err());
    }
}
