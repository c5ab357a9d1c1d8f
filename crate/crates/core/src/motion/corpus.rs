use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MotionSeq, PoseLayout, Skeleton};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sinusoidal displacement of one joint around its rest position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointOscillation {
    pub amplitude: [f64; 3],
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub class_id: usize,
    pub prompt: String,
    pub frequency_hz: f64,
    pub joints: Vec<JointOscillation>,
    #[serde(default)]
    pub root_velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub skeleton: Skeleton,
    pub templates: Vec<ClassTemplate>,
    pub samples_per_class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    /// Jitter standard deviation in standardized channel units.
    pub jitter: f64,
    pub seed: u64,
}

const CLASSES: [(&str, f64); 8] = [
    ("a person waves", 1.0),
    ("a person walks", 1.5),
    ("a person kicks", 2.0),
    ("a person squats", 2.5),
    ("a person claps", 3.0),
    ("a person runs", 3.5),
    ("a person jumps", 4.0),
    ("a person spins", 4.5),
];

/// Per-class `(upper, lower)` amplitude scale and axis weights.
const PATTERNS: [(f64, f64, [f64; 3]); 8] = [
    (0.30, 0.04, [0.4, 1.0, 0.3]),
    (0.08, 0.22, [1.0, 0.3, 0.8]),
    (0.05, 0.32, [0.3, 0.6, 1.0]),
    (0.10, 0.25, [0.2, 1.0, 0.2]),
    (0.26, 0.05, [1.0, 0.3, 0.5]),
    (0.16, 0.24, [0.8, 0.5, 1.0]),
    (0.12, 0.20, [0.3, 1.0, 0.4]),
    (0.20, 0.16, [1.0, 0.2, 1.0]),
];

impl Default for CorpusSpec {
    fn default() -> Self {
        let skeleton = Skeleton::default();
        let templates = CLASSES
            .iter()
            .zip(PATTERNS)
            .enumerate()
            .map(|(c, (&(prompt, freq), (up, low, axes)))| ClassTemplate {
                class_id: c,
                prompt: prompt.to_string(),
                frequency_hz: freq,
                joints: (0..skeleton.joints())
                    .map(|j| {
                        let scale = if skeleton.upper.contains(&j) { up } else { low };
                        let depth = 0.6 + 0.2 * ((j * 3 + c) % 3) as f64;
                        JointOscillation {
                            amplitude: axes.map(|a| scale * a * depth),
                            phase: TAU * ((j * 3 + c * 5) % 8) as f64 / 8.0,
                        }
                    })
                    .collect(),
                root_velocity: [0.0; 3],
            })
            .collect();
        CorpusSpec {
            skeleton,
            templates,
            samples_per_class: 64,
            min_frames: 32,
            max_frames: 64,
            fps: 20.0,
            jitter: 0.02,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.templates.is_empty() {
            return Err(Error::validation("corpus.templates", "no templates"));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if t.class_id != i {
                return Err(Error::validation(
                    format!("corpus.templates[{i}].class_id"),
                    "class ids must be 0..n in order",
                ));
            }
            if t.joints.len() != self.skeleton.joints() {
                return Err(Error::validation(
                    format!("corpus.templates[{i}].joints"),
                    "one oscillation per skeleton joint required",
                ));
            }
            if t.prompt.split_whitespace().next().is_none() {
                return Err(Error::validation(
                    format!("corpus.templates[{i}].prompt"),
                    "empty prompt",
                ));
            }
            if !(t.frequency_hz.is_finite() && t.frequency_hz > 0.0) {
                return Err(Error::validation(
                    format!("corpus.templates[{i}].frequency_hz"),
                    "must be positive",
                ));
            }
            for o in &self.templates[..i] {
                if o.prompt == t.prompt {
                    return Err(Error::validation(
                        format!("corpus.templates[{i}].prompt"),
                        "prompts must be unique",
                    ));
                }
                if (o.frequency_hz - t.frequency_hz).abs() < 0.5 - 1e-12 {
                    return Err(Error::validation(
                        format!("corpus.templates[{i}].frequency_hz"),
                        "class frequencies must differ by at least 0.5 Hz",
                    ));
                }
            }
        }
        if self.samples_per_class == 0 {
            return Err(Error::validation(
                "corpus.samples_per_class",
                "must be positive",
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::validation(
                "corpus.min_frames",
                "need 1 <= min_frames <= max_frames",
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::validation("corpus.fps", "must be positive"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::validation("corpus.jitter", "must be non-negative"));
        }
        Ok(())
    }

    pub fn layout(&self) -> PoseLayout {
        PoseLayout::positions_only(self.skeleton.joints())
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().map(|t| t.prompt.as_str())
    }

    pub fn class_of_prompt(&self, prompt: &str) -> Option<usize> {
        let norm = normalize_prompt(prompt);
        self.templates
            .iter()
            .position(|t| normalize_prompt(&t.prompt) == norm)
    }
}

fn normalize_prompt(p: &str) -> String {
    p.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Noise-free `frames × 3J` joint positions of a template.
pub fn render_template(
    template: &ClassTemplate,
    skeleton: &Skeleton,
    frames: usize,
    fps: f64,
) -> Matrix {
    let rest = skeleton.rest_positions();
    let w = TAU * template.frequency_hz / fps;
    Array2::from_shape_fn((frames, 3 * rest.len()), |(f, c)| {
        let (j, a) = (c / 3, c % 3);
        let osc = &template.joints[j];
        rest[j][a]
            + osc.amplitude[a] * (w * f as f64 + osc.phase).sin()
            + template.root_velocity[a] * f as f64 / fps
    })
}

/// Per-channel mean and standard deviation over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    const STD_FLOOR: f64 = 1e-6;

    pub fn fit<'a, I>(motions: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Matrix>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for m in motions {
            if sum.is_empty() {
                sum = vec![0.0; m.ncols()];
                sq = vec![0.0; m.ncols()];
            } else if m.ncols() != sum.len() {
                return Err(Error::Integrity("motions differ in width".into()));
            }
            for row in m.rows() {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += m.nrows();
        }
        if n == 0 {
            return Err(Error::argument("cannot fit statistics on no frames"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, m: &Matrix) -> Result<Matrix> {
        self.check(m)?;
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        Ok(out)
    }

    fn check(&self, m: &Matrix) -> Result<()> {
        if m.ncols() != self.width() {
            return Err(Error::Integrity(format!(
                "motion width {} does not match statistics width {}",
                m.ncols(),
                self.width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub class_id: usize,
    pub prompt: String,
    pub motion: MotionSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<CorpusSample>,
    pub stats: Standardizer,
}

/// Seed for item `index` of a stream rooted at `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng.random()
}

/// Renders every template `samples_per_class` times, class-major.
///
/// Jitter is scaled per channel by the spread of the noise-free corpus so
/// `jitter` is in standardized units.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut clean = Vec::with_capacity(spec.templates.len() * spec.samples_per_class);
    let mut rngs = Vec::with_capacity(clean.capacity());
    for t in &spec.templates {
        for _ in 0..spec.samples_per_class {
            let index = clean.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
            let frames = rng.random_range(spec.min_frames..=spec.max_frames);
            clean.push((t, render_template(t, &spec.skeleton, frames, spec.fps)));
            rngs.push(rng);
        }
    }
    let clean_stats = Standardizer::fit(clean.iter().map(|(_, m)| m))?;
    let layout = spec.layout();
    let samples = clean
        .into_iter()
        .zip(rngs)
        .map(|((t, mut m), mut rng)| {
            if spec.jitter > 0.0 {
                for mut row in m.rows_mut() {
                    for (c, v) in row.iter_mut().enumerate() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += spec.jitter * clean_stats.std[c] * z;
                    }
                }
            }
            Ok(CorpusSample {
                class_id: t.class_id,
                prompt: t.prompt.clone(),
                motion: MotionSeq::new(layout.clone(), m, spec.fps)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = Standardizer::fit(samples.iter().map(|s| s.motion.frames()))?;
    Ok(Corpus { samples, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            samples_per_class: 3,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let spec = CorpusSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.layout().pose_dim(), 24);
        assert_eq!(spec.templates.len(), 8);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_count_and_lengths() {
        let spec = small();
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.samples.len(), 8 * 3);
        for s in &c.samples {
            assert!((32..=64).contains(&s.motion.len()));
            assert_eq!(s.prompt, spec.templates[s.class_id].prompt);
        }
    }

    #[test]
    fn standardized_corpus_is_unit_scale() {
        let c = generate_corpus(&small()).unwrap();
        let normed: Vec<Matrix> = c
            .samples
            .iter()
            .map(|s| c.stats.normalize(s.motion.frames()).unwrap())
            .collect();
        let st = Standardizer::fit(&normed).unwrap();
        for (m, s) in st.mean.iter().zip(&st.std) {
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-9);
        }
        let back = c.stats.denormalize(&normed[0]).unwrap();
        let diff = (&back - c.samples[0].motion.frames()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn noise_free_dominant_frequency_matches_template() {
        let spec = CorpusSpec {
            jitter: 0.0,
            ..small()
        };
        let c = generate_corpus(&spec).unwrap();
        for s in &c.samples {
            let f = s.motion.len();
            let res = spec.fps / f as f64;
            let want = spec.templates[s.class_id].frequency_hz;
            let m = s.motion.frames();
            for ch in 0..m.ncols() {
                let col = m.column(ch);
                let mean = col.mean().unwrap();
                // Direct DFT magnitude over bins 1..F/2.
                let best = (1..f / 2)
                    .map(|k| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for (n, v) in col.iter().enumerate() {
                            let a = TAU * (k * n) as f64 / f as f64;
                            re += (v - mean) * a.cos();
                            im -= (v - mean) * a.sin();
                        }
                        (k, re.hypot(im))
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                assert!(
                    (best as f64 * res - want).abs() <= res,
                    "class {} channel {ch}: peak {} Hz vs {want}",
                    s.class_id,
                    best as f64 * res
                );
            }
        }
    }

    #[test]
    fn validation_catches_close_frequencies() {
        let mut spec = small();
        spec.templates[1].frequency_hz = 1.2;
        assert!(spec.validate().is_err());
        let mut spec = small();
        spec.templates[1].prompt = spec.templates[0].prompt.clone();
        assert!(spec.validate().is_err());
        let spec = CorpusSpec {
            min_frames: 70,
            ..small()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }
}
