//! DDPM schedule, forward corruption, training objective and the reverse
//! sampling loop.
//!
//! Steps are 1-indexed: `t ∈ [1, T]`, with `ᾱ_0 = 1`.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, Matrix, Tape, Var};
use crate::text::TokenSeq;

/// Linear variance schedule and its derived coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl Schedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::argument("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::argument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + i as f64 * span).collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Schedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::argument(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "{what}: shape {:?} does not match {:?}",
            b.dim(),
            a.dim()
        )));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Matrix, t: usize, eps: &Matrix, sched: &Schedule) -> Result<Matrix> {
    sched.check_step(t)?;
    check_same_shape(x0, eps, "q_sample noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x0)
        .and(eps)
        .map_collect(|&x, &e| a * x + b * e))
}

/// Posterior mean `μ = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn p_mean(x_t: &Matrix, t: usize, eps_pred: &Matrix, sched: &Schedule) -> Result<Matrix> {
    sched.check_step(t)?;
    check_same_shape(x_t, eps_pred, "p_mean prediction")?;
    let alpha = sched.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    Ok(ndarray::Zip::from(x_t)
        .and(eps_pred)
        .map_collect(|&x, &e| inv * (x - coef * e)))
}

/// Whether the reverse loop injects `√β_t·z`. `Deterministic` exists for
/// exact algebraic tests of the sampler; random draws are still consumed so
/// generator state evolves identically in both modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseMode {
    #[default]
    Stochastic,
    Deterministic,
}

pub fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// One reverse step: `μ + √β_t·z` for `t > 1`, `μ` exactly at `t = 1`.
pub fn p_sample_step<R: Rng>(
    x_t: &Matrix,
    t: usize,
    eps_pred: &Matrix,
    sched: &Schedule,
    rng: &mut R,
    mode: NoiseMode,
) -> Result<Matrix> {
    let mut mean = p_mean(x_t, t, eps_pred, sched)?;
    if t > 1 {
        let z = standard_normal(rng, x_t.nrows(), x_t.ncols());
        if mode == NoiseMode::Stochastic {
            let sd = sched.beta(t).sqrt();
            mean.zip_mut_with(&z, |m, &zv| *m += sd * zv);
        }
    }
    Ok(mean)
}

/// A conditioned noise-prediction query.
#[derive(Clone, Copy, Debug)]
pub struct EpsQuery<'a> {
    pub x: &'a Matrix,
    pub t: usize,
    pub tokens: &'a TokenSeq,
}

/// Anything that predicts the injected noise `ε_θ(x_t, t, text)`.
pub trait EpsModel {
    /// One prediction per query, each shaped like its `x`.
    fn predict(&self, queries: &[EpsQuery<'_>]) -> Result<Vec<Matrix>>;

    /// Gradient with respect to `x` of a scalar `energy` over predictions on
    /// row windows of `x`. `energy` receives one prediction var per view.
    fn input_gradient(
        &self,
        _x: &Matrix,
        _t: usize,
        _views: &[InputView<'_>],
        _energy: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> Result<Matrix> {
        Err(Error::argument(
            "this model does not support gradients with respect to its input",
        ))
    }
}

/// Rows `start..start + len` of an input, conditioned on `tokens`.
#[derive(Clone, Copy, Debug)]
pub struct InputView<'a> {
    pub start: usize,
    pub len: usize,
    pub tokens: &'a TokenSeq,
}

/// One sequence to generate.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub tokens: TokenSeq,
    pub frames: usize,
    pub seed: u64,
}

/// Runs the reverse loop for several independent sequences at once. Each
/// request draws from its own generator seeded from `request.seed`, so a
/// sequence's result does not depend on what else is in the batch.
pub fn sample_batch<M: EpsModel + ?Sized>(
    model: &M,
    requests: &[SampleRequest],
    width: usize,
    sched: &Schedule,
    mode: NoiseMode,
) -> Result<Vec<Matrix>> {
    let frames: Vec<usize> = requests.iter().map(|r| r.frames).collect();
    let seeds: Vec<u64> = requests.iter().map(|r| r.seed).collect();
    reverse_loop(&frames, &seeds, width, sched, mode, |t, states| {
        let queries: Vec<EpsQuery<'_>> = states
            .iter()
            .zip(requests)
            .map(|(x, r)| EpsQuery {
                x,
                t,
                tokens: &r.tokens,
            })
            .collect();
        model.predict(&queries)
    })
}

/// Reverse loop over independent states, one generator per seed. `eps`
/// maps the step and current states to one noise estimate per state.
pub fn reverse_loop<F>(
    frames: &[usize],
    seeds: &[u64],
    width: usize,
    sched: &Schedule,
    mode: NoiseMode,
    mut eps: F,
) -> Result<Vec<Matrix>>
where
    F: FnMut(usize, &[Matrix]) -> Result<Vec<Matrix>>,
{
    if frames.len() != seeds.len() {
        return Err(Error::argument("one seed per sequence required"));
    }
    if frames.contains(&0) {
        return Err(Error::argument("frame count must be at least 1"));
    }
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let mut states: Vec<Matrix> = frames
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&f, rng)| standard_normal(rng, f, width))
        .collect();
    for t in (1..=sched.steps()).rev() {
        let preds = eps(t, &states)?;
        if preds.len() != states.len() {
            return Err(Error::argument(
                "noise estimate count does not match states",
            ));
        }
        let mut next = Vec::with_capacity(states.len());
        for ((x, e), rng) in states.iter().zip(&preds).zip(rngs.iter_mut()) {
            let x_prev = p_sample_step(x, t, e, sched, rng, mode)?;
            ensure_finite(x_prev.iter(), &format!("sampler state at step {t}"))?;
            next.push(x_prev);
        }
        states = next;
    }
    Ok(states)
}

/// Single-sequence sampler drawing from `rng`.
pub fn sample<M: EpsModel + ?Sized, R: Rng>(
    model: &M,
    tokens: &TokenSeq,
    frames: usize,
    width: usize,
    sched: &Schedule,
    rng: &mut R,
    mode: NoiseMode,
) -> Result<Matrix> {
    let request = SampleRequest {
        tokens: tokens.clone(),
        frames,
        seed: rng.random(),
    };
    Ok(sample_batch(model, &[request], width, sched, mode)?.remove(0))
}

/// A training example in normalized space.
#[derive(Clone, Debug)]
pub struct TrainingItem {
    pub tokens: TokenSeq,
    pub x0: Matrix,
}

/// Noised input and its target for one training item.
#[derive(Clone, Debug)]
pub struct NoiseSample {
    pub x_t: Matrix,
    pub t: usize,
    pub eps: Matrix,
}

/// Draws `t ~ U{1..T}` then `ε ~ N(0, I)` for each item, in batch order.
pub fn draw_noise<R: Rng>(
    batch: &[TrainingItem],
    sched: &Schedule,
    rng: &mut R,
) -> Result<Vec<NoiseSample>> {
    if batch.is_empty() {
        return Err(Error::argument("training batch is empty"));
    }
    let width = batch[0].x0.ncols();
    batch
        .iter()
        .map(|item| {
            if item.x0.ncols() != width {
                return Err(Error::argument("inconsistent pose width in batch"));
            }
            let t = rng.random_range(1..=sched.steps());
            let eps = standard_normal(rng, item.x0.nrows(), width);
            let x_t = q_sample(&item.x0, t, &eps, sched)?;
            Ok(NoiseSample { x_t, t, eps })
        })
        .collect()
}

/// Mean squared error between injected and predicted noise over every
/// element of the batch.
pub fn training_loss<M: EpsModel + ?Sized, R: Rng>(
    model: &M,
    batch: &[TrainingItem],
    sched: &Schedule,
    rng: &mut R,
) -> Result<f64> {
    let noised = draw_noise(batch, sched, rng)?;
    let queries: Vec<EpsQuery<'_>> = noised
        .iter()
        .zip(batch)
        .map(|(n, item)| EpsQuery {
            x: &n.x_t,
            t: n.t,
            tokens: &item.tokens,
        })
        .collect();
    let preds = model.predict(&queries)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (n, p)) in noised.iter().zip(&preds).enumerate() {
        let sq: f64 = n
            .eps
            .iter()
            .zip(p.iter())
            .map(|(e, q)| (e - q) * (e - q))
            .sum();
        if !sq.is_finite() {
            return Err(Error::non_finite(format!("training loss of sample {i}")));
        }
        total += sq;
        count += n.eps.len();
    }
    Ok(total / count as f64)
}
