//! Adam training of the denoiser and binary checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{pack_queries, DenoiserParams, ModelConfig};
use crate::diffusion::{draw_noise, EpsQuery, Schedule, ScheduleConfig, TrainingItem};
use crate::error::{Error, Result};
use crate::motion::{PoseLayout, Standardizer};
use crate::numerics::{Matrix, ParamStore, Tape};
use crate::text::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2e-4,
            batch_size: 32,
            iterations: 3000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(
                "optimizer.learning_rate",
                "must be positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation(
                "optimizer.batch_size",
                "must be positive",
            ));
        }
        for (name, b) in [
            ("optimizer.beta1", self.beta1),
            ("optimizer.beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(name, "must be in [0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::validation("optimizer.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.raw_dim()))
            .collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Matrix],
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Integrity(
                "gradient count does not match optimizer state".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
                });
        }
        Ok(())
    }
}

/// Seed of the generator used at `iteration` (1-based) of a run seeded
/// with `seed`.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1u64 << 32 | iteration as u64);
    rng.random()
}

/// One optimization step: a batch drawn with replacement, a packed
/// forward pass, the mean squared noise error and an Adam update.
/// Returns the batch loss.
pub fn train_step(
    params: &mut DenoiserParams,
    adam: &mut Adam,
    data: &[TrainingItem],
    sched: &Schedule,
    cfg: &OptimizerConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    let batch: Vec<TrainingItem> = (0..cfg.batch_size)
        .map(|_| data[rng.random_range(0..data.len())].clone())
        .collect();
    let noised = draw_noise(&batch, sched, rng)?;
    let queries: Vec<EpsQuery<'_>> = noised
        .iter()
        .zip(&batch)
        .map(|(n, item)| EpsQuery {
            x: &n.x_t,
            t: n.t,
            tokens: &item.tokens,
        })
        .collect();
    let (packed, items) = pack_queries(&queries);
    let rows = packed.nrows();
    let mut target = Array2::zeros((rows, packed.ncols()));
    let mut r = 0;
    for n in &noised {
        target
            .slice_mut(ndarray::s![r..r + n.eps.nrows(), ..])
            .assign(&n.eps);
        r += n.eps.nrows();
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(packed);
    let out = params.forward(&mut tape, &bound, x, &items)?;
    let target = tape.leaf(target);
    tape.set_scope("loss");
    let loss = tape.mse(out, target);
    tape.check()?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let grads = params.store().collect_grads(bound.vars(), &mut grads);
    for (g, (name, _)) in grads.iter().zip(params.store().iter()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {name}")));
        }
    }
    adam.update(params.store_mut(), &grads, cfg)?;
    Ok(value)
}

/// Parameters, optimizer state and the number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub adam: Adam,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Self {
        let adam = Adam::new(params.store());
        TrainState {
            params,
            adam,
            iteration: 0,
        }
    }

    /// Runs iterations `iteration + 1 ..= until`. Each iteration draws from
    /// a generator derived from `(seed, iteration)`, so stopping and
    /// resuming does not change the result. `on_step` sees the state after
    /// every update together with its batch loss.
    pub fn train_until<F>(
        &mut self,
        data: &[TrainingItem],
        sched: &Schedule,
        cfg: &OptimizerConfig,
        seed: u64,
        until: usize,
        mut on_step: F,
    ) -> Result<()>
    where
        F: FnMut(&TrainState, f64) -> Result<()>,
    {
        while self.iteration < until {
            let it = self.iteration + 1;
            let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(seed, it));
            let loss = train_step(&mut self.params, &mut self.adam, data, sched, cfg, &mut rng)?;
            self.iteration = it;
            on_step(self, loss)?;
        }
        Ok(())
    }
}

/// Mean of the `window` losses ending at `iteration` (1-based).
pub fn smoothed_loss(losses: &[f64], iteration: usize, window: usize) -> Option<f64> {
    if iteration == 0 || iteration > losses.len() || window == 0 {
        return None;
    }
    let lo = iteration.saturating_sub(window);
    let w = &losses[lo..iteration];
    Some(w.iter().sum::<f64>() / w.len() as f64)
}

/// Everything needed to resume training or to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub iteration: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub vocab: Vocabulary,
    pub stats: Standardizer,
    pub layout: PoseLayout,
    pub fps: f64,
    pub params: DenoiserParams,
    pub adam: Adam,
}

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    iteration: usize,
    seed: u64,
    model: ModelConfig,
    schedule: ScheduleConfig,
    optimizer: OptimizerConfig,
    vocab: Vocabulary,
    stats: Standardizer,
    layout: PoseLayout,
    fps: f64,
    adam_step: u64,
    params: Vec<(String, [usize; 2])>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let store = self.params.store();
        let header = Header {
            config_hash: self.config_hash.clone(),
            iteration: self.iteration,
            seed: self.seed,
            model: self.params.config().clone(),
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            vocab: self.vocab.clone(),
            stats: self.stats.clone(),
            layout: self.layout.clone(),
            fps: self.fps,
            adam_step: self.adam.step,
            params: store
                .iter()
                .map(|(n, p)| (n.to_string(), [p.nrows(), p.ncols()]))
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::parse("checkpoint header", e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + 24 * store.numel());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        let blocks = store
            .iter()
            .map(|(_, p)| p)
            .chain(self.adam.m.iter())
            .chain(self.adam.v.iter());
        for block in blocks {
            for v in block.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io("<stream>", e))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<stream>", e))?;
        let truncated = || Error::parse("checkpoint", "file is truncated");
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::parse("checkpoint", "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::parse(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::parse("checkpoint header", e.to_string()))?;
        let mut payload = &bytes[16 + hlen..];
        let numel: usize = header.params.iter().map(|(_, [r, c])| r * c).sum();
        if payload.len() != 3 * numel * 8 {
            return Err(if payload.len() < 3 * numel * 8 {
                truncated()
            } else {
                Error::Integrity("checkpoint payload is longer than declared".into())
            });
        }
        let mut take = |rows: usize, cols: usize| -> Matrix {
            let n = rows * cols;
            let vals: Vec<f64> = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[8 * n..];
            Array2::from_shape_vec((rows, cols), vals).unwrap()
        };
        let mut store = ParamStore::new();
        for (name, [r, c]) in &header.params {
            store.register(name.clone(), take(*r, *c));
        }
        let m = header
            .params
            .iter()
            .map(|(_, [r, c])| take(*r, *c))
            .collect();
        let v = header
            .params
            .iter()
            .map(|(_, [r, c])| take(*r, *c))
            .collect();
        let params = DenoiserParams::from_store(&header.model, store)?;
        if header.layout.pose_dim() != header.model.pose_dim
            || header.stats.width() != header.model.pose_dim
            || header.vocab.len() > header.model.vocab_size
        {
            return Err(Error::Integrity(
                "checkpoint layout, statistics and model disagree".into(),
            ));
        }
        Ok(Checkpoint {
            config_hash: header.config_hash,
            iteration: header.iteration,
            seed: header.seed,
            schedule: header.schedule,
            optimizer: header.optimizer,
            vocab: header.vocab,
            stats: header.stats,
            layout: header.layout,
            fps: header.fps,
            params,
            adam: Adam {
                step: header.adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            e => e,
        })
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TokenSeq;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            n_decoder_layers: 1,
            n_text_layers: 1,
            latent_dim_motion: 8,
            latent_dim_text: 8,
            n_heads: 2,
            ffn_hidden: 8,
            vocab_size: 4,
            max_text_len: 4,
            pose_dim: 3,
        }
    }

    fn toy_data() -> Vec<TrainingItem> {
        (0..4)
            .map(|i| TrainingItem {
                tokens: TokenSeq::new(vec![1 + i % 3]),
                x0: Array2::from_shape_fn((3 + i, 3), |(f, c)| ((f + c + i) as f64 * 0.7).sin()),
            })
            .collect()
    }

    fn checkpoint(params: DenoiserParams, adam: Adam) -> Checkpoint {
        Checkpoint {
            config_hash: "abc".into(),
            iteration: 7,
            seed: 1,
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            vocab: Vocabulary::from_prompts(["a b c"]),
            stats: Standardizer {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
            layout: PoseLayout::positions_only(1),
            fps: 20.0,
            params,
            adam,
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.register("w", ndarray::array![[1.0, -2.0, 0.5]]);
        let mut adam = Adam::new(&store);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        adam.update(&mut store, &[ndarray::array![[3.0, -0.5, 0.0]]], &cfg)
            .unwrap();
        let w = store.get(store.id("w").unwrap());
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((w[[0, 0]] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((w[[0, 1]] - (-2.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert_eq!(w[[0, 2]], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("w", ndarray::array![[5.0, -3.0]]);
        let mut adam = Adam::new(&store);
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        for _ in 0..2000 {
            let g = store.get(id).mapv(|w| 2.0 * (w - 1.0));
            adam.update(&mut store, &[g], &cfg).unwrap();
        }
        assert!(store.get(id).iter().all(|w| (w - 1.0).abs() < 1e-3));
    }

    #[test]
    fn training_reduces_loss_on_a_tiny_set() {
        let sched = Schedule::linear(50, 1e-3, 0.05).unwrap();
        let mut params = DenoiserParams::init(&toy_cfg(), 0).unwrap();
        let mut adam = Adam::new(params.store());
        let cfg = OptimizerConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            ..Default::default()
        };
        let data = toy_data();
        let losses: Vec<f64> = (1..=300)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(5, i));
                train_step(&mut params, &mut adam, &data, &sched, &cfg, &mut rng).unwrap()
            })
            .collect();
        let early = smoothed_loss(&losses, 30, 30).unwrap();
        let late = smoothed_loss(&losses, 300, 30).unwrap();
        assert!(late < early, "{early} -> {late}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params = DenoiserParams::init(&toy_cfg(), 1).unwrap();
        let mut adam = Adam::new(params.store());
        let mut p2 = params.clone();
        let sched = Schedule::linear(10, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        train_step(
            &mut p2,
            &mut adam,
            &toy_data(),
            &sched,
            &OptimizerConfig::default(),
            &mut rng,
        )
        .unwrap();
        let ck = checkpoint(p2, adam);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let params = DenoiserParams::init(&toy_cfg(), 1).unwrap();
        let adam = Adam::new(params.store());
        let mut buf = Vec::new();
        checkpoint(params, adam).write_to(&mut buf).unwrap();
        let short = &buf[..buf.len() - 8];
        assert!(matches!(
            Checkpoint::read_from(&mut &short[..]),
            Err(Error::Parse { .. })
        ));
        let mut long = buf.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(matches!(
            Checkpoint::read_from(&mut long.as_slice()),
            Err(Error::Integrity(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn resumed_training_matches_straight_run() {
        let sched = Schedule::linear(20, 1e-3, 0.05).unwrap();
        let cfg = OptimizerConfig {
            batch_size: 4,
            ..Default::default()
        };
        let data = toy_data();
        let init = TrainState::new(DenoiserParams::init(&toy_cfg(), 2).unwrap());
        let mut straight = init.clone();
        straight
            .train_until(&data, &sched, &cfg, 9, 6, |_, _| Ok(()))
            .unwrap();
        let mut first = init.clone();
        first
            .train_until(&data, &sched, &cfg, 9, 3, |_, _| Ok(()))
            .unwrap();
        let mut buf = Vec::new();
        checkpoint(first.params.clone(), first.adam.clone())
            .write_to(&mut buf)
            .unwrap();
        let ck = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let mut resumed = TrainState {
            params: ck.params,
            adam: ck.adam,
            iteration: 3,
        };
        resumed
            .train_until(&data, &sched, &cfg, 9, 6, |_, _| Ok(()))
            .unwrap();
        assert_eq!(resumed, straight);
        let mut none = init.clone();
        none.train_until(&data, &sched, &cfg, 9, 0, |_, _| Ok(()))
            .unwrap();
        assert_eq!(none, init);
    }

    #[test]
    fn smoothing_window() {
        let l = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(smoothed_loss(&l, 4, 2), Some(2.0));
        assert_eq!(smoothed_loss(&l, 1, 50), Some(4.0));
        assert_eq!(smoothed_loss(&l, 5, 2), None);
    }

    #[test]
    fn iteration_seeds_are_distinct() {
        assert_ne!(iteration_seed(0, 1), iteration_seed(0, 2));
        assert_eq!(iteration_seed(3, 9), iteration_seed(3, 9));
    }

    #[test]
    fn optimizer_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Validation { .. })));
    }
}
