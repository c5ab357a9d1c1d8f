//! Operations behind the command-line verbs: corpus generation, training,
//! plain and controlled sampling, and evaluation.
//!
//! Every artifact is a function of the configuration, the seed and the
//! input files only. Configuration and spec documents are JSON; fields that
//! fail to parse are reported by their path in the document.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{BodyPart, Correction, Interval, PartSpec, TimelineSpec, DEFAULT_LAMBDA};
use crate::denoiser::{DenoiserParams, ModelConfig};
use crate::diffusion::{NoiseMode, ScheduleConfig, TrainingItem};
use crate::error::{Error, Result};
use crate::eval::{self, RunSummary};
use crate::model::TrainedModel;
use crate::motion::{
    derive_seed, generate_corpus, read_motion, write_motion, CorpusSpec, Encoding, MotionSeq,
    PoseLayout, Skeleton, Standardizer,
};
use crate::text::Vocabulary;
use crate::train::{hash_json, Checkpoint, OptimizerConfig, TrainState};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const RUN_FILE: &str = "run.json";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_LOG: &str = "loss.csv";
pub const SIDECAR_FILE: &str = "request.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const EVAL_RUNS: usize = 20;
pub const DIVERSITY_PAIRS: usize = 300;

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

fn default_log_every() -> usize {
    50
}

fn default_checkpoint_every() -> usize {
    500
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

/// Training data: either a spec rendered in memory or a corpus directory
/// written by [`cmd_generate_corpus`]. Neither given means the default spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<CorpusSpec>,
    /// Corpus directory or its manifest file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to [`ModelConfig::desk`] sized to the corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            output_dir: default_output_dir(),
            model: None,
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            corpus: CorpusSource::default(),
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.validate().map_err(|e| prefix_field(e, "model"))?;
        }
        self.schedule
            .build()
            .map_err(|e| Error::validation("schedule", e.to_string()))?;
        self.optimizer.validate()?;
        if self.log_every == 0 {
            return Err(Error::validation("log_every", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::validation("checkpoint_every", "must be positive"));
        }
        match (&self.corpus.spec, &self.corpus.manifest) {
            (Some(_), Some(_)) => Err(Error::validation(
                "corpus",
                "give either spec or manifest, not both",
            )),
            (Some(spec), None) => spec
                .validate()
                .map_err(|e| Error::validation("corpus.spec", e.to_string())),
            (None, Some(path)) => {
                let file = manifest_path(path);
                if file.is_file() {
                    Ok(())
                } else {
                    Err(Error::validation(
                        "corpus.manifest",
                        format!("{} does not exist", file.display()),
                    ))
                }
            }
            (None, None) => Ok(()),
        }
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        match (&self.corpus.spec, &self.corpus.manifest) {
            (_, Some(_)) => Err(Error::validation(
                "corpus",
                "a corpus spec is required, found a manifest",
            )),
            (Some(spec), None) => Ok(spec.clone()),
            (None, None) => Ok(CorpusSpec::default()),
        }
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Validation { field, reason } => {
            Error::validation(format!("{prefix}.{field}"), reason)
        }
        e => e,
    }
}

/// Parses a JSON document, naming the offending field on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." {
            "<document>".to_string()
        } else {
            path
        };
        Error::validation(field, e.into_inner().to_string())
    })
}

fn json_text<T: Serialize>(value: &T) -> Result<String> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::parse("document", e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, json_text(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Index of a directory of motion files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub fps: f64,
    pub layout: PoseLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_spec: Option<CorpusSpec>,
    pub entries: Vec<ManifestEntry>,
}

/// A manifest with its motions loaded.
#[derive(Clone, Debug)]
pub struct MotionSet {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// SHA-256 of the manifest bytes.
    pub digest: String,
    pub motions: Vec<(String, MotionSeq)>,
}

pub fn load_motion_set(path: &Path) -> Result<MotionSet> {
    let file = manifest_path(path);
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    let text =
        String::from_utf8(bytes.clone()).map_err(|e| Error::parse("manifest", e.to_string()))?;
    let manifest: Manifest = parse_json(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::parse(
            "format_version",
            format!("unsupported manifest version {}", manifest.format_version),
        ));
    }
    if let Some(spec) = &manifest.corpus_spec {
        if hash_json(spec) != manifest.config_hash {
            return Err(Error::Integrity(format!(
                "{}: config_hash does not match the embedded corpus spec",
                file.display()
            )));
        }
    }
    let mut motions = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let m = read_motion(&dir.join(&e.path))?;
        if m.layout() != &manifest.layout || m.fps() != manifest.fps {
            return Err(Error::Integrity(format!(
                "{} does not match the manifest layout or frame rate",
                e.path
            )));
        }
        motions.push((e.prompt.clone(), m));
    }
    Ok(MotionSet {
        dir,
        digest: sha_hex(&[&bytes]),
        manifest,
        motions,
    })
}

/// Renders `spec` into `out`: one motion file per sample, the manifest and
/// the standardization statistics.
pub fn cmd_generate_corpus(spec: &CorpusSpec, out: &Path) -> Result<Manifest> {
    spec.validate()
        .map_err(|e| Error::validation("corpus", e.to_string()))?;
    if spec.samples_per_class == 0 {
        return Err(Error::validation(
            "corpus.samples_per_class",
            "must be positive",
        ));
    }
    let corpus = generate_corpus(spec)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(corpus.samples.len());
    for (i, s) in corpus.samples.iter().enumerate() {
        let name = format!("sample-{i:05}.motion");
        write_motion(&s.motion, &out.join(&name), Encoding::Binary)?;
        entries.push(ManifestEntry {
            path: name,
            prompt: s.prompt.clone(),
            class_id: Some(s.class_id),
            seed: None,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config_hash: hash_json(spec),
        fps: spec.fps,
        layout: spec.layout(),
        corpus_spec: Some(spec.clone()),
        entries,
    };
    write_json(&out.join(STATS_FILE), &corpus.stats)?;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Normalized training items plus what a checkpoint records about them.
pub struct TrainingCorpus {
    pub items: Vec<TrainingItem>,
    pub vocab: Vocabulary,
    pub stats: Standardizer,
    pub layout: PoseLayout,
    pub fps: f64,
    /// Content hash standing in for the corpus in the config hash.
    pub identity: String,
}

pub fn training_corpus(src: &CorpusSource) -> Result<TrainingCorpus> {
    let (motions, stats, layout, fps, identity) = match &src.manifest {
        Some(path) => {
            let set = load_motion_set(path)?;
            let stats_path = set.dir.join(STATS_FILE);
            let stats_bytes = fs::read(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
            let stats: Standardizer = read_json(&stats_path)?;
            let identity = sha_hex(&[set.digest.as_bytes(), &stats_bytes]);
            (
                set.motions,
                stats,
                set.manifest.layout,
                set.manifest.fps,
                identity,
            )
        }
        None => {
            let spec = src.spec.clone().unwrap_or_default();
            let corpus = generate_corpus(&spec)?;
            let motions = corpus
                .samples
                .into_iter()
                .map(|s| (s.prompt, s.motion))
                .collect();
            (
                motions,
                corpus.stats,
                spec.layout(),
                spec.fps,
                hash_json(&spec),
            )
        }
    };
    if motions.is_empty() {
        return Err(Error::argument("training corpus is empty"));
    }
    if stats.width() != layout.pose_dim() {
        return Err(Error::Integrity(
            "statistics width does not match the layout".into(),
        ));
    }
    let vocab = Vocabulary::from_prompts(motions.iter().map(|(p, _)| p.as_str()));
    let items = motions
        .iter()
        .map(|(p, m)| {
            Ok(TrainingItem {
                tokens: vocab.encode(p)?,
                x0: stats.normalize(m.frames())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingCorpus {
        items,
        vocab,
        stats,
        layout,
        fps,
        identity,
    })
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    model: &'a ModelConfig,
    schedule: &'a ScheduleConfig,
    optimizer: &'a OptimizerConfig,
    seed: u64,
    corpus: &'a str,
}

/// Model config after defaults, checked against the corpus.
pub fn resolve_model(cfg: &RunConfig, corpus: &TrainingCorpus) -> Result<ModelConfig> {
    let d = corpus.layout.pose_dim();
    let max_words = corpus
        .items
        .iter()
        .map(|i| i.tokens.len())
        .max()
        .unwrap_or(0);
    let model = cfg
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::desk(d, corpus.vocab.len()));
    if model.pose_dim != d {
        return Err(Error::validation(
            "model.pose_dim",
            format!("corpus has {d} channels"),
        ));
    }
    if model.vocab_size < corpus.vocab.len() {
        return Err(Error::validation(
            "model.vocab_size",
            format!("corpus vocabulary has {} entries", corpus.vocab.len()),
        ));
    }
    if model.max_text_len < max_words {
        return Err(Error::validation(
            "model.max_text_len",
            format!("corpus prompts have up to {max_words} words"),
        ));
    }
    Ok(model)
}

/// Hash of everything that determines the trained parameters except the
/// iteration count, so a longer run can resume from a shorter one.
pub fn config_hash(cfg: &RunConfig, model: &ModelConfig, corpus: &TrainingCorpus) -> String {
    let optimizer = OptimizerConfig {
        iterations: 0,
        ..cfg.optimizer.clone()
    };
    hash_json(&HashedConfig {
        model,
        schedule: &cfg.schedule,
        optimizer: &optimizer,
        seed: cfg.seed,
        corpus: &corpus.identity,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub iteration: usize,
    pub config_hash: String,
    /// Batch loss of every iteration run by this call.
    pub losses: Vec<f64>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: &'a str,
    model: &'a ModelConfig,
    config: &'a RunConfig,
}

/// Trains to `optimizer.iterations`, optionally resuming from a checkpoint
/// written by an earlier run of the same configuration. `progress`
/// receives one line per logged iteration.
pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = training_corpus(&cfg.corpus)?;
    let model_cfg = resolve_model(cfg, &corpus)?;
    let hash = config_hash(cfg, &model_cfg, &corpus);
    let sched = cfg.schedule.build()?;
    let out = &cfg.output_dir;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    write_json(
        &out.join(RUN_FILE),
        &RunRecord {
            config_hash: &hash,
            model: &model_cfg,
            config: cfg,
        },
    )?;

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != hash {
                return Err(Error::Integrity(format!(
                    "{} was written by configuration {}, current configuration is {hash}",
                    path.display(),
                    ck.config_hash
                )));
            }
            if ck.iteration > cfg.optimizer.iterations {
                return Err(Error::argument(format!(
                    "checkpoint is at iteration {}, past the configured {}",
                    ck.iteration, cfg.optimizer.iterations
                )));
            }
            TrainState {
                params: ck.params,
                adam: ck.adam,
                iteration: ck.iteration,
            }
        }
        None => TrainState::new(DenoiserParams::init(&model_cfg, cfg.seed)?),
    };

    let log_path = out.join(LOSS_LOG);
    let mut log = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
            .and_then(|mut f| writeln!(f, "iteration,loss,smoothed_loss").map(|_| f))
    }
    .map_err(|e| Error::io(&log_path, e))?;

    let make_checkpoint = |s: &TrainState| Checkpoint {
        config_hash: hash.clone(),
        iteration: s.iteration,
        seed: cfg.seed,
        schedule: cfg.schedule,
        optimizer: cfg.optimizer.clone(),
        vocab: corpus.vocab.clone(),
        stats: corpus.stats.clone(),
        layout: corpus.layout.clone(),
        fps: corpus.fps,
        params: s.params.clone(),
        adam: s.adam.clone(),
    };

    let mut losses = Vec::new();
    state.train_until(
        &corpus.items,
        &sched,
        &cfg.optimizer,
        cfg.seed,
        cfg.optimizer.iterations,
        |s, loss| {
            losses.push(loss);
            let it = s.iteration;
            if it % cfg.log_every == 0 {
                let w = &losses[losses.len().saturating_sub(cfg.log_every)..];
                let smoothed = w.iter().sum::<f64>() / w.len() as f64;
                writeln!(log, "{it},{loss},{smoothed}").map_err(|e| Error::io(&log_path, e))?;
                progress(&format!(
                    "iteration {it}: loss {loss:.5}, mean of last {} {smoothed:.5}",
                    w.len()
                ));
            }
            if it % cfg.checkpoint_every == 0 {
                make_checkpoint(s).save(&ckpt_dir.join(format!("iter-{it:06}.ckpt")))?;
            }
            Ok(())
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out.join(FINAL_CHECKPOINT);
    make_checkpoint(&state).save(&final_path)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        iteration: state.iteration,
        config_hash: hash,
        losses,
    })
}

pub fn load_model(checkpoint: &Path) -> Result<TrainedModel> {
    TrainedModel::from_checkpoint(Checkpoint::load(checkpoint)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub length: usize,
    pub seed: u64,
    pub count: usize,
    /// Threads sharing the batch; results do not depend on it.
    pub workers: usize,
}

impl SampleOptions {
    fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::validation("length", "must be positive"));
        }
        if self.count == 0 {
            return Err(Error::validation("count", "must be positive"));
        }
        Ok(())
    }
}

/// Seed of sample `i` in a request seeded with `seed`.
pub fn item_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive_seed(seed, i)).collect()
}

fn run_chunked<F>(seeds: &[u64], workers: usize, f: F) -> Result<Vec<MotionSeq>>
where
    F: Fn(&[u64]) -> Result<Vec<MotionSeq>> + Sync,
{
    if workers <= 1 || seeds.len() <= 1 {
        return f(seeds);
    }
    let chunk = seeds.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = seeds.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("sampling worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Serialize)]
struct Sidecar<'a, S: Serialize> {
    command: &'a str,
    checkpoint_hash: &'a str,
    seed: u64,
    length: usize,
    count: usize,
    item_seeds: &'a [u64],
    spec: S,
}

fn write_samples(
    out: &Path,
    model: &TrainedModel,
    motions: &[MotionSeq],
    prompts: &[String],
    seeds: &[u64],
) -> Result<Manifest> {
    create_dir(out)?;
    let mut entries = Vec::with_capacity(motions.len());
    for (i, ((m, p), &s)) in motions.iter().zip(prompts).zip(seeds).enumerate() {
        let name = format!("sample-{i:03}.motion");
        write_motion(m, &out.join(&name), Encoding::Binary)?;
        entries.push(ManifestEntry {
            path: name,
            prompt: p.clone(),
            class_id: None,
            seed: Some(s),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config_hash: model.config_hash.clone(),
        fps: model.fps,
        layout: model.layout.clone(),
        corpus_spec: None,
        entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct PromptSpec<'a> {
    prompt: &'a str,
}

/// `opts.count` motions for `prompt`, written to `out` with a manifest and
/// a sidecar echoing the request.
pub fn cmd_sample(
    model: &TrainedModel,
    prompt: &str,
    opts: &SampleOptions,
    out: &Path,
) -> Result<Vec<MotionSeq>> {
    opts.validate()?;
    model
        .tokens(prompt)
        .map_err(|e| Error::validation("prompt", e.to_string()))?;
    let seeds = item_seeds(opts.seed, opts.count);
    let motions = run_chunked(&seeds, opts.workers, |s| {
        model.sample(prompt, opts.length, s, NoiseMode::Stochastic)
    })?;
    write_samples(
        out,
        model,
        &motions,
        &vec![prompt.to_string(); opts.count],
        &seeds,
    )?;
    write_json(
        &out.join(SIDECAR_FILE),
        &Sidecar {
            command: "sample",
            checkpoint_hash: &model.config_hash,
            seed: opts.seed,
            length: opts.length,
            count: opts.count,
            item_seeds: &seeds,
            spec: PromptSpec { prompt },
        },
    )?;
    Ok(motions)
}

/// One body part in a part-spec document: a prompt and either joint names
/// or an explicit 0/1 channel mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartDoc {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpecDoc {
    pub parts: Vec<PartDoc>,
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default)]
    pub correction: Correction,
}

impl PartSpecDoc {
    /// Resolves prompts and masks against `model`; joint names refer to
    /// `skeleton`. Returns the spec and the document with masks filled in.
    pub fn resolve(
        &self,
        model: &TrainedModel,
        skeleton: &Skeleton,
    ) -> Result<(PartSpec, PartSpecDoc)> {
        let width = model.width();
        let mut parts = Vec::with_capacity(self.parts.len());
        let mut resolved = self.clone();
        for (i, p) in self.parts.iter().enumerate() {
            let tokens = model
                .tokens(&p.prompt)
                .map_err(|e| Error::validation(format!("parts[{i}].prompt"), e.to_string()))?;
            let mask = match (&p.joints, &p.mask) {
                (Some(names), None) => {
                    if skeleton.joints() != model.layout.joints {
                        return Err(Error::validation(
                            format!("parts[{i}].joints"),
                            "joint names need a layout over the default skeleton; give a mask",
                        ));
                    }
                    let ids = names
                        .iter()
                        .enumerate()
                        .map(|(k, n)| {
                            skeleton.names.iter().position(|s| s == n).ok_or_else(|| {
                                Error::validation(
                                    format!("parts[{i}].joints[{k}]"),
                                    format!("unknown joint `{n}`"),
                                )
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    model.layout.joint_mask(&ids)
                }
                (None, Some(bits)) => {
                    if bits.len() != width {
                        return Err(Error::validation(
                            format!("parts[{i}].mask"),
                            format!("has {} entries, motion has {width} channels", bits.len()),
                        ));
                    }
                    bits.iter()
                        .enumerate()
                        .map(|(c, &b)| match b {
                            0 => Ok(false),
                            1 => Ok(true),
                            _ => Err(Error::validation(
                                format!("parts[{i}].mask[{c}]"),
                                "must be 0 or 1",
                            )),
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                _ => {
                    return Err(Error::validation(
                        format!("parts[{i}]"),
                        "give exactly one of joints or mask",
                    ))
                }
            };
            resolved.parts[i].mask = Some(mask.iter().map(|&b| b as u8).collect());
            parts.push(BodyPart { tokens, mask });
        }
        let spec = PartSpec {
            parts,
            lambda1: self.lambda1,
            correction: self.correction,
        };
        spec.validate(width)
            .map_err(|e| Error::validation("parts", e.to_string()))?;
        Ok((spec, resolved))
    }
}

pub fn cmd_sample_parts(
    model: &TrainedModel,
    doc: &PartSpecDoc,
    opts: &SampleOptions,
    out: &Path,
) -> Result<Vec<MotionSeq>> {
    opts.validate()?;
    let (spec, resolved) = doc.resolve(model, &Skeleton::default())?;
    let seeds = item_seeds(opts.seed, opts.count);
    let motions = run_chunked(&seeds, opts.workers, |s| {
        model.sample_parts(&spec, opts.length, s, NoiseMode::Stochastic)
    })?;
    let label = resolved
        .parts
        .iter()
        .map(|p| p.prompt.as_str())
        .collect::<Vec<_>>()
        .join(" | ");
    write_samples(out, model, &motions, &vec![label; opts.count], &seeds)?;
    write_json(
        &out.join(SIDECAR_FILE),
        &Sidecar {
            command: "sample-parts",
            checkpoint_hash: &model.config_hash,
            seed: opts.seed,
            length: opts.length,
            count: opts.count,
            item_seeds: &seeds,
            spec: &resolved,
        },
    )?;
    Ok(motions)
}

/// Frames `start..=end` (1-indexed) follow `prompt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalDoc {
    pub prompt: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineSpecDoc {
    pub intervals: Vec<IntervalDoc>,
    pub total_length: usize,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default)]
    pub correction: Correction,
}

impl TimelineSpecDoc {
    pub fn resolve(&self, model: &TrainedModel) -> Result<TimelineSpec> {
        let intervals = self
            .intervals
            .iter()
            .enumerate()
            .map(|(i, iv)| {
                Ok(Interval {
                    tokens: model.tokens(&iv.prompt).map_err(|e| {
                        Error::validation(format!("intervals[{i}].prompt"), e.to_string())
                    })?,
                    start: iv.start,
                    end: iv.end,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = TimelineSpec {
            intervals,
            total_length: self.total_length,
            lambda2: self.lambda2,
            correction: self.correction,
        };
        spec.validate()
            .map_err(|e| Error::validation("intervals", e.to_string()))?;
        Ok(spec)
    }
}

/// `opts.length` must equal the spec's total length.
pub fn cmd_sample_timeline(
    model: &TrainedModel,
    doc: &TimelineSpecDoc,
    opts: &SampleOptions,
    out: &Path,
) -> Result<Vec<MotionSeq>> {
    opts.validate()?;
    if opts.length != doc.total_length {
        return Err(Error::validation(
            "total_length",
            format!(
                "spec has {} frames, requested length is {}",
                doc.total_length, opts.length
            ),
        ));
    }
    let spec = doc.resolve(model)?;
    let seeds = item_seeds(opts.seed, opts.count);
    let motions = run_chunked(&seeds, opts.workers, |s| {
        model.sample_timeline(&spec, s, NoiseMode::Stochastic)
    })?;
    let label = doc
        .intervals
        .iter()
        .map(|iv| iv.prompt.as_str())
        .collect::<Vec<_>>()
        .join(" | ");
    write_samples(out, model, &motions, &vec![label; opts.count], &seeds)?;
    write_json(
        &out.join(SIDECAR_FILE),
        &Sidecar {
            command: "sample-timeline",
            checkpoint_hash: &model.config_hash,
            seed: opts.seed,
            length: opts.length,
            count: opts.count,
            item_seeds: &seeds,
            spec: doc,
        },
    )?;
    Ok(motions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fid,
    Diversity,
    Multimodality,
    RPrecision,
    OracleAccuracy,
    OracleMargin,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Fid,
        Metric::Diversity,
        Metric::Multimodality,
        Metric::RPrecision,
        Metric::OracleAccuracy,
        Metric::OracleMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fid => "fid",
            Metric::Diversity => "diversity",
            Metric::Multimodality => "multimodality",
            Metric::RPrecision => "r_precision",
            Metric::OracleAccuracy => "oracle_accuracy",
            Metric::OracleMargin => "oracle_margin",
        }
    }

    /// Comma-separated names; empty means every metric.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            let m = Metric::ALL
                .into_iter()
                .find(|m| m.name() == name)
                .ok_or_else(|| Error::validation("metrics", format!("unknown metric `{name}`")))?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            out = Metric::ALL.to_vec();
        }
        out.sort();
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    /// Items entering one run.
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
    pub runs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub runs: usize,
    pub generated: usize,
    pub reference: usize,
    pub metrics: Vec<MetricReport>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn to_json(&self) -> Result<String> {
        json_text(self)
    }
}

fn metric_rng(seed: u64, run: usize, metric: Metric) -> ChaCha8Rng {
    let id = Metric::ALL
        .iter()
        .position(|&m| m == metric)
        .expect("listed") as u64;
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, run as u64), id))
}

fn bootstrap<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Scores `gen_dir` against `ref_dir` over [`EVAL_RUNS`] runs with derived
/// seeds. The oracle uses the corpus spec embedded in the reference
/// manifest, or the default spec when there is none.
pub fn cmd_eval(
    gen_dir: &Path,
    ref_dir: &Path,
    metrics: &[Metric],
    seed: u64,
) -> Result<EvalReport> {
    let gen = load_motion_set(gen_dir)?;
    let reference = load_motion_set(ref_dir)?;
    if gen.motions.is_empty() {
        return Err(Error::argument(format!(
            "{} holds no motions",
            gen_dir.display()
        )));
    }
    if reference.motions.is_empty() {
        return Err(Error::argument(format!(
            "{} holds no motions",
            ref_dir.display()
        )));
    }
    if gen.manifest.layout != reference.manifest.layout {
        return Err(Error::Integrity(
            "generated and reference motions use different layouts".into(),
        ));
    }
    let spec = reference.manifest.corpus_spec.clone().unwrap_or_default();
    let sk = &spec.skeleton;
    let config_hash = sha_hex(&[
        gen.digest.as_bytes(),
        reference.digest.as_bytes(),
        &seed.to_le_bytes(),
    ]);
    let gen_motions: Vec<MotionSeq> = gen.motions.iter().map(|(_, m)| m.clone()).collect();

    let needs_oracle = metrics.iter().any(|m| {
        matches!(
            m,
            Metric::RPrecision | Metric::OracleAccuracy | Metric::OracleMargin
        )
    });
    let verdicts = if needs_oracle {
        gen.motions
            .iter()
            .map(|(p, m)| {
                let class = spec.class_of_prompt(p).ok_or_else(|| {
                    Error::argument(format!("prompt `{p}` is not a corpus class"))
                })?;
                Ok((class, eval::oracle_classify(m, &spec, None)?))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut reports = Vec::new();
    let mut push = |name: String, n: usize, runs: Vec<f64>| -> Result<()> {
        let s = RunSummary::from_runs(runs)?;
        reports.push(MetricReport {
            metric: name,
            value: s.mean,
            ci95_low: s.ci_low,
            ci95_high: s.ci_high,
            n,
            seed,
            config_hash: config_hash.clone(),
            runs: s.runs,
        });
        Ok(())
    };

    for &metric in metrics {
        match metric {
            Metric::Fid => {
                let fa = features(&gen_motions, sk)?;
                let rb: Vec<MotionSeq> = reference.motions.iter().map(|(_, m)| m.clone()).collect();
                let fb = features(&rb, sk)?;
                let v = eval::fid(&fa, &fb)?;
                push("fid".into(), fa.len(), vec![v; EVAL_RUNS])?;
            }
            Metric::Diversity => {
                let runs = (0..EVAL_RUNS)
                    .map(|r| {
                        eval::diversity(
                            &gen_motions,
                            sk,
                            DIVERSITY_PAIRS,
                            &mut metric_rng(seed, r, metric),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                push(
                    "diversity".into(),
                    DIVERSITY_PAIRS.min(gen_motions.len() / 2),
                    runs,
                )?;
            }
            Metric::Multimodality => {
                let mut groups: BTreeMap<&str, Vec<&MotionSeq>> = BTreeMap::new();
                for (p, m) in &gen.motions {
                    groups.entry(p.as_str()).or_default().push(m);
                }
                groups.retain(|_, g| g.len() >= 2);
                if groups.is_empty() {
                    return Err(Error::argument(
                        "multimodality needs at least two motions for some prompt",
                    ));
                }
                let mut n = 0;
                let runs = (0..EVAL_RUNS)
                    .map(|r| {
                        let mut rng = metric_rng(seed, r, metric);
                        let picked: Vec<Vec<MotionSeq>> = groups
                            .values()
                            .map(|g| {
                                let mut g = g.clone();
                                g.shuffle(&mut rng);
                                g.truncate(eval::DEFAULT_PER_PROMPT);
                                g.into_iter().cloned().collect()
                            })
                            .collect();
                        n = picked.iter().map(Vec::len).sum();
                        eval::multimodality_of_groups(&picked, sk)
                    })
                    .collect::<Result<Vec<_>>>()?;
                push("multimodality".into(), n, runs)?;
            }
            Metric::RPrecision => {
                for k in 1..=3.min(spec.templates.len() - 1) {
                    let runs = (0..EVAL_RUNS)
                        .map(|r| {
                            let idx = bootstrap(verdicts.len(), &mut metric_rng(seed, r, metric));
                            let hits = idx
                                .iter()
                                .filter(|&&i| verdicts[i].1.ranking[..k].contains(&verdicts[i].0))
                                .count();
                            hits as f64 / idx.len() as f64
                        })
                        .collect();
                    push(format!("r_precision_top{k}"), verdicts.len(), runs)?;
                }
            }
            Metric::OracleAccuracy => {
                let runs = (0..EVAL_RUNS)
                    .map(|r| {
                        let idx = bootstrap(verdicts.len(), &mut metric_rng(seed, r, metric));
                        let hits = idx
                            .iter()
                            .filter(|&&i| verdicts[i].1.class_id == verdicts[i].0)
                            .count();
                        hits as f64 / idx.len() as f64
                    })
                    .collect();
                push("oracle_accuracy".into(), verdicts.len(), runs)?;
            }
            Metric::OracleMargin => {
                let margins: Vec<f64> = verdicts
                    .iter()
                    .map(|(c, v)| true_class_margin(*c, &v.distances))
                    .collect();
                let runs = (0..EVAL_RUNS)
                    .map(|r| {
                        let idx = bootstrap(margins.len(), &mut metric_rng(seed, r, metric));
                        idx.iter().map(|&i| margins[i]).sum::<f64>() / idx.len() as f64
                    })
                    .collect();
                push("oracle_margin".into(), margins.len(), runs)?;
            }
        }
    }
    Ok(EvalReport {
        config_hash,
        seed,
        runs: EVAL_RUNS,
        generated: gen.motions.len(),
        reference: reference.motions.len(),
        metrics: reports,
    })
}

fn features(motions: &[MotionSeq], sk: &Skeleton) -> Result<Vec<Vec<f64>>> {
    motions
        .iter()
        .map(|m| eval::extract_features(m, sk))
        .collect()
}

/// Distance to the nearest wrong class minus distance to the true class;
/// positive when the oracle is right.
pub fn true_class_margin(class: usize, distances: &[f64]) -> f64 {
    let other = distances
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != class)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    other - distances[class]
}
