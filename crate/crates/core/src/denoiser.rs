//! Cross-modality linear transformer predicting the injected noise.
//!
//! A small classical transformer encodes the prompt. The motion decoder
//! stacks blocks of efficient self-attention, efficient cross-attention to
//! the text features and a feed-forward network. Each sub-block output is
//! modulated by a stylization block conditioned on `e = e_text + e_t` before
//! being added back to the residual stream. Layer normalization is applied
//! before every sub-block.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsModel, EpsQuery, InputView};
use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, Matrix, ParamId, ParamStore, Segments, Tape, Var};
use crate::text::TokenSeq;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_decoder_layers: usize,
    pub n_text_layers: usize,
    pub latent_dim_motion: usize,
    /// The text FFN hidden width is twice this.
    pub latent_dim_text: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub pose_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_decoder_layers: 8,
            n_text_layers: 4,
            latent_dim_motion: 512,
            latent_dim_text: 256,
            n_heads: 8,
            ffn_hidden: 1024,
            vocab_size: 64,
            max_text_len: 16,
            pose_dim: 24,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on a single CPU core in minutes.
    pub fn desk(pose_dim: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_decoder_layers: 4,
            n_text_layers: 4,
            latent_dim_motion: 64,
            latent_dim_text: 32,
            n_heads: 4,
            ffn_hidden: 128,
            vocab_size,
            max_text_len: 16,
            pose_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_decoder_layers", self.n_decoder_layers),
            ("latent_dim_motion", self.latent_dim_motion),
            ("latent_dim_text", self.latent_dim_text),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("pose_dim", self.pose_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("latent_dim_motion", self.latent_dim_motion),
            ("latent_dim_text", self.latent_dim_text),
        ] {
            if v % self.n_heads != 0 {
                return Err(Error::validation(field, "must be divisible by n_heads"));
            }
            if v % 2 != 0 {
                return Err(Error::validation(field, "must be even"));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), …]` with
/// `ω_i = 10000^(−2i/dim)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::argument(format!("embedding dim {dim} must be even")));
    }
    if t < 0.0 {
        return Err(Error::argument("embedding position must be non-negative"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}

/// Frame positions are stretched so the fastest sinusoid sits at the
/// Nyquist rate of the frame sequence.
const FRAME_POSITION_SCALE: f64 = std::f64::consts::PI;

/// Sinusoidal table over positions `0..len` of each segment, positions
/// multiplied by `scale` before embedding.
fn position_table(lengths: &[usize], dim: usize, scale: f64) -> Matrix {
    let rows: usize = lengths.iter().sum();
    let mut out = Matrix::zeros((rows, dim));
    let mut r = 0;
    for &len in lengths {
        for pos in 0..len {
            let emb = timestep_embedding(pos as f64 * scale, dim).expect("even dim");
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&emb));
            r += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Stylization {
    phi: Linear,
    psi_w: Linear,
    psi_b: Linear,
}

#[derive(Clone, Copy, Debug)]
struct TextBlock {
    ln_attn: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    ln_self: Norm,
    self_q: ParamId,
    self_k: ParamId,
    self_v: ParamId,
    style_self: Stylization,
    ln_cross: Norm,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
    style_cross: Stylization,
    ln_ffn: Norm,
    ffn: Ffn,
    style_ffn: Stylization,
}

/// Which stylization block inside a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleSite {
    SelfAttention,
    CrossAttention,
    FeedForward,
}

#[derive(Clone, Debug)]
struct Arch {
    token_embed: ParamId,
    text_blocks: Vec<TextBlock>,
    text_ln: Norm,
    text_pool: Linear,
    time_in: Linear,
    time_out: Linear,
    motion_in: Linear,
    blocks: Vec<DecoderBlock>,
    out_ln: Norm,
    motion_out: Linear,
}

type Declare<'a> = dyn FnMut(String, (usize, usize), Init) -> Result<ParamId> + 'a;

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Normal,
    Zeros,
    Ones,
}

impl Arch {
    /// Declares every parameter in a fixed order through `decl`.
    fn build(cfg: &ModelConfig, decl: &mut Declare) -> Result<Self> {
        let d = cfg.latent_dim_motion;
        let dt = cfg.latent_dim_text;
        let linear = |decl: &mut Declare,
                      name: &str,
                      i: usize,
                      o: usize,
                      w: Init,
                      b: Init|
         -> Result<Linear> {
            Ok(Linear {
                w: decl(format!("{name}.weight"), (i, o), w)?,
                b: decl(format!("{name}.bias"), (1, o), b)?,
            })
        };
        let norm = |decl: &mut Declare, name: &str, n: usize| -> Result<Norm> {
            Ok(Norm {
                gain: decl(format!("{name}.gain"), (1, n), Init::Ones)?,
                bias: decl(format!("{name}.bias"), (1, n), Init::Zeros)?,
            })
        };
        let token_embed = decl("text.embed".into(), (cfg.vocab_size, dt), Init::Normal)?;
        let mut text_blocks = Vec::new();
        for i in 0..cfg.n_text_layers {
            let p = format!("text.blocks.{i}");
            let h = 2 * dt;
            text_blocks.push(TextBlock {
                ln_attn: norm(decl, &format!("{p}.ln_attn"), dt)?,
                wq: decl(format!("{p}.attn.q"), (dt, dt), Init::Xavier)?,
                wk: decl(format!("{p}.attn.k"), (dt, dt), Init::Xavier)?,
                wv: decl(format!("{p}.attn.v"), (dt, dt), Init::Xavier)?,
                ln_ffn: norm(decl, &format!("{p}.ln_ffn"), dt)?,
                ffn: Ffn {
                    l1: linear(
                        decl,
                        &format!("{p}.ffn.0"),
                        dt,
                        h,
                        Init::Xavier,
                        Init::Zeros,
                    )?,
                    l2: linear(decl, &format!("{p}.ffn.1"), h, h, Init::Xavier, Init::Zeros)?,
                    l3: linear(
                        decl,
                        &format!("{p}.ffn.2"),
                        h,
                        dt,
                        Init::Xavier,
                        Init::Zeros,
                    )?,
                },
            });
        }
        let text_ln = norm(decl, "text.ln_out", dt)?;
        let text_pool = linear(decl, "text.pool", dt, d, Init::Xavier, Init::Zeros)?;
        let time_in = linear(decl, "time.0", d, d, Init::Xavier, Init::Zeros)?;
        let time_out = linear(decl, "time.1", d, d, Init::Xavier, Init::Zeros)?;
        let motion_in = linear(
            decl,
            "motion.in",
            cfg.pose_dim,
            d,
            Init::Xavier,
            Init::Zeros,
        )?;
        let mut blocks = Vec::new();
        for i in 0..cfg.n_decoder_layers {
            let p = format!("decoder.blocks.{i}");
            let style = |decl: &mut Declare, site: &str| -> Result<Stylization> {
                Ok(Stylization {
                    phi: linear(
                        decl,
                        &format!("{p}.{site}.phi"),
                        d,
                        d,
                        Init::Xavier,
                        Init::Zeros,
                    )?,
                    psi_w: linear(
                        decl,
                        &format!("{p}.{site}.psi_w"),
                        d,
                        d,
                        Init::Xavier,
                        Init::Ones,
                    )?,
                    psi_b: linear(
                        decl,
                        &format!("{p}.{site}.psi_b"),
                        d,
                        d,
                        Init::Zeros,
                        Init::Zeros,
                    )?,
                })
            };
            let style_self = style(decl, "style_self")?;
            let style_cross = style(decl, "style_cross")?;
            let style_ffn = style(decl, "style_ffn")?;
            let h = cfg.ffn_hidden;
            blocks.push(DecoderBlock {
                ln_self: norm(decl, &format!("{p}.ln_self"), d)?,
                self_q: decl(format!("{p}.self.q"), (d, d), Init::Xavier)?,
                self_k: decl(format!("{p}.self.k"), (d, d), Init::Xavier)?,
                self_v: decl(format!("{p}.self.v"), (d, d), Init::Xavier)?,
                style_self,
                ln_cross: norm(decl, &format!("{p}.ln_cross"), d)?,
                cross_q: decl(format!("{p}.cross.q"), (d, d), Init::Xavier)?,
                cross_k: decl(format!("{p}.cross.k"), (dt, d), Init::Xavier)?,
                cross_v: decl(format!("{p}.cross.v"), (dt, d), Init::Xavier)?,
                style_cross,
                ln_ffn: norm(decl, &format!("{p}.ln_ffn"), d)?,
                ffn: Ffn {
                    l1: linear(decl, &format!("{p}.ffn.0"), d, h, Init::Xavier, Init::Zeros)?,
                    l2: linear(decl, &format!("{p}.ffn.1"), h, h, Init::Xavier, Init::Zeros)?,
                    l3: linear(decl, &format!("{p}.ffn.2"), h, d, Init::Xavier, Init::Zeros)?,
                },
                style_ffn,
            });
        }
        let out_ln = norm(decl, "motion.ln_out", d)?;
        let motion_out = linear(
            decl,
            "motion.out",
            d,
            cfg.pose_dim,
            Init::Xavier,
            Init::Zeros,
        )?;
        Ok(Arch {
            token_embed,
            text_blocks,
            text_ln,
            text_pool,
            time_in,
            time_out,
            motion_in,
            blocks,
            out_ln,
            motion_out,
        })
    }
}

/// Text-encoder output for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    /// `L × latent_dim_text`, one row per token position including padding.
    pub features: Matrix,
    /// Number of leading unmasked positions.
    pub valid: usize,
    /// `1 × latent_dim_motion`: affine map of the mean over unmasked rows.
    pub pooled: Matrix,
}

/// Learnable weights of the text encoder and motion decoder.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    cfg: ModelConfig,
    store: ParamStore,
    arch: Arch,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.store == other.store
    }
}

/// Parameters bound as leaves on a particular tape.
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// One item of a packed decoder batch.
#[derive(Clone, Copy, Debug)]
pub struct DecoderItem<'a> {
    pub frames: usize,
    pub t: usize,
    pub tokens: &'a TokenSeq,
}

impl DenoiserParams {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = Arch::build(cfg, &mut |name, (r, c), init| {
            let m = match init {
                Init::Zeros => Matrix::zeros((r, c)),
                Init::Ones => Matrix::ones((r, c)),
                Init::Xavier => {
                    let a = (6.0 / (r + c) as f64).sqrt();
                    Array2::from_shape_simple_fn((r, c), || rng.random_range(-a..a))
                }
                Init::Normal => Array2::from_shape_simple_fn((r, c), || rng.sample(StandardNormal)),
            };
            Ok(store.register(name, m))
        })?;
        Ok(DenoiserParams {
            cfg: cfg.clone(),
            store,
            arch,
        })
    }

    /// Rebuilds from a parameter store, checking every name and shape.
    pub fn from_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut expected = 0usize;
        let arch = Arch::build(cfg, &mut |name, shape, _| {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))?;
            if store.get(id).dim() != shape {
                return Err(Error::Integrity(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).dim()
                )));
            }
            expected += 1;
            Ok(id)
        })?;
        if expected != store.len() {
            return Err(Error::Integrity(format!(
                "parameter store has {} entries, model declares {expected}",
                store.len()
            )));
        }
        Ok(DenoiserParams {
            cfg: cfg.clone(),
            store,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.store.bind(tape))
    }

    fn check_tokens(&self, tokens: &TokenSeq) -> Result<()> {
        if tokens.len() > self.cfg.max_text_len {
            return Err(Error::argument(format!(
                "prompt has {} tokens, limit is {}",
                tokens.len(),
                self.cfg.max_text_len
            )));
        }
        if tokens.valid() == 0 {
            return Err(Error::argument("prompt has no unmasked tokens"));
        }
        if let Some(&id) = tokens.ids().iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::argument(format!(
                "token id {id} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, l: Linear, x: Var) -> Var {
        let y = tape.matmul(x, p.get(l.w));
        tape.add_row(y, p.get(l.b))
    }

    fn layer_norm(&self, tape: &mut Tape, p: &Bound, n: Norm, x: Var) -> Var {
        let y = tape.normalize_rows(x, LN_EPS);
        let y = tape.mul_row(y, p.get(n.gain));
        tape.add_row(y, p.get(n.bias))
    }

    fn ffn(&self, tape: &mut Tape, p: &Bound, f: Ffn, x: Var) -> Var {
        let h = self.linear(tape, p, f.l1, x);
        let h = tape.gelu(h);
        let h = self.linear(tape, p, f.l2, h);
        let h = tape.gelu(h);
        self.linear(tape, p, f.l3, h)
    }

    /// `Y ⊙ ψ_w(φ(e)) + ψ_b(φ(e))` with one conditioning row per segment.
    fn stylize_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        s: Stylization,
        y: Var,
        e: Var,
        segs: &Rc<Segments>,
    ) -> Var {
        let h = self.linear(tape, p, s.phi, e);
        let h = tape.silu(h);
        let w = self.linear(tape, p, s.psi_w, h);
        let b = self.linear(tape, p, s.psi_b, h);
        let w = tape.expand_rows(w, segs);
        let b = tape.expand_rows(b, segs);
        let y = tape.mul(y, w);
        tape.add(y, b)
    }

    /// Encodes a batch of prompts packed along rows. Returns the per-row
    /// features, their segments and the pooled `B × d` text embedding.
    fn text_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prompts: &[&TokenSeq],
    ) -> Result<(Var, Rc<Segments>, Var)> {
        for t in prompts {
            self.check_tokens(t)?;
        }
        let dt = self.cfg.latent_dim_text;
        let heads = self.cfg.n_heads;
        let segs = Rc::new(Segments::from_padded(
            &prompts
                .iter()
                .map(|t| (t.len(), t.valid()))
                .collect::<Vec<_>>(),
        ));
        let ids: Vec<usize> = prompts
            .iter()
            .flat_map(|t| t.ids().iter().copied())
            .collect();
        tape.set_scope("text encoder");
        let emb = tape.gather(p.get(self.arch.token_embed), &ids);
        let lengths: Vec<usize> = prompts.iter().map(|t| t.len()).collect();
        let pos = tape.leaf(position_table(&lengths, dt, 1.0));
        let mut h = tape.add(emb, pos);
        for (i, blk) in self.arch.text_blocks.iter().enumerate() {
            tape.set_scope(format!("text block {i}"));
            let a = self.layer_norm(tape, p, blk.ln_attn, h);
            let q = tape.matmul(a, p.get(blk.wq));
            let k = tape.matmul(a, p.get(blk.wk));
            let v = tape.matmul(a, p.get(blk.wv));
            let y = tape.softmax_attention(q, k, v, heads, &segs);
            h = tape.add(h, y);
            let a = self.layer_norm(tape, p, blk.ln_ffn, h);
            let y = self.ffn(tape, p, blk.ffn, a);
            h = tape.add(h, y);
        }
        tape.set_scope("text pooling");
        let feats = self.layer_norm(tape, p, self.arch.text_ln, h);
        let mean = tape.segment_mean(feats, &segs);
        let pooled = self.linear(tape, p, self.arch.text_pool, mean);
        Ok((feats, segs, pooled))
    }

    /// `B × d` timestep embedding: sinusoid followed by a two-layer MLP.
    fn time_on_tape(&self, tape: &mut Tape, p: &Bound, steps: &[usize]) -> Result<Var> {
        let d = self.cfg.latent_dim_motion;
        let mut raw = Matrix::zeros((steps.len(), d));
        for (r, &t) in steps.iter().enumerate() {
            let emb = timestep_embedding(t as f64, d)?;
            raw.row_mut(r).assign(&ndarray::ArrayView1::from(&emb));
        }
        tape.set_scope("timestep embedding");
        let h = tape.leaf(raw);
        let h = self.linear(tape, p, self.arch.time_in, h);
        let h = tape.silu(h);
        Ok(self.linear(tape, p, self.arch.time_out, h))
    }

    /// Records the full denoiser on `tape` for a packed input `x`
    /// (rows are the concatenated frames of `items`). Returns the packed
    /// `N × D` noise prediction.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        items: &[DecoderItem<'_>],
    ) -> Result<Var> {
        let d = self.cfg.latent_dim_motion;
        let heads = self.cfg.n_heads;
        let frames: Vec<usize> = items.iter().map(|i| i.frames).collect();
        if frames.contains(&0) {
            return Err(Error::argument("motion must have at least one frame"));
        }
        let xv = tape.value(x);
        if xv.nrows() != frames.iter().sum::<usize>() || xv.ncols() != self.cfg.pose_dim {
            return Err(Error::argument(format!(
                "motion input of shape {:?} does not match {} frames of width {}",
                xv.dim(),
                frames.iter().sum::<usize>(),
                self.cfg.pose_dim
            )));
        }
        ensure_finite(xv.iter(), "denoiser input")?;
        let prompts: Vec<&TokenSeq> = items.iter().map(|i| i.tokens).collect();
        let (text, text_segs, e_text) = self.text_on_tape(tape, p, &prompts)?;

        let steps: Vec<usize> = items.iter().map(|i| i.t).collect();
        let e_t = self.time_on_tape(tape, p, &steps)?;
        let e = tape.add(e_text, e_t);

        let segs = Rc::new(Segments::from_lengths(&frames));
        tape.set_scope("motion input");
        let h = self.linear(tape, p, self.arch.motion_in, x);
        let pos = tape.leaf(position_table(&frames, d, FRAME_POSITION_SCALE));
        let mut h = tape.add(h, pos);
        for (i, blk) in self.arch.blocks.iter().enumerate() {
            tape.set_scope(format!("decoder block {i}"));
            let a = self.layer_norm(tape, p, blk.ln_self, h);
            let q = tape.matmul(a, p.get(blk.self_q));
            let k = tape.matmul(a, p.get(blk.self_k));
            let v = tape.matmul(a, p.get(blk.self_v));
            let y = tape.efficient_attention(q, k, v, heads, &segs, &segs);
            let y = self.stylize_on_tape(tape, p, blk.style_self, y, e, &segs);
            h = tape.add(h, y);

            let a = self.layer_norm(tape, p, blk.ln_cross, h);
            let q = tape.matmul(a, p.get(blk.cross_q));
            let k = tape.matmul(text, p.get(blk.cross_k));
            let v = tape.matmul(text, p.get(blk.cross_v));
            let y = tape.efficient_attention(q, k, v, heads, &segs, &text_segs);
            let y = self.stylize_on_tape(tape, p, blk.style_cross, y, e, &segs);
            h = tape.add(h, y);

            let a = self.layer_norm(tape, p, blk.ln_ffn, h);
            let y = self.ffn(tape, p, blk.ffn, a);
            let y = self.stylize_on_tape(tape, p, blk.style_ffn, y, e, &segs);
            h = tape.add(h, y);
            tape.check()?;
        }
        tape.set_scope("motion output");
        let a = self.layer_norm(tape, p, self.arch.out_ln, h);
        let out = self.linear(tape, p, self.arch.motion_out, a);
        tape.check()?;
        Ok(out)
    }

    /// Noise prediction for a single sequence.
    pub fn denoise(&self, x_t: &Matrix, t: usize, tokens: &TokenSeq) -> Result<Matrix> {
        Ok(self.predict(&[EpsQuery { x: x_t, t, tokens }])?.remove(0))
    }

    pub fn encode_text(&self, tokens: &TokenSeq) -> Result<TextFeatures> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let (feats, _, pooled) = self.text_on_tape(&mut tape, &p, &[tokens])?;
        tape.check()?;
        Ok(TextFeatures {
            features: tape.value(feats).clone(),
            valid: tokens.valid(),
            pooled: tape.value(pooled).clone(),
        })
    }

    /// Conditioning vector `e = e_text + e_t` (`1 × d`).
    pub fn conditioning(&self, text: &TextFeatures, t: usize) -> Result<Matrix> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let e_t = self.time_on_tape(&mut tape, &p, &[t])?;
        Ok(&text.pooled + tape.value(e_t))
    }

    fn check_block(&self, block: usize, x: &Matrix) -> Result<()> {
        if block >= self.arch.blocks.len() {
            return Err(Error::argument(format!("no decoder block {block}")));
        }
        if x.ncols() != self.cfg.latent_dim_motion || x.nrows() == 0 {
            return Err(Error::argument(format!(
                "features of shape {:?} do not match latent width {}",
                x.dim(),
                self.cfg.latent_dim_motion
            )));
        }
        Ok(())
    }

    /// Efficient self-attention of decoder block `block` applied to raw
    /// `F × d` features (no normalization or stylization).
    pub fn self_attention(&self, block: usize, x: &Matrix) -> Result<Matrix> {
        self.check_block(block, x)?;
        let blk = self.arch.blocks[block];
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let q = tape.matmul(xv, p.get(blk.self_q));
        let k = tape.matmul(xv, p.get(blk.self_k));
        let v = tape.matmul(xv, p.get(blk.self_v));
        let segs = Rc::new(Segments::from_lengths(&[x.nrows()]));
        let y = tape.efficient_attention(q, k, v, self.cfg.n_heads, &segs, &segs);
        tape.check()?;
        Ok(tape.value(y).clone())
    }

    /// Efficient cross-attention of decoder block `block` from `F × d`
    /// motion features to encoded text.
    pub fn cross_attention(&self, block: usize, x: &Matrix, text: &TextFeatures) -> Result<Matrix> {
        self.check_block(block, x)?;
        if text.valid == 0 {
            return Err(Error::argument("cross-attention over fully masked text"));
        }
        let blk = self.arch.blocks[block];
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let tv = tape.leaf(text.features.clone());
        let q = tape.matmul(xv, p.get(blk.cross_q));
        let k = tape.matmul(tv, p.get(blk.cross_k));
        let v = tape.matmul(tv, p.get(blk.cross_v));
        let q_segs = Rc::new(Segments::from_lengths(&[x.nrows()]));
        let kv_segs = Rc::new(Segments::from_padded(&[(
            text.features.nrows(),
            text.valid,
        )]));
        let y = tape.efficient_attention(q, k, v, self.cfg.n_heads, &q_segs, &kv_segs);
        tape.check()?;
        Ok(tape.value(y).clone())
    }

    /// Stylization block `site` of decoder block `block`: `Y ⊙ W + B`.
    pub fn stylize(&self, block: usize, site: StyleSite, y: &Matrix, e: &Matrix) -> Result<Matrix> {
        self.check_block(block, y)?;
        if e.dim() != (1, self.cfg.latent_dim_motion) {
            return Err(Error::argument("conditioning vector has the wrong width"));
        }
        let blk = self.arch.blocks[block];
        let s = match site {
            StyleSite::SelfAttention => blk.style_self,
            StyleSite::CrossAttention => blk.style_cross,
            StyleSite::FeedForward => blk.style_ffn,
        };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let yv = tape.leaf(y.clone());
        let ev = tape.leaf(e.clone());
        let segs = Rc::new(Segments::from_lengths(&[y.nrows()]));
        let out = self.stylize_on_tape(&mut tape, &p, s, yv, ev, &segs);
        tape.check()?;
        Ok(tape.value(out).clone())
    }

    /// Sets the stylization weights of one site so that `W = 1, B = 0`.
    pub fn set_identity_stylization(&mut self, block: usize, site: StyleSite) {
        let blk = self.arch.blocks[block];
        let s = match site {
            StyleSite::SelfAttention => blk.style_self,
            StyleSite::CrossAttention => blk.style_cross,
            StyleSite::FeedForward => blk.style_ffn,
        };
        self.store.get_mut(s.psi_w.w).fill(0.0);
        self.store.get_mut(s.psi_w.b).fill(1.0);
        self.store.get_mut(s.psi_b.w).fill(0.0);
        self.store.get_mut(s.psi_b.b).fill(0.0);
    }
}

/// Packs queries into one matrix and one item list.
pub fn pack_queries<'a>(queries: &[EpsQuery<'a>]) -> (Matrix, Vec<DecoderItem<'a>>) {
    let width = queries.first().map_or(0, |q| q.x.ncols());
    let rows: usize = queries.iter().map(|q| q.x.nrows()).sum();
    let mut packed = Matrix::zeros((rows, width));
    let mut r = 0;
    let mut items = Vec::with_capacity(queries.len());
    for q in queries {
        packed
            .slice_mut(ndarray::s![r..r + q.x.nrows(), ..])
            .assign(q.x);
        r += q.x.nrows();
        items.push(DecoderItem {
            frames: q.x.nrows(),
            t: q.t,
            tokens: q.tokens,
        });
    }
    (packed, items)
}

/// Splits a packed `N × D` matrix back into per-item blocks.
pub fn unpack_rows(packed: &Matrix, frames: impl IntoIterator<Item = usize>) -> Vec<Matrix> {
    let mut r = 0;
    frames
        .into_iter()
        .map(|f| {
            let block = packed.slice(ndarray::s![r..r + f, ..]).to_owned();
            r += f;
            block
        })
        .collect()
}

impl EpsModel for DenoiserParams {
    fn predict(&self, queries: &[EpsQuery<'_>]) -> Result<Vec<Matrix>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        if queries.iter().any(|q| q.x.ncols() != self.cfg.pose_dim) {
            return Err(Error::argument(format!(
                "motion width does not match pose_dim {}",
                self.cfg.pose_dim
            )));
        }
        let (packed, items) = pack_queries(queries);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.leaf(packed);
        let out = self.forward(&mut tape, &p, x, &items)?;
        Ok(unpack_rows(tape.value(out), items.iter().map(|i| i.frames)))
    }

    fn input_gradient(
        &self,
        x: &Matrix,
        t: usize,
        views: &[InputView<'_>],
        energy: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> Result<Matrix> {
        if views
            .iter()
            .any(|v| v.len == 0 || v.start + v.len > x.nrows())
        {
            return Err(Error::argument("input view outside the motion"));
        }
        let total: usize = views.iter().map(|v| v.len).sum();
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let leaf = tape.leaf(x.clone());
        let mut packed: Option<Var> = None;
        let mut offset = 0;
        for v in views {
            let rows = tape.slice_rows(leaf, v.start, v.len);
            let placed = tape.pad_rows(rows, offset, total);
            packed = Some(match packed {
                Some(acc) => tape.add(acc, placed),
                None => placed,
            });
            offset += v.len;
        }
        let Some(packed) = packed else {
            return Ok(Matrix::zeros(x.raw_dim()));
        };
        let items: Vec<DecoderItem<'_>> = views
            .iter()
            .map(|v| DecoderItem {
                frames: v.len,
                t,
                tokens: v.tokens,
            })
            .collect();
        let out = self.forward(&mut tape, &p, packed, &items)?;
        let mut offset = 0;
        let preds: Vec<Var> = views
            .iter()
            .map(|v| {
                let y = tape.slice_rows(out, offset, v.len);
                offset += v.len;
                y
            })
            .collect();
        let e = energy(&mut tape, &preds);
        tape.check()?;
        let mut grads = tape.backward(e)?;
        Ok(grads
            .take(leaf)
            .unwrap_or_else(|| Matrix::zeros(x.raw_dim())))
    }
}
