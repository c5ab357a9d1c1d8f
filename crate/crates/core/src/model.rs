//! A trained denoiser bundled with what it needs to produce motions in data
//! space: vocabulary, standardization statistics, layout and schedule.

use crate::control::{sample_parts, sample_timeline, PartSpec, TimelineSpec};
use crate::denoiser::DenoiserParams;
use crate::diffusion::{sample_batch, NoiseMode, SampleRequest, Schedule};
use crate::error::{Error, Result};
use crate::motion::{MotionSeq, PoseLayout, Standardizer};
use crate::numerics::Matrix;
use crate::text::{TokenSeq, Vocabulary};
use crate::train::Checkpoint;

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: DenoiserParams,
    pub vocab: Vocabulary,
    pub stats: Standardizer,
    pub layout: PoseLayout,
    pub fps: f64,
    pub schedule: Schedule,
    pub config_hash: String,
}

impl TrainedModel {
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let schedule = ck.schedule.build()?;
        let width = ck.layout.pose_dim();
        if ck.stats.width() != width || ck.params.config().pose_dim != width {
            return Err(Error::Integrity(format!(
                "checkpoint widths disagree: layout {width}, stats {}, model {}",
                ck.stats.width(),
                ck.params.config().pose_dim
            )));
        }
        Ok(TrainedModel {
            params: ck.params,
            vocab: ck.vocab,
            stats: ck.stats,
            layout: ck.layout,
            fps: ck.fps,
            schedule,
            config_hash: ck.config_hash,
        })
    }

    pub fn width(&self) -> usize {
        self.layout.pose_dim()
    }

    pub fn tokens(&self, prompt: &str) -> Result<TokenSeq> {
        let tokens = self.vocab.encode(prompt)?;
        if tokens.len() > self.params.config().max_text_len {
            return Err(Error::argument(format!(
                "prompt has {} words, model accepts {}",
                tokens.len(),
                self.params.config().max_text_len
            )));
        }
        Ok(tokens)
    }

    fn finish(&self, states: Vec<Matrix>) -> Result<Vec<MotionSeq>> {
        states
            .into_iter()
            .map(|x| MotionSeq::new(self.layout.clone(), self.stats.denormalize(&x)?, self.fps))
            .collect()
    }

    /// One motion per seed, all for `prompt`.
    pub fn sample(
        &self,
        prompt: &str,
        frames: usize,
        seeds: &[u64],
        mode: NoiseMode,
    ) -> Result<Vec<MotionSeq>> {
        let tokens = self.tokens(prompt)?;
        let requests: Vec<SampleRequest> = seeds
            .iter()
            .map(|&seed| SampleRequest {
                tokens: tokens.clone(),
                frames,
                seed,
            })
            .collect();
        self.sample_requests(&requests, mode)
    }

    /// Heterogeneous batch of prompts, lengths and seeds.
    pub fn sample_requests(
        &self,
        requests: &[SampleRequest],
        mode: NoiseMode,
    ) -> Result<Vec<MotionSeq>> {
        let states = sample_batch(&self.params, requests, self.width(), &self.schedule, mode)?;
        self.finish(states)
    }

    pub fn sample_parts(
        &self,
        spec: &PartSpec,
        frames: usize,
        seeds: &[u64],
        mode: NoiseMode,
    ) -> Result<Vec<MotionSeq>> {
        let states = sample_parts(
            &self.params,
            spec,
            frames,
            self.width(),
            &self.schedule,
            seeds,
            mode,
        )?;
        self.finish(states)
    }

    pub fn sample_timeline(
        &self,
        spec: &TimelineSpec,
        seeds: &[u64],
        mode: NoiseMode,
    ) -> Result<Vec<MotionSeq>> {
        let states = sample_timeline(
            &self.params,
            spec,
            self.width(),
            &self.schedule,
            seeds,
            mode,
        )?;
        self.finish(states)
    }
}
