//! Upsampling whole degraded videos with a trained denoiser, clip by clip.

use crate::degrade::observation_mask;
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::geom::DepthVideo;
use crate::rng::Prng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleConfig {
    pub steps: usize,
    /// Frames per denoiser call; longer videos are split into consecutive clips.
    pub clip: usize,
    /// Sample every frame on its own (single-frame image mode).
    pub ablate_frames: bool,
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        Self { steps: 32, clip: 10, ablate_frames: false, stochastic: true, seed: 0 }
    }
}

/// Inpaint the empty pixels of `y`, conditioning on its observation mask.
/// Known pixels and projection meta are carried over unchanged.
pub fn upsample<T: Element>(model: &dyn NoisePredictor<T>, y: &DepthVideo, cfg: &UpsampleConfig) -> Result<DepthVideo> {
    if cfg.clip < 1 {
        return Err(Error::invalid("clip length must be at least 1"));
    }
    let clip = if cfg.ablate_frames { 1 } else { cfg.clip };
    let sched = NoiseSchedule::default();
    let seeds = Prng::new(cfg.seed).fork("upsample");
    let mut parts = Vec::new();
    let mut start = 0;
    while start < y.frames() {
        let len = clip.min(y.frames() - start);
        let part = y.window(start, len)?;
        let m = observation_mask(&part).to_tensor::<T>();
        let sc = SamplerConfig {
            steps: cfg.steps,
            stochastic: cfg.stochastic,
            seed: seeds.fork_index(start as u64).next_u64(),
            ..Default::default()
        };
        let out = sample(&sched, &part.depth.cast::<T>(), &m, &sc, model)?;
        parts.push(out.cast::<f32>());
        start += len;
    }
    let mut out = DepthVideo::new(Tensor::stack0(&parts)?)?;
    // the f32 round trip cannot move known pixels, but make it explicit
    for (o, &v) in out.depth.data_mut().iter_mut().zip(y.depth.data()) {
        if v > 0.0 {
            *o = v;
        }
    }
    out.meta = y.meta.clone();
    Ok(out)
}
