//! Training loop: random windows and mask recipes per batch element, masked
//! ε-prediction loss, Adam updates and an EMA shadow of the weights.
//!
//! Every random draw of iteration `i`, element `b` comes from the stream
//! `seed / "train" / i / b`, so a run resumed from a checkpoint replays the
//! exact same batches as an uninterrupted one.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::degrade::{compose_and_apply, observation_mask, training_pool, Fraction, MaskRecipe};
use crate::denoiser::{BoundDenoiser, Denoiser, DenoiserSpec, Params};
use crate::diffusion::{masked_loss, to_diffusion, LossDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geom::DepthVideo;
use crate::io::{Container, Payload};
use crate::rng::Prng;
use crate::tensor::{DType, Element, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub frames: usize,
    pub ema_decay: f64,
    pub ema_interval: usize,
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `(keep_every, pepper_drop)` pairs drawn uniformly per batch element.
    pub recipe_pool: Vec<(usize, Fraction)>,
    /// Re-inject known pixels into the noisy latent before the denoiser call.
    pub reinject: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            iterations: 200,
            batch_size: 8,
            frames: 10,
            ema_decay: 0.995,
            ema_interval: 10,
            seed: 0,
            checkpoint_interval: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            recipe_pool: training_pool(),
            reinject: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay >= 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::invalid(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.frames < 1 || self.batch_size < 1 || self.ema_interval < 1 {
            return Err(Error::invalid("frames, batch_size and ema_interval must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.recipe_pool.is_empty() || self.recipe_pool.iter().any(|&(k, _)| k < 1) {
            return Err(Error::invalid("recipe pool must be non-empty with keep_every ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        let z: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: z.clone(), v: z, step: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("adam: parameter, gradient and state counts differ"));
    }
    for g in grads {
        g.ensure_finite("adam gradient")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (lr_t, c1, c2, eps) = (T::from_f64(lr), T::from_f64(c1), T::from_f64(c2), T::from_f64(eps));
    for i in 0..params.len() {
        grads[i].expect_same_shape(&params[i], "adam")?;
        let (p, m, v) = (params[i].data_mut(), state.m[i].data_mut(), state.v[i].data_mut());
        for (k, &g) in grads[i].data().iter().enumerate() {
            m[k] = b1 * m[k] + one_b1 * g;
            v[k] = b2 * v[k] + one_b2 * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·live`.
pub fn ema_update<T: Element>(live: &[Tensor<T>], shadow: &mut [Tensor<T>], decay: f64) -> Result<()> {
    if live.len() != shadow.len() {
        return Err(Error::invalid("ema: live and shadow counts differ"));
    }
    let (d, e) = (T::from_f64(decay), T::from_f64(1.0 - decay));
    for (l, s) in live.iter().zip(shadow.iter_mut()) {
        l.expect_same_shape(s, "ema_update")?;
        for (sv, &lv) in s.data_mut().iter_mut().zip(l.data()) {
            *sv = d * *sv + e * lv;
        }
    }
    Ok(())
}

/// One clean training sequence.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub id: String,
    pub video: DepthVideo,
}

/// Everything one batch element needs, fully determined by (seed, iteration, element).
struct Example<T> {
    x0: Tensor<T>,
    y: Tensor<T>,
    m: Tensor<T>,
    draw: LossDraw<T>,
}

fn make_example<T: Element>(data: &[TrainSequence], cfg: &TrainConfig, iteration: u64, element: u64) -> Result<Example<T>> {
    let mut rng = Prng::new(cfg.seed).fork("train").fork_index(iteration).fork_index(element);
    let seq = &data[rng.below(data.len())];
    let total = seq.video.frames();
    if total < cfg.frames {
        return Err(Error::invalid(format!("sequence {} has {total} frames, need {}", seq.id, cfg.frames)));
    }
    let start = rng.below(total - cfg.frames + 1);
    let clean = seq.video.window(start, cfg.frames)?;
    let recipe = MaskRecipe::sample_from(&cfg.recipe_pool, &mut rng)?;
    let label = format!("{}@{iteration}.{element}", seq.id);
    let (y, _) = compose_and_apply(&clean, &recipe, &label)?;
    let m = observation_mask(&y).to_tensor::<T>();
    let x0 = to_diffusion(&clean.depth.cast::<T>());
    let y = to_diffusion(&y.depth.cast::<T>());
    let draw = LossDraw::sample(&mut rng.fork("loss"), x0.shape());
    Ok(Example { x0, y, m, draw })
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub model: Denoiser<T>,
    pub ema: Params<T>,
    pub adam: AdamState<T>,
    /// Completed iterations.
    pub iteration: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(spec: &DenoiserSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::init(spec, config.seed)?;
        let ema = model.params.clone();
        let adam = AdamState::zeros_like(model.params.tensors());
        Ok(Self { config, schedule: NoiseSchedule::default(), model, ema, adam, iteration: 0 })
    }

    /// Mean loss and mean gradients over one batch, without updating.
    pub fn batch_gradients(&self, data: &[TrainSequence], iteration: u64) -> Result<(f64, Vec<Tensor<T>>)> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let per_element: Vec<Result<(f64, Vec<Tensor<T>>)>> = (0..self.config.batch_size as u64)
            .into_par_iter()
            .map(|b| {
                let ex = make_example::<T>(data, &self.config, iteration, b)?;
                let g = Graph::new();
                let bound = self.model.bind(&g, true)?;
                let net = BoundDenoiser { model: &self.model, bound: &bound };
                let loss =
                    masked_loss(&g, &self.schedule, &ex.x0, &ex.y, &ex.m, &ex.draw, &net, self.config.reinject)?;
                let value = g.value(loss).item()?.as_f64();
                let mut grads = g.backward(loss)?;
                let grads = bound.iter().map(|&v| grads.take(v).unwrap()).collect();
                Ok((value, grads))
            })
            .collect();
        // fixed index order keeps the sum independent of scheduling
        let mut total = 0.0;
        let mut sum: Option<Vec<Tensor<T>>> = None;
        for r in per_element {
            let (l, grads) = r?;
            total += l;
            sum = Some(match sum {
                None => grads,
                Some(acc) => acc
                    .iter()
                    .zip(&grads)
                    .map(|(a, g)| a.zip_map(g, |x, y| x + y))
                    .collect::<Result<_>>()?,
            });
        }
        let n = self.config.batch_size as f64;
        let scale = T::from_f64(1.0 / n);
        let grads = sum.unwrap().into_iter().map(|g| g.map(|v| v * scale)).collect();
        Ok((total / n, grads))
    }

    /// Run one iteration; returns the batch loss.
    pub fn step(&mut self, data: &[TrainSequence]) -> Result<f64> {
        let it = self.iteration;
        let at_iteration = |e: Error| match e {
            Error::NonFinite { op } => Error::NonFinite { op: format!("{op} at iteration {it}") },
            other => other,
        };
        let (loss, grads) = self.batch_gradients(data, it).map_err(at_iteration)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: format!("training loss at iteration {it}") });
        }
        let c = &self.config;
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam, c.learning_rate, c.beta1, c.beta2, c.adam_eps)
            .map_err(at_iteration)?;
        self.iteration += 1;
        if self.iteration.is_multiple_of(self.config.ema_interval as u64) {
            ema_update(self.model.params.tensors(), self.ema.tensors_mut(), self.config.ema_decay)?;
        }
        Ok(loss)
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Denoiser<T> {
        Denoiser::from_params(self.model.spec(), self.ema.clone()).expect("EMA layout mirrors the live model")
    }

    pub fn to_checkpoint(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push("spec", Payload::text(&self.model.spec().to_string()))?;
        c.push("train/iteration", Payload::F64(Tensor::scalar(self.iteration as f64)))?;
        c.push("train/frames", Payload::F64(Tensor::scalar(self.config.frames as f64)))?;
        c.push("train/adam_step", Payload::F64(Tensor::scalar(self.adam.step as f64)))?;
        let names = self.model.params.names();
        for (i, name) in names.iter().enumerate() {
            c.push(&format!("param/{name}"), to_payload(&self.model.params.tensors()[i]))?;
            c.push(&format!("ema/{name}"), to_payload(&self.ema.tensors()[i]))?;
            c.push(&format!("adam/m/{name}"), to_payload(&self.adam.m[i]))?;
            c.push(&format!("adam/v/{name}"), to_payload(&self.adam.v[i]))?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Container, config: TrainConfig) -> Result<Self> {
        let spec: DenoiserSpec = c.text("spec")?.parse()?;
        let mut t = Self::new(&spec, config)?;
        let names = t.model.params.names().to_vec();
        let load = |prefix: &str| -> Result<Vec<(String, Tensor<T>)>> {
            names.iter().map(|n| Ok((n.clone(), from_payload(c, &format!("{prefix}{n}"))?))).collect()
        };
        t.model.params.load(load("param/")?)?;
        t.ema.load(load("ema/")?)?;
        let mut m = t.ema.clone();
        m.load(load("adam/m/")?)?;
        let mut v = t.ema.clone();
        v.load(load("adam/v/")?)?;
        t.adam = AdamState { m: m.tensors().to_vec(), v: v.tensors().to_vec(), step: c.f64("train/adam_step")?.item()? as u64 };
        t.iteration = c.f64("train/iteration")?.item()? as u64;
        Ok(t)
    }

    /// Run until `config.iterations`, logging `iter\tloss\twallclock_ms` and
    /// writing checkpoints into `out_dir` when given.
    pub fn run(&mut self, data: &[TrainSequence], out_dir: Option<&Path>, mut on_step: impl FnMut(u64, f64)) -> Result<()> {
        let start = Instant::now();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        while self.iteration < self.config.iterations as u64 {
            let loss = self.step(data)?;
            let it = self.iteration;
            on_step(it, loss);
            if let Some(dir) = out_dir {
                let ms = start.elapsed().as_millis();
                crate::io::append_line(&dir.join("loss.log"), &format!("{it}\t{loss:.8}\t{ms}"))?;
                let every = self.config.checkpoint_interval as u64;
                if every > 0 && it.is_multiple_of(every) {
                    self.to_checkpoint()?.write(&dir.join(format!("checkpoint_{it:07}.gsu")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.to_checkpoint()?.write(&dir.join("checkpoint_final.gsu"))?;
        }
        Ok(())
    }
}

fn to_payload<T: Element>(t: &Tensor<T>) -> Payload {
    match T::DTYPE {
        DType::F64 => Payload::F64(t.cast()),
        _ => Payload::F32(t.cast()),
    }
}

fn from_payload<T: Element>(c: &Container, name: &str) -> Result<Tensor<T>> {
    match c.get(name) {
        Some(Payload::F32(t)) => Ok(t.cast()),
        Some(Payload::F64(t)) => Ok(t.cast()),
        Some(_) => Err(Error::format(format!("entry {name:?} is not a float tensor"))),
        None => Err(Error::format(format!("missing entry {name:?}"))),
    }
}

/// Denoiser from a checkpoint, using the EMA weights unless `live` is set.
pub fn load_model<T: Element>(c: &Container, live: bool) -> Result<Denoiser<T>> {
    let spec: DenoiserSpec = c.text("spec")?.parse()?;
    let mut model = Denoiser::<T>::init(&spec, 0)?;
    let prefix = if live { "param/" } else { "ema/" };
    let named = model
        .params
        .names()
        .iter()
        .map(|n| Ok((n.clone(), from_payload(c, &format!("{prefix}{n}"))?)))
        .collect::<Result<Vec<_>>>()?;
    model.params.load(named)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::zeros_like(&p);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 3e-4, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut s = AdamState::zeros_like(&p);
        adam_step(&mut p, &[Tensor::scalar(0.37)], &mut s, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        let expect = 1.0 - 1e-3 * 0.37 / (0.37 + 1e-8);
        assert!((p[0].item().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let mut s = AdamState::zeros_like(&p);
        assert!(adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 1e-3, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn ema_examples() {
        let live = vec![Tensor::scalar(0.0f64)];
        let mut shadow = vec![Tensor::scalar(1.0f64)];
        ema_update(&live, &mut shadow, 1.0).unwrap();
        assert_eq!(shadow[0].item().unwrap(), 1.0);
        ema_update(&live, &mut shadow, 0.995).unwrap();
        assert_eq!(shadow[0].item().unwrap(), 0.995);
        ema_update(&live, &mut shadow, 0.0).unwrap();
        assert_eq!(shadow[0].item().unwrap(), 0.0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let live = vec![Tensor::scalar(2.0f64)];
        let mut shadow = vec![Tensor::scalar(0.0f64)];
        for k in 1..=20 {
            ema_update(&live, &mut shadow, 0.9).unwrap();
            let gap = 2.0 - shadow[0].item().unwrap();
            assert!((gap - 2.0 * 0.9f64.powi(k)).abs() < 1e-12);
        }
    }
}
