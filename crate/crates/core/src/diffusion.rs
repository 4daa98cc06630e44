//! Continuous-time variance-preserving diffusion with an alpha-cosine
//! schedule, the masked conditional training loss and the ancestral
//! inpainting sampler.
//!
//! Depth values `d ∈ [0, 1]` live in the diffusion domain as `u = 2d − 1`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { t_min: 1e-4, t_max: 1.0 - 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulePoint {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub log_snr: f64,
}

impl NoiseSchedule {
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }

    pub fn at(&self, t: f64) -> SchedulePoint {
        let t = self.clamp(t);
        let (sigma, alpha) = (FRAC_PI_2 * t).sin_cos();
        SchedulePoint { t, alpha, sigma, log_snr: 2.0 * (alpha.ln() - sigma.ln()) }
    }

    /// `(α_{t|s}, σ²_{t|s})`.
    pub fn transition(&self, s: f64, t: f64) -> Result<(f64, f64)> {
        if s > t {
            return Err(Error::invalid(format!("transition needs s ≤ t, got s={s}, t={t}")));
        }
        let (ps, pt) = (self.at(s), self.at(t));
        let a = pt.alpha / ps.alpha;
        Ok((a, pt.sigma * pt.sigma - a * a * ps.sigma * ps.sigma))
    }

    /// Posterior `q(z_s | z_t, x0)` as `μ = c_z·z_t + c_x·x̂0` with variance `Σ²`.
    pub fn posterior(&self, s: f64, t: f64) -> Result<PosteriorCoefficients> {
        if s >= t {
            return Err(Error::invalid(format!("posterior needs s < t, got s={s}, t={t}")));
        }
        let (ps, pt) = (self.at(s), self.at(t));
        let (a_ts, var_ts) = self.transition(s, t)?;
        let (vs, vt) = (ps.sigma * ps.sigma, pt.sigma * pt.sigma);
        Ok(PosteriorCoefficients {
            z: a_ts * vs / vt,
            x0: ps.alpha * var_ts / vt,
            variance: var_ts * vs / vt,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoefficients {
    pub z: f64,
    pub x0: f64,
    pub variance: f64,
}

impl PosteriorCoefficients {
    pub fn mean<T: Element>(&self, x0_hat: &Tensor<T>, z_t: &Tensor<T>) -> Result<Tensor<T>> {
        let (cz, cx) = (T::from_f64(self.z), T::from_f64(self.x0));
        z_t.zip_map(x0_hat, |z, x| cz * z + cx * x)
    }
}

pub fn to_diffusion<T: Element>(depth: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64(2.0);
    depth.map(|d| two * d - T::one())
}

pub fn from_diffusion<T: Element>(u: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    u.map(|v| (v + T::one()) * half)
}

/// `z_t = α_t x0 + σ_t ε`.
pub fn forward_sample<T: Element>(sched: &NoiseSchedule, x0: &Tensor<T>, t: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    let p = sched.at(t);
    let (a, s) = (T::from_f64(p.alpha), T::from_f64(p.sigma));
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// `x̂0 = (z_t − σ_t ε̂) / α_t`.
pub fn predict_x0<T: Element>(sched: &NoiseSchedule, z_t: &Tensor<T>, eps_hat: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let p = sched.at(t);
    let (a, s) = (T::from_f64(p.alpha), T::from_f64(p.sigma));
    z_t.zip_map(eps_hat, |z, e| (z - s * e) / a)
}

/// Known pixels (`m = 1`) take `y_diff`, the rest keep `z_t`.
pub fn reinject<T: Element>(z_t: &Tensor<T>, y_diff: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    z_t.expect_same_shape(y_diff, "reinject")?;
    z_t.expect_same_shape(m, "reinject")?;
    let half = T::from_f64(0.5);
    let data = z_t
        .data()
        .iter()
        .zip(y_diff.data())
        .zip(m.data())
        .map(|((&z, &y), &k)| if k > half { y } else { z })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Concatenate two `F×1×H×W` tensors into `F×2×H×W`.
pub fn stack_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_shape(b, "stack_channels")?;
    let s = a.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::invalid(format!("expected F×1×H×W, got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut data = Vec::with_capacity(2 * a.numel());
    for f in 0..s[0] {
        data.extend_from_slice(&a.data()[f * plane..(f + 1) * plane]);
        data.extend_from_slice(&b.data()[f * plane..(f + 1) * plane]);
    }
    Tensor::new(&[s[0], 2, s[2], s[3]], data)
}

/// ε-prediction network over one video: `F×2×H×W → F×1×H×W`.
pub trait NoisePredictor<T: Element> {
    fn predict(&self, g: &Graph<T>, input: Var, log_snr: f64) -> Result<Var>;

    /// Gradient-free evaluation.
    fn eval(&self, input: &Tensor<T>, log_snr: f64) -> Result<Tensor<T>> {
        let g = Graph::new();
        let x = g.constant(input.clone())?;
        let y = self.predict(&g, x, log_snr)?;
        let out = (*g.value(y)).clone();
        Ok(out)
    }
}

/// Draws fixing one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossDraw<T> {
    pub t: f64,
    pub eps: Tensor<T>,
}

impl<T: Element> LossDraw<T> {
    pub fn sample(rng: &mut Prng, shape: &[usize]) -> Self {
        let t = rng.uniform();
        let eps = Tensor::from_fn(shape, |_| T::from_f64(rng.normal()));
        Self { t, eps }
    }
}

/// Masked ε-prediction loss recorded on `g`.
///
/// All tensors are `F×1×H×W` in the diffusion domain; `m` is the observation
/// mask. Returns the mean squared error over unknown pixels.
#[allow(clippy::too_many_arguments)]
pub fn masked_loss<T: Element>(
    g: &Graph<T>,
    sched: &NoiseSchedule,
    x0: &Tensor<T>,
    y_diff: &Tensor<T>,
    m: &Tensor<T>,
    draw: &LossDraw<T>,
    model: &dyn NoisePredictor<T>,
    reinject_known: bool,
) -> Result<Var> {
    x0.expect_same_shape(y_diff, "masked_loss")?;
    x0.expect_same_shape(m, "masked_loss")?;
    let z = forward_sample(sched, x0, draw.t, &draw.eps)?;
    let z = if reinject_known { reinject(&z, y_diff, m)? } else { z };
    let input = g.constant(stack_channels(y_diff, &z)?)?;
    let eps_hat = model.predict(g, input, sched.at(draw.t).log_snr)?;
    if g.shape(eps_hat) != x0.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_loss",
            lhs: g.shape(eps_hat),
            rhs: x0.shape().to_vec(),
        });
    }
    let unknown = m.map(|k| T::one() - k);
    let count = unknown.sum().as_f64().max(1.0);
    let eps = g.constant(draw.eps.clone())?;
    let diff = g.sub(eps_hat, eps)?;
    let sq = g.square(diff)?;
    let weights = g.constant(unknown)?;
    let masked = g.mul(sq, weights)?;
    let total = g.sum(masked)?;
    g.scale(total, T::from_f64(1.0 / count))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub stochastic: bool,
    pub seed: u64,
    /// Apply the observation re-injection before every denoiser call.
    pub reinject: bool,
    /// Output depths below `floor/2` become background, the rest are raised to `floor`.
    pub depth_floor: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 32, stochastic: true, seed: 0, reinject: true, depth_floor: Some(1.0 / 255.0) }
    }
}

/// Ancestral inpainting sampler.
///
/// `y` is the degraded depth video and `m` its observation mask, both
/// `F×1×H×W` in the depth domain. Returns a depth video whose known pixels
/// equal `y` exactly.
pub fn sample<T: Element>(
    sched: &NoiseSchedule,
    y: &Tensor<T>,
    m: &Tensor<T>,
    cfg: &SamplerConfig,
    model: &dyn NoisePredictor<T>,
) -> Result<Tensor<T>> {
    if cfg.steps < 1 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    y.expect_same_shape(m, "sample")?;
    let root = Prng::new(cfg.seed).fork("sampler");
    let y_diff = to_diffusion(y);
    let mut init = root.fork("init");
    let mut z = Tensor::from_fn(y.shape(), |_| T::from_f64(init.normal()));
    let steps = cfg.steps;
    let lo = -T::one();
    let mut x0_hat = z.clone();
    for i in (1..=steps).rev() {
        let t = i as f64 / steps as f64;
        if cfg.reinject {
            z = reinject(&z, &y_diff, m)?;
        }
        let eps_hat = model.eval(&stack_channels(&y_diff, &z)?, sched.at(t).log_snr)?;
        eps_hat.ensure_finite("sampler denoiser output")?;
        x0_hat = predict_x0(sched, &z, &eps_hat, t)?.map(|v| v.max(lo).min(T::one()));
        if i == 1 {
            break;
        }
        let s = (i - 1) as f64 / steps as f64;
        let post = sched.posterior(s, t)?;
        z = post.mean(&x0_hat, &z)?;
        if cfg.stochastic {
            let sd = T::from_f64(post.variance.max(0.0).sqrt());
            let mut noise = root.fork_index(i as u64);
            z.data_mut().iter_mut().for_each(|v| *v = *v + sd * T::from_f64(noise.normal()));
        }
        z.ensure_finite("sampler step")?;
    }
    let mut out = from_diffusion(&x0_hat);
    if let Some(floor) = cfg.depth_floor {
        let (half, floor) = (T::from_f64(floor / 2.0), T::from_f64(floor));
        out = out.map(|d| if d < half { T::zero() } else { d.max(floor) });
    }
    let out = reinject(&out, y, m)?;
    out.ensure_finite("sampler output")?;
    Ok(out)
}
