#![allow(dead_code)]

use gsu::diffusion::NoisePredictor;
use gsu::rng::Prng;
use gsu::tensor::{Element, Graph, Tensor, Var};
use gsu::Result;

/// Predicts the exact noise for a known clean video (diffusion domain).
pub struct OracleDenoiser<T> {
    pub x0: Tensor<T>,
}

impl<T: Element> NoisePredictor<T> for OracleDenoiser<T> {
    fn predict(&self, g: &Graph<T>, input: Var, log_snr: f64) -> Result<Var> {
        let out = self.eval(&g.value(input), log_snr)?;
        g.constant(out)
    }

    fn eval(&self, input: &Tensor<T>, log_snr: f64) -> Result<Tensor<T>> {
        // α² = 1/(1 + e^{−λ}), σ² = 1/(1 + e^{λ})
        let alpha = (1.0 / (1.0 + (-log_snr).exp())).sqrt();
        let sigma = (1.0 / (1.0 + log_snr.exp())).sqrt();
        let s = input.shape();
        let plane = s[2] * s[3];
        let x = self.x0.data();
        let data = (0..s[0] * plane)
            .map(|i| {
                let (f, p) = (i / plane, i % plane);
                let z = input.data()[(2 * f + 1) * plane + p].as_f64();
                T::from_f64((z - alpha * x[i].as_f64()) / sigma)
            })
            .collect();
        Tensor::new(&[s[0], 1, s[2], s[3]], data)
    }
}

/// Returns a constant ε̂.
pub struct ConstDenoiser(pub f64);

impl<T: Element> NoisePredictor<T> for ConstDenoiser {
    fn predict(&self, g: &Graph<T>, input: Var, _log_snr: f64) -> Result<Var> {
        let s = g.shape(input);
        g.constant(Tensor::full(&[s[0], 1, s[2], s[3]], T::from_f64(self.0)))
    }
}

/// Depth video with values in {0} ∪ [δ, 1].
pub fn random_depth<T: Element>(shape: &[usize], rng: &mut Prng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        if rng.bernoulli(0.4) {
            T::zero()
        } else {
            T::from_f64(1.0 / 255.0 + rng.uniform() * (1.0 - 1.0 / 255.0))
        }
    })
}

pub fn random_mask<T: Element>(shape: &[usize], keep: f64, rng: &mut Prng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| if rng.bernoulli(keep) { T::one() } else { T::zero() })
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Projected synthetic walkers as training sequences.
pub fn synthetic_videos(subjects: usize, frames: usize, pixels: usize, seed: u64) -> Vec<gsu::train::TrainSequence> {
    let cfg = gsu::geom::ProjectionConfig::with_grid(pixels);
    gsu::synth::generate_dataset(subjects, 1, frames, seed)
        .unwrap()
        .into_iter()
        .map(|mut s| {
            s.frames.iter_mut().for_each(|f| f.truncate(f.len() / 4));
            gsu::train::TrainSequence {
                id: s.sequence_id.clone(),
                video: gsu::geom::project_sequence(&s, &cfg).unwrap(),
            }
        })
        .collect()
}
