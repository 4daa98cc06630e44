//! Binary degradation masks: frame-constant vertical line removal and per-frame
//! pepper dropout.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::DepthVideo;
use crate::rng::Prng;
use crate::tensor::{Element, Tensor};

/// `F×1×H×W` binary mask stored as bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVideo {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl MaskVideo {
    pub fn filled(shape: [usize; 4], value: bool) -> Self {
        Self { shape, data: vec![value as u8; shape.iter().product()] }
    }

    pub fn from_data(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if shape[1] != 1 || data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(format!("mask of shape {shape:?} with {} values", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Elementwise AND.
    pub fn and(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mask_and",
                lhs: self.shape.to_vec(),
                rhs: other.shape.to_vec(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| if self.data[i] == 1 { T::one() } else { T::zero() })
    }
}

/// A ratio `num/den` kept exact for labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: u32,
    pub den: u32,
}

impl Fraction {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num > den {
            return Err(Error::invalid(format!("fraction {num}/{den} outside [0, 1]")));
        }
        Ok(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected a fraction like 1/6, got {s:?}"));
        let (n, d) = s.trim().split_once('/').ok_or_else(bad)?;
        Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRecipe {
    /// Rows with `h mod k == 0` survive.
    pub vertical_keep_every: usize,
    pub pepper_drop: Fraction,
    pub seed: u64,
}

impl MaskRecipe {
    pub fn new(vertical_keep_every: usize, pepper_drop: Fraction, seed: u64) -> Result<Self> {
        if vertical_keep_every < 1 {
            return Err(Error::invalid("vertical keep_every must be at least 1"));
        }
        Ok(Self { vertical_keep_every, pepper_drop, seed })
    }

    pub fn identity(seed: u64) -> Self {
        Self { vertical_keep_every: 1, pepper_drop: Fraction { num: 0, den: 1 }, seed }
    }

    /// Label like `Vx1/2_Px1/6`; the vertical part is the removed fraction.
    pub fn label(&self) -> String {
        let k = self.vertical_keep_every;
        format!("Vx{}/{}_Px{}", k - 1, k, self.pepper_drop)
    }

    /// Uniform pick from `pool` with a fresh pepper seed.
    pub fn sample_from(pool: &[(usize, Fraction)], rng: &mut Prng) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("empty mask recipe pool"));
        }
        let (k, p) = pool[rng.below(pool.len())];
        Self::new(k, p, rng.next_u64())
    }
}

/// The nine training recipes: k ∈ {2,3,4} crossed with p ∈ {1,2,3}/6.
pub fn training_pool() -> Vec<(usize, Fraction)> {
    (2..=4).flat_map(|k| (1..=3).map(move |n| (k, Fraction { num: n, den: 6 }))).collect()
}

fn check_shape(shape: [usize; 4]) -> Result<()> {
    if shape[1] != 1 || shape.contains(&0) {
        return Err(Error::invalid(format!("mask shape must be F×1×H×W, got {shape:?}")));
    }
    Ok(())
}

pub fn make_vertical_mask(shape: [usize; 4], keep_every: usize) -> Result<MaskVideo> {
    check_shape(shape)?;
    if keep_every < 1 {
        return Err(Error::invalid("vertical keep_every must be at least 1"));
    }
    let [f, _, h, w] = shape;
    let mut data = Vec::with_capacity(f * h * w);
    for _ in 0..f {
        for row in 0..h {
            data.extend(std::iter::repeat_n((row % keep_every == 0) as u8, w));
        }
    }
    Ok(MaskVideo { shape, data })
}

/// Pepper mask drawn from `stream`; frame `f` uses child stream `f`.
pub fn pepper_mask_from(shape: [usize; 4], drop_prob: f64, stream: &Prng) -> Result<MaskVideo> {
    check_shape(shape)?;
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::invalid(format!("pepper drop probability {drop_prob} outside [0, 1]")));
    }
    let plane = shape[2] * shape[3];
    let mut data = Vec::with_capacity(shape[0] * plane);
    for f in 0..shape[0] {
        let mut rng = stream.fork_index(f as u64);
        data.extend((0..plane).map(|_| (!rng.bernoulli(drop_prob)) as u8));
    }
    Ok(MaskVideo { shape, data })
}

pub fn make_pepper_mask(shape: [usize; 4], drop_prob: f64, seed: u64) -> Result<MaskVideo> {
    pepper_mask_from(shape, drop_prob, &Prng::new(seed).fork("pepper"))
}

/// Degradation mask for `x0` under `recipe`; `sequence_id` selects the pepper stream.
pub fn degradation_mask(shape: [usize; 4], recipe: &MaskRecipe, sequence_id: &str) -> Result<MaskVideo> {
    let vertical = make_vertical_mask(shape, recipe.vertical_keep_every)?;
    let stream = Prng::new(recipe.seed).fork("pepper").fork(sequence_id);
    let pepper = pepper_mask_from(shape, recipe.pepper_drop.value(), &stream)?;
    vertical.and(&pepper)
}

/// `y = m ⊙ x0`. The returned mask is the applied degradation, not the
/// observation mask of `y`.
pub fn apply_mask(x0: &DepthVideo, mask: &MaskVideo) -> Result<DepthVideo> {
    if x0.depth.shape() != mask.shape {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: x0.depth.shape().to_vec(),
            rhs: mask.shape.to_vec(),
        });
    }
    let mut y = x0.clone();
    for (v, &m) in y.depth.data_mut().iter_mut().zip(&mask.data) {
        if m == 0 {
            *v = 0.0;
        }
    }
    Ok(y)
}

pub fn compose_and_apply(x0: &DepthVideo, recipe: &MaskRecipe, sequence_id: &str) -> Result<(DepthVideo, MaskVideo)> {
    let s = x0.depth.shape();
    let mask = degradation_mask([s[0], s[1], s[2], s[3]], recipe, sequence_id)?;
    Ok((apply_mask(x0, &mask)?, mask))
}

/// 1 exactly where `y > 0`.
pub fn observation_mask(y: &DepthVideo) -> MaskVideo {
    let s = y.depth.shape();
    MaskVideo {
        shape: [s[0], s[1], s[2], s[3]],
        data: y.depth.data().iter().map(|&v| (v > 0.0) as u8).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(f: usize, h: usize, w: usize, data: Vec<f32>) -> DepthVideo {
        DepthVideo::new(Tensor::new(&[f, 1, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn vertical_examples() {
        let m = make_vertical_mask([2, 1, 3, 5], 1).unwrap();
        assert_eq!(m.count_ones(), 30);
        let m = make_vertical_mask([1, 1, 4, 2], 2).unwrap();
        assert_eq!(m.data(), &[1, 1, 0, 0, 1, 1, 0, 0]);
        let m = make_vertical_mask([1, 1, 64, 64], 4).unwrap();
        assert_eq!(m.count_ones(), 16 * 64);
        assert!(make_vertical_mask([1, 1, 4, 4], 0).is_err());
    }

    #[test]
    fn pepper_extremes() {
        assert_eq!(make_pepper_mask([2, 1, 8, 8], 0.0, 1).unwrap().count_ones(), 128);
        assert_eq!(make_pepper_mask([2, 1, 8, 8], 1.0, 1).unwrap().count_ones(), 0);
        assert!(make_pepper_mask([2, 1, 8, 8], 1.5, 1).is_err());
        assert!(make_pepper_mask([2, 1, 8, 8], -0.1, 1).is_err());
    }

    #[test]
    fn pepper_is_seeded_and_redrawn_per_frame() {
        let a = make_pepper_mask([2, 1, 16, 16], 0.5, 9).unwrap();
        let b = make_pepper_mask([2, 1, 16, 16], 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(&a.data()[..256], &a.data()[256..]);
        assert_ne!(a, make_pepper_mask([2, 1, 16, 16], 0.5, 10).unwrap());
    }

    #[test]
    fn hadamard_toy() {
        let x0 = video(1, 2, 2, vec![0.5, 0.8, 0.4, 0.0]);
        let m = MaskVideo::from_data([1, 1, 2, 2], vec![1, 0, 1, 1]).unwrap();
        let y = apply_mask(&x0, &m).unwrap();
        assert_eq!(y.depth.data(), &[0.5, 0.0, 0.4, 0.0]);
        assert_eq!(observation_mask(&y).data(), &[1, 0, 1, 0]);
        let zeros = MaskVideo::filled([1, 1, 2, 2], false);
        assert_eq!(apply_mask(&x0, &zeros).unwrap().occupied(), 0);
        assert!(apply_mask(&x0, &MaskVideo::filled([1, 1, 2, 3], true)).is_err());
    }

    #[test]
    fn identity_recipe_is_noop() {
        let x0 = video(2, 3, 3, (0..18).map(|i| (i % 4) as f32 / 4.0).collect());
        let (y, m) = compose_and_apply(&x0, &MaskRecipe::identity(3), "s").unwrap();
        assert_eq!(y, x0);
        assert_eq!(m.count_ones(), 18);
    }

    #[test]
    fn delta_pixels_are_observed() {
        let d = 1.0 / 255.0;
        let y = video(1, 1, 3, vec![d, 0.0, 1.0]);
        assert_eq!(observation_mask(&y).data(), &[1, 0, 1]);
    }

    #[test]
    fn labels_and_fractions() {
        let r = MaskRecipe::new(2, "1/6".parse().unwrap(), 0).unwrap();
        assert_eq!(r.label(), "Vx1/2_Px1/6");
        assert_eq!(MaskRecipe::new(4, Fraction::new(3, 6).unwrap(), 0).unwrap().label(), "Vx3/4_Px3/6");
        assert!("7/6".parse::<Fraction>().is_err());
        assert!("x".parse::<Fraction>().is_err());
    }
}
