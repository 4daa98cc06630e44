//! Factorized space-time U-Net predicting diffusion noise for a video.
//!
//! Frames are the batch axis of every convolution (`1×3×3` kernels), so
//! spatial processing never mixes frames. Temporal mixing happens only in the
//! temporal attention at the lowest resolution, which attends across frames at
//! each spatial location with a learned relative-position bias.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Element, Graph, Tensor, Var};

const GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub heads: usize,
    /// Relative offsets are clipped to `±(max_frames − 1)`.
    pub max_frames: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self { base_channels: 32, channel_multipliers: vec![1, 2], heads: 2, max_frames: 10 }
    }
}

impl DenoiserSpec {
    pub const IN_CHANNELS: usize = 2;

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    fn embed_dim(&self) -> usize {
        self.base_channels
    }

    fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::invalid("channel multipliers must be non-empty and positive"));
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(GROUPS) || !self.base_channels.is_multiple_of(2) {
            return Err(Error::invalid(format!("base channels must be a multiple of {GROUPS}")));
        }
        let bottom = self.channels(self.levels() - 1);
        if self.heads == 0 || !bottom.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("{bottom} channels do not split into {} heads", self.heads)));
        }
        if self.max_frames == 0 {
            return Err(Error::invalid("max_frames must be positive"));
        }
        Ok(())
    }

    /// Checks an `F×2×H×W` input shape.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != Self::IN_CHANNELS {
            return Err(Error::invalid(format!("denoiser input must be F×2×H×W, got {shape:?}")));
        }
        let div = 1 << (self.levels() - 1);
        if !shape[2].is_multiple_of(div) || !shape[3].is_multiple_of(div) {
            return Err(Error::invalid(format!(
                "spatial size {}x{} not divisible by {div}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mults: Vec<String> = self.channel_multipliers.iter().map(|m| m.to_string()).collect();
        write!(
            f,
            "base_channels={}\nchannel_multipliers={}\nheads={}\nmax_frames={}\n",
            self.base_channels,
            mults.join(","),
            self.heads,
            self.max_frames
        )
    }
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad spec line {line:?}")))?;
            let num = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::format(format!("bad spec value {line:?}")));
            match k.trim() {
                "base_channels" => spec.base_channels = num(v)?,
                "heads" => spec.heads = num(v)?,
                "max_frames" => spec.max_frames = num(v)?,
                "channel_multipliers" => {
                    spec.channel_multipliers = v.split(',').map(num).collect::<Result<_>>()?;
                }
                other => return Err(Error::format(format!("unknown spec key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Params<T> {
    fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout<U: Element>(&self, other: &Params<U>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Replace all values, checking names and shapes.
    pub fn load(&mut self, named: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in named {
            let i = self.position(&name).ok_or_else(|| Error::format(format!("unknown parameter {name:?}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::format(format!("missing parameter {:?}", self.names[i])));
        }
        Ok(())
    }
}

struct Init<'a, T> {
    params: Params<T>,
    rng: &'a mut Prng,
}

impl<T: Element> Init<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std));
        self.params.push(name, t);
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.push(name, Tensor::full(shape, T::from_f64(v)));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.normal(format!("{name}.w"), &[din, dout], (1.0 / din as f64).sqrt());
        self.constant(format!("{name}.b"), &[dout], 0.0);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.conv_weight(name, cin, cout, k);
        self.constant(format!("{name}.b"), &[cout], 0.0);
    }

    fn conv_weight(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.normal(format!("{name}.w"), &[cout, cin, k, k], (1.0 / (cin * k * k) as f64).sqrt());
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.constant(format!("{name}.g"), &[c], 1.0);
        self.constant(format!("{name}.b"), &[c], 0.0);
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        // no bias: the following normalization would cancel it
        self.conv_weight(&format!("{name}.conv1"), cin, cout, 3);
        self.linear(&format!("{name}.scale"), tdim, cout);
        self.linear(&format!("{name}.shift"), tdim, cout);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1);
        }
    }

    fn attention(&mut self, name: &str, c: usize) {
        self.norm(&format!("{name}.norm"), c);
        self.linear(&format!("{name}.q"), c, c);
        // a key bias only shifts each score row, which softmax ignores
        self.normal(format!("{name}.k.w"), &[c, c], (1.0 / c as f64).sqrt());
        self.linear(&format!("{name}.v"), c, c);
        self.linear(&format!("{name}.o"), c, c);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    spec: DenoiserSpec,
    pub params: Params<T>,
}

impl<T: Element> Denoiser<T> {
    /// Seeded initialization; the output convolution starts at zero.
    pub fn init(spec: &DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Prng::new(seed).fork("denoiser-init");
        let mut b = Init { params: Params::new(), rng: &mut rng };
        let (e, td) = (spec.embed_dim(), spec.time_dim());
        b.linear("time.lin1", e, td);
        b.linear("time.lin2", td, td);
        b.conv("conv_in", DenoiserSpec::IN_CHANNELS, spec.channels(0), 3);
        let last = spec.levels() - 1;
        let mut cin = spec.channels(0);
        for l in 0..=last {
            b.resblock(&format!("down{l}"), cin, spec.channels(l), td);
            cin = spec.channels(l);
        }
        let c = spec.channels(last);
        b.attention("mid.spatial", c);
        b.attention("mid.temporal", c);
        b.normal("mid.temporal.rel".into(), &[2 * spec.max_frames - 1, spec.heads], 0.02);
        for l in (0..=last).rev() {
            b.resblock(&format!("up{l}"), cin + spec.channels(l), spec.channels(l), td);
            cin = spec.channels(l);
        }
        b.norm("out.norm", cin);
        b.constant("out.conv.w".into(), &[1, cin, 3, 3], 0.0);
        b.constant("out.conv.b".into(), &[1], 0.0);
        Ok(Self { spec: spec.clone(), params: b.params })
    }

    pub fn from_params(spec: &DenoiserSpec, params: Params<T>) -> Result<Self> {
        let reference = Self::init(spec, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::format("parameter layout does not match the denoiser spec"));
        }
        Ok(Self { spec: spec.clone(), params })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn cast<U: Element>(&self) -> Denoiser<U> {
        Denoiser { spec: self.spec.clone(), params: self.params.cast() }
    }

    /// Record every parameter on `g`; returns handles in parameter order.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    /// Forward pass using parameter handles from [`Denoiser::bind`] (or any
    /// handles with matching shapes, e.g. from gradcheck).
    pub fn forward(&self, g: &Graph<T>, bound: &[Var], input: Var, log_snr: f64) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(Error::invalid(format!("{} bound parameters, expected {}", bound.len(), self.params.len())));
        }
        let input_shape = g.shape(input);
        self.spec.check_input(&input_shape)?;
        if !log_snr.is_finite() {
            return Err(Error::NonFinite { op: "denoiser log-SNR".into() });
        }
        let n = Net { g, bound, params: &self.params, spec: &self.spec };
        let temb = n.time_embedding(log_snr)?;
        let last = self.spec.levels() - 1;

        let mut h = n.conv("conv_in", input, 1)?;
        let mut skips = Vec::with_capacity(last + 1);
        for l in 0..=last {
            h = n.resblock(&format!("down{l}"), h, temb)?;
            skips.push(h);
            if l < last {
                h = g.avg_pool2x(h)?;
            }
        }
        h = n.spatial_attention("mid.spatial", h)?;
        h = n.temporal_attention("mid.temporal", h)?;
        for l in (0..=last).rev() {
            h = g.concat(&[h, skips[l]], 1)?;
            h = n.resblock(&format!("up{l}"), h, temb)?;
            if l > 0 {
                h = g.upsample2x(h)?;
            }
        }
        h = n.norm("out.norm", h)?;
        h = g.silu(h)?;
        n.conv("out.conv", h, 1)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}

impl<T: Element> NoisePredictor<T> for Denoiser<T> {
    fn predict(&self, g: &Graph<T>, input: Var, log_snr: f64) -> Result<Var> {
        let bound = self.bind(g, false)?;
        self.forward(g, &bound, input, log_snr)
    }
}

/// A denoiser whose parameters are already recorded on a graph.
pub struct BoundDenoiser<'a, T> {
    pub model: &'a Denoiser<T>,
    pub bound: &'a [Var],
}

impl<T: Element> NoisePredictor<T> for BoundDenoiser<'_, T> {
    fn predict(&self, g: &Graph<T>, input: Var, log_snr: f64) -> Result<Var> {
        self.model.forward(g, self.bound, input, log_snr)
    }
}

/// Sinusoidal features of `log_snr`, half sines then half cosines.
pub fn sinusoidal_embedding(log_snr: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (log_snr * freq).sin();
        out[half + i] = (log_snr * freq).cos();
    }
    out
}

struct Net<'a, T: Element> {
    g: &'a Graph<T>,
    bound: &'a [Var],
    params: &'a Params<T>,
    spec: &'a DenoiserSpec,
}

impl<T: Element> Net<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.bound[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    fn optional(&self, name: &str) -> Option<Var> {
        self.params.position(name).map(|i| self.bound[i])
    }

    fn linear(&self, name: &str, x: Var) -> Result<Var> {
        let y = self.g.matmul(x, self.p(&format!("{name}.w"))?)?;
        match self.optional(&format!("{name}.b")) {
            Some(b) => self.g.add(y, b),
            None => Ok(y),
        }
    }

    fn conv(&self, name: &str, x: Var, pad: usize) -> Result<Var> {
        let bias = self.optional(&format!("{name}.b"));
        self.g.conv2d(x, self.p(&format!("{name}.w"))?, bias, 1, pad)
    }

    fn norm(&self, name: &str, x: Var) -> Result<Var> {
        self.g.group_norm(x, self.p(&format!("{name}.g"))?, self.p(&format!("{name}.b"))?, GROUPS)
    }

    fn time_embedding(&self, log_snr: f64) -> Result<Var> {
        let dim = self.spec.embed_dim();
        let feats = sinusoidal_embedding(log_snr, dim).into_iter().map(T::from_f64).collect();
        let e = self.g.constant(Tensor::new(&[1, dim], feats)?)?;
        let h = self.linear("time.lin1", e)?;
        let h = self.g.silu(h)?;
        let h = self.linear("time.lin2", h)?;
        self.g.silu(h)
    }

    /// `[1, D] → [1, C, 1, 1]`.
    fn channel_vector(&self, name: &str, temb: Var) -> Result<Var> {
        let v = self.linear(name, temb)?;
        let c = self.g.shape(v)[1];
        self.g.reshape(v, &[1, c, 1, 1])
    }

    fn resblock(&self, name: &str, x: Var, temb: Var) -> Result<Var> {
        let g = self.g;
        let h = self.norm(&format!("{name}.norm1"), x)?;
        let h = g.silu(h)?;
        let h = self.conv(&format!("{name}.conv1"), h, 1)?;
        let h = self.norm(&format!("{name}.norm2"), h)?;
        let scale = self.channel_vector(&format!("{name}.scale"), temb)?;
        let shift = self.channel_vector(&format!("{name}.shift"), temb)?;
        let scaled = g.mul(h, scale)?;
        let h = g.add(h, scaled)?;
        let h = g.add(h, shift)?;
        let h = g.silu(h)?;
        let h = self.conv(&format!("{name}.conv2"), h, 1)?;
        let skip = if self.optional(&format!("{name}.skip.w")).is_some() {
            self.conv(&format!("{name}.skip"), x, 0)?
        } else {
            x
        };
        g.add(skip, h)
    }

    /// Multi-head attention over tokens `[B, L, C]`; `bias` is added to the
    /// `[B, heads, L, L]` scores.
    fn attend(&self, name: &str, tokens: Var, bias: Option<Var>) -> Result<Var> {
        let g = self.g;
        let s = g.shape(tokens);
        let (b, l, c) = (s[0], s[1], s[2]);
        let heads = self.spec.heads;
        let dh = c / heads;
        let split = |x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, l, heads, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * heads, l, dh])
        };
        let q = split(self.linear(&format!("{name}.q"), tokens)?)?;
        let k = split(self.linear(&format!("{name}.k"), tokens)?)?;
        let v = split(self.linear(&format!("{name}.v"), tokens)?)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let mut scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()))?;
        if let Some(bias) = bias {
            let s4 = g.reshape(scores, &[b, heads, l, l])?;
            let s4 = g.add(s4, bias)?;
            scores = g.reshape(s4, &[b * heads, l, l])?;
        }
        let attn = g.softmax(scores)?;
        let out = g.bmm(attn, v)?;
        let out = g.reshape(out, &[b, heads, l, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, l, c])?;
        self.linear(&format!("{name}.o"), out)
    }

    /// Attention over the `H·W` positions of each frame.
    fn spatial_attention(&self, name: &str, x: Var) -> Result<Var> {
        let g = self.g;
        let s = g.shape(x);
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = self.norm(&format!("{name}.norm"), x)?;
        let t = g.reshape(t, &[f, c, h * w])?;
        let t = g.permute(t, &[0, 2, 1])?;
        let out = self.attend(name, t, None)?;
        let out = g.permute(out, &[0, 2, 1])?;
        let out = g.reshape(out, &[f, c, h, w])?;
        g.add(x, out)
    }

    /// Attention across frames at every spatial position.
    fn temporal_attention(&self, name: &str, x: Var) -> Result<Var> {
        let g = self.g;
        let s = g.shape(x);
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = self.norm(&format!("{name}.norm"), x)?;
        let t = g.reshape(t, &[f, c, h * w])?;
        let t = g.permute(t, &[2, 0, 1])?;
        let max = self.spec.max_frames as isize - 1;
        let offsets: Vec<usize> = (0..f * f)
            .map(|ij| {
                let d = (ij / f) as isize - (ij % f) as isize;
                (d.clamp(-max, max) + max) as usize
            })
            .collect();
        let bias = g.gather_rows(self.p(&format!("{name}.rel"))?, &offsets)?;
        let bias = g.reshape(bias, &[f, f, self.spec.heads])?;
        let bias = g.permute(bias, &[2, 0, 1])?;
        let out = self.attend(name, t, Some(bias))?;
        let out = g.permute(out, &[1, 2, 0])?;
        let out = g.reshape(out, &[f, c, h, w])?;
        g.add(x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trip() {
        let spec = DenoiserSpec { base_channels: 16, channel_multipliers: vec![1, 2, 2], heads: 4, max_frames: 4 };
        assert_eq!(spec.to_string().parse::<DenoiserSpec>().unwrap(), spec);
        assert!("base_channels=12".parse::<DenoiserSpec>().is_err());
        assert!("nonsense".parse::<DenoiserSpec>().is_err());
    }

    #[test]
    fn embedding_is_bounded() {
        let e = sinusoidal_embedding(-17.3, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(e[8], (-17.3f64).cos());
    }
}
