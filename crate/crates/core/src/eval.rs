//! Reconstruction metrics (PSNR, SSIM, temporal consistency) and the
//! interpolation baselines they are compared against. All metrics work on
//! depth values in `[0, 1]`.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::degrade::MaskVideo;
use crate::error::{Error, Result};
use crate::geom::DepthVideo;

fn same_shape(a: &DepthVideo, b: &DepthVideo, op: &'static str) -> Result<()> {
    if a.depth.shape() != b.depth.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.depth.shape().to_vec(), rhs: b.depth.shape().to_vec() });
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over every value; `+∞` when the videos agree.
pub fn psnr(pred: &DepthVideo, reference: &DepthVideo, peak: f64) -> Result<f64> {
    same_shape(pred, reference, "psnr")?;
    let n = pred.depth.numel() as f64;
    let sse: f64 = pred
        .depth
        .data()
        .iter()
        .zip(reference.depth.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / (sse / n)).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian; the 2-D window is its outer product.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Weighted sums of `f(a, b)` over every fully contained window.
fn window_means(a: &[f32], b: &[f32], h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let k = ssim_kernel();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // horizontal pass then vertical
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW)
                .map(|j| k[j] * f(a[y * w + x + j] as f64, b[y * w + x + j] as f64))
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one `h×w` frame pair (dynamic range 1) over valid windows.
pub fn ssim_frame(pred: &[f32], reference: &[f32], h: usize, w: usize) -> Result<f64> {
    if pred.len() != h * w || reference.len() != h * w {
        return Err(Error::ShapeMismatch { op: "ssim", lhs: vec![pred.len()], rhs: vec![h * w] });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("{h}x{w} frame is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mu_a = window_means(pred, reference, h, w, |a, _| a);
    let mu_b = window_means(pred, reference, h, w, |_, b| b);
    let aa = window_means(pred, reference, h, w, |a, _| a * a);
    let bb = window_means(pred, reference, h, w, |_, b| b * b);
    let ab = window_means(pred, reference, h, w, |a, b| a * b);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM averaged over frames.
pub fn ssim(pred: &DepthVideo, reference: &DepthVideo) -> Result<f64> {
    same_shape(pred, reference, "ssim")?;
    let (h, w) = (pred.height(), pred.width());
    let mut total = 0.0;
    for f in 0..pred.frames() {
        total += ssim_frame(pred.frame(f), reference.frame(f), h, w)?;
    }
    Ok(total / pred.frames() as f64)
}

/// Mean absolute difference between the temporal gradients of `pred` and
/// `reference`; 0 means identical frame-to-frame motion.
pub fn consistency(pred: &DepthVideo, reference: &DepthVideo) -> Result<f64> {
    same_shape(pred, reference, "consistency")?;
    let frames = pred.frames();
    if frames < 2 {
        return Err(Error::invalid("consistency needs at least two frames"));
    }
    let mut total = 0.0;
    for f in 0..frames - 1 {
        let (p0, p1) = (pred.frame(f), pred.frame(f + 1));
        let (r0, r1) = (reference.frame(f), reference.frame(f + 1));
        let sum: f64 = (0..p0.len())
            .map(|i| ((p1[i] as f64 - p0[i] as f64) - (r1[i] as f64 - r0[i] as f64)).abs())
            .sum();
        total += sum / p0.len() as f64;
    }
    Ok(total / (frames - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
            Self::Bicubic => "bicubic",
        })
    }
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "bicubic" => Ok(Self::Bicubic),
            _ => Err(Error::invalid(format!("unknown interpolation {s:?}"))),
        }
    }
}

/// Fill unknown pixels of each frame from known ones.
///
/// `Nearest` copies the closest known pixel (Euclidean, ties to the lowest
/// index) everywhere. `Bilinear` and `Bicubic` fill unknown runs bracketed by
/// known pixels, first along columns and then along rows, so pixels outside
/// the known support stay 0. Known pixels are never modified.
pub fn interpolate_baseline(y: &DepthVideo, m: &MaskVideo, method: Interpolation) -> Result<DepthVideo> {
    let s = y.depth.shape();
    if m.shape() != [s[0], s[1], s[2], s[3]] {
        return Err(Error::ShapeMismatch { op: "interpolate_baseline", lhs: s.to_vec(), rhs: m.shape().to_vec() });
    }
    let (h, w) = (y.height(), y.width());
    let mut out = y.clone();
    let plane = h * w;
    let data = out.depth.data_mut();
    for f in 0..y.frames() {
        let known: Vec<bool> = m.data()[f * plane..(f + 1) * plane].iter().map(|&k| k == 1).collect();
        let frame = &mut data[f * plane..(f + 1) * plane];
        if !known.iter().any(|&k| k) {
            frame.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut values: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        match method {
            Interpolation::Nearest => nearest_fill(&mut values, &known, h, w),
            _ => {
                let cubic = method == Interpolation::Bicubic;
                let mut filled = known.clone();
                for x in 0..w {
                    fill_line(&mut values, &mut filled, (0..h).map(|r| r * w + x).collect(), cubic);
                }
                for r in 0..h {
                    fill_line(&mut values, &mut filled, (0..w).map(|c| r * w + c).collect(), cubic);
                }
            }
        }
        for (i, v) in frame.iter_mut().enumerate() {
            if !known[i] {
                *v = values[i].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

fn nearest_fill(values: &mut [f64], known: &[bool], h: usize, w: usize) {
    let sources: Vec<(usize, usize, f64)> =
        (0..h * w).filter(|&i| known[i]).map(|i| (i / w, i % w, values[i])).collect();
    for i in 0..h * w {
        if known[i] {
            continue;
        }
        let (r, c) = ((i / w) as i64, (i % w) as i64);
        let mut best = (i64::MAX, 0.0);
        for &(sr, sc, v) in &sources {
            let d = (sr as i64 - r).pow(2) + (sc as i64 - c).pow(2);
            if d < best.0 {
                best = (d, v);
            }
        }
        values[i] = best.1;
    }
}

/// Fill unknown runs of one line (given as flat indices) that have a known
/// pixel on both sides, then mark them known.
fn fill_line(values: &mut [f64], known: &mut [bool], line: Vec<usize>, cubic: bool) {
    let anchors: Vec<usize> = (0..line.len()).filter(|&i| known[line[i]]).collect();
    let v = |k: usize| values[line[anchors[k]]];
    let mut fills = Vec::new();
    for k in 0..anchors.len().saturating_sub(1) {
        let (i0, i1) = (anchors[k], anchors[k + 1]);
        if i1 == i0 + 1 {
            continue;
        }
        let span = (i1 - i0) as f64;
        let (p0, p1) = (v(k), v(k + 1));
        // finite-difference slopes per pixel, one-sided at the ends
        let chord = (p1 - p0) / span;
        let m0 = if k > 0 { (p0 - v(k - 1)) / (i0 - anchors[k - 1]) as f64 } else { chord };
        let m1 = if k + 2 < anchors.len() { (v(k + 2) - p1) / (anchors[k + 2] - i1) as f64 } else { chord };
        for (i, &idx) in line.iter().enumerate().take(i1).skip(i0 + 1) {
            let s = (i - i0) as f64 / span;
            let value = if cubic {
                let (s2, s3) = (s * s, s * s * s);
                (2.0 * s3 - 3.0 * s2 + 1.0) * p0
                    + (s3 - 2.0 * s2 + s) * span * m0
                    + (-2.0 * s3 + 3.0 * s2) * p1
                    + (s3 - s2) * span * m1
            } else {
                p0 + (p1 - p0) * s
            };
            fills.push((idx, value));
        }
    }
    for (idx, value) in fills {
        values[idx] = value;
        known[idx] = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMetrics {
    pub sequence_id: String,
    pub recipe: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub consistency: f64,
}

pub fn evaluate(pred: &DepthVideo, reference: &DepthVideo, sequence_id: &str, recipe: &str) -> Result<SequenceMetrics> {
    Ok(SequenceMetrics {
        sequence_id: sequence_id.to_string(),
        recipe: recipe.to_string(),
        psnr_db: psnr(pred, reference, 1.0)?,
        ssim: ssim(pred, reference)?,
        consistency: consistency(pred, reference)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<SequenceMetrics>,
}

impl MetricReport {
    /// Arithmetic means of PSNR, SSIM and consistency.
    pub fn mean(&self) -> Result<(f64, f64, f64)> {
        if self.rows.is_empty() {
            return Err(Error::invalid("empty metric report"));
        }
        let n = self.rows.len() as f64;
        let sum = |f: fn(&SequenceMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Ok((sum(|r| r.psnr_db), sum(|r| r.ssim), sum(|r| r.consistency)))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("sequence_id,recipe,psnr_db,ssim,consistency\n");
        for r in &self.rows {
            if r.sequence_id.contains([',', '\n']) || r.recipe.contains([',', '\n']) {
                return Err(Error::invalid(format!("CSV field in row {:?} contains a comma or newline", r.sequence_id)));
            }
            writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.sequence_id, r.recipe, r.psnr_db, r.ssim, r.consistency).unwrap();
        }
        let (p, ss, c) = self.mean()?;
        let recipes: Vec<&str> = self.rows.iter().map(|r| r.recipe.as_str()).collect();
        let recipe = if recipes.iter().all(|r| *r == recipes[0]) { recipes[0] } else { "mixed" };
        writeln!(s, "MEAN,{recipe},{p:.6},{ss:.6},{c:.6}").unwrap();
        Ok(s)
    }
}

/// One PNG per frame: `dir/<prefix>_f000.png`, …
pub fn dump_frames(dir: &Path, prefix: &str, video: &DepthVideo) -> Result<()> {
    for f in 0..video.frames() {
        let path = dir.join(format!("{prefix}_f{f:03}.png"));
        crate::io::write_png(&path, video.frame(f), video.height(), video.width())?;
    }
    Ok(())
}
