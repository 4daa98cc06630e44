//! Sensor-view canonicalization of pedestrian point clouds and orthographic
//! depth-video projection.
//!
//! Each frame is centered on its ground-plane center of mass and rotated about
//! the z axis so the direction towards the sensor becomes `+x`. Points are then
//! binned onto an `H×W` grid over (z, y) with a Z-buffer keeping the largest
//! `x`, i.e. the surface nearest the sensor.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// One walking sequence: `F` frames of Cartesian points in sensor coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitPointSequence {
    pub frames: Vec<Vec<Point>>,
    pub subject_id: String,
    pub sequence_id: String,
}

impl GaitPointSequence {
    pub fn new(frames: Vec<Vec<Point>>) -> Self {
        Self { frames, subject_id: String::new(), sequence_id: String::new() }
    }

    pub fn num_points(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid("sequence has no frames"));
        }
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.is_empty() {
                return Err(Error::invalid(format!("frame {f} has no points")));
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("frame {f} has non-finite coordinates")));
            }
        }
        Ok(())
    }
}

/// Per-frame ground-plane center and sensor-view angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalFrameMeta {
    /// `(c_x, c_y, 0)`.
    pub center: Point,
    /// `atan2(c_y, c_x)` in `(-π, π]`.
    pub sensor_angle: f64,
}

impl CanonicalFrameMeta {
    pub fn from_frame(frame: &[Point]) -> Result<Self> {
        let center = center_of_mass(frame)?;
        Ok(Self { center, sensor_angle: sensor_view_angle(center)? })
    }

    /// `(p − c)·R_z(θ + π)`: rotation by `−(θ + π)` in the xy-plane.
    pub fn to_canonical(&self, p: Point) -> Point {
        let a = self.sensor_angle + PI;
        let (s, c) = a.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2]]
    }

    pub fn from_canonical(&self, q: Point) -> Point {
        let a = self.sensor_angle + PI;
        let (s, c) = a.sin_cos();
        [c * q[0] - s * q[1] + self.center[0], s * q[0] + c * q[1] + self.center[1], q[2]]
    }
}

/// Inversion data carried alongside a depth video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMeta {
    pub frames: Vec<CanonicalFrameMeta>,
    /// Minimum canonical z over frame 0, shared by all frames.
    pub z_min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig {
    /// Box extents in meters (height, width, depth).
    pub l_z: f64,
    pub l_y: f64,
    pub l_x: f64,
    /// Pixel pitch in meters.
    pub r_z: f64,
    pub r_y: f64,
    /// Offset added to `z − z_min` before binning.
    pub l_z_const: f64,
    pub height: usize,
    pub width: usize,
    /// Smallest stored depth of an occupied pixel.
    pub depth_floor: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            l_z: 2.6,
            l_y: 2.6,
            l_x: 2.6,
            r_z: 0.04,
            r_y: 0.04,
            l_z_const: 0.3,
            height: 64,
            width: 64,
            depth_floor: 1.0 / 255.0,
        }
    }
}

impl ProjectionConfig {
    /// Same box, coarser pitch: `pixels×pixels` grid with pitch `2.56 / pixels`.
    pub fn with_grid(pixels: usize) -> Self {
        let pitch = 0.04 * 64.0 / pixels as f64;
        Self { r_z: pitch, r_y: pitch, height: pixels, width: pixels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [self.l_z, self.l_y, self.l_x, self.r_z, self.r_y];
        if lengths.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !self.l_z_const.is_finite() {
            return Err(Error::invalid(format!("projection extents must be positive: {self:?}")));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("projection grid must be non-empty"));
        }
        // The grid may not extend past the box.
        let fits = |n: usize, pitch: f64, extent: f64| n as f64 * pitch <= extent * (1.0 + 1e-9);
        if !fits(self.height, self.r_z, self.l_z) || !fits(self.width, self.r_y, self.l_y) {
            return Err(Error::invalid(format!(
                "{}x{} grid at pitch {}x{} exceeds the {}x{} m box",
                self.height, self.width, self.r_z, self.r_y, self.l_z, self.l_y
            )));
        }
        if !(self.depth_floor > 0.0 && self.depth_floor < 1.0) {
            return Err(Error::invalid(format!("depth floor {} outside (0, 1)", self.depth_floor)));
        }
        Ok(())
    }

    /// Pixel and normalized depth of a canonical point, or `None` outside the box.
    pub fn pixel_of(&self, q: Point, z_min: f64) -> Option<(usize, usize, f32)> {
        let half_x = self.l_x / 2.0;
        if !(q[0] >= -half_x && q[0] <= half_x) {
            return None;
        }
        let h = ((q[2] - z_min + self.l_z_const) / self.r_z).floor();
        let w = ((q[1] + self.l_y / 2.0) / self.r_y).floor();
        if !(h >= 0.0 && w >= 0.0 && h < self.height as f64 && w < self.width as f64) {
            return None;
        }
        let d = ((q[0] + half_x) / self.l_x).clamp(self.depth_floor, 1.0);
        Some((h as usize, w as usize, d as f32))
    }

    /// Canonical point at the center of pixel `(h, w)` with stored depth `d`.
    pub fn point_of(&self, h: usize, w: usize, d: f32, z_min: f64) -> Point {
        [
            d as f64 * self.l_x - self.l_x / 2.0,
            (w as f64 + 0.5) * self.r_y - self.l_y / 2.0,
            (h as f64 + 0.5) * self.r_z + z_min - self.l_z_const,
        ]
    }
}

/// `F×1×H×W` normalized depth; 0 is background, occupied pixels are in `[δ, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthVideo {
    pub depth: Tensor<f32>,
    pub meta: Option<VideoMeta>,
}

impl DepthVideo {
    pub fn new(depth: Tensor<f32>) -> Result<Self> {
        if depth.shape().len() != 4 || depth.shape()[1] != 1 {
            return Err(Error::invalid(format!("depth video must be F×1×H×W, got {:?}", depth.shape())));
        }
        Ok(Self { depth, meta: None })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self { depth: Tensor::zeros(&[frames, 1, height, width]), meta: None }
    }

    pub fn frames(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[3]
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.depth.data()[f * n..(f + 1) * n]
    }

    pub fn occupied(&self) -> usize {
        self.depth.data().iter().filter(|&&v| v > 0.0).count()
    }

    /// Frames `[start, start + len)` with matching meta.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        let depth = self.depth.narrow0(start, len)?;
        let meta = self.meta.as_ref().map(|m| VideoMeta {
            frames: m.frames[start..start + len].to_vec(),
            z_min: m.z_min,
        });
        Ok(Self { depth, meta })
    }
}

/// Mean of x and y with z forced to 0.
pub fn center_of_mass(frame: &[Point]) -> Result<Point> {
    if frame.is_empty() {
        return Err(Error::invalid("center of mass of an empty frame"));
    }
    let n = frame.len() as f64;
    let (sx, sy) = frame.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
    Ok([sx / n, sy / n, 0.0])
}

/// Azimuth of the center as seen from the sensor, in `(-π, π]`.
pub fn sensor_view_angle(center: Point) -> Result<f64> {
    if center[0] == 0.0 && center[1] == 0.0 {
        return Err(Error::invalid("sensor view angle undefined for a center at the origin"));
    }
    let a = center[1].atan2(center[0]);
    Ok(if a <= -PI { PI } else { a })
}

pub fn canonicalize(seq: &GaitPointSequence) -> Result<(Vec<Vec<Point>>, Vec<CanonicalFrameMeta>)> {
    seq.validate()?;
    let metas = seq
        .frames
        .iter()
        .map(|f| CanonicalFrameMeta::from_frame(f))
        .collect::<Result<Vec<_>>>()?;
    let frames = canonicalize_with(seq, &metas)?;
    Ok((frames, metas))
}

/// Canonicalize with externally supplied per-frame centers and angles.
pub fn canonicalize_with(seq: &GaitPointSequence, metas: &[CanonicalFrameMeta]) -> Result<Vec<Vec<Point>>> {
    if metas.len() != seq.frames.len() {
        return Err(Error::invalid(format!("{} frame metas for {} frames", metas.len(), seq.frames.len())));
    }
    Ok(seq
        .frames
        .iter()
        .zip(metas)
        .map(|(frame, m)| frame.iter().map(|&p| m.to_canonical(p)).collect())
        .collect())
}

/// Project canonical frames; `z_min` is taken from frame 0.
pub fn project(canonical: &[Vec<Point>], metas: &[CanonicalFrameMeta], cfg: &ProjectionConfig) -> Result<DepthVideo> {
    let first = canonical.first().ok_or_else(|| Error::invalid("no frames to project"))?;
    let z_min = first.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
    if !z_min.is_finite() {
        return Err(Error::invalid("frame 0 has no points"));
    }
    project_with_z_min(canonical, metas, z_min, cfg)
}

pub fn project_with_z_min(
    canonical: &[Vec<Point>],
    metas: &[CanonicalFrameMeta],
    z_min: f64,
    cfg: &ProjectionConfig,
) -> Result<DepthVideo> {
    cfg.validate()?;
    if metas.len() != canonical.len() {
        return Err(Error::invalid(format!("{} frame metas for {} frames", metas.len(), canonical.len())));
    }
    let (fr, h, w) = (canonical.len(), cfg.height, cfg.width);
    let mut depth = Tensor::<f32>::zeros(&[fr, 1, h, w]);
    let data = depth.data_mut();
    for (f, frame) in canonical.iter().enumerate() {
        let plane = &mut data[f * h * w..(f + 1) * h * w];
        for &q in frame {
            if let Some((ph, pw, d)) = cfg.pixel_of(q, z_min) {
                let slot = &mut plane[ph * w + pw];
                if d > *slot {
                    *slot = d;
                }
            }
        }
    }
    Ok(DepthVideo { depth, meta: Some(VideoMeta { frames: metas.to_vec(), z_min }) })
}

/// Canonicalize and project a raw sensor-frame sequence.
pub fn project_sequence(seq: &GaitPointSequence, cfg: &ProjectionConfig) -> Result<DepthVideo> {
    let (canonical, metas) = canonicalize(seq)?;
    project(&canonical, &metas, cfg)
}

/// Re-project sensor-frame points through an existing video's meta.
pub fn reproject(seq: &GaitPointSequence, meta: &VideoMeta, cfg: &ProjectionConfig) -> Result<DepthVideo> {
    let canonical = canonicalize_with(seq, &meta.frames)?;
    project_with_z_min(&canonical, &meta.frames, meta.z_min, cfg)
}

/// One sensor-frame point per occupied pixel, at the pixel center.
pub fn unproject(video: &DepthVideo, cfg: &ProjectionConfig) -> Result<GaitPointSequence> {
    let meta = video.meta.as_ref().ok_or_else(|| Error::invalid("depth video carries no projection meta"))?;
    if meta.frames.len() != video.frames() {
        return Err(Error::invalid("projection meta does not match frame count"));
    }
    if video.height() != cfg.height || video.width() != cfg.width {
        return Err(Error::invalid(format!(
            "video is {}x{}, config expects {}x{}",
            video.height(),
            video.width(),
            cfg.height,
            cfg.width
        )));
    }
    let w = video.width();
    let frames = (0..video.frames())
        .map(|f| {
            let m = &meta.frames[f];
            video
                .frame(f)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d > 0.0)
                .map(|(i, &d)| m.from_canonical(cfg.point_of(i / w, i % w, d, meta.z_min)))
                .collect()
        })
        .collect();
    Ok(GaitPointSequence::new(frames))
}
