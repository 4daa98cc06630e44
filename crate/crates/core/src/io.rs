//! On-disk formats: the GSU1 tensor container, GSUP point sequences, dataset
//! manifests, `key = value` config files and PNG frame dumps.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::degrade::MaskVideo;
use crate::error::{Error, Result};
use crate::geom::{CanonicalFrameMeta, DepthVideo, GaitPointSequence, VideoMeta};
use crate::tensor::{DType, Tensor};

const GSU1_MAGIC: &[u8; 4] = b"GSU1";
const GSU1_VERSION: u16 = 1;
const GSUP_MAGIC: &[u8; 4] = b"GSUP";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Payload {
    pub fn text(s: &str) -> Self {
        Payload::U8 { shape: vec![s.len()], data: s.as_bytes().to_vec() }
    }

    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U8 { .. } => DType::U8,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::F64(t) => t.shape(),
            Payload::U8 { shape, .. } => shape,
        }
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Payload)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, payload: Payload) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("bad entry name length {}", name.len())));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate entry {name:?}")));
        }
        if payload.shape().len() > u8::MAX as usize {
            return Err(Error::invalid("rank too large"));
        }
        self.entries.push((name.to_string(), payload));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Payload)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    fn require(&self, name: &str) -> Result<&Payload> {
        self.get(name).ok_or_else(|| Error::format(format!("missing entry {name:?}")))
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.require(name)? {
            Payload::F32(t) => Ok(t),
            _ => Err(Error::format(format!("entry {name:?} is not f32"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.require(name)? {
            Payload::F64(t) => Ok(t),
            _ => Err(Error::format(format!("entry {name:?} is not f64"))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.require(name)? {
            Payload::U8 { shape, data } => Ok((shape, data)),
            _ => Err(Error::format(format!("entry {name:?} is not u8"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let (_, data) = self.u8(name)?;
        String::from_utf8(data.to_vec()).map_err(|_| Error::format(format!("entry {name:?} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GSU1_MAGIC);
        out.extend_from_slice(&GSU1_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.dtype() as u8);
            out.push(p.shape().len() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match p {
                Payload::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if &r.array::<4>()? != GSU1_MAGIC {
            return Err(Error::format("not a GSU1 file"));
        }
        let version = r.u16()?;
        if version != GSU1_VERSION {
            return Err(Error::format(format!("unsupported GSU1 version {version}")));
        }
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format("entry name is not UTF-8"))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| Error::format("dimension overflow"))))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("dimension overflow"))?;
            let payload = match dtype {
                0 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?;
                    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                    Payload::F32(Tensor::new(&shape, data).map_err(|e| Error::format(e.to_string()))?)
                }
                1 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::format("size overflow"))?)?;
                    let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                    Payload::F64(Tensor::new(&shape, data).map_err(|e| Error::format(e.to_string()))?)
                }
                2 => Payload::U8 { data: r.take(numel)?.to_vec(), shape },
                other => return Err(Error::format(format!("unknown dtype code {other}"))),
            };
            c.push(name, payload).map_err(|e| Error::format(e.to_string()))?;
        }
        r.done()?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A depth video with its labels and, for degraded videos, the applied mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video: DepthVideo,
    pub sequence_id: String,
    pub subject_id: String,
    pub mask: Option<MaskVideo>,
    pub recipe: Option<String>,
}

impl VideoRecord {
    pub fn new(video: DepthVideo, sequence_id: &str, subject_id: &str) -> Self {
        Self { video, sequence_id: sequence_id.into(), subject_id: subject_id.into(), mask: None, recipe: None }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push("depth", Payload::F32(self.video.depth.clone()))?;
        c.push("sequence_id", Payload::text(&self.sequence_id))?;
        c.push("subject_id", Payload::text(&self.subject_id))?;
        if let Some(meta) = &self.video.meta {
            let f = meta.frames.len();
            let centers = meta.frames.iter().flat_map(|m| [m.center[0], m.center[1]]).collect();
            c.push("meta/center", Payload::F64(Tensor::new(&[f, 2], centers)?))?;
            let angles = meta.frames.iter().map(|m| m.sensor_angle).collect();
            c.push("meta/sensor_angle", Payload::F64(Tensor::new(&[f], angles)?))?;
            c.push("meta/z_min", Payload::F64(Tensor::scalar(meta.z_min)))?;
        }
        if let Some(mask) = &self.mask {
            c.push("mask", Payload::U8 { shape: mask.shape().to_vec(), data: mask.data().to_vec() })?;
        }
        if let Some(recipe) = &self.recipe {
            c.push("recipe", Payload::text(recipe))?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut video = DepthVideo::new(c.f32("depth")?.clone()).map_err(|e| Error::format(e.to_string()))?;
        if c.get("meta/center").is_some() {
            let centers = c.f64("meta/center")?;
            let angles = c.f64("meta/sensor_angle")?;
            let f = video.frames();
            if centers.shape() != [f, 2] || angles.shape() != [f] {
                return Err(Error::format("projection meta does not match frame count"));
            }
            let frames = (0..f)
                .map(|i| CanonicalFrameMeta {
                    center: [centers.data()[2 * i], centers.data()[2 * i + 1], 0.0],
                    sensor_angle: angles.data()[i],
                })
                .collect();
            video.meta = Some(VideoMeta { frames, z_min: c.f64("meta/z_min")?.item()? });
        }
        let mask = match c.get("mask") {
            Some(_) => {
                let (shape, data) = c.u8("mask")?;
                let shape: [usize; 4] =
                    shape.try_into().map_err(|_| Error::format("mask must have rank 4"))?;
                if shape.as_slice() != video.depth.shape() {
                    return Err(Error::format("mask shape differs from depth shape"));
                }
                Some(MaskVideo::from_data(shape, data.to_vec()).map_err(|e| Error::format(e.to_string()))?)
            }
            None => None,
        };
        let recipe = c.get("recipe").map(|_| c.text("recipe")).transpose()?;
        Ok(Self { video, sequence_id: c.text("sequence_id")?, subject_id: c.text("subject_id")?, mask, recipe })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

pub fn points_to_bytes(seq: &GaitPointSequence) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(GSUP_MAGIC);
    out.extend_from_slice(&u32::try_from(seq.frames.len()).map_err(|_| Error::invalid("too many frames"))?.to_le_bytes());
    for frame in &seq.frames {
        out.extend_from_slice(&u32::try_from(frame.len()).map_err(|_| Error::invalid("too many points"))?.to_le_bytes());
        for p in frame {
            for &v in p {
                let v = v as f32;
                if !v.is_finite() {
                    return Err(Error::invalid("non-finite point coordinate"));
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn points_from_bytes(bytes: &[u8]) -> Result<GaitPointSequence> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.array::<4>()? != GSUP_MAGIC {
        return Err(Error::format("not a GSUP file"));
    }
    let frames = r.u32()? as usize;
    let mut out = Vec::with_capacity(frames.min(1 << 16));
    for _ in 0..frames {
        let n = r.u32()? as usize;
        let mut frame = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let p = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("non-finite point coordinate"));
            }
            frame.push(p);
        }
        out.push(frame);
    }
    r.done()?;
    Ok(GaitPointSequence::new(out))
}

pub fn write_points(path: &Path, seq: &GaitPointSequence) -> Result<()> {
    write_atomic(path, &points_to_bytes(seq)?)
}

pub fn read_points(path: &Path) -> Result<GaitPointSequence> {
    points_from_bytes(&fs::read(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// One row of a dataset manifest; `file` is relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub subject_id: String,
    pub file: String,
}

const MANIFEST_HEADER: &str = "sequence_id\tsubject_id\tfile";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        for field in [&e.sequence_id, &e.subject_id, &e.file] {
            if field.contains(['\t', '\n']) {
                return Err(Error::invalid(format!("manifest field {field:?} contains a tab or newline")));
            }
        }
        s.push_str(&format!("{}\t{}\t{}\n", e.sequence_id, e.subject_id, e.file));
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(format!("{}: missing manifest header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            match f.as_slice() {
                [a, b, c] => Ok(ManifestEntry { sequence_id: a.to_string(), subject_id: b.to_string(), file: c.to_string() }),
                _ => Err(Error::format(format!("{}: bad manifest line {l:?}", path.display()))),
            }
        })
        .collect()
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::format(format!("config line {}: empty key", i + 1)));
        }
        if out.insert(k.replace('-', "_"), v.trim().to_string()).is_some() {
            return Err(Error::format(format!("config line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

pub fn format_config(values: &BTreeMap<String, String>) -> String {
    values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// 8-bit grayscale PNG of one frame, depth mapped linearly onto 0..=255.
/// Grid row 0 is the lowest elevation, so rows are written bottom-up to keep
/// the image upright.
pub fn write_png(path: &Path, frame: &[f32], height: usize, width: usize) -> Result<()> {
    if frame.len() != height * width {
        return Err(Error::invalid("frame size does not match PNG dimensions"));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let pixels: Vec<u8> = frame
        .chunks(width)
        .rev()
        .flatten()
        .map(|&d| (d.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_image_data(&pixels).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.finish().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Append one line to a text log, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}
