//! Synthetic walking pedestrians: an ellipsoid torso, a head sphere and four
//! two-segment capsule limbs swinging sinusoidally, surface-sampled into
//! point clouds in sensor coordinates (sensor at the origin, z up).

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{GaitPointSequence, Point};
use crate::io::{write_manifest, write_points, ManifestEntry};
use crate::rng::Prng;

#[derive(Clone, Debug, PartialEq)]
pub struct WalkerSpec {
    /// Standing height in meters.
    pub height: f64,
    /// Lateral half-width of the torso ellipsoid.
    pub torso_radius: f64,
    /// Hip-to-ground leg length; arms are scaled from it.
    pub limb_length: f64,
    /// Frames per gait cycle.
    pub period: f64,
    /// Peak hip swing in radians.
    pub stride_amplitude: f64,
    /// Surface sampling density in points per square meter.
    pub points_per_m2: f64,
    /// Walking direction in the ground plane.
    pub heading: f64,
    /// Ground-plane position at frame 0.
    pub start: [f64; 2],
    pub seed: u64,
}

impl Default for WalkerSpec {
    fn default() -> Self {
        Self {
            height: 1.75,
            torso_radius: 0.18,
            limb_length: 0.875,
            period: 12.0,
            stride_amplitude: 0.4,
            points_per_m2: 3000.0,
            heading: PI / 2.0,
            start: [6.0, -1.5],
            seed: 0,
        }
    }
}

impl WalkerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1.4..=2.0).contains(&self.height) {
            return Err(Error::invalid(format!("walker height {} outside [1.4, 2.0] m", self.height)));
        }
        if !(self.period >= 4.0 && self.period.is_finite()) {
            return Err(Error::invalid(format!("gait period {} must be at least 4 frames", self.period)));
        }
        let positive = [self.torso_radius, self.limb_length, self.points_per_m2];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("torso radius, limb length and density must be positive"));
        }
        if !(self.stride_amplitude.is_finite() && self.heading.is_finite()) || self.start.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("walker parameters must be finite"));
        }
        Ok(())
    }

    /// Ground speed per frame: two steps of length `2·L·sin(A)` per cycle.
    pub fn speed(&self) -> f64 {
        4.0 * self.limb_length * self.stride_amplitude.abs().sin() / self.period
    }
}

/// A point attached to a body part, in the part's rest frame.
struct Surface {
    part: Part,
    local: Point,
}

#[derive(Clone, Copy)]
enum Part {
    Rigid,
    Upper(usize),
    Lower(usize),
}

/// Per-limb attachment: hip or shoulder position, segment lengths and radius.
struct Limb {
    root: Point,
    upper: f64,
    lower: f64,
    radius: f64,
}

struct Body {
    limbs: [Limb; 4],
    points: Vec<Surface>,
}

fn sphere_dir(rng: &mut Prng) -> Point {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn count(area: f64, density: f64) -> usize {
    (area * density).ceil().max(1.0) as usize
}

/// Points on an axis-aligned ellipsoid (area by Knud Thomsen's approximation).
fn ellipsoid(center: Point, radii: Point, density: f64, rng: &mut Prng, out: &mut Vec<Surface>) {
    let p = 1.6075;
    let [a, b, c] = radii.map(|r| r.powf(p));
    let area = 4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p);
    for _ in 0..count(area, density) {
        let d = sphere_dir(rng);
        let local = [center[0] + radii[0] * d[0], center[1] + radii[1] * d[1], center[2] + radii[2] * d[2]];
        out.push(Surface { part: Part::Rigid, local });
    }
}

/// Capsule hanging down `-z` from the origin of its segment frame.
fn capsule(part: Part, length: f64, radius: f64, density: f64, rng: &mut Prng, out: &mut Vec<Surface>) {
    let side = 2.0 * PI * radius * length;
    let caps = 4.0 * PI * radius * radius;
    for _ in 0..count(side + caps, density) {
        let local = if rng.uniform() * (side + caps) < side {
            let phi = 2.0 * PI * rng.uniform();
            [radius * phi.cos(), radius * phi.sin(), -length * rng.uniform()]
        } else {
            let d = sphere_dir(rng);
            let z = if d[2] > 0.0 { 0.0 } else { -length };
            [radius * d[0], radius * d[1], z + radius * d[2]]
        };
        out.push(Surface { part, local });
    }
}

/// Body-local frame: x forward, y left, z up, feet on z = 0 at rest.
fn build_body(spec: &WalkerSpec) -> Body {
    let h = spec.height;
    let leg = spec.limb_length;
    let arm = 0.75 * leg;
    let shoulder_z = 0.82 * h;
    let half_hip = 0.5 * spec.torso_radius;
    let half_shoulder = spec.torso_radius + 0.045;
    let limbs = [
        Limb { root: [0.0, half_hip, leg], upper: 0.5 * leg, lower: 0.5 * leg, radius: 0.065 },
        Limb { root: [0.0, -half_hip, leg], upper: 0.5 * leg, lower: 0.5 * leg, radius: 0.065 },
        Limb { root: [0.0, half_shoulder, shoulder_z], upper: 0.52 * arm, lower: 0.48 * arm, radius: 0.045 },
        Limb { root: [0.0, -half_shoulder, shoulder_z], upper: 0.52 * arm, lower: 0.48 * arm, radius: 0.045 },
    ];
    let mut rng = Prng::new(spec.seed).fork("walker-surface");
    let mut points = Vec::new();
    let density = spec.points_per_m2;
    let head_r = 0.065 * h;
    let torso_top = h - 2.0 * head_r;
    let torso_half = 0.5 * (torso_top - leg) + 0.03;
    ellipsoid(
        [0.0, 0.0, 0.5 * (torso_top + leg)],
        [0.62 * spec.torso_radius, spec.torso_radius, torso_half],
        density,
        &mut rng,
        &mut points,
    );
    ellipsoid([0.0, 0.0, h - head_r], [head_r; 3], density, &mut rng, &mut points);
    for (i, limb) in limbs.iter().enumerate() {
        capsule(Part::Upper(i), limb.upper, limb.radius, density, &mut rng, &mut points);
        capsule(Part::Lower(i), limb.lower, limb.radius, density, &mut rng, &mut points);
    }
    Body { limbs, points }
}

/// Rotate a segment-frame point in the sagittal (x, z) plane so `-z` points
/// along `(sin θ, 0, −cos θ)`, then translate to `origin`.
fn swing(p: Point, theta: f64, origin: Point) -> Point {
    let (s, c) = theta.sin_cos();
    [origin[0] + c * p[0] - s * p[2], origin[1] + p[1], origin[2] + s * p[0] + c * p[2]]
}

/// Upper and lower segment angles of each limb at `frame`.
fn pose(spec: &WalkerSpec, frame: usize) -> [(f64, f64); 4] {
    let phase = 2.0 * PI * frame as f64 / spec.period;
    let a = spec.stride_amplitude;
    let hip = a * phase.sin();
    // knees flex during each leg's swing phase, elbows stay slightly bent
    let knee = |h: f64| -1.2 * a * (0.5 + 0.5 * (phase + h).cos());
    let elbow = 0.5 * a;
    [
        (hip, hip + knee(0.0)),
        (-hip, -hip + knee(PI)),
        (-0.8 * hip, -0.8 * hip + elbow),
        (0.8 * hip, 0.8 * hip + elbow),
    ]
}

/// Render `frames` frames of a walker in sensor coordinates.
pub fn generate(spec: &WalkerSpec, frames: usize) -> Result<GaitPointSequence> {
    spec.validate()?;
    let body = build_body(spec);
    let (hs, hc) = spec.heading.sin_cos();
    let speed = spec.speed();
    let out = (0..frames)
        .map(|f| {
            let angles = pose(spec, f);
            let knees: Vec<Point> = body
                .limbs
                .iter()
                .zip(&angles)
                .map(|(l, &(up, _))| swing([0.0, 0.0, -l.upper], up, l.root))
                .collect();
            let travel = speed * f as f64;
            let origin = [spec.start[0] + travel * hc, spec.start[1] + travel * hs];
            body.points
                .iter()
                .map(|s| {
                    let b = match s.part {
                        Part::Rigid => s.local,
                        Part::Upper(i) => swing(s.local, angles[i].0, body.limbs[i].root),
                        Part::Lower(i) => swing(s.local, angles[i].1, knees[i]),
                    };
                    [origin[0] + hc * b[0] - hs * b[1], origin[1] + hs * b[0] + hc * b[1], b[2]]
                })
                .collect()
        })
        .collect();
    Ok(GaitPointSequence::new(out))
}

/// Randomized walker for subject `subject`, sequence `sequence`.
pub fn random_walker(seed: u64, subject: usize, sequence: usize) -> WalkerSpec {
    let mut body = Prng::new(seed).fork("subject").fork_index(subject as u64);
    let height = 1.5 + 0.45 * body.uniform();
    let torso_radius = 0.15 + 0.06 * body.uniform();
    let limb_length = height * (0.47 + 0.06 * body.uniform());
    let period = 10.0 + body.below(7) as f64;
    let stride_amplitude = 0.3 + 0.2 * body.uniform();
    let mut walk = body.fork("sequence").fork_index(sequence as u64);
    let heading = 2.0 * PI * walk.uniform();
    let distance = 5.0 + 5.0 * walk.uniform();
    let bearing = 2.0 * PI * walk.uniform();
    WalkerSpec {
        height,
        torso_radius,
        limb_length,
        period,
        stride_amplitude,
        heading,
        start: [distance * bearing.cos(), distance * bearing.sin()],
        seed: walk.next_u64(),
        ..WalkerSpec::default()
    }
}

/// In-memory dataset: subjects `s000…`, sequences `s000_q00…`.
pub fn generate_dataset(subjects: usize, sequences: usize, frames: usize, seed: u64) -> Result<Vec<GaitPointSequence>> {
    if subjects == 0 || sequences == 0 || frames == 0 {
        return Err(Error::invalid("dataset needs at least one subject, sequence and frame"));
    }
    let mut out = Vec::with_capacity(subjects * sequences);
    for s in 0..subjects {
        for q in 0..sequences {
            let mut seq = generate(&random_walker(seed, s, q), frames)?;
            seq.subject_id = format!("s{s:03}");
            seq.sequence_id = format!("s{s:03}_q{q:02}");
            out.push(seq);
        }
    }
    Ok(out)
}

/// Write one GSUP file per sequence plus `manifest.tsv` into `dir`.
pub fn make_dataset(dir: &Path, subjects: usize, sequences: usize, frames: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for seq in generate_dataset(subjects, sequences, frames, seed)? {
        let file = format!("{}.gsup", seq.sequence_id);
        write_points(&dir.join(&file), &seq)?;
        entries.push(ManifestEntry { sequence_id: seq.sequence_id, subject_id: seq.subject_id, file });
    }
    write_manifest(&dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}
