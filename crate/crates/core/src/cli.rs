//! The `gsu` command line: synth → project → degrade → train → sample → eval.
//!
//! Option values resolve as flag, then `--config` file, then built-in default.
//! Every command writes the resolved values to a sidecar file next to its
//! output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::degrade::{compose_and_apply, observation_mask, Fraction, MaskRecipe};
use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::eval::{dump_frames, evaluate, interpolate_baseline, Interpolation, MetricReport};
use crate::geom::{project_sequence, ProjectionConfig};
use crate::infer::{upsample, UpsampleConfig};
use crate::io::{format_config, parse_config, read_manifest, read_points, write_atomic, write_manifest, Container, ManifestEntry, VideoRecord};
use crate::tensor::Element;
use crate::train::{load_model, TrainConfig, TrainSequence, Trainer};

#[derive(Parser, Debug)]
#[command(name = "gsu", version, about = "Depth-video gait upsampling with a masked video diffusion model")]
pub struct Cli {
    /// `key = value` file supplying option defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic walking sequences and a manifest.
    Synth(SynthArgs),
    /// Project point sequences into depth videos.
    Project(ProjectArgs),
    /// Apply a vertical-line and pepper mask recipe.
    Degrade(DegradeArgs),
    /// Train a denoiser on clean depth videos.
    Train(TrainArgs),
    /// Upsample degraded videos with a checkpoint.
    Sample(SampleArgs),
    /// Score videos against references and write a CSV report.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Grid size in pixels (square); pitch scales so the box stays 2.56 m.
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep every k-th row.
    #[arg(long)]
    pub vmask: Option<usize>,
    /// Pepper drop probability as a fraction, e.g. `1/6`.
    #[arg(long)]
    pub pmask: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub ema_interval: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sample each frame independently (image mode).
    #[arg(long)]
    pub ablate_frames: bool,
    /// Frames per clip; defaults to the training window.
    #[arg(long)]
    pub clip: Option<usize>,
    /// Use the deterministic sampler (no per-step noise).
    #[arg(long)]
    pub deterministic: bool,
    /// Use live weights instead of the EMA shadow.
    #[arg(long)]
    pub live_weights: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Clean reference videos.
    #[arg(long)]
    pub reference: PathBuf,
    /// Videos to score; degraded inputs when a baseline is requested.
    #[arg(long)]
    pub input: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub out: PathBuf,
    /// none, nearest, bilinear or bicubic.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Directory for per-frame PNG dumps of the scored videos.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

/// Resolves options and remembers what was used.
struct Options {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Options {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_config(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?,
            None => BTreeMap::new(),
        };
        Ok(Self { file, used: BTreeMap::new() })
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => text
                .parse()
                .map_err(|_| Error::invalid(format!("config value for {key} is malformed: {text:?}")))?,
            (None, None) => default,
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn flag(&mut self, key: &str, set: bool) -> Result<bool> {
        self.get(key, set.then_some(true), false)
    }

    fn write_sidecar(&self, path: &Path) -> Result<()> {
        write_atomic(path, format_config(&self.used).as_bytes())
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gsu: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut opts = Options::load(cli.config.as_deref())?;
    let seed = opts.get("seed", cli.seed, 0u64)?;
    let threads = opts.get("threads", cli.threads, 0usize)?;
    if threads > 0 {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::Synth(a) => synth(a, seed, &mut opts),
        Command::Project(a) => project(a, &mut opts),
        Command::Degrade(a) => degrade(a, seed, &mut opts),
        Command::Train(a) => train(a, seed, &mut opts),
        Command::Sample(a) => sample_cmd(a, seed, &mut opts),
        Command::Eval(a) => eval_cmd(a, &mut opts),
    }
}

fn sidecar_in(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.resolved.cfg"))
}

fn synth(a: SynthArgs, seed: u64, opts: &mut Options) -> Result<()> {
    let subjects = opts.get("subjects", a.subjects, 8usize)?;
    let sequences = opts.get("sequences", a.sequences, 1usize)?;
    let frames = opts.get("frames", a.frames, 24usize)?;
    let entries = crate::synth::make_dataset(&a.out, subjects, sequences, frames, seed)?;
    opts.write_sidecar(&sidecar_in(&a.out, "synth"))?;
    println!("wrote {} sequences to {}", entries.len(), a.out.display());
    Ok(())
}

fn manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest(&dir.join("manifest.tsv")).map_err(|e| match e {
        Error::Io(io) => Error::invalid(format!("{}: {io}", dir.join("manifest.tsv").display())),
        other => other,
    })
}

/// Records of a directory written by `project`, `degrade` or `sample`.
fn read_records(dir: &Path) -> Result<Vec<VideoRecord>> {
    manifest(dir)?.iter().map(|e| VideoRecord::read(&dir.join(&e.file))).collect()
}

fn write_records(dir: &Path, records: &[VideoRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for r in records {
        let file = format!("{}.gsu", r.sequence_id);
        r.write(&dir.join(&file))?;
        entries.push(ManifestEntry { sequence_id: r.sequence_id.clone(), subject_id: r.subject_id.clone(), file });
    }
    write_manifest(&dir.join("manifest.tsv"), &entries)
}

fn project(a: ProjectArgs, opts: &mut Options) -> Result<()> {
    let grid = opts.get("grid", a.grid, 64usize)?;
    let cfg = ProjectionConfig::with_grid(grid);
    let mut records = Vec::new();
    for e in manifest(&a.input)? {
        let seq = read_points(&a.input.join(&e.file))?;
        let video = project_sequence(&seq, &cfg)?;
        records.push(VideoRecord::new(video, &e.sequence_id, &e.subject_id));
    }
    write_records(&a.out, &records)?;
    opts.write_sidecar(&sidecar_in(&a.out, "project"))?;
    println!("projected {} sequences at {grid}x{grid}", records.len());
    Ok(())
}

fn degrade(a: DegradeArgs, seed: u64, opts: &mut Options) -> Result<()> {
    let k = opts.get("vmask", a.vmask, 2usize)?;
    let p: Fraction = opts.get("pmask", a.pmask, "1/6".to_string())?.parse()?;
    let recipe = MaskRecipe::new(k, p, seed)?;
    let mut out = Vec::new();
    for r in read_records(&a.input)? {
        let (video, mask) = compose_and_apply(&r.video, &recipe, &r.sequence_id)?;
        out.push(VideoRecord { video, mask: Some(mask), recipe: Some(recipe.label()), ..r });
    }
    write_records(&a.out, &out)?;
    opts.write_sidecar(&sidecar_in(&a.out, "degrade"))?;
    println!("degraded {} sequences with {}", out.len(), recipe.label());
    Ok(())
}

fn train(a: TrainArgs, seed: u64, opts: &mut Options) -> Result<()> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: opts.get("learning_rate", a.learning_rate, d.learning_rate)?,
        iterations: opts.get("iterations", a.iterations, d.iterations)?,
        batch_size: opts.get("batch_size", a.batch_size, d.batch_size)?,
        frames: opts.get("frames", a.frames, d.frames)?,
        ema_decay: opts.get("ema_decay", a.ema_decay, d.ema_decay)?,
        ema_interval: opts.get("ema_interval", a.ema_interval, d.ema_interval)?,
        checkpoint_interval: opts.get("checkpoint_interval", a.checkpoint_interval, d.checkpoint_interval)?,
        seed,
        ..d
    };
    let spec = DenoiserSpec {
        base_channels: opts.get("base_channels", a.base_channels, DenoiserSpec::default().base_channels)?,
        max_frames: config.frames.max(1),
        ..DenoiserSpec::default()
    };
    let precision = opts.get("precision", a.precision.clone(), "f32".to_string())?;
    let data: Vec<TrainSequence> = read_records(&a.data)?
        .into_iter()
        .map(|r| TrainSequence { id: r.sequence_id, video: r.video })
        .collect();
    std::fs::create_dir_all(&a.out)?;
    opts.write_sidecar(&sidecar_in(&a.out, "train"))?;
    match precision.as_str() {
        "f32" => train_with::<f32>(&spec, config, &data, &a),
        "f64" => train_with::<f64>(&spec, config, &data, &a),
        other => Err(Error::invalid(format!("precision must be f32 or f64, got {other:?}"))),
    }
}

fn train_with<T: Element>(spec: &DenoiserSpec, config: TrainConfig, data: &[TrainSequence], a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::<T>::from_checkpoint(&Container::read(p)?, config)?,
        None => Trainer::<T>::new(spec, config)?,
    };
    let total = trainer.config.iterations;
    trainer.run(data, Some(&a.out), |it, loss| {
        if it % 50 == 0 || it as usize == total {
            println!("iteration {it}/{total} loss {loss:.5}");
        }
    })
}

fn sample_cmd(a: SampleArgs, seed: u64, opts: &mut Options) -> Result<()> {
    let ck = Container::read(&a.checkpoint)?;
    let trained_frames = match ck.get("train/frames") {
        Some(_) => ck.f64("train/frames")?.item()? as usize,
        None => DenoiserSpec::default().max_frames,
    };
    let cfg = UpsampleConfig {
        steps: opts.get("steps", a.steps, 32usize)?,
        clip: opts.get("clip", a.clip, trained_frames)?,
        ablate_frames: opts.flag("ablate_frames", a.ablate_frames)?,
        stochastic: !opts.flag("deterministic", a.deterministic)?,
        seed,
    };
    let model = load_model::<f32>(&ck, opts.flag("live_weights", a.live_weights)?)?;
    let mut out = Vec::new();
    for r in read_records(&a.input)? {
        let per_seq = UpsampleConfig { seed: crate::rng::Prng::new(seed).fork(&r.sequence_id).next_u64(), ..cfg.clone() };
        let video = upsample(&model, &r.video, &per_seq)?;
        out.push(VideoRecord { video, ..r });
    }
    write_records(&a.out, &out)?;
    opts.write_sidecar(&sidecar_in(&a.out, "sample"))?;
    println!("sampled {} sequences with T={}{}", out.len(), cfg.steps, if cfg.ablate_frames { " (per frame)" } else { "" });
    Ok(())
}

fn eval_cmd(a: EvalArgs, opts: &mut Options) -> Result<()> {
    let baseline = opts.get("baseline", a.baseline, "none".to_string())?;
    let method = match baseline.as_str() {
        "none" => None,
        other => Some(other.parse::<Interpolation>()?),
    };
    let references: BTreeMap<String, VideoRecord> =
        read_records(&a.reference)?.into_iter().map(|r| (r.sequence_id.clone(), r)).collect();
    let mut report = MetricReport::default();
    for r in read_records(&a.input)? {
        let reference = references
            .get(&r.sequence_id)
            .ok_or_else(|| Error::invalid(format!("no reference video for {}", r.sequence_id)))?;
        let pred = match method {
            Some(m) => interpolate_baseline(&r.video, &observation_mask(&r.video), m)?,
            None => r.video.clone(),
        };
        if let Some(dir) = &a.png {
            dump_frames(dir, &r.sequence_id, &pred)?;
        }
        let recipe = r.recipe.clone().unwrap_or_else(|| "none".into());
        report.rows.push(evaluate(&pred, &reference.video, &r.sequence_id, &recipe)?);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(&a.out, report.to_csv()?.as_bytes())?;
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".resolved.cfg");
    opts.write_sidecar(Path::new(&sidecar))?;
    let (p, s, c) = report.mean()?;
    println!("mean PSNR {p:.3} dB, SSIM {s:.4}, consistency {c:.5} over {} sequences", report.rows.len());
    Ok(())
}
