//! The `demix` command line: train, separate, evaluate, simulate-noise,
//! blend and synth.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use demix_core::audio::{self, SampleFormat, StemClass, StemSet, Track};
use demix_core::config::RunConfig;
use demix_core::eval::{self, EvalReport};
use demix_core::inference::{self, BlendSpec, SeparationPlan};
use demix_core::model::{self, Model};
use demix_core::noise::{self, CorruptionSpec};
use demix_core::synth::{self, SynthSpec};
use demix_core::training::{
    self, StepOutcome, TrainConfig, TrainError, TrainObserver, TrainState, Validation,
};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "DEMIX_SEED";
/// Latest checkpoint inside a training output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.dmx";
pub const LOG_FILE: &str = "train.log";

#[derive(Debug, Parser)]
#[command(name = "demix", version, about = "Music source separation toolkit")]
pub struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a stem dataset.
    Train(TrainArgs),
    /// Separate a mixture into stems with one or more checkpoints.
    Separate(SeparateArgs),
    /// Score estimated stems against references.
    Evaluate(EvaluateArgs),
    /// Write a corrupted copy of a dataset plus a replay manifest.
    SimulateNoise(NoiseArgs),
    /// Weighted per-class average of several estimate directories.
    Blend(BlendArgs),
    /// Generate a synthetic four-class toy dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "F")]
    pub config: PathBuf,
    /// Training dataset root, one directory per track.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// Model checkpoints; more than one blends their estimates.
    #[arg(long, value_name = "F", num_args = 1.., required = true)]
    pub ckpt: Vec<PathBuf>,
    /// Mixture WAV file.
    #[arg(long, value_name = "WAV")]
    pub input: PathBuf,
    /// Output directory for the four stem files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Chunk length in STFT frames.
    #[arg(long, value_name = "N")]
    pub chunk_frames: Option<usize>,
    /// Number of chunks covering each sample.
    #[arg(long, value_name = "K")]
    pub overlap: Option<usize>,
    /// Per-checkpoint weights separated by `;`, each one number or four
    /// comma-separated numbers (vocals,drums,bass,other).
    #[arg(long, value_name = "SPEC", value_parser = parse_blend_weights)]
    pub blend_weights: Option<BlendSpec>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Estimates: a track directory or a root of track directories.
    #[arg(long, value_name = "DIR")]
    pub est: PathBuf,
    /// References laid out like `--est`.
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: PathBuf,
    /// Output JSON report.
    #[arg(long, value_name = "F")]
    pub report: PathBuf,
    /// Also compute chunk-level (1 s) SDR medians.
    #[arg(long)]
    pub csdr: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseMode {
    LabelNoise,
    Bleeding,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long, value_enum)]
    pub mode: NoiseMode,
    /// Clean dataset root.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Destination root.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Bleeding level relative to the other stems.
    #[arg(long, value_name = "G", default_value_t = -10.0, allow_negative_numbers = true)]
    pub bleed_gain_db: f64,
    /// Per-stem corruption probability for label noise.
    #[arg(long, value_name = "P", default_value_t = 0.5)]
    pub p: f64,
    /// Random seed; defaults to $DEMIX_SEED or 0.
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BlendArgs {
    /// Estimate directories with weights, e.g. `a:1,b:0.5`.
    #[arg(long, value_name = "DIR:W,...", value_parser = parse_blend_input, value_delimiter = ',', required = true)]
    pub inputs: Vec<(PathBuf, f64)>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N", default_value_t = 4)]
    pub tracks: usize,
    #[arg(long, value_name = "SECONDS", default_value_t = 10.0)]
    pub seconds: f64,
    #[arg(long, value_name = "HZ", default_value_t = 8000)]
    pub sample_rate: u32,
    /// Random seed; defaults to $DEMIX_SEED or 0.
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

fn parse_blend_weights(s: &str) -> Result<BlendSpec, String> {
    let weights = s
        .split(';')
        .map(|part| {
            let nums: Vec<f64> = part
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
                .collect::<Result<_, _>>()?;
            match nums[..] {
                [w] => Ok([w; 4]),
                [a, b, c, d] => Ok([a, b, c, d]),
                _ => Err(format!("`{part}`: expected 1 or 4 weights")),
            }
        })
        .collect::<Result<Vec<_>, String>>()?;
    let spec = BlendSpec { weights };
    spec.normalized().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn parse_blend_input(s: &str) -> Result<(PathBuf, f64), String> {
    let (dir, w) = s.rsplit_once(':').ok_or_else(|| format!("`{s}`: expected DIR:W"))?;
    let w: f64 = w.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(format!("`{s}`: weight must be non-negative"));
    }
    Ok((PathBuf::from(dir), w))
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on runtime failure and 2 on usage errors.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    match cli.command {
        Command::Train(a) => train(&a, threads),
        Command::Separate(a) => separate(&a, threads),
        Command::Evaluate(a) => evaluate(&a),
        Command::SimulateNoise(a) => simulate_noise(&a),
        Command::Blend(a) => blend(&a),
        Command::Synth(a) => synth(&a),
    }
}

/// `$DEMIX_SEED` when set, otherwise `fallback`.
pub fn seed_override(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

struct Progress {
    log: BufWriter<fs::File>,
    out: PathBuf,
    train: TrainConfig,
    plan: SeparationPlan,
}

impl Progress {
    fn save(&self, model: &Model, state: &TrainState) -> Result<(), TrainError> {
        let mut ckpt = training::to_checkpoint(model, state, Some(&self.train));
        ckpt.metadata["inference"] = serde_json::to_value(self.plan).expect("serializable");
        model::save_checkpoint(self.out.join(CHECKPOINT_FILE), &ckpt)?;
        Ok(())
    }
}

impl TrainObserver for Progress {
    fn on_step(&mut self, state: &TrainState, outcome: &StepOutcome) -> Result<(), TrainError> {
        writeln!(self.log, "{}", training::log_line(state.step, outcome))?;
        if state.step % 100 == 0 {
            self.log.flush()?;
            eprintln!("step {} loss {:.6}", state.step, outcome.masked_loss);
        }
        Ok(())
    }

    fn on_epoch(&mut self, state: &TrainState, sdr: Option<f64>) -> Result<(), TrainError> {
        match sdr {
            Some(s) => eprintln!("epoch {} validation SDR {s:.3} dB", state.epoch),
            None => eprintln!("epoch {}", state.epoch),
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, model: &Model, state: &TrainState) -> Result<(), TrainError> {
        self.log.flush()?;
        self.save(model, state)
    }
}

fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let seed = seed_override(cfg.seed)?;
    let model_cfg = cfg.model_config();
    let tracks = audio::load_dataset(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    if tracks.is_empty() {
        bail!("train: no tracks found under {}", a.data.display());
    }
    let valid = match &cfg.data.valid {
        Some(dir) => Some(audio::load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?),
        None => None,
    };
    let (mut net, mut state) = match &a.resume {
        Some(path) => {
            let ckpt = model::load_checkpoint(path)?;
            if ckpt.model.config() != &model_cfg {
                bail!("train: checkpoint {} was built from a different model config", path.display());
            }
            let (state, _) = training::state_from_checkpoint(&ckpt)?;
            (ckpt.model, state)
        }
        None => {
            let net = model::build(&model_cfg, seed)?;
            let state = TrainState::new(&net, seed);
            (net, state)
        }
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join(LOG_FILE);
    let append = a.resume.is_some() && log_path.is_file();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    if !append {
        writeln!(log, "{}", training::LOG_HEADER)?;
    }
    let mut progress = Progress {
        log,
        out: a.out.clone(),
        train: cfg.training.clone(),
        plan: cfg.inference,
    };
    let validation = valid.as_ref().map(|v| Validation {
        tracks: v,
        plan: cfg.inference,
        threads,
    });
    let summary = training::train(&mut net, &mut state, &tracks, &cfg.training, validation.as_ref(), &mut progress)?;
    progress.log.flush()?;
    eprintln!(
        "trained {} steps{}; checkpoint {}",
        summary.steps,
        if summary.stopped_early { " (early stop)" } else { "" },
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn separate(a: &SeparateArgs, threads: usize) -> Result<()> {
    let mixture = audio::load_wav(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut estimates = Vec::with_capacity(a.ckpt.len());
    for path in &a.ckpt {
        let ckpt = model::load_checkpoint(path)?;
        let stored: Option<SeparationPlan> = ckpt
            .metadata
            .get("inference")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        let base = stored.unwrap_or_default();
        let plan = SeparationPlan {
            chunk_frames: a.chunk_frames.unwrap_or(base.chunk_frames),
            overlap: a.overlap.unwrap_or(base.overlap),
        };
        let net = ckpt.model;
        let mix = mixture
            .clone()
            .with_channels(net.config().audio_channels)
            .with_context(|| format!("{}: channel layout", a.input.display()))?;
        estimates.push(inference::separate(&net, &mix, &plan, threads)?);
    }
    let stems = if estimates.len() == 1 {
        estimates.pop().expect("one estimate")
    } else {
        let spec = a.blend_weights.clone().unwrap_or_else(|| BlendSpec::uniform(estimates.len()));
        if spec.weights.len() != estimates.len() {
            bail!("separate: {} blend weights for {} checkpoints", spec.weights.len(), estimates.len());
        }
        inference::blend(&estimates, &spec)?
    };
    audio::save_track(&a.out, None, &stems, SampleFormat::Float32)?;
    Ok(())
}

/// Track directories below `dir`: `dir` itself when it holds stems,
/// otherwise its subdirectories that do, sorted by name.
fn track_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let has_stems = |d: &Path| d.join(StemClass::Vocals.file_name()).is_file();
    if has_stems(dir) {
        let name = dir.file_name().map_or_else(|| "track".into(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, dir.to_path_buf())]);
    }
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && has_stems(p))
        .map(|p| (p.file_name().expect("entry").to_string_lossy().into_owned(), p))
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("no stem directories under {}", dir.display());
    }
    Ok(out)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let refs = track_dirs(&a.reference)?;
    let single = refs.len() == 1 && refs[0].1 == a.reference;
    let mut scores = Vec::with_capacity(refs.len());
    for (name, dir) in &refs {
        let reference = audio::load_stems(dir)?;
        let est_dir = if single { a.est.clone() } else { a.est.join(name) };
        let estimate = audio::load_stems(&est_dir).with_context(|| format!("estimates for `{name}`"))?;
        scores.push(eval::evaluate_track(name, &reference, &estimate, a.csdr)?);
    }
    let report: EvalReport = eval::aggregate(scores)?;
    write_json(&a.report, &report)?;
    for (c, v) in &report.per_class_mean {
        eprintln!("{:<7} {v:8.3} dB", c.name());
    }
    eprintln!("mean    {:8.3} dB", report.global_mean);
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate_noise(a: &NoiseArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => seed_override(0)?,
    };
    let spec = match a.mode {
        NoiseMode::LabelNoise => CorruptionSpec::label_noise(a.p, seed),
        NoiseMode::Bleeding => CorruptionSpec::bleeding(a.bleed_gain_db, seed),
    };
    let manifest = noise::corrupt_dataset(&a.data, &a.out, &spec)?;
    eprintln!(
        "corrupted {} stems ({} skipped); manifest {}",
        manifest.entries.len(),
        manifest.skipped.len(),
        a.out.join(noise::MANIFEST_FILE).display()
    );
    Ok(())
}

fn blend(a: &BlendArgs) -> Result<()> {
    let listings: Vec<Vec<(String, PathBuf)>> = a.inputs.iter().map(|(d, _)| track_dirs(d)).collect::<Result<_>>()?;
    let single = listings[0].len() == 1 && listings[0][0].1 == a.inputs[0].0;
    let spec = BlendSpec {
        weights: a.inputs.iter().map(|&(_, w)| [w; 4]).collect(),
    };
    for (i, (name, _)) in listings[0].iter().enumerate() {
        let sets: Vec<StemSet> = listings
            .iter()
            .map(|l| {
                let (_, dir) = l
                    .iter()
                    .find(|(n, _)| single || n == name)
                    .with_context(|| format!("track `{name}` missing from an input"))?;
                Ok(audio::load_stems(dir)?)
            })
            .collect::<Result<_>>()?;
        let out = if single { a.out.clone() } else { a.out.join(&listings[0][i].0) };
        audio::save_track(&out, None, &inference::blend(&sets, &spec)?, SampleFormat::Float32)?;
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => seed_override(0)?,
    };
    let spec = SynthSpec {
        sample_rate: a.sample_rate,
        seconds: a.seconds,
    };
    if !(a.seconds > 0.0) || a.sample_rate == 0 {
        bail!("synth: seconds and sample rate must be positive");
    }
    let tracks: Vec<Track> = synth::synth_dataset(a.tracks, &spec, seed);
    audio::save_dataset(&a.out, &tracks, SampleFormat::Float32)?;
    Ok(())
}
