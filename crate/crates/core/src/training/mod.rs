//! Batch sampling, the waveform L2 objective with quantile loss masking,
//! Adam updates and the early-stopping rule.

mod loss;
mod sampling;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{StemClass, Track};
use crate::dsp::{self, DspError};
use crate::eval::{self, EvalError};
use crate::inference::{self, InferenceError, SeparationPlan};
use crate::model::{Checkpoint, Model, ModelError};
use crate::tensor::{adam_step, AdamState, Ops, Real, Tape, Tensor, TensorError};

pub use loss::{keep_count, mask_weights, masked_loss, per_element_losses, segment_len, select_keep, LossMaskSpec, MaskDims};
pub use sampling::{sample_batch, Batch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training: q = {0} outside (0, 1]")]
    InvalidQuantile(f64),
    #[error("training: no losses to select from")]
    EmptyLosses,
    #[error("training: dataset is empty")]
    EmptyDataset,
    #[error("training: every track is shorter than the {chunk_samples}-sample chunk")]
    TracksTooShort { chunk_samples: usize },
    #[error("training: shape mismatch: {0}")]
    Shape(String),
    #[error("training: invalid config: {0}")]
    InvalidConfig(String),
    #[error("training: non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("training: checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training: i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn default_q() -> f64 {
    0.4
}

fn default_steps_per_epoch() -> u64 {
    10_000
}

fn default_window() -> usize {
    10
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training chunk length in STFT frames; chunks hold `chunk_frames * hop_length` samples.
    pub chunk_frames: usize,
    pub loss_mask_dims: MaskDims,
    #[serde(default = "default_q")]
    pub q: f64,
    /// Total optimizer steps to reach.
    pub steps: u64,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: u64,
    #[serde(default = "default_window")]
    pub early_stop_window: usize,
    #[serde(default = "default_delta")]
    pub early_stop_delta: f64,
    /// Checkpoint interval in steps; 0 writes only at the end.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn mask(&self) -> LossMaskSpec {
        LossMaskSpec {
            dims: self.loss_mask_dims,
            q: self.q,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.chunk_frames == 0 || self.steps_per_epoch == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size, chunk_frames and steps_per_epoch must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.early_stop_window == 0 {
            return Err(TrainError::InvalidConfig("early_stop_window must be positive".into()));
        }
        self.mask().validate()
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub adam: AdamState,
    /// Validation mean SDR after each completed epoch.
    pub sdr_history: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        Self {
            step: 0,
            epoch: 0,
            seed,
            adam: AdamState::new(model.weights().tensors()),
            sdr_history: Vec::new(),
        }
    }

    /// Random stream for a given step: the seed selects the generator and
    /// the step selects its stream, so resumed runs draw identical batches.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Unmasked mean of the per-element losses.
    pub raw_loss: f64,
    /// The optimized objective.
    pub masked_loss: f64,
    pub kept_fraction: f64,
}

/// Packed, truncated mixture spectrograms `[B, planes, F, T']`, with `T'`
/// rounded up to the network's frame multiple. Returns the tensor and the
/// true frame count.
pub fn prepare_inputs(model: &Model, batch: &Batch) -> Result<(Tensor, usize), TrainError> {
    let cfg = model.config();
    let stft = cfg.stft();
    let mut frames = 0;
    let mut planes = Vec::new();
    for m in &batch.mixtures {
        let spec = dsp::stft::<f32>(m, &stft)?;
        let p = dsp::pack_planes(&dsp::freq_truncate(&spec, cfg.freq_bins)?);
        frames = p.shape()[2];
        planes.push(p);
    }
    let tp = frames.div_ceil(cfg.time_multiple()) * cfg.time_multiple();
    let (p, f) = (cfg.planes(), cfg.freq_bins);
    let mut data = vec![0.0f32; planes.len() * p * f * tp];
    for (dst_item, src) in data.chunks_mut(p * f * tp).zip(&planes) {
        for (dst, row) in dst_item.chunks_mut(tp).zip(src.data().chunks(frames)) {
            dst[..frames].copy_from_slice(row);
        }
    }
    Ok((Tensor::from_vec(&[planes.len(), p, f, tp], data).expect("sized"), frames))
}

/// Network output synthesized back to waveforms: `[B, S, C, length]`.
pub fn estimate_waveforms<T: Real, O: Ops<T>>(
    model: &Model,
    ops: &mut O,
    params: &[O::V],
    x: &O::V,
    frames: usize,
    length: usize,
) -> O::V {
    let cfg = model.config();
    let b = ops.value(x).shape()[0];
    let s = cfg.sources.len();
    let y = model.forward_graph(ops, params, x);
    let tp = ops.value(&y).shape()[4];
    let y = ops.reshape(&y, &[b * s, cfg.planes(), cfg.freq_bins, tp]);
    let y = ops.resize_hw(&y, cfg.stft().full_bins(), frames);
    let w = ops.istft(&y, &cfg.stft(), length);
    ops.reshape(&w, &[b, s, cfg.audio_channels, length])
}

/// One optimizer update on `batch`.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepOutcome, TrainError> {
    let mcfg = model.config().clone();
    let (x, frames) = prepare_inputs(model, batch)?;
    let length = batch.targets.shape()[3];
    if batch.targets.shape()[1] != mcfg.sources.len() || batch.targets.shape()[2] != mcfg.audio_channels {
        return Err(TrainError::Shape(format!(
            "targets {:?} do not match {} sources x {} channels",
            batch.targets.shape(),
            mcfg.sources.len(),
            mcfg.audio_channels
        )));
    }
    let seg = segment_len(cfg.loss_mask_dims, length, mcfg.hop_length);
    if length % seg != 0 {
        return Err(TrainError::Shape(format!("chunk of {length} samples not divisible into {seg}-sample segments")));
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = model
        .weights()
        .tensors()
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect();
    let xv = tape.leaf(x, false);
    let target = tape.leaf(batch.targets.clone(), false);
    let est = estimate_waveforms(model, &mut tape, &vars, &xv, frames, length);
    let losses = per_element_losses(&mut tape, &est, &target, seg);
    let lv = tape.value(&losses).clone();
    if !lv.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            detail: "per-element losses".into(),
        });
    }
    let (weights, kept_fraction) = mask_weights(&lv, &cfg.mask())?;
    let objective = masked_loss(&mut tape, &losses, &weights);
    let masked = tape.value(&objective).data()[0] as f64;
    let grads = tape.backward(objective).map_err(|e| match e {
        TensorError::NonFinite(op) => TrainError::NonFinite {
            step: state.step,
            detail: format!("produced by `{op}`"),
        },
        other => other.into(),
    })?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = model.weights().names().nth(i).unwrap_or("?").to_string();
        return Err(TrainError::NonFinite {
            step: state.step,
            detail: format!("gradient of `{name}`"),
        });
    }
    adam_step(model.weights_mut().tensors_mut(), &grads, &mut state.adam, cfg.learning_rate)?;
    state.step += 1;
    Ok(StepOutcome {
        raw_loss: lv.sum_f64() / lv.len() as f64,
        masked_loss: masked,
        kept_fraction,
    })
}

/// True iff at least `window + 1` entries exist and the best of the last
/// `window` beats the best before them by less than `delta`.
pub fn early_stop(history: &[f64], window: usize, delta: f64) -> bool {
    if history.len() < window + 1 {
        return false;
    }
    let split = history.len() - window;
    let best = |xs: &[f64]| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    best(&history[split..]) - best(&history[..split]) < delta
}

/// Mean over tracks of the mean SDR over the model's sources.
pub fn validation_sdr(model: &Model, tracks: &[Track], plan: &SeparationPlan, threads: usize) -> Result<f64, TrainError> {
    if tracks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for t in tracks {
        let est = inference::separate(model, &t.stems.mixture(), plan, threads)?;
        let sources = &model.config().sources;
        let mut acc = 0.0;
        for &c in sources {
            acc += eval::sdr(t.stems.get(c), est.get(c))?;
        }
        total += acc / sources.len() as f64;
    }
    Ok(total / tracks.len() as f64)
}

/// Tab-separated log header matching [`log_line`].
pub const LOG_HEADER: &str = "step\traw_loss\tmasked_loss\tkept_fraction";

pub fn log_line(step: u64, o: &StepOutcome) -> String {
    format!("{step}\t{:.8e}\t{:.8e}\t{:.6}", o.raw_loss, o.masked_loss, o.kept_fraction)
}

/// Hooks called by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _state: &TrainState, _outcome: &StepOutcome) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_epoch(&mut self, _state: &TrainState, _validation_sdr: Option<f64>) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _model: &Model, _state: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Validation data and settings for end-of-epoch evaluation.
pub struct Validation<'a> {
    pub tracks: &'a [Track],
    pub plan: SeparationPlan,
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainSummary {
    pub steps: u64,
    pub stopped_early: bool,
}

/// Runs steps until `cfg.steps` or early stopping. Epoch boundaries fall
/// every `steps_per_epoch` steps; validation SDR is recorded there when
/// `validation` is given.
pub fn train(
    model: &mut Model,
    state: &mut TrainState,
    tracks: &[Track],
    cfg: &TrainConfig,
    validation: Option<&Validation>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let chunk = cfg.chunk_frames * model.config().hop_length;
    let classes: Vec<StemClass> = model.config().sources.clone();
    let mut stopped_early = false;
    while state.step < cfg.steps {
        let mut rng = state.step_rng();
        let batch = sample_batch(tracks, &classes, cfg.batch_size, chunk, &mut rng)?;
        let outcome = train_step(model, &batch, cfg, state)?;
        observer.on_step(state, &outcome)?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(model, state)?;
        }
        if state.step % cfg.steps_per_epoch == 0 {
            state.epoch += 1;
            let sdr = match validation {
                Some(v) => {
                    let s = validation_sdr(model, v.tracks, &v.plan, v.threads)?;
                    state.sdr_history.push(s);
                    Some(s)
                }
                None => None,
            };
            observer.on_epoch(state, sdr)?;
            if sdr.is_some() && early_stop(&state.sdr_history, cfg.early_stop_window, cfg.early_stop_delta) {
                stopped_early = true;
                break;
            }
        }
    }
    observer.on_checkpoint(model, state)?;
    Ok(TrainSummary {
        steps: state.step,
        stopped_early,
    })
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    step: u64,
    epoch: u64,
    seed: u64,
    sdr_history: Vec<f64>,
    adam: AdamState,
    #[serde(default)]
    train_config: Option<TrainConfig>,
}

/// Packs model, optimizer moments and counters into one checkpoint.
pub fn to_checkpoint(model: &Model, state: &TrainState, cfg: Option<&TrainConfig>) -> Checkpoint {
    let record = StateRecord {
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        sdr_history: state.sdr_history.clone(),
        adam: state.adam.clone(),
        train_config: cfg.cloned(),
    };
    let mut ckpt = Checkpoint::new(model.clone());
    ckpt.metadata = serde_json::to_value(record).expect("serializable");
    for (i, (m, v)) in state.adam.m.iter().zip(&state.adam.v).enumerate() {
        ckpt.extra.push((format!("optim.m.{i}"), m.clone()));
        ckpt.extra.push((format!("optim.v.{i}"), v.clone()));
    }
    ckpt
}

/// Restores the training state saved by [`to_checkpoint`].
pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainState, Option<TrainConfig>), TrainError> {
    let record: StateRecord =
        serde_json::from_value(ckpt.metadata.clone()).map_err(|e| TrainError::Checkpoint(format!("no training state: {e}")))?;
    let n = ckpt.model.weights().len();
    let mut adam = record.adam;
    adam.m = Vec::with_capacity(n);
    adam.v = Vec::with_capacity(n);
    for i in 0..n {
        let find = |prefix: &str| {
            ckpt.extra
                .iter()
                .find(|(name, _)| *name == format!("{prefix}.{i}"))
                .map(|(_, t)| t.clone())
                .ok_or_else(|| TrainError::Checkpoint(format!("missing {prefix}.{i}")))
        };
        let (m, v) = (find("optim.m")?, find("optim.v")?);
        if m.shape() != ckpt.model.weights().tensors()[i].shape() || v.shape() != m.shape() {
            return Err(TrainError::Checkpoint(format!("optimizer moment {i} has the wrong shape")));
        }
        adam.m.push(m);
        adam.v.push(v);
    }
    Ok((
        TrainState {
            step: record.step,
            epoch: record.epoch,
            seed: record.seed,
            adam,
            sdr_history: record.sdr_history,
        },
        record.train_config,
    ))
}

#[cfg(test)]
mod tests;
