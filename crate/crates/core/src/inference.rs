//! Full-track separation by chunked overlap-add, and weighted blending of
//! several estimates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, StemClass, StemSet, Waveform};
use crate::dsp::{self, DspError, StftConfig};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("inference: invalid plan: {0}")]
    Plan(String),
    #[error("inference: empty mixture")]
    EmptyMixture,
    #[error("inference: model output has shape {found:?}, expected {expected:?}")]
    OutputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error("inference: estimates are not aligned: {0}")]
    Misaligned(String),
    #[error("inference: all blend weights for {0} are zero")]
    ZeroWeights(StemClass),
    #[error("inference: invalid blend weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Chunk length and the number of chunks covering each sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationPlan {
    pub chunk_frames: usize,
    pub overlap: usize,
}

impl Default for SeparationPlan {
    fn default() -> Self {
        Self {
            chunk_frames: 1024,
            overlap: 8,
        }
    }
}

impl SeparationPlan {
    pub fn chunk_samples(&self, hop_length: usize) -> usize {
        self.chunk_frames * hop_length
    }

    pub fn stride(&self, hop_length: usize) -> usize {
        self.chunk_samples(hop_length) / self.overlap
    }

    pub fn validate(&self, hop_length: usize) -> Result<(), InferenceError> {
        if self.overlap == 0 || self.chunk_frames == 0 || hop_length == 0 {
            return Err(InferenceError::Plan("chunk_frames, overlap and hop must be positive".into()));
        }
        let chunk = self.chunk_samples(hop_length);
        if chunk % self.overlap != 0 {
            return Err(InferenceError::Plan(format!(
                "chunk of {chunk} samples not divisible by overlap {}",
                self.overlap
            )));
        }
        Ok(())
    }
}

/// Chunk spans over a signal padded by `pad` zeros on both sides; span
/// coordinates refer to the padded signal and may run past its end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub pad: usize,
    pub chunk: usize,
    pub spans: Vec<(usize, usize)>,
}

impl ChunkPlan {
    /// Number of spans covering padded position `pos`.
    pub fn coverage(&self, pos: usize) -> usize {
        self.spans.iter().filter(|&&(s, e)| s <= pos && pos < e).count()
    }
}

/// Spans of `chunk` samples at multiples of `chunk / overlap`; every
/// original sample is covered by exactly `overlap` spans.
pub fn plan_chunks(length: usize, chunk: usize, overlap: usize) -> Result<ChunkPlan, InferenceError> {
    if length == 0 {
        return Err(InferenceError::EmptyMixture);
    }
    if overlap == 0 || chunk == 0 || chunk % overlap != 0 {
        return Err(InferenceError::Plan(format!(
            "chunk {chunk} must be a positive multiple of overlap {overlap}"
        )));
    }
    let stride = chunk / overlap;
    let pad = chunk - stride;
    let last = pad + length - 1;
    let spans = (0..=last / stride).map(|i| (i * stride, i * stride + chunk)).collect();
    Ok(ChunkPlan { pad, chunk, spans })
}

/// Anything that maps packed mixture planes to per-source planes.
pub trait SpectralModel: Sync {
    fn stft_config(&self) -> StftConfig;

    /// Lowest bins consumed and produced.
    fn freq_bins(&self) -> usize;

    fn sources(&self) -> &[StemClass];

    /// `[planes, F, T] -> [S, planes, F, T]` for any frame count `T`.
    fn predict(&self, planes: &Tensor) -> Result<Tensor, InferenceError>;
}

impl SpectralModel for Model {
    fn stft_config(&self) -> StftConfig {
        self.config().stft()
    }

    fn freq_bins(&self) -> usize {
        self.config().freq_bins
    }

    fn sources(&self) -> &[StemClass] {
        &self.config().sources
    }

    /// Zero-pads the frame axis up to the next multiple of `2^n_scales` and
    /// crops the output back.
    fn predict(&self, planes: &Tensor) -> Result<Tensor, InferenceError> {
        let s = planes.shape().to_vec();
        if s.len() != 3 {
            return Err(ModelError::Shape(format!("expected [planes, F, T], got {s:?}")).into());
        }
        let (p, f, t) = (s[0], s[1], s[2]);
        let m = self.config().time_multiple();
        let tp = t.div_ceil(m) * m;
        let x = if tp == t {
            planes.clone()
        } else {
            let mut data = vec![0.0f32; p * f * tp];
            for (dst, src) in data.chunks_mut(tp).zip(planes.data().chunks(t)) {
                dst[..t].copy_from_slice(src);
            }
            Tensor::from_vec(&[p, f, tp], data).expect("sized")
        };
        let y = self.forward(&x)?;
        if tp == t {
            return Ok(y);
        }
        let ns = y.shape()[0];
        let mut out = Vec::with_capacity(ns * p * f * t);
        for row in y.data().chunks(tp) {
            out.extend_from_slice(&row[..t]);
        }
        Ok(Tensor::from_vec(&[ns, p, f, t], out).expect("sized"))
    }
}

/// Returns the mixture spectrogram unchanged for every source.
#[derive(Clone, Debug)]
pub struct IdentityModel {
    pub stft: StftConfig,
    pub sources: Vec<StemClass>,
}

impl SpectralModel for IdentityModel {
    fn stft_config(&self) -> StftConfig {
        self.stft
    }

    fn freq_bins(&self) -> usize {
        self.stft.full_bins()
    }

    fn sources(&self) -> &[StemClass] {
        &self.sources
    }

    fn predict(&self, planes: &Tensor) -> Result<Tensor, InferenceError> {
        let n = self.sources.len();
        let mut shape = vec![n];
        shape.extend_from_slice(planes.shape());
        let data = planes.data().repeat(n);
        Ok(Tensor::from_vec(&shape, data).expect("sized"))
    }
}

/// Separates one chunk into per-source waveforms of the chunk's length.
fn separate_chunk(model: &dyn SpectralModel, chunk: &Waveform) -> Result<Vec<Waveform>, InferenceError> {
    let cfg = model.stft_config();
    let spec = dsp::stft::<f32>(chunk, &cfg)?;
    let cut = dsp::freq_truncate(&spec, model.freq_bins())?;
    let planes = dsp::pack_planes(&cut);
    let y = model.predict(&planes)?;
    let ns = model.sources().len();
    let expected = [&[ns][..], planes.shape()].concat();
    if y.shape() != expected.as_slice() {
        return Err(InferenceError::OutputShape {
            expected,
            found: y.shape().to_vec(),
        });
    }
    let per = planes.len();
    (0..ns)
        .map(|s| {
            let src = Tensor::from_vec(planes.shape(), y.data()[s * per..(s + 1) * per].to_vec()).expect("sized");
            let est = dsp::unpack_planes(&src, &cut)?;
            let full = if est.truncated_from().is_some() {
                dsp::freq_restore(&est)?
            } else {
                est
            };
            Ok(dsp::istft(&full, chunk.len(), chunk.sample_rate())?)
        })
        .collect()
}

/// Overlap-add separation of a full mixture. Chunk outputs are averaged
/// uniformly by per-sample coverage. Classes the model does not produce
/// are returned silent. Up to `threads` chunks run concurrently; results
/// are accumulated in chunk order, so output does not depend on `threads`.
pub fn separate(
    model: &dyn SpectralModel,
    mixture: &Waveform,
    plan: &SeparationPlan,
    threads: usize,
) -> Result<StemSet, InferenceError> {
    let hop = model.stft_config().hop_length;
    plan.validate(hop)?;
    let chunks = plan_chunks(mixture.len(), plan.chunk_samples(hop), plan.overlap)?;
    let (rate, channels, len) = (mixture.sample_rate(), mixture.channels(), mixture.len());
    let pad = chunks.pad;
    let chunk = chunks.chunk;
    let extract = |start: usize| {
        let mut w = Waveform::zeros(rate, channels, chunk);
        // padded position p holds original sample p - pad
        let lo = start.max(pad);
        let hi = (start + chunk).min(pad + len);
        if lo < hi {
            for ch in 0..channels {
                w.channel_mut(ch)[lo - start..hi - start].copy_from_slice(&mixture.channel(ch)[lo - pad..hi - pad]);
            }
        }
        w
    };
    let ns = model.sources().len();
    let mut acc = vec![vec![0.0f64; channels * len]; ns];
    let mut count = vec![0u32; len];
    let threads = threads.max(1);
    for group in chunks.spans.chunks(threads) {
        let outputs: Vec<Result<Vec<Waveform>, InferenceError>> = if group.len() == 1 {
            vec![separate_chunk(model, &extract(group[0].0))]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|&(start, _)| {
                        let w = extract(start);
                        scope.spawn(move || separate_chunk(model, &w))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        for (&(start, end), out) in group.iter().zip(outputs) {
            let out = out?;
            let lo = start.max(pad);
            let hi = end.min(pad + len);
            if lo >= hi {
                continue;
            }
            for c in &mut count[lo - pad..hi - pad] {
                *c += 1;
            }
            for (s, w) in out.iter().enumerate() {
                for ch in 0..channels {
                    let dst = &mut acc[s][ch * len + lo - pad..ch * len + hi - pad];
                    let src = &w.channel(ch)[lo - start..hi - start];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v as f64);
                }
            }
        }
    }
    let mut stems: [Waveform; 4] = std::array::from_fn(|_| Waveform::zeros(rate, channels, len));
    for (s, class) in model.sources().iter().enumerate() {
        let data: Vec<f32> = acc[s]
            .iter()
            .enumerate()
            .map(|(i, &v)| (v / count[i % len] as f64) as f32)
            .collect();
        stems[class.index()] = Waveform::from_planar(rate, channels, data)?;
    }
    Ok(StemSet::new(stems)?)
}

/// Per-estimate, per-class non-negative weights, normalized per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendSpec {
    pub weights: Vec<[f64; 4]>,
}

impl BlendSpec {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![[1.0; 4]; n],
        }
    }

    /// Weights normalized to sum to 1 for each class.
    pub fn normalized(&self) -> Result<Vec<[f64; 4]>, InferenceError> {
        if self.weights.is_empty() {
            return Err(InferenceError::Weights("no estimates".into()));
        }
        let mut out = self.weights.clone();
        for class in StemClass::ALL {
            let c = class.index();
            if out.iter().any(|w| !(w[c] >= 0.0) || !w[c].is_finite()) {
                return Err(InferenceError::Weights(format!("negative or non-finite weight for {class}")));
            }
            let total: f64 = out.iter().map(|w| w[c]).sum();
            if total <= 0.0 {
                return Err(InferenceError::ZeroWeights(class));
            }
            out.iter_mut().for_each(|w| w[c] /= total);
        }
        Ok(out)
    }
}

/// Weighted per-class average of aligned estimates.
pub fn blend(estimates: &[StemSet], spec: &BlendSpec) -> Result<StemSet, InferenceError> {
    if estimates.len() != spec.weights.len() {
        return Err(InferenceError::Weights(format!(
            "{} estimates but {} weight vectors",
            estimates.len(),
            spec.weights.len()
        )));
    }
    let weights = spec.normalized()?;
    let first = &estimates[0];
    for e in &estimates[1..] {
        first
            .get(StemClass::Vocals)
            .check_aligned(e.get(StemClass::Vocals))
            .map_err(|err| InferenceError::Misaligned(err.to_string()))?;
    }
    let stems: [Waveform; 4] = std::array::from_fn(|c| {
        let mut acc = vec![0.0f64; first.get(StemClass::ALL[c]).data().len()];
        for (e, w) in estimates.iter().zip(&weights) {
            if w[c] == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(e.get(StemClass::ALL[c]).data()) {
                *a += w[c] * v as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        Waveform::from_planar(first.sample_rate(), first.channels(), data).expect("aligned")
    });
    Ok(StemSet::new(stems)?)
}
