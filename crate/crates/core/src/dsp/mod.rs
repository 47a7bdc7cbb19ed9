//! Bridges between waveforms and model tensors: STFT analysis/synthesis,
//! high-frequency truncation and channel-wise sub-band packing.

mod stft;

use rustfft::num_complex::Complex;
use thiserror::Error;

pub use stft::{istft, stft, Spectrogram, StftConfig};
pub(crate) use stft::Synthesis;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("dsp: invalid STFT config: {0}")]
    InvalidConfig(String),
    #[error("dsp: empty input signal")]
    EmptyInput,
    #[error("dsp: overlap-add normalizer vanishes at output sample {sample}")]
    NonCola { sample: usize },
    #[error("dsp: {requested} frequency bins requested, {available} available")]
    BinsOutOfRange { requested: usize, available: usize },
    #[error("dsp: spectrogram carries no truncation record")]
    NoTruncation,
    #[error("dsp: {0}")]
    Indivisible(String),
    #[error("dsp: shape error: {0}")]
    Shape(String),
}

/// Keeps the lowest `bins` frequency bins, remembering the original count.
pub fn freq_truncate<T: Real>(spec: &Spectrogram<T>, bins: usize) -> Result<Spectrogram<T>, DspError> {
    if bins == 0 || bins > spec.bins {
        return Err(DspError::BinsOutOfRange {
            requested: bins,
            available: spec.bins,
        });
    }
    let frames = spec.frames;
    let mut values = Vec::with_capacity(spec.channels * bins * frames);
    for ch in spec.values.chunks(spec.bins * frames) {
        values.extend_from_slice(&ch[..bins * frames]);
    }
    Ok(Spectrogram {
        values,
        bins,
        truncated_from: Some(spec.truncated_from.unwrap_or(spec.bins)),
        channels: spec.channels,
        frames,
        config: spec.config,
        original_length: spec.original_length,
    })
}

/// Zero-fills the bins removed by [`freq_truncate`].
pub fn freq_restore<T: Real>(spec: &Spectrogram<T>) -> Result<Spectrogram<T>, DspError> {
    let full = spec.truncated_from.ok_or(DspError::NoTruncation)?;
    let frames = spec.frames;
    let zero = Complex::new(T::zero(), T::zero());
    let mut values = Vec::with_capacity(spec.channels * full * frames);
    for ch in spec.values.chunks(spec.bins * frames) {
        values.extend_from_slice(ch);
        values.resize(values.len() + (full - spec.bins) * frames, zero);
    }
    Ok(Spectrogram {
        values,
        bins: full,
        truncated_from: None,
        channels: spec.channels,
        frames,
        config: spec.config,
        original_length: spec.original_length,
    })
}

/// Packs complex channels into real planes `[2c, bins, frames]`, ordered
/// `(ch0.re, ch0.im, ch1.re, ch1.im, ...)`.
pub fn pack_planes<T: Real>(spec: &Spectrogram<T>) -> Tensor<T> {
    let plane = spec.bins * spec.frames;
    let mut data = Vec::with_capacity(2 * spec.values.len());
    for ch in spec.values.chunks(plane) {
        data.extend(ch.iter().map(|c| c.re));
        data.extend(ch.iter().map(|c| c.im));
    }
    Tensor::from_vec(&[2 * spec.channels, spec.bins, spec.frames], data)
        .expect("plane count matches")
}

/// Inverse of [`pack_planes`]; `truncated_from` is carried over from `like`.
pub fn unpack_planes<T: Real>(planes: &Tensor<T>, like: &Spectrogram<T>) -> Result<Spectrogram<T>, DspError> {
    let shape = planes.shape();
    if shape.len() != 3 || shape[0] % 2 != 0 {
        return Err(DspError::Shape(format!("expected [2c, bins, frames], got {shape:?}")));
    }
    let (bins, frames) = (shape[1], shape[2]);
    let plane = bins * frames;
    let mut values = Vec::with_capacity(planes.len() / 2);
    for pair in planes.data().chunks(2 * plane) {
        values.extend(pair[..plane].iter().zip(&pair[plane..]).map(|(&r, &i)| Complex::new(r, i)));
    }
    let mut spec = Spectrogram::new(values, shape[0] / 2, bins, frames, like.config, like.original_length)?;
    spec.truncated_from = like.truncated_from;
    Ok(spec)
}

fn subband_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize), DspError> {
    match *shape {
        [c, f, t] => Ok((1, c, f, t)),
        [n, c, f, t] => Ok((n, c, f, t)),
        _ => Err(DspError::Shape(format!("expected [c, F, T] or [n, c, F, T], got {shape:?}"))),
    }
}

/// `[c, F, T] -> [k*c, F/k, T]`: band `j` of channel `i` becomes channel
/// `i*k + j`, bands in ascending frequency order. Also accepts a leading
/// batch axis.
///
/// Each channel's `F x T` plane is contiguous, so the rearrangement is a pure
/// reinterpretation of the shape.
pub fn subband_split<T: Real>(x: Tensor<T>, k: usize) -> Result<Tensor<T>, DspError> {
    let (n, c, f, t) = subband_dims(x.shape())?;
    if k == 0 || f % k != 0 {
        return Err(DspError::Indivisible(format!("{f} frequency bins not divisible into {k} sub-bands")));
    }
    let batched = x.shape().len() == 4;
    let shape: Vec<usize> = if batched {
        vec![n, c * k, f / k, t]
    } else {
        vec![c * k, f / k, t]
    };
    x.reshape(&shape).map_err(|e| DspError::Shape(e.to_string()))
}

/// Inverse of [`subband_split`].
pub fn subband_merge<T: Real>(x: Tensor<T>, k: usize) -> Result<Tensor<T>, DspError> {
    let (n, c, f, t) = subband_dims(x.shape())?;
    if k == 0 || c % k != 0 {
        return Err(DspError::Indivisible(format!("{c} channels not divisible into {k} sub-bands")));
    }
    let batched = x.shape().len() == 4;
    let shape: Vec<usize> = if batched {
        vec![n, c / k, f * k, t]
    } else {
        vec![c / k, f * k, t]
    };
    x.reshape(&shape).map_err(|e| DspError::Shape(e.to_string()))
}

/// Batched synthesis of packed planes `[n, 2c, bins, frames] -> [n, c, length]`.
pub(crate) fn istft_planes<T: Real>(x: &Tensor<T>, cfg: &StftConfig, length: usize) -> Tensor<T> {
    let (n, c2, bins, frames) = x.dims4();
    assert_eq!(bins, cfg.full_bins(), "istft: planes must carry all {} bins", cfg.full_bins());
    assert_eq!(c2 % 2, 0, "istft: planes come in (re, im) pairs");
    let synth = Synthesis::<T>::new(cfg, frames);
    if let Err(e) = synth.check(length) {
        panic!("{e}");
    }
    let plane = bins * frames;
    let mut out = Tensor::zeros(&[n, c2 / 2, length]);
    for (pair, o) in x.data().chunks(2 * plane).zip(out.data_mut().chunks_mut(length)) {
        synth.forward(&pair[..plane], &pair[plane..], o);
    }
    out
}

pub(crate) fn istft_planes_backward<T: Real>(
    grad: &Tensor<T>,
    cfg: &StftConfig,
    x_shape: &[usize],
) -> Tensor<T> {
    let (bins, frames) = (x_shape[2], x_shape[3]);
    let length = grad.shape()[2];
    let synth = Synthesis::<T>::new(cfg, frames);
    let plane = bins * frames;
    let mut dx = Tensor::zeros(x_shape);
    for (g, pair) in grad.data().chunks(length).zip(dx.data_mut().chunks_mut(2 * plane)) {
        let (dre, dim) = pair.split_at_mut(plane);
        synth.backward(g, dre, dim);
    }
    dx
}

#[cfg(test)]
mod tests;
