use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::DspError;
use crate::audio::Waveform;
use crate::tensor::Real;

/// Smallest overlap-add normalizer accepted at an output sample.
const MIN_WINDOW_SUM: f64 = 1e-8;

/// Hann-windowed, reflect-centered short-time Fourier transform settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop_length: usize,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop_length: usize) -> Result<Self, DspError> {
        let cfg = Self { n_fft, hop_length };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let Self { n_fft, hop_length } = *self;
        if n_fft < 2 || n_fft % 2 != 0 {
            return Err(DspError::InvalidConfig(format!("n_fft {n_fft} must be even and >= 2")));
        }
        if hop_length == 0 || hop_length > n_fft / 2 {
            return Err(DspError::InvalidConfig(format!(
                "hop_length {hop_length} must be in 1..={}",
                n_fft / 2
            )));
        }
        if n_fft % hop_length != 0 {
            return Err(DspError::InvalidConfig(format!(
                "n_fft {n_fft} is not a multiple of hop_length {hop_length}"
            )));
        }
        Ok(())
    }

    pub fn full_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `length` samples: `1 + ceil(length / hop)`.
    pub fn frames_for(&self, length: usize) -> usize {
        1 + length.div_ceil(self.hop_length)
    }

    /// Periodic Hann window of length `n_fft`.
    pub fn window<T: Real>(&self) -> Vec<T> {
        let n = self.n_fft as f64;
        (0..self.n_fft)
            .map(|i| T::from_f64_lossy(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }
}

/// Complex spectrogram laid out `[channel][bin][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T = f32> {
    pub(crate) values: Vec<Complex<T>>,
    pub(crate) channels: usize,
    pub(crate) bins: usize,
    pub(crate) frames: usize,
    pub(crate) config: StftConfig,
    pub(crate) original_length: usize,
    /// Bin count before `freq_truncate`, if it was applied.
    pub(crate) truncated_from: Option<usize>,
}

impl<T: Real> Spectrogram<T> {
    pub fn new(
        values: Vec<Complex<T>>,
        channels: usize,
        bins: usize,
        frames: usize,
        config: StftConfig,
        original_length: usize,
    ) -> Result<Self, DspError> {
        if values.len() != channels * bins * frames {
            return Err(DspError::Shape(format!(
                "{} values for {channels} x {bins} x {frames}",
                values.len()
            )));
        }
        if bins > config.full_bins() {
            return Err(DspError::BinsOutOfRange {
                requested: bins,
                available: config.full_bins(),
            });
        }
        Ok(Self {
            values,
            channels,
            bins,
            frames,
            config,
            original_length,
            truncated_from: (bins != config.full_bins()).then_some(config.full_bins()),
        })
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.values
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }

    pub fn truncated_from(&self) -> Option<usize> {
        self.truncated_from
    }

    pub fn at(&self, channel: usize, bin: usize, frame: usize) -> Complex<T> {
        self.values[(channel * self.bins + bin) * self.frames + frame]
    }

    /// Total energy `sum |X|^2`.
    pub fn energy(&self) -> f64 {
        self.values
            .iter()
            .map(|c| c.re.as_f64().powi(2) + c.im.as_f64().powi(2))
            .sum()
    }
}

/// Reflect index into `[0, len)` without repeating edge samples.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

pub(crate) struct Planner<T: Real> {
    pub fwd: Arc<dyn Fft<T>>,
    pub inv: Arc<dyn Fft<T>>,
    pub window: Vec<T>,
}

impl<T: Real> Planner<T> {
    pub fn new(cfg: &StftConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fwd: planner.plan_fft_forward(cfg.n_fft),
            inv: planner.plan_fft_inverse(cfg.n_fft),
            window: cfg.window(),
        }
    }
}

/// Analyses one real signal into `out[bin * frames + frame]`.
pub(crate) fn stft_signal<T: Real>(
    x: &[T],
    cfg: &StftConfig,
    plan: &Planner<T>,
    out: &mut [Complex<T>],
) {
    let n = cfg.n_fft;
    let pad = n / 2;
    let frames = cfg.frames_for(x.len());
    let bins = cfg.full_bins();
    debug_assert_eq!(out.len(), bins * frames);
    let padded_len = (frames - 1) * cfg.hop_length + n;
    let reflect_end = x.len() + 2 * pad;
    let padded: Vec<T> = (0..padded_len)
        .map(|p| {
            if p < reflect_end {
                x[reflect(p as isize - pad as isize, x.len())]
            } else {
                T::zero()
            }
        })
        .collect();
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.fwd.get_inplace_scratch_len()];
    for t in 0..frames {
        let seg = &padded[t * cfg.hop_length..t * cfg.hop_length + n];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&plan.window) {
            *b = Complex::new(s * w, T::zero());
        }
        plan.fwd.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            out[k * frames + t] = buf[k];
        }
    }
}

/// Overlap-add bookkeeping for synthesising `frames` frames.
pub(crate) struct Synthesis<T: Real> {
    plan: Planner<T>,
    cfg: StftConfig,
    frames: usize,
    /// Sum of squared windows at each padded position.
    wss: Vec<T>,
}

impl<T: Real> Synthesis<T> {
    pub fn new(cfg: &StftConfig, frames: usize) -> Self {
        let plan = Planner::new(cfg);
        let padded_len = (frames.max(1) - 1) * cfg.hop_length + cfg.n_fft;
        let mut wss = vec![T::zero(); padded_len];
        for t in 0..frames {
            for (n, &w) in plan.window.iter().enumerate() {
                wss[t * cfg.hop_length + n] += w * w;
            }
        }
        Self {
            plan,
            cfg: *cfg,
            frames,
            wss,
        }
    }

    /// Output samples past the centre of the last frame are zero padding.
    fn valid_len(&self, length: usize) -> usize {
        length.min((self.frames.max(1) - 1) * self.cfg.hop_length + 1)
    }

    /// Checks that every produced output sample has a usable normalizer.
    pub fn check(&self, length: usize) -> Result<(), DspError> {
        let pad = self.cfg.n_fft / 2;
        for i in 0..self.valid_len(length) {
            if self.wss[i + pad].as_f64() < MIN_WINDOW_SUM {
                return Err(DspError::NonCola { sample: i });
            }
        }
        Ok(())
    }

    /// Synthesises one channel from full-band real/imaginary planes laid out
    /// `[bin * frames + frame]`.
    pub fn forward(&self, re: &[T], im: &[T], out: &mut [T]) {
        let n = self.cfg.n_fft;
        let bins = self.cfg.full_bins();
        let frames = self.frames;
        let pad = n / 2;
        let scale = T::from_f64_lossy(1.0 / n as f64);
        let mut acc = vec![T::zero(); self.wss.len()];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.plan.inv.get_inplace_scratch_len()];
        for t in 0..frames {
            for k in 0..bins {
                let imag = if k == 0 || k == n / 2 { T::zero() } else { im[k * frames + t] };
                buf[k] = Complex::new(re[k * frames + t], imag);
            }
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            self.plan.inv.process_with_scratch(&mut buf, &mut scratch);
            let seg = &mut acc[t * self.cfg.hop_length..t * self.cfg.hop_length + n];
            for ((a, b), &w) in seg.iter_mut().zip(&buf).zip(&self.plan.window) {
                *a += b.re * scale * w;
            }
        }
        let valid = self.valid_len(out.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o = if i < valid {
                acc[i + pad] / self.wss[i + pad]
            } else {
                T::zero()
            };
        }
    }

    /// Adjoint of [`Synthesis::forward`]: maps an output gradient onto the
    /// real/imaginary planes.
    pub fn backward(&self, grad: &[T], dre: &mut [T], dim: &mut [T]) {
        let n = self.cfg.n_fft;
        let bins = self.cfg.full_bins();
        let frames = self.frames;
        let pad = n / 2;
        let mut gp = vec![T::zero(); self.wss.len()];
        for i in 0..self.valid_len(grad.len()) {
            gp[i + pad] = grad[i] / self.wss[i + pad];
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); self.plan.fwd.get_inplace_scratch_len()];
        let edge = T::from_f64_lossy(1.0 / n as f64);
        let inner = T::from_f64_lossy(2.0 / n as f64);
        for t in 0..frames {
            let seg = &gp[t * self.cfg.hop_length..t * self.cfg.hop_length + n];
            for ((b, &g), &w) in buf.iter_mut().zip(seg).zip(&self.plan.window) {
                *b = Complex::new(g * w, T::zero());
            }
            self.plan.fwd.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                let edge_bin = k == 0 || k == n / 2;
                let c = if edge_bin { edge } else { inner };
                dre[k * frames + t] = buf[k].re * c;
                dim[k * frames + t] = if edge_bin { T::zero() } else { buf[k].im * c };
            }
        }
    }
}

/// Short-time Fourier transform of every channel of `waveform`.
pub fn stft<T: Real>(waveform: &Waveform, config: &StftConfig) -> Result<Spectrogram<T>, DspError> {
    config.validate()?;
    if waveform.is_empty() {
        return Err(DspError::EmptyInput);
    }
    let len = waveform.len();
    let frames = config.frames_for(len);
    let bins = config.full_bins();
    let plan = Planner::new(config);
    let mut values = vec![Complex::new(T::zero(), T::zero()); waveform.channels() * bins * frames];
    for (ch, out) in values.chunks_mut(bins * frames).enumerate() {
        let x: Vec<T> = waveform
            .channel(ch)
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        stft_signal(&x, config, &plan, out);
    }
    Spectrogram::new(values, waveform.channels(), bins, frames, *config, len)
}

/// Inverse transform with squared-window overlap normalization, trimmed or
/// zero-padded to `target_length` samples.
pub fn istft<T: Real>(
    spec: &Spectrogram<T>,
    target_length: usize,
    sample_rate: u32,
) -> Result<Waveform, DspError> {
    let cfg = spec.config;
    cfg.validate()?;
    if spec.bins != cfg.full_bins() {
        return Err(DspError::BinsOutOfRange {
            requested: spec.bins,
            available: cfg.full_bins(),
        });
    }
    let synth = Synthesis::<T>::new(&cfg, spec.frames);
    synth.check(target_length)?;
    let plane = spec.bins * spec.frames;
    let mut samples = Vec::with_capacity(spec.channels * target_length);
    let mut out = vec![T::zero(); target_length];
    for ch in 0..spec.channels {
        let vals = &spec.values[ch * plane..(ch + 1) * plane];
        let re: Vec<T> = vals.iter().map(|c| c.re).collect();
        let im: Vec<T> = vals.iter().map(|c| c.im).collect();
        synth.forward(&re, &im, &mut out);
        samples.extend(out.iter().map(|v| v.as_f64() as f32));
    }
    Waveform::from_planar(sample_rate, spec.channels, samples)
        .map_err(|e| DspError::Shape(e.to_string()))
}
