use super::kernels;
use super::{Real, Tensor};
use crate::dsp::{self, StftConfig};

/// Primitive operations the network and losses are written against.
///
/// Implemented by [`Eager`] (plain values, nothing recorded) and
/// [`super::Tape`] (values plus an adjoint record). Shape errors here are
/// programming errors and panic; public entry points validate shapes first.
pub trait Ops<T: Real> {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor<T>;

    /// Wraps a tensor that needs no gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::V;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, stride: usize, pad: usize) -> Self::V;

    /// Transposed convolution with kernel size equal to its stride.
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Self::V;

    /// Linear map over the frequency axis (`[n, c, f, t]`, weight `[f_out, f]`).
    fn freq_linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Self::V;

    fn instance_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V, eps: f64) -> Self::V;

    fn gelu(&mut self, x: &Self::V) -> Self::V;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;

    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;

    fn scale(&mut self, x: &Self::V, s: T) -> Self::V;

    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Self::V;

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Self::V;

    /// Crops or zero-pads the last two axes.
    fn resize_hw(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V;

    /// Synthesis of packed `(re, im)` planes `[n, 2c, bins, frames] -> [n, c, length]`.
    fn istft(&mut self, x: &Self::V, cfg: &StftConfig, length: usize) -> Self::V;

    /// `[b, s, c, l] -> [b, s, l / seg]`, mean over channels and each segment.
    fn segment_mean(&mut self, x: &Self::V, seg: usize) -> Self::V;

    /// Scalar `sum(weights * x)` with constant weights.
    fn weighted_sum(&mut self, x: &Self::V, weights: &Tensor<T>) -> Self::V;

    fn sum(&mut self, x: &Self::V) -> Self::V;

    fn mean(&mut self, x: &Self::V) -> Self::V;
}

/// Direct evaluation without recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Ops<T> for Eager {
    type V = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
        kernels::conv2d_forward(x, w, b, stride, pad)
    }

    fn conv_transpose2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::conv_transpose2d_forward(x, w, b)
    }

    fn freq_linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::freq_linear_forward(x, w, b)
    }

    fn instance_norm(&mut self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
        kernels::instance_norm_forward(x, gamma, beta, eps).y
    }

    fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        x.map(kernels::gelu)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::zip_map(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::zip_map(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::zip_map(a, b, |x, y| x * y)
    }

    fn scale(&mut self, x: &Tensor<T>, s: T) -> Tensor<T> {
        x.map(|v| v * s)
    }

    fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        kernels::concat_channels(a, b)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
        x.clone().reshape(shape).expect("reshape preserves element count")
    }

    fn resize_hw(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
        kernels::resize_hw(x, h, w)
    }

    fn istft(&mut self, x: &Tensor<T>, cfg: &StftConfig, length: usize) -> Tensor<T> {
        dsp::istft_planes(x, cfg, length)
    }

    fn segment_mean(&mut self, x: &Tensor<T>, seg: usize) -> Tensor<T> {
        kernels::segment_mean(x, seg)
    }

    fn weighted_sum(&mut self, x: &Tensor<T>, weights: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape(), weights.shape(), "weighted_sum: weight shape");
        let s: f64 = x.data().iter().zip(weights.data()).map(|(a, w)| a.as_f64() * w.as_f64()).sum();
        Tensor::scalar(T::from_f64_lossy(s))
    }

    fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(T::from_f64_lossy(x.sum_f64()))
    }

    fn mean(&mut self, x: &Tensor<T>) -> Tensor<T> {
        Tensor::scalar(T::from_f64_lossy(x.sum_f64() / x.len() as f64))
    }
}
