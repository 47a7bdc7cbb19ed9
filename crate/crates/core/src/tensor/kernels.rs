//! Forward and adjoint kernels shared by the eager and recording backends.
//!
//! Activations are `[batch, channels, freq, time]`, row-major. Convolution
//! weights follow the `[out, in, kh, kw]` convention, transposed-convolution
//! weights `[in, out, kh, kw]`, frequency-linear weights `[out, in]`.

use super::{Real, Tensor};

/// Upper bound on im2col scratch elements, keeps large-model inference
/// inside a few tens of megabytes per convolution.
const COL_BUDGET: usize = 1 << 22;

/// Strided GEMM `C = alpha * A * B + beta * C` on slices (`A` is `m x k`,
/// `B` is `k x n`, strides given as `(row, col)`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    // SAFETY: the three asserts above bound every index the kernel touches,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

pub(crate) fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        size + 2 * pad >= kernel && (size + 2 * pad - kernel) % stride == 0,
        "convolution does not tile input of size {size} (kernel {kernel}, stride {stride}, pad {pad})"
    );
    (size + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (ci, h, wd) = (x[1], x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        assert_eq!(w[1], ci, "conv2d: weight expects {} input channels, got {ci}", w[1]);
        Self {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: conv_out_size(h, kh, stride, pad),
            wo: conv_out_size(wd, kw, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn block(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).clamp(1, self.positions().max(1))
    }

    /// Visits `(col_row, j, input_index)` for every in-bounds tap of output
    /// positions `[p0, p1)`; out-of-bounds taps are reported with `None`.
    #[inline]
    fn for_each_tap(&self, p0: usize, p1: usize, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let blk = p1 - p0;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let mut j = 0;
                    let (mut oy, mut ox) = (p0 / self.wo, p0 % self.wo);
                    while j < blk {
                        let run = (self.wo - ox).min(blk - j);
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let row_ok = iy >= 0 && (iy as usize) < self.h;
                        for t in 0..run {
                            let ix = ((ox + t) * self.stride + kx) as isize - self.pad as isize;
                            let idx = if row_ok && ix >= 0 && (ix as usize) < self.w {
                                Some((c * self.h + iy as usize) * self.w + ix as usize)
                            } else {
                                None
                            };
                            f(row, j + t, idx);
                        }
                        j += run;
                        ox += run;
                        if ox == self.wo {
                            ox = 0;
                            oy += 1;
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, xn: &[T], p0: usize, p1: usize, col: &mut [T]) {
        let blk = p1 - p0;
        self.for_each_tap(p0, p1, |row, j, idx| {
            col[row * blk + j] = idx.map_or(T::zero(), |i| xn[i]);
        });
    }

    fn col2im<T: Real>(&self, col: &[T], p0: usize, p1: usize, dxn: &mut [T]) {
        let blk = p1 - p0;
        self.for_each_tap(p0, p1, |row, j, idx| {
            if let Some(i) = idx {
                dxn[i] += col[row * blk + j];
            }
        });
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, _, _, _) = x.dims4();
    let co = w.shape()[0];
    assert_eq!(b.len(), co, "conv2d: bias length");
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (rows, positions, blk) = (g.rows(), g.positions(), g.block());
    let in_len = g.ci * g.h * g.w;
    let mut out = Tensor::zeros(&[n, co, g.ho, g.wo]);
    let mut col = vec![T::zero(); rows * blk];
    for ni in 0..n {
        let xn = &x.data()[ni * in_len..(ni + 1) * in_len];
        let outn = &mut out.data_mut()[ni * co * positions..(ni + 1) * co * positions];
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + blk).min(positions);
            let bl = p1 - p0;
            g.im2col(xn, p0, p1, &mut col[..rows * bl]);
            gemm(
                co,
                rows,
                bl,
                T::one(),
                w.data(),
                (rows, 1),
                &col[..rows * bl],
                (bl, 1),
                T::zero(),
                &mut outn[p0..],
                (positions, 1),
            );
            p0 = p1;
        }
        for (c, chunk) in outn.chunks_mut(positions).enumerate() {
            let bias = b.data()[c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, _, _, _) = x.dims4();
    let co = w.shape()[0];
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let (rows, positions, blk) = (g.rows(), g.positions(), g.block());
    let in_len = g.ci * g.h * g.w;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![T::zero(); rows * blk];
    let mut dcol = if need_dx {
        vec![T::zero(); rows * blk]
    } else {
        Vec::new()
    };
    for ni in 0..n {
        let xn = &x.data()[ni * in_len..(ni + 1) * in_len];
        let doutn = &dout.data()[ni * co * positions..(ni + 1) * co * positions];
        let mut p0 = 0;
        while p0 < positions {
            let p1 = (p0 + blk).min(positions);
            let bl = p1 - p0;
            g.im2col(xn, p0, p1, &mut col[..rows * bl]);
            gemm(
                co,
                bl,
                rows,
                T::one(),
                &doutn[p0..],
                (positions, 1),
                &col[..rows * bl],
                (1, bl),
                T::one(),
                dw.data_mut(),
                (rows, 1),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    rows,
                    co,
                    bl,
                    T::one(),
                    w.data(),
                    (1, rows),
                    &doutn[p0..],
                    (positions, 1),
                    T::zero(),
                    &mut dcol[..rows * bl],
                    (bl, 1),
                );
                let dxn = &mut dx.data_mut()[ni * in_len..(ni + 1) * in_len];
                g.col2im(&dcol[..rows * bl], p0, p1, dxn);
            }
            p0 = p1;
        }
        for (c, chunk) in doutn.chunks(positions).enumerate() {
            db.data_mut()[c] += sum(chunk);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution whose kernel equals its stride (non-overlapping).
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (wci, co, s, s2) = w.dims4();
    assert_eq!(wci, ci, "conv_transpose2d: input channels");
    assert_eq!(s, s2, "conv_transpose2d: square kernels only");
    assert_eq!(b.len(), co, "conv_transpose2d: bias length");
    let (hw, m) = (h * wd, co * s * s);
    let (ho, wo) = (h * s, wd * s);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut tmp = vec![T::zero(); m * hw];
    for ni in 0..n {
        let xn = &x.data()[ni * ci * hw..(ni + 1) * ci * hw];
        gemm(m, ci, hw, T::one(), w.data(), (1, m), xn, (hw, 1), T::zero(), &mut tmp, (hw, 1));
        let outn = &mut out.data_mut()[ni * co * ho * wo..(ni + 1) * co * ho * wo];
        for c in 0..co {
            let bias = b.data()[c];
            for a in 0..s {
                for bb in 0..s {
                    let row = &tmp[((c * s + a) * s + bb) * hw..][..hw];
                    for i in 0..h {
                        let dst = &mut outn[(c * ho + i * s + a) * wo..][..wo];
                        for j in 0..wd {
                            dst[j * s + bb] = row[i * wd + j] + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, s, _) = w.dims4();
    let (hw, m) = (h * wd, co * s * s);
    let (ho, wo) = (h * s, wd * s);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dtmp = vec![T::zero(); m * hw];
    for ni in 0..n {
        let doutn = &dout.data()[ni * co * ho * wo..(ni + 1) * co * ho * wo];
        for c in 0..co {
            db.data_mut()[c] += sum(&doutn[c * ho * wo..(c + 1) * ho * wo]);
            for a in 0..s {
                for bb in 0..s {
                    let row = &mut dtmp[((c * s + a) * s + bb) * hw..][..hw];
                    for i in 0..h {
                        let src = &doutn[(c * ho + i * s + a) * wo..][..wo];
                        for j in 0..wd {
                            row[i * wd + j] = src[j * s + bb];
                        }
                    }
                }
            }
        }
        let xn = &x.data()[ni * ci * hw..(ni + 1) * ci * hw];
        gemm(ci, hw, m, T::one(), xn, (hw, 1), &dtmp, (1, hw), T::one(), dw.data_mut(), (m, 1));
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data_mut()[ni * ci * hw..(ni + 1) * ci * hw];
            gemm(ci, m, hw, T::one(), w.data(), (m, 1), &dtmp, (hw, 1), T::zero(), dxn, (hw, 1));
        }
    }
    (dx, dw, db)
}

/// Linear map along the frequency axis, shared over batch, channel and time.
pub(crate) fn freq_linear_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, f, t) = x.dims4();
    let (fo, fi) = (w.shape()[0], w.shape()[1]);
    assert_eq!(fi, f, "freq_linear: weight expects {fi} bins, got {f}");
    assert_eq!(b.len(), fo, "freq_linear: bias length");
    let mut out = Tensor::zeros(&[n, c, fo, t]);
    for (xs, ys) in x.data().chunks(f * t).zip(out.data_mut().chunks_mut(fo * t)) {
        gemm(fo, f, t, T::one(), w.data(), (f, 1), xs, (t, 1), T::zero(), ys, (t, 1));
        for (row, &bias) in ys.chunks_mut(t).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

pub(crate) fn freq_linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (_, _, f, t) = x.dims4();
    let fo = w.shape()[0];
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[fo]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    for (slab, (xs, dys)) in x.data().chunks(f * t).zip(dout.data().chunks(fo * t)).enumerate() {
        gemm(fo, t, f, T::one(), dys, (t, 1), xs, (1, t), T::one(), dw.data_mut(), (f, 1));
        for (acc, row) in db.data_mut().iter_mut().zip(dys.chunks(t)) {
            *acc += sum(row);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[slab * f * t..(slab + 1) * f * t];
            gemm(f, fo, t, T::one(), w.data(), (1, f), dys, (t, 1), T::zero(), dxs, (t, 1));
        }
    }
    (dx, dw, db)
}

/// Output of instance normalization plus what the adjoint needs.
pub(crate) struct NormForward<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each `(item, channel)` plane over freq x time, then applies the
/// per-channel affine `gamma * xhat + beta`.
pub(crate) fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> NormForward<T> {
    let (_, c, h, w) = x.dims4();
    assert_eq!(gamma.len(), c, "instance_norm: gamma length");
    assert_eq!(beta.len(), c, "instance_norm: beta length");
    let m = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.len() / m.max(1));
    for (plane, (xs, (ys, hs))) in x
        .data()
        .chunks(m)
        .zip(y.data_mut().chunks_mut(m).zip(xhat.data_mut().chunks_mut(m)))
        .enumerate()
    {
        let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
        let var = xs
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / m as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[plane % c], beta.data()[plane % c]);
        for ((&xv, yv), hv) in xs.iter().zip(ys.iter_mut()).zip(hs.iter_mut()) {
            let nh = T::from_f64_lossy((xv.as_f64() - mean) * inv);
            *hv = nh;
            *yv = g * nh + b;
        }
        inv_std.push(T::from_f64_lossy(inv));
    }
    NormForward { y, xhat, inv_std }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn instance_norm_backward<T: Real>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (_, c, h, w) = dy.dims4();
    let m = h * w;
    let mf = m as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (plane, ((dys, hs), dxs)) in dy
        .data()
        .chunks(m)
        .zip(xhat.data().chunks(m))
        .zip(dx.data_mut().chunks_mut(m))
        .enumerate()
    {
        let ch = plane % c;
        let g = gamma.data()[ch].as_f64();
        let inv = inv_std[plane].as_f64();
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for (&d, &hv) in dys.iter().zip(hs) {
            let (d, hv) = (d.as_f64(), hv.as_f64());
            dgamma[ch] += d * hv;
            dbeta[ch] += d;
            s1 += d * g;
            s2 += d * g * hv;
        }
        for ((dxv, &d), &hv) in dxs.iter_mut().zip(dys).zip(hs) {
            let dxhat = d.as_f64() * g;
            *dxv = T::from_f64_lossy(inv / mf * (mf * dxhat - s1 - hv.as_f64() * s2));
        }
    }
    let to_t = |v: Vec<f64>| {
        Tensor::from_vec(&[c], v.into_iter().map(T::from_f64_lossy).collect()).unwrap()
    };
    (dx, to_t(dgamma), to_t(dbeta))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let t = (GELU_K * (x + GELU_A * x * x * x)).tanh();
    T::from_f64_lossy(0.5 * x * (1.0 + t))
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let t = (GELU_K * (x + GELU_A * x * x * x)).tanh();
    let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x);
    T::from_f64_lossy(0.5 * (1.0 + t) + 0.5 * x * dt)
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: spatial/batch mismatch");
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..n {
        data.extend_from_slice(&a.data()[ni * la..(ni + 1) * la]);
        data.extend_from_slice(&b.data()[ni * lb..(ni + 1) * lb]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).unwrap()
}

pub(crate) fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let cb = c - ca;
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * la);
    let mut b = Vec::with_capacity(n * lb);
    for chunk in x.data().chunks(la + lb) {
        a.extend_from_slice(&chunk[..la]);
        b.extend_from_slice(&chunk[la..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a).unwrap(),
        Tensor::from_vec(&[n, cb, h, w], b).unwrap(),
    )
}

/// Crops or zero-pads the trailing two axes, anchored at index 0.
pub(crate) fn resize_hw<T: Real>(x: &Tensor<T>, h2: usize, w2: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, h2, w2]);
    let (hc, wc) = (h.min(h2), w.min(w2));
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h2 * w2)) {
        for i in 0..hc {
            dst[i * w2..i * w2 + wc].copy_from_slice(&src[i * w..i * w + wc]);
        }
    }
    out
}

/// Means over channels and contiguous time segments: `[b, s, c, l] -> [b, s, l / seg]`.
pub(crate) fn segment_mean<T: Real>(x: &Tensor<T>, seg: usize) -> Tensor<T> {
    let (b, s, c, l) = x.dims4();
    assert!(seg > 0 && l % seg == 0, "segment_mean: {l} samples not divisible by {seg}");
    let nseg = l / seg;
    let scale = 1.0 / (c * seg) as f64;
    let mut out = Vec::with_capacity(b * s * nseg);
    for group in x.data().chunks(c * l) {
        for k in 0..nseg {
            let mut acc = 0.0f64;
            for ch in 0..c {
                acc += sum_f64(&group[ch * l + k * seg..ch * l + (k + 1) * seg]);
            }
            out.push(T::from_f64_lossy(acc * scale));
        }
    }
    Tensor::from_vec(&[b, s, nseg], out).unwrap()
}

pub(crate) fn segment_mean_backward<T: Real>(
    dout: &Tensor<T>,
    x_shape: &[usize],
    seg: usize,
) -> Tensor<T> {
    let (c, l) = (x_shape[2], x_shape[3]);
    let nseg = l / seg;
    let scale = T::from_f64_lossy(1.0 / (c * seg) as f64);
    let mut dx = Tensor::zeros(x_shape);
    for (group, dg) in dx.data_mut().chunks_mut(c * l).zip(dout.data().chunks(nseg)) {
        for ch in 0..c {
            for (k, &d) in dg.iter().enumerate() {
                let v = d * scale;
                group[ch * l + k * seg..ch * l + (k + 1) * seg]
                    .iter_mut()
                    .for_each(|e| *e = v);
            }
        }
    }
    dx
}

pub(crate) fn sum<T: Real>(xs: &[T]) -> T {
    T::from_f64_lossy(sum_f64(xs))
}

pub(crate) fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

pub(crate) fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}
