//! 3-D convolution (cross-correlation, no kernel flip) and its transpose,
//! lowered to GEMM through an im2col buffer per sample.

use rayon::prelude::*;

use super::{spatial_len, Real, Tensor};
use crate::error::{Error, Result};

/// Cubic convolution kernel.
///
/// For [`conv3d`] the weights are `(out_channels, in_channels, k, k, k)`.
/// For [`conv3d_transposed`] they are `(in_channels, out_channels, k, k, k)`,
/// i.e. the weights of the strided convolution this layer inverts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T: Real = f64> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    /// Extra extent added on the high side of a transposed convolution's
    /// output. Ignored by [`conv3d`].
    pub output_padding: usize,
}

impl<T: Real> ConvKernel<T> {
    /// Stride-1 kernel with "same" padding for odd `k`.
    pub fn same(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let k = weights.shape().get(2).copied().unwrap_or(1);
        Self { weights, bias, stride: 1, padding: k / 2, output_padding: 0 }
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        Self::same(Tensor::zeros(&[out_channels, in_channels, k, k, k]), Tensor::zeros(&[out_channels]))
    }

    /// `(dim0, dim1, k)` of the weight tensor.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        match self.weights.shape() {
            &[a, b, k0, k1, k2] if k0 == k1 && k1 == k2 && k0 > 0 => Ok((a, b, k0)),
            s => Err(Error::shape(format!("conv kernel weights must be (a, b, k, k, k), got {s:?}"))),
        }
    }

    pub fn size(&self) -> usize {
        self.weights.shape().get(2).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real = f64> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `floor((n + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv3d_output_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// `(n - 1) s - 2p + k + output_padding`.
pub fn conv_transposed_output_extent(
    n: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if stride == 0 || n == 0 || output_padding >= stride {
        return None;
    }
    ((n - 1) * stride + k + output_padding).checked_sub(2 * padding).filter(|&e| e > 0)
}

/// Geometry of a forward (non-transposed) convolution between a "wide"
/// volume and a "narrow" one.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    wide: [usize; 3],
    narrow: [usize; 3],
    k: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

const FORWARD_TILE_BYTES: usize = 256 * 1024;

/// Output positions `o` in `0..n_out` for which `o*s + offset` lies in `0..n_in`.
fn valid_range(n_out: usize, n_in: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_incl = (n_in as isize - 1 - offset).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, n_out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Visits each contiguous run of the im2col lowering as
/// `(column offset, wide offset, run length)`, skipping padded positions.
#[inline]
fn for_each_tap(g: &Geometry, f: impl FnMut(usize, usize, usize)) {
    for_each_tap_in(g, 0, g.narrow[0], f)
}

/// Same as [`for_each_tap`] restricted to output depths `od0..od1`; column
/// offsets are relative to a lowering of just that slab.
#[inline]
fn for_each_tap_in(g: &Geometry, od0: usize, od1: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [dn, hn, wn] = g.narrow;
    let [dw, hw, ww] = g.wide;
    let k = g.k;
    let p = g.padding as isize;
    let narrow_len = (od1 - od0) * hn * wn;
    let wide_len = dw * hw * ww;
    for c in 0..g.channels {
        for kd in 0..k {
            let (d_lo, d_hi) = valid_range(dn, dw, g.stride, kd as isize - p);
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(hn, hw, g.stride, kh as isize - p);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(wn, ww, g.stride, kw as isize - p);
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let row_base = row * narrow_len;
                    for od in d_lo.max(od0)..d_hi.min(od1) {
                        let id = od * g.stride + kd - g.padding;
                        for oh in h_lo..h_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let out_base = row_base + ((od - od0) * hn + oh) * wn;
                            let in_base = c * wide_len + (id * hw + ih) * ww;
                            f(out_base + w_lo, in_base + w_lo * g.stride + kw - g.padding, w_hi - w_lo);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &Geometry, wide: &[T], col: &mut [T]) {
    im2col_slab(g, wide, col, 0, g.narrow[0]);
}

fn im2col_slab<T: Real>(g: &Geometry, wide: &[T], col: &mut [T], od0: usize, od1: usize) {
    col.fill(T::ZERO);
    let s = g.stride;
    for_each_tap_in(g, od0, od1, |col_at, wide_at, n| {
        if s == 1 {
            col[col_at..col_at + n].copy_from_slice(&wide[wide_at..wide_at + n]);
        } else {
            for i in 0..n {
                col[col_at + i] = wide[wide_at + i * s];
            }
        }
    });
}

fn col2im<T: Real>(g: &Geometry, col: &[T], wide: &mut [T]) {
    let s = g.stride;
    for_each_tap(g, |col_at, wide_at, n| {
        if s == 1 {
            for (dst, &src) in wide[wide_at..wide_at + n].iter_mut().zip(&col[col_at..col_at + n]) {
                *dst += src;
            }
        } else {
            for i in 0..n {
                wide[wide_at + i * s] += col[col_at + i];
            }
        }
    });
}

fn check_bias<T: Real>(kernel: &ConvKernel<T>, channels: usize) -> Result<()> {
    if kernel.bias.shape() != [channels] {
        return Err(Error::shape(format!(
            "conv bias must have shape [{channels}], got {:?}",
            kernel.bias.shape()
        )));
    }
    Ok(())
}

fn forward_geometry<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>, op: &str) -> Result<(usize, usize, Geometry)> {
    let (batch, cin, spatial) = input.dims5(op)?;
    let (cout, kin, k) = kernel.dims()?;
    if cin != kin {
        return Err(Error::shape(format!(
            "{op}: input {:?} has {cin} channels but kernel {:?} expects {kin}",
            input.shape(),
            kernel.weights.shape()
        )));
    }
    check_bias(kernel, cout)?;
    let mut narrow = [0; 3];
    for (o, &n) in narrow.iter_mut().zip(&spatial) {
        *o = conv3d_output_extent(n, k, kernel.stride, kernel.padding).ok_or_else(|| {
            Error::shape(format!(
                "{op}: kernel {:?} (stride {}, padding {}) does not fit input {:?}",
                kernel.weights.shape(),
                kernel.stride,
                kernel.padding,
                input.shape()
            ))
        })?;
    }
    let g = Geometry { channels: cin, wide: spatial, narrow, k, stride: kernel.stride, padding: kernel.padding };
    Ok((batch, cout, g))
}

/// Output columns per register tile of the direct kernel.
const LANES: usize = 8;

/// Stride-1 convolution without lowering: each sample is zero-padded once,
/// then every `CB x LANES` tile of (output channel, output column)
/// accumulates `weight * shifted input row` over input channels and taps.
fn direct_stride1<T: Real, const CB: usize>(g: &Geometry, cout: usize, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    let [d, h, wd] = g.wide;
    let [dn, hn, wn] = g.narrow;
    let (k, pad, cin) = (g.k, g.padding, g.channels);
    let taps = k * k * k;
    let (dp, hp) = (d + 2 * pad, h + 2 * pad);
    // Wide enough that a full tile read never leaves the row.
    let wp = (wd + 2 * pad).max(wn.div_ceil(LANES) * LANES + k - 1);
    let blocks = cout.div_ceil(CB);

    // Weights as [block][ci][tap][CB], zero for missing output channels.
    let mut wr = vec![T::ZERO; blocks * cin * taps * CB];
    for co in 0..cout {
        let (b, c) = (co / CB, co % CB);
        for ci in 0..cin {
            for t in 0..taps {
                wr[((b * cin + ci) * taps + t) * CB + c] = w[(co * cin + ci) * taps + t];
            }
        }
    }
    let in_len = cin * d * h * wd;
    let plane = dn * hn * wn;
    let shape = DirectShape { cin, cout, k, pad, wide: g.wide, narrow: g.narrow, dp, hp, wp };
    out.par_chunks_mut(cout * plane).zip(x.par_chunks(in_len)).for_each_init(
        || vec![T::ZERO; cin * dp * hp * wp],
        |xp, (out_b, x_b)| {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { direct_sample_avx2::<T, CB>(&shape, x_b, &wr, bias, xp, out_b) };
                return;
            }
            direct_sample::<T, CB>(&shape, x_b, &wr, bias, xp, out_b);
        },
    );
}

struct DirectShape {
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    wide: [usize; 3],
    narrow: [usize; 3],
    dp: usize,
    hp: usize,
    wp: usize,
}

/// Same arithmetic as [`direct_sample`] (no fused multiply-add), compiled
/// with wider vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_sample_avx2<T: Real, const CB: usize>(
    s: &DirectShape,
    x_b: &[T],
    wr: &[T],
    bias: &[T],
    xp: &mut [T],
    out_b: &mut [T],
) {
    direct_sample::<T, CB>(s, x_b, wr, bias, xp, out_b)
}

#[inline(always)]
fn direct_sample<T: Real, const CB: usize>(s: &DirectShape, x_b: &[T], wr: &[T], bias: &[T], xp: &mut [T], out_b: &mut [T]) {
    let &DirectShape { cin, cout, k, pad, wide: [d, h, wd], narrow: [dn, hn, wn], dp, hp, wp } = s;
    let taps = k * k * k;
    let plane = dn * hn * wn;
    for ci in 0..cin {
        for z in 0..d {
            for y in 0..h {
                let src = ((ci * d + z) * h + y) * wd;
                let dst = ((ci * dp + z + pad) * hp + y + pad) * wp + pad;
                xp[dst..dst + wd].copy_from_slice(&x_b[src..src + wd]);
            }
        }
    }
    for b in 0..cout.div_ceil(CB) {
        let wb = &wr[b * cin * taps * CB..(b + 1) * cin * taps * CB];
        let co0 = b * CB;
        let live = CB.min(cout - co0);
        for od in 0..dn {
            for oh in 0..hn {
                for ow0 in (0..wn).step_by(LANES) {
                    let mut acc = [[T::ZERO; LANES]; CB];
                    for (c, row) in acc.iter_mut().enumerate().take(live) {
                        *row = [bias[co0 + c]; LANES];
                    }
                    for ci in 0..cin {
                        for kz in 0..k {
                            for ky in 0..k {
                                let base = ((ci * dp + od + kz) * hp + oh + ky) * wp + ow0;
                                let tap0 = (ci * taps + (kz * k + ky) * k) * CB;
                                for kx in 0..k {
                                    let xs: &[T; LANES] = xp[base + kx..base + kx + LANES].try_into().unwrap();
                                    let ws: &[T; CB] = wb[tap0 + kx * CB..tap0 + (kx + 1) * CB].try_into().unwrap();
                                    for c in 0..CB {
                                        let wv = ws[c];
                                        for j in 0..LANES {
                                            acc[c][j] += wv * xs[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let n = LANES.min(wn - ow0);
                    for (c, row) in acc.iter().enumerate().take(live) {
                        let at = (co0 + c) * plane + (od * hn + oh) * wn + ow0;
                        out_b[at..at + n].copy_from_slice(&row[..n]);
                    }
                }
            }
        }
    }
}

/// Strided, zero-padded 3-D cross-correlation.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let (batch, cout, g) = forward_geometry(input, kernel, "conv3d")?;
    let in_len = g.channels * spatial_len(g.wide);
    let p = spatial_len(g.narrow);
    let rows = g.rows();
    let w = kernel.weights.data();
    let bias = kernel.bias.data();

    // Lower a few output depth slices at a time so the column buffer stays
    // cache resident.
    let slice = g.narrow[1] * g.narrow[2];
    let slab = (FORWARD_TILE_BYTES / (rows * slice * std::mem::size_of::<T>()).max(1)).clamp(1, g.narrow[0].max(1));
    let mut out = vec![T::ZERO; batch * cout * p];
    if g.stride == 1 && g.k > 1 {
        if cout <= 4 {
            direct_stride1::<T, 4>(&g, cout, input.data(), w, bias, &mut out);
        } else {
            direct_stride1::<T, 8>(&g, cout, input.data(), w, bias, &mut out);
        }
        return Tensor::from_vec(vec![batch, cout, g.narrow[0], g.narrow[1], g.narrow[2]], out);
    }
    out.par_chunks_mut(cout * p)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * slab * slice] },
            |col, (out_b, x_b)| {
                for (co, plane) in out_b.chunks_mut(p).enumerate() {
                    plane.fill(bias[co]);
                }
                if g.is_pointwise() {
                    T::gemm(cout, rows, p, T::ONE, w, rows as isize, 1, x_b, p as isize, 1, T::ONE, out_b, p as isize, 1);
                    return;
                }
                let mut od0 = 0;
                while od0 < g.narrow[0] {
                    let od1 = (od0 + slab).min(g.narrow[0]);
                    let n = (od1 - od0) * slice;
                    let col = &mut col[..rows * n];
                    im2col_slab(&g, x_b, col, od0, od1);
                    let c = &mut out_b[od0 * slice..];
                    T::gemm(cout, rows, n, T::ONE, w, rows as isize, 1, col, n as isize, 1, T::ONE, c, p as isize, 1);
                    od0 = od1;
                }
            },
        );
    Tensor::from_vec(vec![batch, cout, g.narrow[0], g.narrow[1], g.narrow[2]], out)
}

/// Gradients of [`conv3d`] with respect to input, weights and bias.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (input_grad, weights, bias) = conv3d_backward_impl(input, kernel, grad_out, true)?;
    Ok(ConvGrads { input: input_grad.expect("input gradient requested"), weights, bias })
}

type BackwardParts<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

pub(crate) fn conv3d_backward_impl<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<BackwardParts<T>> {
    let (batch, cout, g) = forward_geometry(input, kernel, "conv3d_backward")?;
    let expected = [batch, cout, g.narrow[0], g.narrow[1], g.narrow[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv3d_backward: grad_out {:?} does not match output shape {expected:?}",
            grad_out.shape()
        )));
    }
    let in_len = g.channels * spatial_len(g.wide);
    let p = spatial_len(g.narrow);
    let rows = g.rows();
    let w = kernel.weights.data();

    let mut dx = if want_input { vec![T::ZERO; input.len()] } else { Vec::new() };
    let dx_chunks: Vec<Option<&mut [T]>> = if want_input {
        dx.chunks_mut(in_len).map(Some).collect()
    } else {
        (0..batch).map(|_| None).collect()
    };

    let per_sample: Vec<(Vec<T>, Vec<T>)> = dx_chunks
        .into_par_iter()
        .zip(input.data().par_chunks(in_len))
        .zip(grad_out.data().par_chunks(cout * p))
        .map(|((dx_b, x_b), gy_b)| {
            let mut col_buf = Vec::new();
            let col: &[T] = if g.is_pointwise() {
                x_b
            } else {
                col_buf = vec![T::ZERO; rows * p];
                im2col(&g, x_b, &mut col_buf);
                &col_buf
            };
            let mut dw = vec![T::ZERO; cout * rows];
            T::gemm(cout, p, rows, T::ONE, gy_b, p as isize, 1, col, 1, p as isize, T::ZERO, &mut dw, rows as isize, 1);
            let db: Vec<T> = gy_b.chunks(p).map(|plane| plane.iter().copied().sum()).collect();
            if let Some(dx_b) = dx_b {
                if g.is_pointwise() {
                    T::gemm(rows, cout, p, T::ONE, w, 1, rows as isize, gy_b, p as isize, 1, T::ZERO, dx_b, p as isize, 1);
                } else {
                    col_buf.resize(rows * p, T::ZERO);
                    T::gemm(
                        rows,
                        cout,
                        p,
                        T::ONE,
                        w,
                        1,
                        rows as isize,
                        gy_b,
                        p as isize,
                        1,
                        T::ZERO,
                        &mut col_buf,
                        p as isize,
                        1,
                    );
                    col2im(&g, &col_buf, dx_b);
                }
            }
            (dw, db)
        })
        .collect();

    // Fixed-order reduction keeps parameter gradients bitwise reproducible.
    let mut dw = vec![T::ZERO; cout * rows];
    let mut db = vec![T::ZERO; cout];
    for (dw_b, db_b) in &per_sample {
        dw.iter_mut().zip(dw_b).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(db_b).for_each(|(a, &b)| *a += b);
    }
    let input_grad = if want_input { Some(Tensor::from_vec(input.shape().to_vec(), dx)?) } else { None };
    Ok((
        input_grad,
        Tensor::from_vec(kernel.weights.shape().to_vec(), dw)?,
        Tensor::from_vec(vec![cout], db)?,
    ))
}

fn transposed_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    op: &str,
) -> Result<(usize, usize, usize, Geometry)> {
    let (batch, cin, spatial) = input.dims5(op)?;
    let (kin, cout, k) = kernel.dims()?;
    if cin != kin {
        return Err(Error::shape(format!(
            "{op}: input {:?} has {cin} channels but kernel {:?} expects {kin}",
            input.shape(),
            kernel.weights.shape()
        )));
    }
    check_bias(kernel, cout)?;
    let mut wide = [0; 3];
    for (o, &n) in wide.iter_mut().zip(&spatial) {
        *o = conv_transposed_output_extent(n, k, kernel.stride, kernel.padding, kernel.output_padding)
            .ok_or_else(|| {
                Error::shape(format!(
                    "{op}: invalid geometry for input {:?} with kernel {:?} (stride {}, padding {}, output padding {})",
                    input.shape(),
                    kernel.weights.shape(),
                    kernel.stride,
                    kernel.padding,
                    kernel.output_padding
                ))
            })?;
    }
    let g = Geometry { channels: cout, wide, narrow: spatial, k, stride: kernel.stride, padding: kernel.padding };
    Ok((batch, cin, cout, g))
}

/// Transposed convolution: the adjoint of [`conv3d`] with the same kernel
/// geometry, plus a per-output-channel bias.
pub fn conv3d_transposed<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let (batch, cin, cout, g) = transposed_geometry(input, kernel, "conv3d_transposed")?;
    let p = spatial_len(g.narrow);
    let out_len = cout * spatial_len(g.wide);
    let rows = g.rows();
    let w = kernel.weights.data();
    let bias = kernel.bias.data();

    let mut out = vec![T::ZERO; batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(cin * p))
        .for_each_init(
            || vec![T::ZERO; rows * p],
            |col, (out_b, x_b)| {
                T::gemm(rows, cin, p, T::ONE, w, 1, rows as isize, x_b, p as isize, 1, T::ZERO, col, p as isize, 1);
                col2im(&g, col, out_b);
                let plane = spatial_len(g.wide);
                for (co, chunk) in out_b.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[co]);
                }
            },
        );
    Tensor::from_vec(vec![batch, cout, g.wide[0], g.wide[1], g.wide[2]], out)
}

/// Gradients of [`conv3d_transposed`].
pub fn conv3d_transposed_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (batch, cin, cout, g) = transposed_geometry(input, kernel, "conv3d_transposed_backward")?;
    let expected = [batch, cout, g.wide[0], g.wide[1], g.wide[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv3d_transposed_backward: grad_out {:?} does not match output shape {expected:?}",
            grad_out.shape()
        )));
    }
    let p = spatial_len(g.narrow);
    let out_len = cout * spatial_len(g.wide);
    let rows = g.rows();
    let w = kernel.weights.data();

    let mut dx = vec![T::ZERO; input.len()];
    let per_sample: Vec<(Vec<T>, Vec<T>)> = dx
        .par_chunks_mut(cin * p)
        .zip(input.data().par_chunks(cin * p))
        .zip(grad_out.data().par_chunks(out_len))
        .map(|((dx_b, x_b), gy_b)| {
            let mut col = vec![T::ZERO; rows * p];
            im2col(&g, gy_b, &mut col);
            T::gemm(cin, rows, p, T::ONE, w, rows as isize, 1, &col, p as isize, 1, T::ZERO, dx_b, p as isize, 1);
            let mut dw = vec![T::ZERO; cin * rows];
            T::gemm(cin, p, rows, T::ONE, x_b, p as isize, 1, &col, 1, p as isize, T::ZERO, &mut dw, rows as isize, 1);
            let plane = spatial_len(g.wide);
            let db: Vec<T> = gy_b.chunks(plane).map(|c| c.iter().copied().sum()).collect();
            (dw, db)
        })
        .collect();

    let mut dw = vec![T::ZERO; cin * rows];
    let mut db = vec![T::ZERO; cout];
    for (dw_b, db_b) in &per_sample {
        dw.iter_mut().zip(dw_b).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(db_b).for_each(|(a, &b)| *a += b);
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().to_vec(), dx)?,
        weights: Tensor::from_vec(kernel.weights.shape().to_vec(), dw)?,
        bias: Tensor::from_vec(vec![cout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn vector_and_portable_direct_kernels_agree_bitwise() {
        if !std::arch::is_x86_feature_detected!("avx2") {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout, k, pad) = (3, 5, 3, 1);
        let wide = [4, 5, 11];
        let narrow = [4, 5, 11];
        let x: Vec<f32> = (0..cin * 4 * 5 * 11).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..8 * cin * 27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (dp, hp, wp) = (6, 7, 16 + k - 1);
        let shape = DirectShape { cin, cout, k, pad, wide, narrow, dp, hp, wp };
        let run = |vector: bool| {
            let mut xp = vec![0.0f32; cin * dp * hp * wp];
            let mut out = vec![0.0f32; cout * 4 * 5 * 11];
            if vector {
                unsafe { direct_sample_avx2::<f32, 8>(&shape, &x, &w, &bias, &mut xp, &mut out) };
            } else {
                direct_sample::<f32, 8>(&shape, &x, &w, &bias, &mut xp, &mut out);
            }
            out
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for n_out in 1..6 {
            for n_in in 1..8 {
                for s in 1..3 {
                    for off in -3isize..3 {
                        let (lo, hi) = valid_range(n_out, n_in, s, off);
                        let brute: Vec<usize> = (0..n_out)
                            .filter(|&o| {
                                let i = (o * s) as isize + off;
                                i >= 0 && i < n_in as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "n_out={n_out} n_in={n_in} s={s} off={off}");
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 1, 3, 4, 5], &mut rng);
        let k = ConvKernel::same(Tensor::full(&[1, 1, 1, 1, 1], 1.0), Tensor::zeros(&[1]));
        assert_eq!(conv3d(&x, &k).unwrap().data(), x.data());
        assert_eq!(conv3d_transposed(&x, &k).unwrap().data(), x.data());
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let mut k = ConvKernel::zeros(3, 2, 3);
        k.weights = k.weights.map(|_| 0.7);
        k.bias = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv3d(&x, &k).unwrap();
        for (c, plane) in y.data().chunks(64).enumerate() {
            assert!(plane.iter().all(|&v| v == k.bias.data()[c]));
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
        let k = ConvKernel::<f64>::zeros(3, 5, 3);
        let msg = conv3d(&x, &k).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4, 4]") && msg.contains("[3, 5, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn transposed_stride_two_doubles_extent() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8, 8]);
        let k = ConvKernel {
            weights: Tensor::zeros(&[2, 3, 3, 3, 3]),
            bias: Tensor::zeros(&[3]),
            stride: 2,
            padding: 1,
            output_padding: 1,
        };
        assert_eq!(conv3d_transposed(&x, &k).unwrap().shape(), &[1, 3, 16, 16, 16]);
        let down = ConvKernel { weights: Tensor::zeros(&[2, 2, 3, 3, 3]), bias: Tensor::zeros(&[2]), stride: 2, padding: 1, output_padding: 0 };
        let y = Tensor::<f64>::zeros(&[1, 2, 16, 16, 16]);
        assert_eq!(conv3d(&y, &down).unwrap().shape(), &[1, 2, 8, 8, 8]);
    }

    #[test]
    fn bad_output_padding_rejected() {
        assert_eq!(conv_transposed_output_extent(4, 3, 1, 1, 1), None);
        assert_eq!(conv_transposed_output_extent(4, 3, 2, 1, 1), Some(8));
    }
}
