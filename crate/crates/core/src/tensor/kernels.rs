//! Direct-loop convolution kernels.
//!
//! Every output element of [`conv2d`] is accumulated sequentially over
//! `(in_channel, kh, kw)` starting from zero, so a textbook nested-loop
//! convolution reproduces it bit-for-bit in `f64`. Out-of-bounds (padding)
//! taps contribute an exact zero and are skipped.
//!
//! The kernels optionally tally multiply-adds into an [`AtomicU64`]. The tally
//! counts every tap of the loop nest, padded ones included.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::{Float, Tensor, TensorError};

/// Output extent of a convolution along one axis, `None` when the kernel does
/// not fit the padded input.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Range of output columns `ow` whose input column `ow*stride + tap - padding`
/// lies in `0..extent`.
#[inline]
fn valid_range(out: usize, extent: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > tap {
        (padding - tap).div_ceil(stride)
    } else {
        0
    };
    if extent + padding < tap + 1 {
        return (0, 0);
    }
    let hi = ((extent - 1 + padding - tap) / stride + 1).min(out);
    (lo.min(hi), hi)
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = T::zero();
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

struct Geometry {
    stride: usize,
    padding: usize,
}

fn check_stride(op: &'static str, stride: usize) -> Result<(), TensorError> {
    if stride == 0 {
        return Err(TensorError::InvalidParameter {
            op,
            name: "stride",
            value: 0.0,
        });
    }
    Ok(())
}

/// 2-D cross-correlation without bias.
///
/// `input` is `B×Cin×H×W`, `kernel` is `Cout×Cin×Kh×Kw`.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    tally: Option<&AtomicU64>,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv2d";
    let [b, cin, h, w] = input.dims4(OP)?;
    let [cout, kcin, kh, kw] = kernel.dims4(OP)?;
    check_stride(OP, stride)?;
    if cin != kcin {
        return Err(TensorError::DimensionMismatch {
            op: OP,
            axis: "in_channels",
            left: cin,
            right: kcin,
        });
    }
    let (ho, wo) = match (
        conv_output_size(h, kh, stride, padding),
        conv_output_size(w, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => {
            return Err(TensorError::InvalidGeometry {
                op: OP,
                reason: format!(
                    "kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
                ),
            })
        }
    };
    let geo = Geometry { stride, padding };
    let plane_in = h * w;
    let plane_out = ho * wo;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); b * cout * plane_out];
    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (bi, co) = (idx / cout, idx % cout);
            let mut taps = 0u64;
            for ci in 0..cin {
                let xp = &x[(bi * cin + ci) * plane_in..][..plane_in];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        accumulate_tap(plane, xp, wv, (h, w), (ho, wo), (ky, kx), &geo);
                        taps += plane_out as u64;
                    }
                }
            }
            if let Some(t) = tally {
                t.fetch_add(taps, Ordering::Relaxed);
            }
        });
    Tensor::new(&[b, cout, ho, wo], out)
}

/// `plane[oh, ow] += wv * x[oh*s + ky - p, ow*s + kx - p]` over in-bounds taps.
#[inline]
fn accumulate_tap<T: Float>(
    plane: &mut [T],
    x: &[T],
    wv: T,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (ky, kx): (usize, usize),
    geo: &Geometry,
) {
    let (oh_lo, oh_hi) = valid_range(ho, h, ky, geo.stride, geo.padding);
    let (ow_lo, ow_hi) = valid_range(wo, w, kx, geo.stride, geo.padding);
    if ow_lo >= ow_hi {
        return;
    }
    for oh in oh_lo..oh_hi {
        let ih = oh * geo.stride + ky - geo.padding;
        let out_row = &mut plane[oh * wo + ow_lo..oh * wo + ow_hi];
        let iw0 = ow_lo * geo.stride + kx - geo.padding;
        if geo.stride == 1 {
            let in_row = &x[ih * w + iw0..ih * w + iw0 + out_row.len()];
            for (o, &v) in out_row.iter_mut().zip(in_row) {
                *o += wv * v;
            }
        } else {
            let in_row = &x[ih * w..(ih + 1) * w];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o += wv * in_row[iw0 + j * geo.stride];
            }
        }
    }
}

/// Gradient of `sum(conv2d(input, k) * grad_out)` with respect to `k`.
pub fn conv2d_weight_grad<T: Float>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_hw: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv2d_weight_grad";
    let [b, cin, h, w] = input.dims4(OP)?;
    let [gb, cout, ho, wo] = grad_out.dims4(OP)?;
    check_stride(OP, stride)?;
    if gb != b {
        return Err(TensorError::DimensionMismatch {
            op: OP,
            axis: "batch",
            left: b,
            right: gb,
        });
    }
    let (kh, kw) = kernel_hw;
    if conv_output_size(h, kh, stride, padding) != Some(ho)
        || conv_output_size(w, kw, stride, padding) != Some(wo)
    {
        return Err(TensorError::InvalidGeometry {
            op: OP,
            reason: format!("gradient {ho}x{wo} does not match input {h}x{w}"),
        });
    }
    let x = input.data();
    let g = grad_out.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let per_co = cin * kh * kw;
    let mut gw = vec![T::zero(); cout * per_co];
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, dst)| {
        for ci in 0..cin {
            for ky in 0..kh {
                let (oh_lo, oh_hi) = valid_range(ho, h, ky, stride, padding);
                for kx in 0..kw {
                    let (ow_lo, ow_hi) = valid_range(wo, w, kx, stride, padding);
                    let mut acc = T::zero();
                    if ow_lo < ow_hi {
                        for bi in 0..b {
                            let gp = &g[(bi * cout + co) * plane_out..][..plane_out];
                            let xp = &x[(bi * cin + ci) * plane_in..][..plane_in];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + ky - padding;
                                let g_row = &gp[oh * wo + ow_lo..oh * wo + ow_hi];
                                let iw0 = ow_lo * stride + kx - padding;
                                if stride == 1 {
                                    acc += dot(g_row, &xp[ih * w + iw0..][..g_row.len()]);
                                } else {
                                    let x_row = &xp[ih * w..(ih + 1) * w];
                                    for (j, &gv) in g_row.iter().enumerate() {
                                        acc += gv * x_row[iw0 + j * stride];
                                    }
                                }
                            }
                        }
                    }
                    dst[(ci * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    Tensor::new(&[cout, cin, kh, kw], gw)
}

/// Gradient of `sum(conv2d(x, kernel) * grad_out)` with respect to `x`, where
/// `x` has spatial extent `input_hw`. This is also the forward pass of the
/// transposed convolution.
///
/// Each input pixel accumulates over `(ky, kx)` in order; each term is the
/// sequential sum over output channels.
pub fn conv2d_input_grad<T: Float>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_hw: (usize, usize),
    stride: usize,
    padding: usize,
    tally: Option<&AtomicU64>,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv2d_input_grad";
    let [b, cout, ho, wo] = grad_out.dims4(OP)?;
    let [kcout, cin, kh, kw] = kernel.dims4(OP)?;
    check_stride(OP, stride)?;
    if kcout != cout {
        return Err(TensorError::DimensionMismatch {
            op: OP,
            axis: "out_channels",
            left: cout,
            right: kcout,
        });
    }
    let (h, w) = input_hw;
    if conv_output_size(h, kh, stride, padding) != Some(ho)
        || conv_output_size(w, kw, stride, padding) != Some(wo)
    {
        return Err(TensorError::InvalidGeometry {
            op: OP,
            reason: format!("gradient {ho}x{wo} does not match input {h}x{w}"),
        });
    }
    let g = grad_out.data();
    let k = kernel.data();
    let plane_in = h * w;
    let plane_out = ho * wo;
    let mut gx = vec![T::zero(); b * cin * plane_in];
    gx.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (bi, ci) = (idx / cin, idx % cin);
            let mut row = vec![T::zero(); plane_out];
            let mut taps = 0u64;
            for ky in 0..kh {
                let (oh_lo, oh_hi) = valid_range(ho, h, ky, stride, padding);
                for kx in 0..kw {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    for co in 0..cout {
                        let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        let gp = &g[(bi * cout + co) * plane_out..][..plane_out];
                        for (r, &gv) in row.iter_mut().zip(gp) {
                            *r += wv * gv;
                        }
                        taps += plane_out as u64;
                    }
                    let (ow_lo, ow_hi) = valid_range(wo, w, kx, stride, padding);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + ky - padding;
                        let src = &row[oh * wo + ow_lo..oh * wo + ow_hi];
                        let iw0 = ow_lo * stride + kx - padding;
                        let dst_row = &mut dst[ih * w..(ih + 1) * w];
                        if stride == 1 {
                            for (d, &s) in dst_row[iw0..iw0 + src.len()].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (j, &s) in src.iter().enumerate() {
                                dst_row[iw0 + j * stride] += s;
                            }
                        }
                    }
                }
            }
            if let Some(t) = tally {
                t.fetch_add(taps, Ordering::Relaxed);
            }
        });
    Tensor::new(&[b, cin, h, w], gx)
}

/// Transposed convolution; `kernel` is `Cin×Cout×Kh×Kw`.
pub fn conv_transpose2d<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    tally: Option<&AtomicU64>,
) -> Result<Tensor<T>, TensorError> {
    const OP: &str = "conv_transpose2d";
    let [_, cin, h, w] = input.dims4(OP)?;
    let [kcin, _, kh, kw] = kernel.dims4(OP)?;
    check_stride(OP, stride)?;
    if cin != kcin {
        return Err(TensorError::DimensionMismatch {
            op: OP,
            axis: "in_channels",
            left: cin,
            right: kcin,
        });
    }
    let (ho, wo) = match (
        conv_transpose_output_size(h, kh, stride, padding),
        conv_transpose_output_size(w, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(TensorError::InvalidGeometry {
                op: OP,
                reason: format!("input {h}x{w} with kernel {kh}x{kw}, padding {padding} is empty"),
            })
        }
    };
    conv2d_input_grad(input, kernel, (ho, wo), stride, padding, tally)
}
