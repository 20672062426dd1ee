//! 2-d convolution (cross-correlation) via im2col and GEMM.
//!
//! Samples of a batch are processed in parallel; each sample's output is a
//! disjoint buffer and weight gradients are reduced in index order, so results
//! are bit-identical to the sequential path at both precisions.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use rayon::prelude::*;

/// Output extent of a convolution along one axis, if the window fits.
pub fn conv_out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = in_dim + 2 * pad;
    if span < k || stride == 0 {
        None
    } else {
        Some((span - k) / stride + 1)
    }
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = input.dims4("conv2d input")?;
    let (c_out, wc_in, kh, kw) = weights.dims4("conv2d weights")?;
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weights expect {} input channels but input has {} (input {:?}, weights {:?})",
                wc_in,
                c_in,
                input.shape(),
                weights.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(
                "conv2d bias",
                format!("expected [{}], got {:?}", c_out, b.shape()),
            ));
        }
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let oh = conv_out_dim(h, kh, stride, padding).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("input {}x{} + 2*pad {} smaller than kernel {}x{}", h, w, padding, kh, kw),
        )
    })?;
    let ow = conv_out_dim(w, kw, stride, padding).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("input {}x{} + 2*pad {} smaller than kernel {}x{}", h, w, padding, kh, kw),
        )
    })?;
    Ok((n, c_in, h, w, c_out, kh, kw, oh, ow))
}

/// Unrolls one sample into a `[c_in*kh*kw, oh*ow]` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    sample: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let l = oh * ow;
    for ci in 0..c_in {
        let plane = &sample[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if y < 0 || y >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                    if stride == 1 {
                        // contiguous copy with zero fringes where the window
                        // leaves the input
                        let x0 = kx as isize - pad as isize;
                        for ox in 0..ow {
                            let x = x0 + ox as isize;
                            dst[ox] = if x < 0 || x >= w as isize {
                                T::zero()
                            } else {
                                src_row[x as usize]
                            };
                        }
                    } else {
                        for ox in 0..ow {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            dst[ox] = if x < 0 || x >= w as isize {
                                T::zero()
                            } else {
                                src_row[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto one input-shaped sample.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    sample: &mut [T],
) {
    let l = oh * ow;
    for ci in 0..c_in {
        let plane = &mut sample[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * l;
                for oy in 0..oh {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[y as usize * w..(y as usize + 1) * w];
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for ox in 0..ow {
                        let x = (ox * stride + kx) as isize - pad as isize;
                        if x >= 0 && x < w as isize {
                            dst_row[x as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass (no kernel flip).
///
/// `input` is NCHW, `weights` is `[c_out, c_in, kh, kw]`, output spatial dims
/// follow `floor((in + 2*pad - k)/stride) + 1`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c_in, h, w, c_out, kh, kw, oh, ow) =
        check_conv_shapes(input, weights, bias, stride, padding)?;
    let ck = c_in * kh * kw;
    let l = oh * ow;
    let mut out = Tensor::zeros(vec![n, c_out, oh, ow]);
    let in_stride = c_in * h * w;
    let w_flat = weights.data();
    let in_data = input.data();

    out.data_mut()
        .par_chunks_mut(c_out * l)
        .enumerate()
        .for_each(|(s, out_s)| {
            let mut cols = vec![T::zero(); ck * l];
            im2col(
                &in_data[s * in_stride..(s + 1) * in_stride],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut cols,
            );
            gemm(c_out, ck, l, w_flat, &cols, out_s, T::zero());
            if let Some(b) = bias {
                for (co, bv) in b.data().iter().enumerate() {
                    for v in &mut out_s[co * l..(co + 1) * l] {
                        *v += *bv;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of the convolution with respect to input, weights and bias.
///
/// `cached_input` must be the tensor the forward pass consumed; shapes are
/// re-validated against `grad_out` to catch a stale or missing cache.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c_in, h, w, c_out, kh, kw, oh, ow) =
        check_conv_shapes(cached_input, weights, None, stride, padding)?;
    if grad_out.shape() != [n, c_out, oh, ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} inconsistent with forward cache (expected {:?})",
                grad_out.shape(),
                [n, c_out, oh, ow]
            ),
        ));
    }
    let ck = c_in * kh * kw;
    let l = oh * ow;
    let in_stride = c_in * h * w;
    let w_flat = weights.data();
    let in_data = cached_input.data();
    let go_data = grad_out.data();

    let mut grad_bias = Tensor::zeros(vec![c_out]);
    for s in 0..n {
        for co in 0..c_out {
            let base = (s * c_out + co) * l;
            let mut acc = T::zero();
            for v in &go_data[base..base + l] {
                acc += *v;
            }
            grad_bias.data_mut()[co] += acc;
        }
    }

    let mut grad_input = Tensor::zeros(cached_input.shape().to_vec());

    // Per-sample weight gradients are computed in parallel and reduced in
    // sample order (bit-identical to a sequential loop).
    let per_sample: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(in_stride)
        .enumerate()
        .map(|(s, gx_s)| {
            let mut cols = vec![T::zero(); ck * l];
            im2col(
                &in_data[s * in_stride..(s + 1) * in_stride],
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut cols,
            );
            let g_s = &go_data[s * c_out * l..(s + 1) * c_out * l];

            // gw_s = g_s [c_out, l] . cols^T [l, ck]
            let mut gw_s = vec![T::zero(); c_out * ck];
            {
                let a = ArrayView2::from_shape((c_out, l), g_s).unwrap();
                let b = ArrayView2::from_shape((ck, l), cols.as_slice()).unwrap();
                let mut c =
                    ndarray::ArrayViewMut2::from_shape((c_out, ck), gw_s.as_mut_slice()).unwrap();
                general_mat_mul(T::one(), &a, &b.t(), T::zero(), &mut c);
            }

            // grad cols = W^T [ck, c_out] . g_s [c_out, l]
            let mut gcols = vec![T::zero(); ck * l];
            {
                let a = ArrayView2::from_shape((c_out, ck), w_flat).unwrap();
                let b = ArrayView2::from_shape((c_out, l), g_s).unwrap();
                let mut c =
                    ndarray::ArrayViewMut2::from_shape((ck, l), gcols.as_mut_slice()).unwrap();
                general_mat_mul(T::one(), &a.t(), &b, T::zero(), &mut c);
            }
            col2im_add(&gcols, c_in, h, w, kh, kw, stride, padding, oh, ow, gx_s);
            gw_s
        })
        .collect();

    let mut grad_weights = Tensor::zeros(weights.shape().to_vec());
    for gw_s in &per_sample {
        for (acc, v) in grad_weights.data_mut().iter_mut().zip(gw_s) {
            *acc += *v;
        }
    }

    Ok((grad_input, grad_weights, grad_bias))
}
