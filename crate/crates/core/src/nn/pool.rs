//! Max pooling with optional ceil-mode border clipping.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output extent of pooling along one axis.
///
/// Ceil mode clips the last window to the valid region, so an input smaller
/// than the kernel still yields one output; floor mode requires the window to
/// fit at least once.
pub fn pool_out_dim(in_dim: usize, k: usize, stride: usize, ceil_mode: bool) -> Option<usize> {
    if in_dim == 0 || k == 0 || stride == 0 {
        return None;
    }
    if ceil_mode {
        let mut out = (in_dim.saturating_sub(k) + stride - 1) / stride + 1;
        // a clipped window must still start inside the input
        if (out - 1) * stride >= in_dim {
            out -= 1;
        }
        Some(out)
    } else if in_dim < k {
        None
    } else {
        Some((in_dim - k) / stride + 1)
    }
}

/// Forward max pool. The returned cache holds, per output element, the flat
/// input index of its argmax, for gradient routing.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    ceil_mode: bool,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = input.dims4("maxpool input")?;
    let oh = pool_out_dim(h, k, stride, ceil_mode).ok_or_else(|| {
        Error::shape("maxpool", format!("cannot pool {}x{} with k={} stride={}", h, w, k, stride))
    })?;
    let ow = pool_out_dim(w, k, stride, ceil_mode).ok_or_else(|| {
        Error::shape("maxpool", format!("cannot pool {}x{} with k={} stride={}", h, w, k, stride))
    })?;
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let in_data = input.data();
    for s in 0..n {
        for ch in 0..c {
            let plane_base = (s * c + ch) * h * w;
            let out_base = (s * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let y1 = (y0 + k).min(h);
                    let x1 = (x0 + k).min(w);
                    let mut best_idx = plane_base + y0 * w + x0;
                    let mut best = in_data[best_idx];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = plane_base + y * w + x;
                            if in_data[idx] > best {
                                best = in_data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.data_mut()[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes `grad_out` to the argmax positions recorded by the forward pass.
pub fn maxpool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool_backward",
            format!("grad_out has {} entries, cache has {}", grad_out.len(), argmax.len()),
        ));
    }
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    let gx = grad_input.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        gx[idx as usize] += *g;
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_by_two_takes_max() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool_forward(&x, 2, 2, false).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn ceil_mode_clips_window_on_tiny_input() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![7.5]).unwrap();
        let (y, _) = maxpool_forward(&x, 2, 2, true).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[7.5]);
        // floor mode cannot fit the window at all
        assert!(maxpool_forward(&x, 2, 2, false).is_err());
    }

    #[test]
    fn matches_exhaustive_window_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = Tensor::<f64>::from_fn(vec![2, 3, 6, 6], |_| rng.gen_range(-5.0..5.0));
        let (y, _) = maxpool_forward(&x, 2, 2, false).unwrap();
        for s in 0..2 {
            for c in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                best = best.max(x.at4(s, c, oy * 2 + dy, ox * 2 + dx));
                            }
                        }
                        assert_eq!(y.at4(s, c, oy, ox), best);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_argmax_only() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, cache) = maxpool_forward(&x, 2, 2, false).unwrap();
        let g = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![2.5]).unwrap();
        let gx = maxpool_backward(&g, &cache, &[1, 1, 2, 2]).unwrap();
        assert_eq!(gx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn tie_routes_to_first_in_scan_order() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![4.0, 4.0, 4.0, 4.0]).unwrap();
        let (_, cache) = maxpool_forward(&x, 2, 2, false).unwrap();
        let g = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let gx = maxpool_backward(&g, &cache, &[1, 1, 2, 2]).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_dim_formula_sweep() {
        for in_dim in 1..=16usize {
            for k in 1..=5usize {
                for stride in 1..=3usize {
                    for &ceil in &[false, true] {
                        let d = pool_out_dim(in_dim, k, stride, ceil);
                        if !ceil && in_dim < k {
                            assert!(d.is_none());
                            continue;
                        }
                        let x = Tensor::<f32>::full(vec![1, 1, in_dim, in_dim], 1.0);
                        let (y, _) = maxpool_forward(&x, k, stride, ceil).unwrap();
                        let d = d.unwrap();
                        assert_eq!(y.shape(), &[1, 1, d, d], "in={in_dim} k={k} s={stride} ceil={ceil}");
                        assert!(y.data().iter().all(|&v| v == 1.0));
                    }
                }
            }
        }
    }
}
