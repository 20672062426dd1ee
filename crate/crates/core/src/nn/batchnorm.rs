//! Batch normalization over the batch and spatial axes, per channel.
//!
//! 2-d activations `[N, F]` are treated as `[N, F, 1, 1]`, so the same code
//! serves both convolutional and fully-connected placements.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel learnable and running state of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(vec![channels], T::one()),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn channel_layout<T: Scalar>(input: &Tensor<T>, context: &str) -> Result<(usize, usize, usize)> {
    match input.shape() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        &[n, c] => Ok((n, c, 1)),
        other => Err(Error::shape(context, format!("expected 2-d or 4-d input, got {:?}", other))),
    }
}

/// Train-mode forward: normalizes with batch statistics and updates the
/// running estimates in place (`running = momentum*running + (1-momentum)*batch`).
pub fn batchnorm_forward_train<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    epsilon: f64,
    momentum: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, spatial) = channel_layout(input, "batchnorm")?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm train mode requires batch size >= 2, got {} (variance degenerate)",
            n
        )));
    }
    if state.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("state has {} channels, input has {}", state.channels(), c),
        ));
    }
    let m = n * spatial;
    let m_t = T::of(m as f64);
    let eps = T::of(epsilon);
    let mom = T::of(momentum);
    let one_minus = T::one() - mom;

    let data = input.data();
    let mut out = Tensor::zeros(input.shape().to_vec());
    let mut normalized = Tensor::zeros(input.shape().to_vec());
    let mut inv_std = vec![T::zero(); c];

    for ch in 0..c {
        let mut sum = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for v in &data[base..base + spatial] {
                sum += *v;
            }
        }
        let mean = sum / m_t;
        let mut var_sum = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for v in &data[base..base + spatial] {
                let d = *v - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / m_t;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;

        let g = state.gamma.data()[ch];
        let b = state.beta.data()[ch];
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let xh = (data[i] - mean) * istd;
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }

        // unbiased variance for the running estimate
        let var_unbiased = if m > 1 {
            var * m_t / T::of((m - 1) as f64)
        } else {
            var
        };
        let rm = state.running_mean.data_mut();
        rm[ch] = mom * rm[ch] + one_minus * mean;
        let rv = state.running_var.data_mut();
        rv[ch] = mom * rv[ch] + one_minus * var_unbiased;
    }

    Ok((out, BatchNormCache { normalized, inv_std }))
}

/// Infer-mode forward using the running statistics; pure in the state.
pub fn batchnorm_forward_infer<T: Scalar>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let (n, c, spatial) = channel_layout(input, "batchnorm")?;
    if state.channels() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("state has {} channels, input has {}", state.channels(), c),
        ));
    }
    let eps = T::of(epsilon);
    let mut out = Tensor::zeros(input.shape().to_vec());
    let data = input.data();
    for ch in 0..c {
        let mean = state.running_mean.data()[ch];
        let istd = T::one() / (state.running_var.data()[ch] + eps).sqrt();
        let g = state.gamma.data()[ch];
        let b = state.beta.data()[ch];
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                out.data_mut()[i] = g * (data[i] - mean) * istd + b;
            }
        }
    }
    Ok(out)
}

/// Backward through a train-mode forward.
///
/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, spatial) = channel_layout(grad_out, "batchnorm_backward")?;
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            format!("grad_out {:?} vs cache {:?}", grad_out.shape(), cache.normalized.shape()),
        ));
    }
    let m = n * spatial;
    let m_t = T::of(m as f64);
    let go = grad_out.data();
    let xh = cache.normalized.data();

    let mut grad_gamma = Tensor::zeros(vec![c]);
    let mut grad_beta = Tensor::zeros(vec![c]);
    let mut grad_input = Tensor::zeros(grad_out.shape().to_vec());

    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                sum_dy += go[i];
                sum_dy_xh += go[i] * xh[i];
            }
        }
        grad_gamma.data_mut()[ch] = sum_dy_xh;
        grad_beta.data_mut()[ch] = sum_dy;

        let scale = gamma.data()[ch] * cache.inv_std[ch] / m_t;
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                grad_input.data_mut()[i] =
                    scale * (m_t * go[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn already_normalized_input_passes_through() {
        // channel values -1 and +1 across batch: zero mean, unit variance
        let x = Tensor::<f64>::new(vec![2, 3], vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut st = BatchNormState::new(3);
        let (y, _) = batchnorm_forward_train(&x, &mut st, 1e-5, 0.9).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = StdRng::seed_from_u64(21);
        let x = Tensor::<f64>::from_fn(vec![4, 2, 3, 3], |_| rng.gen_range(-2.0..2.0));
        let mut st = BatchNormState::new(2);
        st.gamma = Tensor::zeros(vec![2]);
        st.beta = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let (y, _) = batchnorm_forward_train(&x, &mut st, 1e-5, 0.9).unwrap();
        for s in 0..4 {
            for c in 0..2 {
                for i in 0..9 {
                    let v = y.data()[(s * 2 + c) * 9 + i];
                    assert_eq!(v, st.beta.data()[c]);
                }
            }
        }
    }

    #[test]
    fn train_output_has_unit_moments_per_channel() {
        let mut rng = StdRng::seed_from_u64(22);
        let x = Tensor::<f64>::from_fn(vec![8, 3, 4, 4], |_| rng.gen_range(-3.0..3.0) + 1.5);
        let mut st = BatchNormState::new(3);
        let (y, _) = batchnorm_forward_train(&x, &mut st, 1e-5, 0.9).unwrap();
        let m = 8 * 16;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for s in 0..8 {
                for i in 0..16 {
                    let v = y.data()[(s * 3 + c) * 16 + i];
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m as f64;
            let var = sq / m as f64 - mean * mean;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let mut st = BatchNormState::new(3);
        assert!(batchnorm_forward_train(&x, &mut st, 1e-5, 0.9).is_err());
    }

    #[test]
    fn infer_uses_running_stats_and_is_pure() {
        let mut st = BatchNormState::<f64>::new(1);
        st.running_mean = Tensor::new(vec![1], vec![2.0]).unwrap();
        st.running_var = Tensor::new(vec![1], vec![4.0]).unwrap();
        let x = Tensor::<f64>::new(vec![2, 1], vec![2.0, 4.0]).unwrap();
        let y1 = batchnorm_forward_infer(&x, &st, 0.0).unwrap();
        let y2 = batchnorm_forward_infer(&x, &st, 0.0).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert!((y1.data()[0] - 0.0).abs() < 1e-12);
        assert!((y1.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let x = Tensor::<f64>::from_fn(vec![4, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let r = Tensor::<f64>::from_fn(vec![4, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let gamma = Tensor::<f64>::new(vec![2], vec![1.3, 0.8]).unwrap();
        let beta = Tensor::<f64>::new(vec![2], vec![0.1, -0.2]).unwrap();
        let loss = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| -> f64 {
            let mut st = BatchNormState::new(2);
            st.gamma = gamma.clone();
            st.beta = beta.clone();
            let (y, _) = batchnorm_forward_train(&x.clone(), &mut st, 1e-5, 0.9).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut st = BatchNormState::new(2);
        st.gamma = gamma.clone();
        st.beta = beta.clone();
        let (_, cache) = batchnorm_forward_train(&x, &mut st, 1e-5, 0.9).unwrap();
        let (gx, gg, gb) = batchnorm_backward(&r, &cache, &gamma).unwrap();

        let eps = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            let num = (loss(&p, &gamma, &beta) - loss(&m, &gamma, &beta)) / (2.0 * eps);
            let a = gx.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-5, "gx[{i}] {a} vs {num}");
        }
        for i in 0..2 {
            let mut p = gamma.clone();
            p.data_mut()[i] += eps;
            let mut m = gamma.clone();
            m.data_mut()[i] -= eps;
            let num = (loss(&x, &p, &beta) - loss(&x, &m, &beta)) / (2.0 * eps);
            assert!((gg.data()[i] - num).abs() / num.abs().max(1e-6) < 1e-5);
            let mut pb = beta.clone();
            pb.data_mut()[i] += eps;
            let mut mb = beta.clone();
            mb.data_mut()[i] -= eps;
            let numb = (loss(&x, &gamma, &pb) - loss(&x, &gamma, &mb)) / (2.0 * eps);
            assert!((gb.data()[i] - numb).abs() / numb.abs().max(1e-6) < 1e-5);
        }
    }
}
