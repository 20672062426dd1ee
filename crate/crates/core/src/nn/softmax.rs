//! Softmax and the fused softmax-cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise softmax of a `[batch, classes]` tensor, shifted by the row max
/// for stability.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, classes) = logits.dims2("softmax")?;
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax needs at least 2 classes, got {classes}"
        )));
    }
    let mut out = Tensor::zeros(vec![batch, classes]);
    for (row_in, row_out) in logits.data().chunks(classes).zip(out.data_mut().chunks_mut(classes))
    {
        let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in row_out.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of the true classes plus the gradient with
/// respect to the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} logit rows but {} labels", batch, labels.len()),
        ));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let probs = softmax(logits)?;
    let batch_t = T::of(batch as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.data()[i * classes + label];
        loss += -(p.ln());
        grad.data_mut()[i * classes + label] -= T::one();
    }
    loss = loss / batch_t;
    for g in grad.data_mut() {
        *g = *g / batch_t;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn uniform_logits_cost_ln_c() {
        let logits = Tensor::<f64>::zeros(vec![3, 4]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_decreases_as_true_logit_grows() {
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let mut logits = Tensor::<f64>::zeros(vec![1, 4]);
            logits.data_mut()[2] = step as f64;
            let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
            assert!(loss < prev, "loss must fall monotonically");
            prev = loss;
        }
        assert!(prev < 1e-7);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(softmax_cross_entropy(&logits, &[0, 3]).is_err());
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(41);
        let logits = Tensor::<f64>::from_fn(vec![5, 4], |_| rng.gen_range(-4.0..4.0));
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let logits = Tensor::<f64>::from_fn(vec![4, 5], |_| rng.gen_range(-2.0..2.0));
        let labels = vec![0, 2, 4, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += eps;
            let mut m = logits.clone();
            m.data_mut()[i] -= eps;
            let (lp, _) = softmax_cross_entropy(&p, &labels).unwrap();
            let (lm, _) = softmax_cross_entropy(&m, &labels).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-12);
            assert!(rel < 1e-6, "logit {i}: {a} vs {num}");
        }
    }
}
