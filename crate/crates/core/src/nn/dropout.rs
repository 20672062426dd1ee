//! Inverted dropout: kept activations are rescaled at train time so that
//! inference is exactly the identity.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Train-mode dropout. Returns the output and the keep mask (already scaled
/// by `1/(1-rate)`) used by the backward pass.
pub fn dropout_train<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok((input.clone(), vec![T::one(); input.len()]));
    }
    let keep_scale = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mut out = input.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= *m;
    }
    Ok((out, mask))
}

/// Infer-mode dropout is the identity for any rate.
pub fn dropout_infer<T: Scalar>(input: &Tensor<T>, rate: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(input.clone())
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    if grad_out.len() != mask.len() {
        return Err(Error::shape(
            "dropout_backward",
            format!("grad has {} entries, mask {}", grad_out.len(), mask.len()),
        ));
    }
    let mut gx = grad_out.clone();
    for (g, m) in gx.data_mut().iter_mut().zip(mask) {
        *g *= *m;
    }
    Ok(gx)
}
