//! Fully-connected layer. Inputs of rank > 2 are flattened to
//! `[batch, features]` in row-major order.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;

fn as_matrix<T: Scalar>(input: &Tensor<T>, context: &str) -> Result<(usize, usize)> {
    let shape = input.shape();
    if shape.is_empty() {
        return Err(Error::shape(context, "scalar input"));
    }
    let batch = shape[0];
    let features: usize = shape[1..].iter().product();
    Ok((batch, features))
}

/// `y = x · W^T + b` with `weights` of shape `[out, in]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (batch, features) = as_matrix(input, "linear input")?;
    let (out_f, in_f) = weights.dims2("linear weights")?;
    if in_f != features {
        return Err(Error::shape(
            "linear",
            format!(
                "weights expect {} input features, input {:?} flattens to {}",
                in_f,
                input.shape(),
                features
            ),
        ));
    }
    let mut out = Tensor::zeros(vec![batch, out_f]);
    {
        let a = ArrayView2::from_shape((batch, features), input.data()).unwrap();
        let w = ArrayView2::from_shape((out_f, in_f), weights.data()).unwrap();
        let mut c =
            ndarray::ArrayViewMut2::from_shape((batch, out_f), out.data_mut()).unwrap();
        general_mat_mul(T::one(), &a, &w.t(), T::zero(), &mut c);
    }
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(Error::shape(
                "linear bias",
                format!("expected [{}], got {:?}", out_f, b.shape()),
            ));
        }
        for row in out.data_mut().chunks_mut(out_f) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += *bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`; `grad_input` has the
/// cached input's original shape.
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, features) = as_matrix(cached_input, "linear_backward input")?;
    let (out_f, in_f) = weights.dims2("linear weights")?;
    let (gb_batch, gb_out) = grad_out.dims2("linear grad_out")?;
    if gb_batch != batch || gb_out != out_f || in_f != features {
        return Err(Error::shape(
            "linear_backward",
            format!(
                "grad_out {:?}, input {:?}, weights {:?} inconsistent",
                grad_out.shape(),
                cached_input.shape(),
                weights.shape()
            ),
        ));
    }

    // gW = grad_out^T . x
    let mut grad_weights = Tensor::zeros(vec![out_f, in_f]);
    {
        let g = ArrayView2::from_shape((batch, out_f), grad_out.data()).unwrap();
        let x = ArrayView2::from_shape((batch, features), cached_input.data()).unwrap();
        let mut c =
            ndarray::ArrayViewMut2::from_shape((out_f, in_f), grad_weights.data_mut()).unwrap();
        general_mat_mul(T::one(), &g.t(), &x, T::zero(), &mut c);
    }

    let mut grad_bias = Tensor::zeros(vec![out_f]);
    for row in grad_out.data().chunks(out_f) {
        for (acc, v) in grad_bias.data_mut().iter_mut().zip(row) {
            *acc += *v;
        }
    }

    // gX = grad_out . W, reshaped to the cached input's shape
    let mut grad_input = Tensor::zeros(vec![batch, features]);
    gemm(batch, out_f, in_f, grad_out.data(), weights.data(), grad_input.data_mut(), T::zero());
    let grad_input = grad_input.reshape(cached_input.shape().to_vec())?;
    Ok((grad_input, grad_weights, grad_bias))
}
