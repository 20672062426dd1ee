//! Momentum SGD: `v <- momentum*v - lr*g; w <- w + v`.

use super::network::{LayerGrads, LayerState, Network};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Velocity buffers mirroring the network's parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<LayerGrads<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        OptimizerState { learning_rate, momentum, velocity: Vec::new() }
    }

    fn ensure_velocity(&mut self, net: &Network<T>) {
        if !self.velocity.is_empty() {
            return;
        }
        self.velocity = net
            .states()
            .iter()
            .map(|s| match s {
                LayerState::None => LayerGrads::None,
                LayerState::Params { weights, bias } => LayerGrads::Params {
                    weights: Tensor::zeros(weights.shape().to_vec()),
                    bias: bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
                },
                LayerState::BatchNorm(bn) => LayerGrads::BatchNorm {
                    gamma: Tensor::zeros(bn.gamma.shape().to_vec()),
                    beta: Tensor::zeros(bn.beta.shape().to_vec()),
                },
            })
            .collect();
    }
}

fn update_tensor<T: Scalar>(w: &mut Tensor<T>, g: &Tensor<T>, v: &mut Tensor<T>, lr: T, mom: T) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != v.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {:?}, grad {:?}, velocity {:?}", w.shape(), g.shape(), v.shape()),
        ));
    }
    for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *vi = mom * *vi - lr * *gi;
        *wi += *vi;
    }
    Ok(())
}

/// One momentum-SGD update over every trainable tensor of the network.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &super::network::Gradients<T>,
    opt: &mut OptimizerState<T>,
) -> Result<()> {
    if grads.per_layer.len() != net.states().len() {
        return Err(Error::InvalidArgument(
            "gradients are not aligned with network parameters".into(),
        ));
    }
    opt.ensure_velocity(net);
    let lr = T::of(opt.learning_rate);
    let mom = T::of(opt.momentum);
    for ((state, grad), vel) in net
        .states_mut()
        .iter_mut()
        .zip(&grads.per_layer)
        .zip(&mut opt.velocity)
    {
        match (state, grad, vel) {
            (LayerState::None, LayerGrads::None, LayerGrads::None) => {}
            (
                LayerState::Params { weights, bias },
                LayerGrads::Params { weights: gw, bias: gb },
                LayerGrads::Params { weights: vw, bias: vb },
            ) => {
                update_tensor(weights, gw, vw, lr, mom)?;
                match (bias, gb, vb) {
                    (Some(b), Some(g), Some(v)) => update_tensor(b, g, v, lr, mom)?,
                    (None, None, None) => {}
                    _ => {
                        return Err(Error::InvalidArgument(
                            "bias gradient does not match bias presence".into(),
                        ))
                    }
                }
            }
            (
                LayerState::BatchNorm(bn),
                LayerGrads::BatchNorm { gamma: gg, beta: gb },
                LayerGrads::BatchNorm { gamma: vg, beta: vb },
            ) => {
                update_tensor(&mut bn.gamma, gg, vg, lr, mom)?;
                update_tensor(&mut bn.beta, gb, vb, lr, mom)?;
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "gradient kind does not match layer state".into(),
                ))
            }
        }
    }
    Ok(())
}
