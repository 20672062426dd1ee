//! Central-difference verification of analytic gradients.
//!
//! Runs at 64-bit precision only. Dropout is forced off and batch
//! normalization stays in its (deterministic) batch-statistics mode, so the
//! loss is a smooth function of the parameters almost everywhere.

use super::network::{Gradients, LayerGrads, LayerState, Mode, Network};
use super::softmax::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub layer: usize,
    pub tensor: &'static str,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_parameter: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in &self.per_parameter {
            s.push_str(&format!(
                "layer {:>2} {:<8} entries {:>4}  max rel err {:.3e}\n",
                p.layer, p.tensor, p.entries_checked, p.max_rel_err
            ));
        }
        s.push_str(&format!(
            "overall max rel err {:.3e} (tolerance {:.1e}) -> {}\n",
            self.max_rel_err,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }
}

fn param_slots(net: &Network<f64>) -> Vec<(usize, &'static str)> {
    let mut slots = Vec::new();
    for (i, state) in net.states().iter().enumerate() {
        match state {
            LayerState::None => {}
            LayerState::Params { bias, .. } => {
                slots.push((i, "weights"));
                if bias.is_some() {
                    slots.push((i, "bias"));
                }
            }
            LayerState::BatchNorm(_) => {
                slots.push((i, "gamma"));
                slots.push((i, "beta"));
            }
        }
    }
    slots
}

fn param_mut<'a>(net: &'a mut Network<f64>, layer: usize, name: &str) -> &'a mut Tensor<f64> {
    match (&mut net.states_mut()[layer], name) {
        (LayerState::Params { weights, .. }, "weights") => weights,
        (LayerState::Params { bias: Some(b), .. }, "bias") => b,
        (LayerState::BatchNorm(bn), "gamma") => &mut bn.gamma,
        (LayerState::BatchNorm(bn), "beta") => &mut bn.beta,
        _ => panic!("no parameter tensor {name} at layer {layer}"),
    }
}

fn grad_of<'a>(grads: &'a Gradients<f64>, layer: usize, name: &str) -> &'a Tensor<f64> {
    match (&grads.per_layer[layer], name) {
        (LayerGrads::Params { weights, .. }, "weights") => weights,
        (LayerGrads::Params { bias: Some(b), .. }, "bias") => b,
        (LayerGrads::BatchNorm { gamma, .. }, "gamma") => gamma,
        (LayerGrads::BatchNorm { beta, .. }, "beta") => beta,
        _ => panic!("no gradient tensor {name} at layer {layer}"),
    }
}

/// Compares analytic gradients against `(L(w+eps) - L(w-eps)) / 2 eps` on a
/// sampled subset of entries per parameter tensor. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-12)`.
///
/// `analytic_scale` multiplies the analytic gradient before comparison; it
/// exists so negative-control tests can corrupt a known-good gradient.
pub fn gradient_check_scaled(
    network: &Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
    tolerance: f64,
    samples_per_tensor: usize,
    seed: u64,
    analytic_scale: f64,
) -> Result<GradCheckReport> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let mut net = network.clone();
    net.disable_dropout();
    net.set_mode(Mode::Train);

    // Dropout is off so the rng is never consumed; any fixed stream works.
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, tape) = net.forward_train(input, &mut fwd_rng)?;
    let (_, grad_logits) = softmax_cross_entropy(&logits, labels)?;
    let analytic = net.backward(&tape, &grad_logits)?;

    let loss_at = |net: &mut Network<f64>| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = net.forward_train(input, &mut rng)?;
        let (loss, _) = softmax_cross_entropy(&logits, labels)?;
        Ok(loss)
    };

    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_parameter = Vec::new();
    let mut overall: f64 = 0.0;
    for (layer, name) in param_slots(&net) {
        let len = param_mut(&mut net, layer, name).len();
        let indices: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut sample_rng, len, samples_per_tensor)
                .into_vec();
            idx.sort_unstable();
            idx
        };
        let mut max_rel: f64 = 0.0;
        for &i in &indices {
            let orig = param_mut(&mut net, layer, name).data()[i];
            param_mut(&mut net, layer, name).data_mut()[i] = orig + epsilon;
            let plus = loss_at(&mut net)?;
            param_mut(&mut net, layer, name).data_mut()[i] = orig - epsilon;
            let minus = loss_at(&mut net)?;
            param_mut(&mut net, layer, name).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad_of(&analytic, layer, name).data()[i] * analytic_scale;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        per_parameter.push(ParamCheck {
            layer,
            tensor: name,
            max_rel_err: max_rel,
            entries_checked: indices.len(),
        });
    }

    Ok(GradCheckReport {
        per_parameter,
        max_rel_err: overall,
        tolerance,
        pass: overall < tolerance,
    })
}

/// Gradient check with the analytic gradient taken as-is.
pub fn gradient_check(
    network: &Network<f64>,
    input: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
    tolerance: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    gradient_check_scaled(network, input, labels, epsilon, tolerance, samples_per_tensor, seed, 1.0)
}
