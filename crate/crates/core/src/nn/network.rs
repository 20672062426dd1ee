//! Networks as an ordered list of layer specifications plus per-layer state.

use super::batchnorm::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, BatchNormCache,
    BatchNormState,
};
use super::conv::{conv2d_backward, conv2d_forward, conv_out_dim};
use super::dropout::{dropout_backward, dropout_train};
use super::init::he_normal;
use super::linear::{linear_backward, linear_forward};
use super::pool::{maxpool_backward, maxpool_forward, pool_out_dim};
use super::softmax::softmax;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// One layer of the fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    },
    FullyConnected {
        out_features: usize,
    },
    BatchNorm {
        epsilon: f64,
        momentum: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "convolution",
            LayerSpec::MaxPool2d { .. } => "max-pooling",
            LayerSpec::FullyConnected { .. } => "fully connected",
            LayerSpec::BatchNorm { .. } => "batch-norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::SoftmaxOutput => "soft-max",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, .. } => {
                if out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
                    return Err(Error::InvalidArgument("conv kernel dims must be >= 1".into()));
                }
                if stride == 0 {
                    return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
                }
            }
            LayerSpec::MaxPool2d { kernel, stride, .. } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::InvalidArgument("pool kernel/stride must be >= 1".into()));
                }
            }
            LayerSpec::FullyConnected { out_features } => {
                if out_features == 0 {
                    return Err(Error::InvalidArgument("FC out_features must be >= 1".into()));
                }
            }
            LayerSpec::BatchNorm { epsilon, momentum } => {
                if epsilon <= 0.0 {
                    return Err(Error::InvalidArgument("bn_epsilon must be > 0".into()));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidArgument("bn_momentum must be in [0, 1)".into()));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidArgument("dropout_rate must be in [0, 1)".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::SoftmaxOutput => {}
        }
        Ok(())
    }
}

/// Feature shape between layers, excluding the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feat {
    Spatial { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

impl Feat {
    pub fn volume(&self) -> usize {
        match *self {
            Feat::Spatial { c, h, w } => c * h * w,
            Feat::Flat { f } => f,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            Feat::Spatial { c, .. } => c,
            Feat::Flat { f } => f,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Feat::Spatial { c, h, w } => vec![c, h, w],
            Feat::Flat { f } => vec![f],
        }
    }
}

/// Trainable state attached to a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerState<T> {
    None,
    Params { weights: Tensor<T>, bias: Option<Tensor<T>> },
    BatchNorm(BatchNormState<T>),
}

/// Per-layer gradients, mirroring [`LayerState`].
#[derive(Debug, Clone)]
pub enum LayerGrads<T> {
    None,
    Params { weights: Tensor<T>, bias: Option<Tensor<T>> },
    BatchNorm { gamma: Tensor<T>, beta: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub per_layer: Vec<LayerGrads<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Forward-pass cache consumed by [`Network::backward`].
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    aux: Vec<LayerAux<T>>,
}

enum LayerAux<T> {
    None,
    Pool(Vec<u32>),
    BatchNorm(BatchNormCache<T>),
    Dropout(Vec<T>),
}

/// Ordered layers with materialized parameters and running statistics.
#[derive(Debug, Clone)]
pub struct Network<T> {
    layers: Vec<LayerSpec>,
    states: Vec<LayerState<T>>,
    input_feat: Feat,
    feats: Vec<Feat>, // output shape of each layer
    mode: Mode,
}

impl<T: Scalar> Network<T> {
    /// Builds a network for `c x h x w` inputs, initializing conv/FC weights
    /// He-normal from the seed, biases zero, BN gamma 1 beta 0. A conv or FC
    /// layer immediately followed by BatchNorm carries no bias (the shift
    /// would be removed by normalization).
    pub fn build(layers: Vec<LayerSpec>, input_chw: (usize, usize, usize), seed: u64) -> Result<Self> {
        Self::build_from(
            layers,
            Feat::Spatial { c: input_chw.0, h: input_chw.1, w: input_chw.2 },
            seed,
        )
    }

    /// Builds a network over flat feature vectors.
    pub fn build_flat(layers: Vec<LayerSpec>, features: usize, seed: u64) -> Result<Self> {
        Self::build_from(layers, Feat::Flat { f: features }, seed)
    }

    fn build_from(layers: Vec<LayerSpec>, input_feat: Feat, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Vec::with_capacity(layers.len());
        let mut feats = Vec::with_capacity(layers.len());
        let mut feat = input_feat;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if matches!(layer, LayerSpec::SoftmaxOutput) && i + 1 != layers.len() {
                return Err(Error::InvalidArgument("SoftmaxOutput must be the last layer".into()));
            }
            let followed_by_bn = matches!(layers.get(i + 1), Some(LayerSpec::BatchNorm { .. }));
            let state = match *layer {
                LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, padding } => {
                    let Feat::Spatial { c, h, w } = feat else {
                        return Err(Error::shape(
                            format!("layer {i} (conv)"),
                            "convolution requires spatial input",
                        ));
                    };
                    let oh = conv_out_dim(h, kernel_h, stride, padding).ok_or_else(|| {
                        Error::shape(format!("layer {i} (conv)"), format!("kernel {kernel_h} too large for input {h}"))
                    })?;
                    let ow = conv_out_dim(w, kernel_w, stride, padding).ok_or_else(|| {
                        Error::shape(format!("layer {i} (conv)"), format!("kernel {kernel_w} too large for input {w}"))
                    })?;
                    let fan_in = c * kernel_h * kernel_w;
                    let weights =
                        he_normal(vec![out_channels, c, kernel_h, kernel_w], fan_in, &mut rng);
                    let bias = if followed_by_bn { None } else { Some(Tensor::zeros(vec![out_channels])) };
                    feat = Feat::Spatial { c: out_channels, h: oh, w: ow };
                    LayerState::Params { weights, bias }
                }
                LayerSpec::MaxPool2d { kernel, stride, ceil_mode } => {
                    let Feat::Spatial { c, h, w } = feat else {
                        return Err(Error::shape(
                            format!("layer {i} (pool)"),
                            "pooling requires spatial input",
                        ));
                    };
                    let oh = pool_out_dim(h, kernel, stride, ceil_mode).ok_or_else(|| {
                        Error::shape(format!("layer {i} (pool)"), format!("cannot pool {h} with k={kernel}"))
                    })?;
                    let ow = pool_out_dim(w, kernel, stride, ceil_mode).ok_or_else(|| {
                        Error::shape(format!("layer {i} (pool)"), format!("cannot pool {w} with k={kernel}"))
                    })?;
                    feat = Feat::Spatial { c, h: oh, w: ow };
                    LayerState::None
                }
                LayerSpec::FullyConnected { out_features } => {
                    let in_features = feat.volume();
                    let weights = he_normal(vec![out_features, in_features], in_features, &mut rng);
                    let bias = if followed_by_bn { None } else { Some(Tensor::zeros(vec![out_features])) };
                    feat = Feat::Flat { f: out_features };
                    LayerState::Params { weights, bias }
                }
                LayerSpec::BatchNorm { .. } => LayerState::BatchNorm(BatchNormState::new(feat.channels())),
                LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::SoftmaxOutput => LayerState::None,
            };
            states.push(state);
            feats.push(feat);
        }
        Ok(Network { layers, states, input_feat, feats, mode: Mode::Infer })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn states(&self) -> &[LayerState<T>] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [LayerState<T>] {
        &mut self.states
    }

    pub fn input_feat(&self) -> Feat {
        self.input_feat
    }

    /// Output feature shape (excluding batch axis).
    pub fn output_feat(&self) -> Feat {
        *self.feats.last().expect("network has layers")
    }

    /// Output shape of every layer, for shape-trace assertions.
    pub fn feature_trace(&self) -> &[Feat] {
        &self.feats
    }

    pub fn param_count(&self) -> usize {
        self.states
            .iter()
            .map(|s| match s {
                LayerState::None => 0,
                LayerState::Params { weights, bias } => {
                    weights.len() + bias.as_ref().map_or(0, Tensor::len)
                }
                LayerState::BatchNorm(bn) => bn.gamma.len() + bn.beta.len(),
            })
            .sum()
    }

    /// Forces every dropout layer to rate 0 (used by gradient checking).
    pub fn disable_dropout(&mut self) {
        for layer in &mut self.layers {
            if let LayerSpec::Dropout { rate } = layer {
                *rate = 0.0;
            }
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let want = self.input_feat.dims();
        let shape = x.shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(Error::shape(
                "network input",
                format!("expected [batch, {:?}], got {:?}", want, shape),
            ));
        }
        Ok(shape[0])
    }

    /// Mode-dispatching forward. Train mode needs an RNG for dropout and
    /// returns logits; infer mode returns probabilities when the network ends
    /// in SoftmaxOutput.
    pub fn forward(&mut self, x: &Tensor<T>, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        match self.mode {
            Mode::Infer => self.forward_infer(x),
            Mode::Train => {
                let rng = rng.ok_or_else(|| {
                    Error::InvalidArgument("train-mode forward requires an RNG".into())
                })?;
                let (logits, _) = self.forward_train(x, rng)?;
                Ok(logits)
            }
        }
    }

    /// Pure inference pass: BN uses running statistics, dropout is identity,
    /// the trailing SoftmaxOutput produces probabilities.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = match (layer, &self.states[i]) {
                (LayerSpec::Conv2d { stride, padding, .. }, LayerState::Params { weights, bias }) => {
                    conv2d_forward(&current, weights, bias.as_ref(), *stride, *padding)?
                }
                (LayerSpec::MaxPool2d { kernel, stride, ceil_mode }, _) => {
                    maxpool_forward(&current, *kernel, *stride, *ceil_mode)?.0
                }
                (LayerSpec::FullyConnected { .. }, LayerState::Params { weights, bias }) => {
                    linear_forward(&current, weights, bias.as_ref())?
                }
                (LayerSpec::BatchNorm { epsilon, .. }, LayerState::BatchNorm(bn)) => {
                    batchnorm_forward_infer(&current, bn, *epsilon)?
                }
                (LayerSpec::Relu, _) => current.map(|v| if v > T::zero() { v } else { T::zero() }),
                (LayerSpec::Dropout { .. }, _) => current,
                (LayerSpec::SoftmaxOutput, _) => softmax(&current)?,
                _ => unreachable!("state/spec mismatch"),
            };
        }
        Ok(current)
    }

    /// Training pass: BN uses batch statistics and updates running estimates,
    /// dropout draws masks from `rng`. Returns logits (SoftmaxOutput defers
    /// to the fused loss) and the tape for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut tape = Tape { inputs: Vec::with_capacity(self.layers.len()), aux: Vec::new() };
        let mut current = x.clone();
        for i in 0..self.layers.len() {
            let (out, aux) = match (&self.layers[i], &mut self.states[i]) {
                (LayerSpec::Conv2d { stride, padding, .. }, LayerState::Params { weights, bias }) => (
                    conv2d_forward(&current, weights, bias.as_ref(), *stride, *padding)?,
                    LayerAux::None,
                ),
                (LayerSpec::MaxPool2d { kernel, stride, ceil_mode }, _) => {
                    let (out, argmax) = maxpool_forward(&current, *kernel, *stride, *ceil_mode)?;
                    (out, LayerAux::Pool(argmax))
                }
                (LayerSpec::FullyConnected { .. }, LayerState::Params { weights, bias }) => {
                    (linear_forward(&current, weights, bias.as_ref())?, LayerAux::None)
                }
                (LayerSpec::BatchNorm { epsilon, momentum }, LayerState::BatchNorm(bn)) => {
                    let (out, cache) = batchnorm_forward_train(&current, bn, *epsilon, *momentum)?;
                    (out, LayerAux::BatchNorm(cache))
                }
                (LayerSpec::Relu, _) => (
                    current.map(|v| if v > T::zero() { v } else { T::zero() }),
                    LayerAux::None,
                ),
                (LayerSpec::Dropout { rate }, _) => {
                    let (out, mask) = dropout_train(&current, *rate, rng)?;
                    (out, LayerAux::Dropout(mask))
                }
                (LayerSpec::SoftmaxOutput, _) => (current.clone(), LayerAux::None),
                _ => unreachable!("state/spec mismatch"),
            };
            tape.inputs.push(std::mem::replace(&mut current, out));
            tape.aux.push(aux);
        }
        Ok((current, tape))
    }

    /// Backpropagates `grad_logits` through the taped forward pass.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(
                "tape does not match network (missing forward cache)".into(),
            ));
        }
        let mut per_layer: Vec<LayerGrads<T>> = Vec::with_capacity(self.layers.len());
        per_layer.resize_with(self.layers.len(), || LayerGrads::None);
        let mut grad = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &tape.inputs[i];
            grad = match (&self.layers[i], &self.states[i], &tape.aux[i]) {
                (LayerSpec::Conv2d { stride, padding, .. }, LayerState::Params { weights, bias }, _) => {
                    let (gx, gw, gb) = conv2d_backward(&grad, input, weights, *stride, *padding)?;
                    per_layer[i] = LayerGrads::Params {
                        weights: gw,
                        bias: bias.as_ref().map(|_| gb),
                    };
                    gx
                }
                (LayerSpec::MaxPool2d { .. }, _, LayerAux::Pool(argmax)) => {
                    maxpool_backward(&grad, argmax, input.shape())?
                }
                (LayerSpec::FullyConnected { .. }, LayerState::Params { weights, bias }, _) => {
                    let (gx, gw, gb) = linear_backward(&grad, input, weights)?;
                    per_layer[i] = LayerGrads::Params {
                        weights: gw,
                        bias: bias.as_ref().map(|_| gb),
                    };
                    gx
                }
                (LayerSpec::BatchNorm { .. }, LayerState::BatchNorm(bn), LayerAux::BatchNorm(cache)) => {
                    let (gx, gg, gb) = batchnorm_backward(&grad, cache, &bn.gamma)?;
                    per_layer[i] = LayerGrads::BatchNorm { gamma: gg, beta: gb };
                    gx
                }
                (LayerSpec::Relu, _, _) => {
                    let mut gx = grad;
                    for (g, &x) in gx.data_mut().iter_mut().zip(input.data()) {
                        if x <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    gx
                }
                (LayerSpec::Dropout { .. }, _, LayerAux::Dropout(mask)) => {
                    dropout_backward(&grad, mask)?
                }
                (LayerSpec::SoftmaxOutput, _, _) => grad,
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i}: tape entry does not match layer kind"
                    )))
                }
            };
        }
        Ok(Gradients { per_layer })
    }
}
