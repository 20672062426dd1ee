//! The concrete local and global architectures, the training loop, and the
//! four inference heads (per-patch lesion class, binary lesion score, NPDR
//! grade, referable-DR score).

use crate::error::{Error, Result};
use crate::nn::network::{Feat, LayerSpec, Mode, Network};
use crate::nn::optim::{sgd_step, OptimizerState};
use crate::nn::softmax::softmax_cross_entropy;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LESION_CLASSES: usize = 4;
pub const GRADE_CLASSES: usize = 4;
pub const GLOBAL_INPUT_SIZE: usize = 256;

fn conv3(out_channels: usize) -> LayerSpec {
    LayerSpec::Conv2d { out_channels, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool2d { kernel: 2, stride: 2, ceil_mode: true }
}

fn bn() -> LayerSpec {
    LayerSpec::BatchNorm { epsilon: 1e-5, momentum: 0.9 }
}

/// Local network layer stack for `h x h` patches: conv64, conv128, pool,
/// conv128, pool, conv256, FC512, FC1024, then the 1024 -> 4 classifier and
/// softmax. BN precedes every ReLU; dropout follows each hidden FC. The
/// channel divisor scales widths down for miniature gradient-check variants.
pub fn local_layers(dropout: f64, channel_div: usize) -> Vec<LayerSpec> {
    let d = channel_div.max(1);
    vec![
        conv3(64 / d),
        bn(),
        LayerSpec::Relu,
        conv3(128 / d),
        bn(),
        LayerSpec::Relu,
        pool2(),
        conv3(128 / d),
        bn(),
        LayerSpec::Relu,
        pool2(),
        conv3(256 / d),
        bn(),
        LayerSpec::Relu,
        LayerSpec::FullyConnected { out_features: 512 / d },
        bn(),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::FullyConnected { out_features: 1024 / d },
        bn(),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::FullyConnected { out_features: LESION_CLASSES },
        LayerSpec::SoftmaxOutput,
    ]
}

/// Global network layer stack for 256 x 256 weighted images: ten 3x3 convs
/// with widths 32,32,64,64,128,128,256,256,512,512, a pool after each of the
/// first nine, then FC1024, FC1024, FC4 and softmax. The ninth pool acts on a
/// 1x1 map and passes it through in ceil mode.
pub fn global_layers(dropout: f64, channel_div: usize) -> Vec<LayerSpec> {
    let d = channel_div.max(1);
    let widths = [32, 32, 64, 64, 128, 128, 256, 256, 512];
    let mut layers = Vec::new();
    for w in widths {
        layers.push(conv3(w / d));
        layers.push(bn());
        layers.push(LayerSpec::Relu);
        layers.push(pool2());
    }
    layers.push(conv3(512 / d));
    layers.push(bn());
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::FullyConnected { out_features: 1024 / d });
    layers.push(bn());
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dropout { rate: dropout });
    layers.push(LayerSpec::FullyConnected { out_features: 1024 / d });
    layers.push(bn());
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dropout { rate: dropout });
    layers.push(LayerSpec::FullyConnected { out_features: GRADE_CLASSES });
    layers.push(LayerSpec::SoftmaxOutput);
    layers
}

/// Builds the local network for `3 x h x h` patches. `h` must be divisible
/// by 4 (two stride-2 pools).
pub fn build_local<T: Scalar>(h: usize, dropout: f64, seed: u64) -> Result<Network<T>> {
    if h == 0 || h % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch side must be divisible by 4 (two 2x pools), got {h}"
        )));
    }
    Network::build(local_layers(dropout, 1), (3, h, h), seed)
}

/// Builds the global grading network for `3 x 256 x 256` inputs.
pub fn build_global<T: Scalar>(dropout: f64, seed: u64) -> Result<Network<T>> {
    Network::build(global_layers(dropout, 1), (3, GLOBAL_INPUT_SIZE, GLOBAL_INPUT_SIZE), seed)
}

/// One row of the paper-style architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TableRow {
    pub index: usize,
    pub kind: String,
    pub kernel: String,
    pub stride: String,
    pub note: Option<String>,
}

/// Collapses a built network into the printed-table shape: input, each
/// convolution/pooling/FC layer, and the softmax row. BN, ReLU and dropout
/// are interleaved tricks, not table rows. `flag_inserted_classifier` marks
/// the final FC as an addition absent from the printed table;
/// `flag_ceil_pool` marks the nth pooling row as a ceil-mode pass-through.
pub fn table_rows<T: Scalar>(
    net: &Network<T>,
    flag_inserted_classifier: bool,
    flag_ceil_pool: Option<usize>,
) -> Vec<TableRow> {
    let mut rows = vec![TableRow {
        index: 0,
        kind: "input".into(),
        kernel: "...".into(),
        stride: "...".into(),
        note: None,
    }];
    let mut pool_seen = 0usize;
    let last_fc = net
        .layers()
        .iter()
        .rposition(|l| matches!(l, LayerSpec::FullyConnected { .. }));
    for (i, layer) in net.layers().iter().enumerate() {
        let row = match layer {
            LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, .. } => Some(TableRow {
                index: 0,
                kind: "convolution".into(),
                kernel: format!("{kernel_h} x {kernel_w} x {out_channels}"),
                stride: stride.to_string(),
                note: None,
            }),
            LayerSpec::MaxPool2d { kernel, stride, .. } => {
                pool_seen += 1;
                let note = (flag_ceil_pool == Some(pool_seen))
                    .then(|| "ceil-mode pass-through on a 1x1 map".to_string());
                Some(TableRow {
                    index: 0,
                    kind: "max-pooling".into(),
                    kernel: format!("{kernel} x {kernel}"),
                    stride: stride.to_string(),
                    note,
                })
            }
            LayerSpec::FullyConnected { out_features } => {
                let note = (flag_inserted_classifier && Some(i) == last_fc)
                    .then(|| "inserted classifier, not in the printed table".to_string());
                Some(TableRow {
                    index: 0,
                    kind: "fully connected".into(),
                    kernel: format!("1 x 1 x {out_features}"),
                    stride: "...".into(),
                    note,
                })
            }
            LayerSpec::SoftmaxOutput => Some(TableRow {
                index: 0,
                kind: "soft-max".into(),
                kernel: "...".into(),
                stride: "...".into(),
                note: None,
            }),
            _ => None,
        };
        if let Some(r) = row {
            rows.push(r);
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.index = i;
    }
    rows
}

pub fn format_table(rows: &[TableRow]) -> String {
    let mut s = String::from("layer  type             kernel          stride  note\n");
    for r in rows {
        s.push_str(&format!(
            "{:<6} {:<16} {:<15} {:<7} {}\n",
            r.index,
            r.kind,
            r.kernel,
            r.stride,
            r.note.as_deref().unwrap_or("")
        ));
    }
    s
}

/// Sample access used by the trainer; disk-backed datasets stream batches.
pub trait SampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    fn load(&self, index: usize) -> Result<Tensor<T>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully in-memory dataset.
pub struct MemoryDataset<T> {
    pub samples: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> MemoryDataset<T> {
    pub fn new(samples: Vec<Tensor<T>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::shape(
                "MemoryDataset",
                format!("{} samples vs {} labels", samples.len(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        Ok(MemoryDataset { samples, labels, classes })
    }
}

impl<T: Scalar> SampleSource<T> for MemoryDataset<T> {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
    fn load(&self, index: usize) -> Result<Tensor<T>> {
        Ok(self.samples[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassBalance {
    None,
    /// Oversample every class to the most frequent class's count each epoch.
    OversampleToMax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the learning rate by this factor every `lr_decay_every`
    /// epochs; `lr_decay_every = 0` disables the schedule.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation-accuracy improvement;
    /// 0 disables.
    pub early_stop_patience: usize,
    pub class_balance: ClassBalance,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_factor: 1.0,
            lr_decay_every: 0,
            seed: 0,
            early_stop_patience: 0,
            class_balance: ClassBalance::OversampleToMax,
            target_val_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Wall time of the epoch; excluded from determinism comparisons.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,wall_seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.wall_seconds
            ));
        }
        s
    }
}

fn epoch_order<T: Scalar>(
    data: &dyn SampleSource<T>,
    balance: ClassBalance,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = data.len();
    let mut order: Vec<usize> = match balance {
        ClassBalance::None => (0..n).collect(),
        ClassBalance::OversampleToMax => {
            let classes = data.num_classes();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for i in 0..n {
                by_class[data.label(i)].push(i);
            }
            let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
            let mut order = Vec::new();
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                order.extend_from_slice(members);
                for _ in members.len()..target {
                    order.push(members[rng.gen_range(0..members.len())]);
                }
            }
            order
        }
    };
    order.shuffle(rng);
    order
}

fn stack_batch<T: Scalar>(data: &dyn SampleSource<T>, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = data.load(indices[0])?;
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(first.shape());
    let mut buf = Vec::with_capacity(first.len() * indices.len());
    buf.extend_from_slice(first.data());
    let mut labels = vec![data.label(indices[0])];
    for &i in &indices[1..] {
        let t = data.load(i)?;
        if t.shape() != first.shape() {
            return Err(Error::shape(
                "stack_batch",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        buf.extend_from_slice(t.data());
        labels.push(data.label(i));
    }
    Ok((Tensor::new(shape, buf)?, labels))
}

/// Infer-mode evaluation: mean cross-entropy, accuracy, and per-sample
/// probability rows.
pub fn evaluate_dataset<T: Scalar>(
    net: &Network<T>,
    data: &dyn SampleSource<T>,
    batch_size: usize,
) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let batch_size = batch_size.max(1);
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut all_probs = Vec::with_capacity(n);
    let mut cursor = 0;
    while cursor < n {
        let idx: Vec<usize> = (cursor..(cursor + batch_size).min(n)).collect();
        let (batch, labels) = stack_batch(data, &idx)?;
        let probs = net.forward_infer(&batch)?;
        let classes = probs.shape()[1];
        for (row, &label) in probs.data().chunks(classes).zip(&labels) {
            let p_true = row[label].as_f64().max(1e-300);
            loss_sum += -p_true.ln();
            let mut best = 0usize;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
            all_probs.push(row.iter().map(|v| v.as_f64()).collect());
        }
        cursor += batch_size;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64, all_probs))
}

/// Momentum-SGD training with per-epoch validation. Deterministic under
/// `config.seed` (shuffling, oversampling, dropout). Returns the
/// best-validation snapshot and the history; aborts with a diagnostic on a
/// non-finite loss.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_data: &dyn SampleSource<T>,
    val_data: &dyn SampleSource<T>,
    config: &TrainConfig,
) -> Result<(Network<T>, TrainHistory)> {
    if train_data.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if val_data.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    if config.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "batch size must be >= 2 (batch-norm train mode)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(config.learning_rate, config.momentum);
    let mut history = TrainHistory::default();
    let mut best: Option<Network<T>> = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        net.set_mode(Mode::Train);
        let order = epoch_order(train_data, config.class_balance, &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // trailing singleton cannot pass train-mode BN
            }
            let (batch, labels) = stack_batch(train_data, chunk)?;
            let (logits, tape) = net.forward_train(&batch, &mut rng)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            let loss_f = loss.as_f64();
            if !loss_f.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            loss_sum += loss_f * chunk.len() as f64;
            seen += chunk.len();
            let grads = net.backward(&tape, &grad)?;
            sgd_step(net, &grads, &mut opt)?;
        }
        net.set_mode(Mode::Infer);
        let (val_loss, val_accuracy, _) = evaluate_dataset(net, val_data, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NanLoss { epoch, step: usize::MAX });
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_loss,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        });

        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best = Some(net.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(target) = config.target_val_accuracy {
            if val_accuracy >= target {
                break;
            }
        }
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
            break;
        }
        if config.lr_decay_every > 0 && (epoch + 1) % config.lr_decay_every == 0 {
            opt.learning_rate *= config.lr_decay_factor;
        }
    }

    history.best_epoch = best_epoch;
    history.best_val_accuracy = best_acc;
    let best = best.unwrap_or_else(|| net.clone());
    Ok((best, history))
}

/// Argmax class and its probability for one patch; ties break low.
pub fn infer_patch<T: Scalar>(net: &Network<T>, patch: &Tensor<T>) -> Result<(u8, f64)> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(patch.shape());
    let batch = Tensor::new(shape, patch.data().to_vec())?;
    let probs = net.forward_infer(&batch)?;
    let row = probs.data();
    let mut best = 0usize;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    Ok((best as u8, row[best].as_f64()))
}

/// Lesion-vs-normal score: one minus the normal-class probability.
pub fn binary_lesion_score(probs: &[f64]) -> Result<f64> {
    check_prob_vector(probs)?;
    Ok(1.0 - probs[0])
}

/// NPDR grade of a weighted image.
pub fn grade<T: Scalar>(net: &Network<T>, weighted_image: &Tensor<T>) -> Result<(u8, Vec<f64>)> {
    let (label, _) = infer_patch(net, weighted_image)?;
    let mut shape = vec![1usize];
    shape.extend_from_slice(weighted_image.shape());
    let batch = Tensor::new(shape, weighted_image.data().to_vec())?;
    let probs = net.forward_infer(&batch)?;
    Ok((label, probs.data().iter().map(|v| v.as_f64()).collect()))
}

/// Referable-DR score: probability of moderate-or-worse disease.
pub fn referable_score(probs: &[f64]) -> Result<f64> {
    check_prob_vector(probs)?;
    Ok(probs[2] + probs[3])
}

fn check_prob_vector(probs: &[f64]) -> Result<()> {
    if probs.len() != 4 {
        return Err(Error::shape("probability vector", format!("expected 4 entries, got {}", probs.len())));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::LayerState;
    use crate::synthdata::separable_patch_corpus;
    use rand::rngs::StdRng;

    /// Closed-form shape propagation, independent of Network's bookkeeping.
    fn propagate(layers: &[LayerSpec], mut c: usize, mut h: usize, mut w: usize) -> Vec<(usize, usize, usize)> {
        let mut flat: Option<usize> = None;
        let mut trace = Vec::new();
        for l in layers {
            match *l {
                LayerSpec::Conv2d { out_channels, kernel_h, stride, padding, .. } => {
                    h = (h + 2 * padding - kernel_h) / stride + 1;
                    w = (w + 2 * padding - kernel_h) / stride + 1;
                    c = out_channels;
                }
                LayerSpec::MaxPool2d { kernel, stride, ceil_mode } => {
                    let f = |d: usize| {
                        if ceil_mode {
                            let mut o = (d.saturating_sub(kernel) + stride - 1) / stride + 1;
                            if (o - 1) * stride >= d {
                                o -= 1;
                            }
                            o
                        } else {
                            (d - kernel) / stride + 1
                        }
                    };
                    h = f(h);
                    w = f(w);
                }
                LayerSpec::FullyConnected { out_features } => {
                    flat = Some(out_features);
                }
                _ => {}
            }
            trace.push(match flat {
                Some(f) => (f, 1, 1),
                None => (c, h, w),
            });
        }
        trace
    }

    #[test]
    fn local_net_feature_map_entering_fc_is_256x16x16() {
        let layers = local_layers(0.5, 1);
        let trace = propagate(&layers, 3, 64, 64);
        let fc_pos = layers
            .iter()
            .position(|l| matches!(l, LayerSpec::FullyConnected { .. }))
            .unwrap();
        assert_eq!(trace[fc_pos - 1], (256, 16, 16));
        // and the built network agrees
        let net: Network<f32> = build_local(64, 0.5, 0).unwrap();
        match net.feature_trace()[fc_pos - 1] {
            Feat::Spatial { c, h, w } => assert_eq!((c, h, w), (256, 16, 16)),
            other => panic!("expected spatial feature, got {:?}", other),
        }
    }

    #[test]
    fn patch_side_must_divide_by_four() {
        assert!(build_local::<f32>(30, 0.5, 0).is_err());
        assert!(build_local::<f32>(0, 0.5, 0).is_err());
        assert!(build_local::<f32>(16, 0.5, 0).is_ok());
    }

    #[test]
    fn zero_patch_infer_gives_uniform_softmax() {
        let net: Network<f64> = build_local(16, 0.5, 3).unwrap();
        let x = Tensor::<f64>::zeros(vec![2, 3, 16, 16]);
        let y = net.forward_infer(&x).unwrap();
        for row in y.data().chunks(4) {
            for &p in row {
                assert!((p - 0.25).abs() < 1e-9, "{p}");
            }
        }
    }

    #[test]
    fn local_output_rows_are_probabilities() {
        let net: Network<f32> = build_local(16, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::from_fn(vec![5, 3, 16, 16], |_| rng.gen_range(0.0..255.0));
        let y = net.forward_infer(&x).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
        for row in y.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn global_net_spatial_trajectory() {
        let net: Network<f32> = build_global(0.5, 0).unwrap();
        let mut pool_sizes = Vec::new();
        for (layer, feat) in net.layers().iter().zip(net.feature_trace()) {
            if matches!(layer, LayerSpec::MaxPool2d { .. }) {
                match feat {
                    Feat::Spatial { h, .. } => pool_sizes.push(*h),
                    _ => panic!("pool output must be spatial"),
                }
            }
        }
        assert_eq!(pool_sizes, vec![128, 64, 32, 16, 8, 4, 2, 1, 1]);
        assert_eq!(net.output_feat(), Feat::Flat { f: 4 });
    }

    #[test]
    fn global_table_matches_printed_architecture() {
        let net: Network<f32> = build_global(0.5, 0).unwrap();
        let rows = table_rows(&net, false, Some(9));
        let expected: Vec<(&str, &str, &str)> = vec![
            ("input", "...", "..."),
            ("convolution", "3 x 3 x 32", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 32", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 64", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 64", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 128", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 128", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 256", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 256", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 512", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 512", "1"),
            ("fully connected", "1 x 1 x 1024", "..."),
            ("fully connected", "1 x 1 x 1024", "..."),
            ("fully connected", "1 x 1 x 4", "..."),
            ("soft-max", "...", "..."),
        ];
        assert_eq!(rows.len(), expected.len());
        for (row, (kind, kernel, stride)) in rows.iter().zip(&expected) {
            assert_eq!(row.kind, *kind, "row {}", row.index);
            assert_eq!(row.kernel, *kernel, "row {}", row.index);
            assert_eq!(row.stride, *stride, "row {}", row.index);
        }
        // the 9th pool carries the ceil-mode flag
        let pool_rows: Vec<&TableRow> = rows.iter().filter(|r| r.kind == "max-pooling").collect();
        assert!(pool_rows[8].note.is_some());
        assert!(pool_rows[..8].iter().all(|r| r.note.is_none()));
    }

    #[test]
    fn local_table_matches_printed_architecture_with_inserted_classifier() {
        let net: Network<f32> = build_local(64, 0.5, 0).unwrap();
        let rows = table_rows(&net, true, None);
        let expected: Vec<(&str, &str, &str)> = vec![
            ("input", "...", "..."),
            ("convolution", "3 x 3 x 64", "1"),
            ("convolution", "3 x 3 x 128", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 128", "1"),
            ("max-pooling", "2 x 2", "2"),
            ("convolution", "3 x 3 x 256", "1"),
            ("fully connected", "1 x 1 x 512", "..."),
            ("fully connected", "1 x 1 x 1024", "..."),
            ("fully connected", "1 x 1 x 4", "..."),
            ("soft-max", "...", "..."),
        ];
        assert_eq!(rows.len(), expected.len());
        for (row, (kind, kernel, stride)) in rows.iter().zip(&expected) {
            assert_eq!((row.kind.as_str(), row.kernel.as_str(), row.stride.as_str()), (*kind, *kernel, *stride));
        }
        // only the inserted classifier row is flagged
        let flagged: Vec<&TableRow> = rows.iter().filter(|r| r.note.is_some()).collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].kernel, "1 x 1 x 4");
    }

    fn micro_dataset(n_per_class: usize, seed: u64) -> MemoryDataset<f64> {
        let (patches, labels) = separable_patch_corpus::<f64>(n_per_class, 8, seed);
        MemoryDataset::new(patches, labels, 4).unwrap()
    }

    /// Small trainable stand-in for the full local net.
    fn micro_net(seed: u64) -> Network<f64> {
        Network::build(
            vec![
                LayerSpec::Conv2d { out_channels: 8, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm { epsilon: 1e-5, momentum: 0.9 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2, stride: 2, ceil_mode: true },
                LayerSpec::FullyConnected { out_features: 32 },
                LayerSpec::BatchNorm { epsilon: 1e-5, momentum: 0.9 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.25 },
                LayerSpec::FullyConnected { out_features: 4 },
                LayerSpec::SoftmaxOutput,
            ],
            (3, 8, 8),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn training_learns_separable_classes() {
        let train_set = micro_dataset(60, 1);
        let val_set = micro_dataset(20, 2);
        let mut net = micro_net(7);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.02,
            target_val_accuracy: Some(0.95),
            seed: 3,
            ..Default::default()
        };
        let (_best, history) = train(&mut net, &train_set, &val_set, &cfg).unwrap();
        assert!(
            history.best_val_accuracy >= 0.9,
            "val accuracy {} after {} epochs",
            history.best_val_accuracy,
            history.epochs.len()
        );
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let train_set = micro_dataset(8, 3);
        let val_set = micro_dataset(4, 4);
        let mut net = micro_net(9);
        let before = net.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            momentum: 0.0,
            ..Default::default()
        };
        let _ = train(&mut net, &train_set, &val_set, &cfg).unwrap();
        for (a, b) in net.states().iter().zip(before.states()) {
            match (a, b) {
                (LayerState::Params { weights: wa, bias: ba }, LayerState::Params { weights: wb, bias: bb }) => {
                    assert_eq!(wa.data(), wb.data());
                    assert_eq!(ba.as_ref().map(|t| t.data().to_vec()), bb.as_ref().map(|t| t.data().to_vec()));
                }
                (LayerState::BatchNorm(a), LayerState::BatchNorm(b)) => {
                    assert_eq!(a.gamma.data(), b.gamma.data());
                    assert_eq!(a.beta.data(), b.beta.data());
                }
                _ => {}
            }
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_history() {
        let train_set = micro_dataset(12, 5);
        let val_set = micro_dataset(6, 6);
        let cfg = TrainConfig { epochs: 3, batch_size: 8, learning_rate: 0.01, seed: 11, ..Default::default() };
        let run = || {
            let mut net = micro_net(13);
            let (_, h) = train(&mut net, &train_set, &val_set, &cfg).unwrap();
            h
        };
        let h1 = run();
        let h2 = run();
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            assert_eq!(a.val_accuracy.to_bits(), b.val_accuracy.to_bits());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let empty = MemoryDataset::<f64> { samples: vec![], labels: vec![], classes: 4 };
        let val = micro_dataset(2, 7);
        let mut net = micro_net(1);
        assert!(matches!(
            train(&mut net, &empty, &val, &TrainConfig::default()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn loss_decreases_on_tiny_separable_batch() {
        // first steps of SGD with a small learning rate must descend
        let data = micro_dataset(8, 8);
        let mut net = micro_net(21);
        net.set_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..16).collect();
        let (batch, labels) = stack_batch(&data, &idx).unwrap();
        let mut opt = OptimizerState::new(1e-3, 0.0);
        let mut losses = Vec::new();
        // fixed batch, dropout off for a clean descent check
        net.disable_dropout();
        for _ in 0..10 {
            let (logits, tape) = net.forward_train(&batch, &mut rng).unwrap();
            let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
            losses.push(loss);
            let grads = net.backward(&tape, &grad).unwrap();
            sgd_step(&mut net, &grads, &mut opt).unwrap();
        }
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "loss must strictly decrease: {:?}", losses);
        }
    }

    #[test]
    fn binary_score_and_referable_score() {
        assert_eq!(binary_lesion_score(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(binary_lesion_score(&[0.25, 0.25, 0.25, 0.25]).unwrap(), 0.75);
        assert_eq!(referable_score(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(referable_score(&[0.0, 0.0, 0.5, 0.5]).unwrap(), 1.0);
        assert!(binary_lesion_score(&[0.5, 0.2]).is_err());
        assert!(referable_score(&[0.9, 0.9, 0.0, 0.0]).is_err());

        let mut rng = StdRng::seed_from_u64(17);
        let mut vectors: Vec<[f64; 4]> = Vec::new();
        for _ in 0..200 {
            let mut v = [0.0; 4];
            let mut sum = 0.0;
            for x in &mut v {
                *x = rng.gen_range(0.01..1.0);
                sum += *x;
            }
            for x in &mut v {
                *x /= sum;
            }
            vectors.push(v);
        }
        // ordering by binary score equals ordering by P(normal) descending
        let mut by_score: Vec<usize> = (0..vectors.len()).collect();
        by_score.sort_by(|&a, &b| {
            binary_lesion_score(&vectors[a])
                .unwrap()
                .partial_cmp(&binary_lesion_score(&vectors[b]).unwrap())
                .unwrap()
        });
        let mut by_normal: Vec<usize> = (0..vectors.len()).collect();
        by_normal.sort_by(|&a, &b| vectors[b][0].partial_cmp(&vectors[a][0]).unwrap());
        assert_eq!(by_score, by_normal);
        // referable score equals the complement identity
        for v in &vectors {
            let r = referable_score(v).unwrap();
            assert!((r - (1.0 - v[0] - v[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_patch_matches_batch_row() {
        let net: Network<f64> = build_local(16, 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches: Vec<Tensor<f64>> =
            (0..6).map(|_| Tensor::from_fn(vec![3, 16, 16], |_| rng.gen_range(0.0..255.0))).collect();
        let batch = crate::lesionmap::stack_patches(&patches).unwrap();
        let batch_probs = net.forward_infer(&batch).unwrap();
        for (i, p) in patches.iter().enumerate() {
            let (label, prob) = infer_patch(&net, p).unwrap();
            let row = &batch_probs.data()[i * 4..(i + 1) * 4];
            let mut best = 0;
            for k in 1..4 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            assert_eq!(label as usize, best);
            assert_eq!(prob, row[best]);
        }
    }
}
