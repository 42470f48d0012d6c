//! Deterministic SGD training, evaluation, datasets and checkpoints.

mod checkpoint;
pub mod container;
mod data;
mod metrics;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use data::{
    encode_cifar10, load_cifar10_binary, parse_cifar10, synth_generate, write_cifar10_binary, Dataset, SynthSpec,
    CIFAR_MEAN, CIFAR_RECORD, CIFAR_STD, SYNTH_MEAN, SYNTH_STD,
};
pub use metrics::{metrics_csv, parse_metrics_csv, EpochMetrics, RunStatus, METRICS_HEADER};

use rand::seq::SliceRandom;

use crate::backbone::{ForwardOutput, Model};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng;
use crate::tensor::{Graph, Tensor};

const SHUFFLE_STREAM: u64 = 3;
const AUGMENT_STREAM: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (1-based) after which the learning rate is multiplied by
    /// `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub shuffle: bool,
    /// Stop once an epoch's training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            milestones: default_milestones(30),
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            shuffle: true,
            stop_at_train_acc: None,
        }
    }
}

/// Decay points at 50% and 75% of the run.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    vec![epochs / 2, epochs * 3 / 4]
}

impl TrainConfig {
    /// Learning rate in force during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m > 0 && epoch > m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::config("learning rate, momentum, weight decay and decay factor must be non-negative"));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// `grads` in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let w = store.param_mut(id).value.data_mut();
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *wi);
                *wi -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub status: RunStatus,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.train_loss)
    }

    pub fn final_train_acc(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.train_acc)
    }
}

pub fn train(model: &mut Model, data: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_observed(model, data, eval, cfg, |_| {})
}

/// Sees every training step right after its backward pass, before the
/// update. Gradients may be non-finite here.
pub trait StepProbe {
    fn after_backward(&mut self, step: usize, graph: &Graph, out: &ForwardOutput);
}

struct NoProbe;

impl StepProbe for NoProbe {
    fn after_backward(&mut self, _: usize, _: &Graph, _: &ForwardOutput) {}
}

/// [`train`], calling `observe` after every epoch. Parameters are rounded
/// to `f32` before the last evaluation, so the reported metrics are exactly
/// those of the saved checkpoint.
pub fn train_observed(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    observe: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    train_probed(model, data, eval, cfg, observe, &mut NoProbe)
}

/// [`train_observed`] with a per-step probe.
pub fn train_probed(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochMetrics),
    probe: &mut dyn StepProbe,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.image_shape() != model.config.input_shape {
        return Err(Error::shape("train", &data.image_shape(), &model.config.input_shape));
    }
    if data.num_classes > model.config.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes, model.config.num_classes
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::derived(cfg.seed, SHUFFLE_STREAM);
    let mut augment_rng = rng::derived(cfg.seed, AUGMENT_STREAM);
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = f64::NAN;
    let mut status = RunStatus::Ok;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let aug = cfg.augment.then_some(&mut augment_rng);
            let (images, labels) = data.batch(chunk, aug);
            let outcome = train_step(model, &mut sgd, &images, &labels, lr, step, probe)?;
            step += 1;
            match outcome {
                Some((loss, hits)) => {
                    if initial_loss.is_nan() {
                        initial_loss = loss;
                    }
                    loss_sum += loss * chunk.len() as f64;
                    correct += hits;
                    seen += chunk.len();
                }
                None => {
                    status = RunStatus::Nan;
                    break;
                }
            }
        }
        let train_acc = correct as f64 / seen.max(1) as f64;
        if status == RunStatus::Nan {
            let row = EpochMetrics {
                epoch,
                train_loss: f64::NAN,
                train_acc,
                eval_acc: None,
                lr,
                status,
            };
            observe(&row);
            metrics.push(row);
            break;
        }
        let last = epoch == cfg.epochs || cfg.stop_at_train_acc.is_some_and(|t| train_acc >= t);
        if last {
            model.store.round_to_f32();
        }
        let eval_acc = match eval {
            Some(e) if !e.is_empty() => Some(evaluate(model, e, cfg.batch_size)?.accuracy),
            _ => None,
        };
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc,
            eval_acc,
            lr,
            status,
        };
        observe(&row);
        metrics.push(row);
        if last {
            break;
        }
    }
    if cfg.epochs == 0 {
        model.store.round_to_f32();
    }
    Ok(TrainReport {
        metrics,
        status,
        initial_loss,
    })
}

/// One SGD step. `None` when the loss or a gradient is not finite.
fn train_step(
    model: &mut Model,
    sgd: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    lr: f64,
    step: usize,
    probe: &mut dyn StepProbe,
) -> Result<Option<(f64, usize)>> {
    let (loss, hits, grads, updates) = {
        let mut s = model.session(true, true);
        let x = s.graph.constant(images.clone());
        let out = match model.forward(&mut s, x) {
            Ok(o) => o,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let hits = count_correct(s.graph.value(out.logits), labels);
        let loss = match s.graph.softmax_cross_entropy(out.logits, labels) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let loss_value = s.graph.value(loss).item();
        match s.graph.backward(loss) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        probe.after_backward(step, &s.graph, &out);
        let grads = s.param_grads();
        (loss_value, hits, grads, s.take_bn_updates())
    };
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Ok(None);
    }
    for u in &updates {
        model.store.apply_bn_update(u);
    }
    sgd.step(&mut model.store, &grads, lr);
    if model.store.params().iter().any(|p| !p.value.all_finite()) {
        return Ok(None);
    }
    Ok(Some((loss, hits)))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Anything that maps an image batch to logits.
pub trait Classifier {
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.predict(images)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy over `data`, in batches, in order.
pub fn evaluate(model: &dyn Classifier, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    let mut loss = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch(chunk, None);
        let logits = model.logits(&images)?;
        correct += count_correct(&logits, &labels);
        let k = logits.shape()[1];
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamRole;

    #[test]
    fn milestone_schedule() {
        let cfg = TrainConfig {
            epochs: 8,
            milestones: default_milestones(8),
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (1..=8).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[..4], [0.1; 4]);
        assert!((lrs[4] - 0.01).abs() < 1e-15 && (lrs[5] - 0.01).abs() < 1e-15);
        assert!((lrs[6] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(&[1.0, -2.0]), ParamRole::Weight);
        let mut sgd = Sgd::new(&store, 0.9, 0.1);
        let g = vec![vec![0.5, 0.25]];
        sgd.step(&mut store, &g, 0.1);
        // v = g + wd·w = [0.6, 0.05]; w = w − 0.1·v
        let w1 = [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.05];
        assert_eq!(store.params()[0].value.data(), &w1);
        sgd.step(&mut store, &g, 0.1);
        let v2 = [0.9 * 0.6 + (0.5 + 0.1 * w1[0]), 0.9 * 0.05 + (0.25 + 0.1 * w1[1])];
        let w2 = [w1[0] - 0.1 * v2[0], w1[1] - 0.1 * v2[1]];
        assert_eq!(store.params()[0].value.data(), &w2);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
