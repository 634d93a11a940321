//! Losses, optimizers, the epoch loop and evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{argmax, Dataset};
use crate::error::{Error, Result};
use crate::network::{apply_update, Gradients, Network, SensitivityProfile};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per forward pass when evaluating.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// Loss value and its gradient with respect to `prediction`.
///
/// `Mse` averages over every element; `SoftmaxCrossEntropy` treats the last
/// axis as class logits, averages `-log p(class)` over the batch and expects
/// one-hot targets.
pub fn loss(kind: LossKind, prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if prediction.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    match kind {
        LossKind::Mse => {
            let n = prediction.len() as f64;
            let mut sum = 0.0;
            let mut grad = Vec::with_capacity(prediction.len());
            for (p, t) in prediction.data().iter().zip(target.data()) {
                let d = p - t;
                sum += d * d;
                grad.push(2.0 * d / n);
            }
            Ok((sum / n, Tensor::new(prediction.shape(), grad)?))
        }
        LossKind::SoftmaxCrossEntropy => {
            let classes = *prediction.shape().last().unwrap();
            let batch = prediction.len() / classes;
            let mut total = 0.0;
            let mut grad = vec![0.0; prediction.len()];
            for (i, (z, y)) in prediction
                .data()
                .chunks(classes)
                .zip(target.data().chunks(classes))
                .enumerate()
            {
                let label = one_hot_label(y)?;
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let log_sum = sum.ln() + max;
                total += log_sum - z[label];
                let g = &mut grad[i * classes..(i + 1) * classes];
                for (k, gv) in g.iter_mut().enumerate() {
                    let p = (z[k] - log_sum).exp();
                    let onehot = if k == label { 1.0 } else { 0.0 };
                    *gv = (p - onehot) / batch as f64;
                }
            }
            Ok((total / batch as f64, Tensor::new(prediction.shape(), grad)?))
        }
    }
}

fn one_hot_label(y: &[f64]) -> Result<usize> {
    let mut label = None;
    for (k, &v) in y.iter().enumerate() {
        if v == 1.0 && label.is_none() {
            label = Some(k);
        } else if v != 0.0 {
            label = None;
            break;
        }
    }
    label.ok_or_else(|| Error::Validation(format!("target row {y:?} is not one-hot")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Inverse-time decay: the rate at step `t` is `lr / (1 + decay * t)`.
    #[serde(default)]
    pub decay: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Validation(format!("decay {} must be non-negative", self.decay)));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer with its per-parameter state. Adam moments are laid out as
/// weights followed by biases for each weighted layer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let moments = net
            .layers
            .iter()
            .map(|l| {
                l.params().map(|(w, b)| Moments {
                    m: vec![0.0; w.len() + b.len()],
                    v: vec![0.0; w.len() + b.len()],
                })
            })
            .collect();
        Ok(OptimizerState {
            config,
            step: 0,
            moments,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Rate used by the next step.
    pub fn current_rate(&self) -> f64 {
        self.config.learning_rate / (1.0 + self.config.decay * self.step as f64)
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        let lr = self.current_rate();
        match self.config.kind {
            OptimizerKind::Sgd => apply_update(net, grads, lr)?,
            OptimizerKind::Adam => {
                if grads.layers.len() != net.layers.len() || self.moments.len() != net.layers.len() {
                    return Err(Error::Dimension(
                        "gradients, optimizer state and network disagree in layer count".into(),
                    ));
                }
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (l, layer) in net.layers.iter_mut().enumerate() {
                    let (Some((w, b)), Some(g), Some(mom)) =
                        (layer.params_mut(), grads.layers[l].as_ref(), self.moments[l].as_mut())
                    else {
                        continue;
                    };
                    if g.weights.len() != w.len() || g.bias.len() != b.len() || mom.m.len() != w.len() + b.len() {
                        return Err(Error::Dimension(format!("layer {l}: gradient shape mismatch")));
                    }
                    let params = w.data_mut().iter_mut().chain(b.iter_mut());
                    let gs = g.weights.data().iter().chain(&g.bias);
                    for (((p, &gv), m), v) in params.zip(gs).zip(&mut mom.m).zip(&mut mom.v) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gv;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// `base_rate` divided by the pooled mean of every value in `profiles`.
pub fn compensated_rate(base_rate: f64, profiles: &[&SensitivityProfile]) -> Result<f64> {
    let (sum, count) = profiles
        .iter()
        .flat_map(|p| p.values())
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        return Err(Error::Validation("no profiled layer to compensate for".into()));
    }
    Ok(base_rate / (sum / count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossKind,
    pub seed: u64,
    /// Scale the learning rate by the inverse mean sensitivity of the hidden layers.
    #[serde(default)]
    pub compensate: bool,
}

/// One completed epoch. `val_accuracy` is NaN for non-classification targets
/// and both validation fields are NaN without a validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

impl TrainRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &TrainRecord) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_loss.to_bits() == other.val_loss.to_bits()
            && self.val_accuracy.to_bits() == other.val_accuracy.to_bits()
    }
}

/// Mini-batch training. Each epoch visits the samples in a permutation drawn
/// from `Rng::derive(seed, epoch)`; batch gradients are averaged by the loss.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    if train_set.sample_shape() != net.input_shape.as_slice() {
        return Err(Error::Dimension(format!(
            "samples {:?} do not fit network input {:?}",
            train_set.sample_shape(),
            net.input_shape
        )));
    }
    if train_set.target_shape() != net.output_shape()?.as_slice() {
        return Err(Error::Dimension(format!(
            "targets {:?} do not fit network output {:?}",
            train_set.target_shape(),
            net.output_shape()?
        )));
    }
    let mut opt_cfg = cfg.optimizer;
    if cfg.compensate {
        opt_cfg.learning_rate = compensated_rate(opt_cfg.learning_rate, &net.hidden_profiles())?;
    }
    let mut opt = OptimizerState::new(opt_cfg, net)?;
    let n = train_set.len();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = Rng::derive(cfg.seed, epoch as u64).permutation(n);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(idx);
            let (pred, state) = net.forward(&x)?;
            let (value, grad) = loss(cfg.loss, &pred, &y)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            loss_sum += value * idx.len() as f64;
            let grads = net.backward(&state, &grad)?;
            opt.step(net, &grads)?;
        }
        let (val_loss, val_accuracy) = match val_set {
            Some(v) => {
                let l = evaluate_loss(net, v, cfg.loss)?;
                let a = if is_one_hot(v) {
                    evaluate(net, v, Metric::Accuracy)?
                } else {
                    f64::NAN
                };
                (l, a)
            }
            None => (f64::NAN, f64::NAN),
        };
        records.push(TrainRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

fn is_one_hot(d: &Dataset) -> bool {
    d.target_shape().len() == 1 && (0..d.len()).all(|i| one_hot_label(d.target_row(i)).is_ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
}

/// Runs the network over the dataset in fixed chunks, handing each chunk's
/// prediction and sample range to `visit`.
fn for_each_chunk(
    net: &Network,
    data: &Dataset,
    mut visit: impl FnMut(&Tensor, std::ops::Range<usize>) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, _) = data.batch(&idx);
        let pred = net.predict(&x)?;
        visit(&pred, start..end)?;
        start = end;
    }
    Ok(())
}

/// Accuracy is the fraction of samples whose output argmax equals the target
/// argmax; mse is the mean squared error over every output element.
pub fn evaluate(net: &Network, data: &Dataset, metric: Metric) -> Result<f64> {
    let mut correct = 0usize;
    let mut sq = 0.0;
    let width = data.targets.len() / data.len().max(1);
    for_each_chunk(net, data, |pred, range| {
        for (k, i) in range.enumerate() {
            let p = &pred.data()[k * width..(k + 1) * width];
            let t = data.target_row(i);
            match metric {
                Metric::Accuracy => correct += (argmax(p) == argmax(t)) as usize,
                Metric::Mse => sq += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            }
        }
        Ok(())
    })?;
    Ok(match metric {
        Metric::Accuracy => correct as f64 / data.len() as f64,
        Metric::Mse => sq / data.targets.len() as f64,
    })
}

/// Mean loss over the whole dataset (chunk losses weighted by chunk size).
pub fn evaluate_loss(net: &Network, data: &Dataset, kind: LossKind) -> Result<f64> {
    let mut total = 0.0;
    for_each_chunk(net, data, |pred, range| {
        let idx: Vec<usize> = range.clone().collect();
        let (_, y) = data.batch(&idx);
        total += loss(kind, pred, &y)?.0 * idx.len() as f64;
        Ok(())
    })?;
    Ok(total / data.len() as f64)
}
