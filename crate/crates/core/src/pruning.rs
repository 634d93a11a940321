//! Importance-ordered structured pruning, baseline importance measures and
//! removal curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::network::{count_weights, Layer, Network};
use crate::rng::Rng;
use crate::training::{evaluate, train, Metric, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOrder {
    /// Widest layer first; equal widths visit the deeper layer first.
    ByNodeCountDesc,
    /// Explicit layer indices.
    Given(Vec<usize>),
}

/// Which dataset a pruning accuracy is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Target accuracy as a fraction of the reference accuracy.
    pub target_fraction: f64,
    pub layer_order: LayerOrder,
    pub retrain_epochs: usize,
    /// Set whose accuracy defines the target in `prune_and_retrain`.
    #[serde(default = "default_reference")]
    pub reference: EvalSet,
}

fn default_reference() -> EvalSet {
    EvalSet::Train
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            target_fraction: 0.9,
            layer_order: LayerOrder::ByNodeCountDesc,
            retrain_epochs: 0,
            reference: EvalSet::Train,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::Validation(format!(
                "target fraction {} is outside (0, 1]",
                self.target_fraction
            )));
        }
        Ok(())
    }
}

/// One performed removal and the accuracy measured just before it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub layer: usize,
    pub node: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub weights_before: usize,
    pub weights_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub layers: Vec<LayerSummary>,
    pub target: f64,
    pub accuracy_before: f64,
    pub accuracy_after_pruning: f64,
    pub accuracy_after_retraining: Option<f64>,
    pub weights_before: usize,
    pub weights_after: usize,
    pub ratio: f64,
    pub trace: Vec<Removal>,
    /// Tag of the dataset the removal decisions were measured on.
    pub gate_set: String,
}

impl PruneReport {
    /// Plain-text table: layer, nodes and weights before/after, per-layer ratio,
    /// followed by the three accuracies and the overall ratio.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>8} {:>8} {:>10} {:>10} {:>8}",
            "layer", "before", "after", "w_before", "w_after", "ratio"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:>8} {:>8} {:>10} {:>10} {:>8.4}",
                l.layer,
                l.nodes_before,
                l.nodes_after,
                l.weights_before,
                l.weights_after,
                l.weights_after as f64 / l.weights_before as f64
            );
        }
        let _ = writeln!(
            s,
            "total weights {} -> {} (ratio {:.4})",
            self.weights_before, self.weights_after, self.ratio
        );
        let _ = writeln!(s, "target accuracy       {:.4}", self.target);
        let _ = writeln!(s, "accuracy before       {:.4}", self.accuracy_before);
        let _ = writeln!(s, "after pruning         {:.4}", self.accuracy_after_pruning);
        match self.accuracy_after_retraining {
            Some(a) => {
                let _ = writeln!(s, "after retraining      {a:.4}");
            }
            None => {
                let _ = writeln!(s, "after retraining      -");
            }
        }
        let _ = writeln!(s, "decisions measured on {}", self.gate_set);
        s
    }
}

fn layer_weights(layer: &Layer) -> usize {
    layer.params().map_or(0, |(w, b)| w.len() + b.len())
}

/// Hidden layers in visiting order.
pub fn visiting_order(net: &Network, order: &LayerOrder) -> Result<Vec<usize>> {
    let hidden = net.hidden_layers();
    match order {
        LayerOrder::ByNodeCountDesc => {
            let mut v = hidden;
            v.sort_by(|&a, &b| net.layers[b].width().cmp(&net.layers[a].width()).then(b.cmp(&a)));
            Ok(v)
        }
        LayerOrder::Given(v) => {
            for &l in v {
                if !hidden.contains(&l) {
                    return Err(Error::Validation(format!("layer {l} is not a prunable hidden layer")));
                }
            }
            Ok(v.clone())
        }
    }
}

/// Importance-ordered pruning against an absolute accuracy target.
///
/// Layers are visited in `order`; inside a layer the nodes are taken from the
/// last index downwards. Accuracy on `gate` is measured before every removal:
/// at or below `target` the layer is abandoned, otherwise the node is removed.
/// Node 0 always stays so no layer empties.
pub fn prune_to_target(
    net: &Network,
    gate: &Dataset,
    target: f64,
    order: &LayerOrder,
) -> Result<(Network, PruneReport)> {
    let visit = visiting_order(net, order)?;
    let mut pruned = net.clone();
    let accuracy_before = evaluate(net, gate, Metric::Accuracy)?;
    let mut current = accuracy_before;
    let mut trace = Vec::new();
    for &l in &visit {
        let n = pruned.layers[l].width();
        for node in (1..n).rev() {
            if current <= target {
                break;
            }
            trace.push(Removal {
                layer: l,
                node,
                accuracy: current,
            });
            pruned.remove_node(l, node)?;
            current = evaluate(&pruned, gate, Metric::Accuracy)?;
        }
    }
    let mut layers: Vec<LayerSummary> = net
        .hidden_layers()
        .into_iter()
        .chain(net.output_layer())
        .map(|l| LayerSummary {
            layer: l,
            nodes_before: net.layers[l].width(),
            nodes_after: pruned.layers[l].width(),
            weights_before: layer_weights(&net.layers[l]),
            weights_after: layer_weights(&pruned.layers[l]),
        })
        .collect();
    layers.sort_by_key(|s| s.layer);
    let (wb, wa) = (count_weights(net), count_weights(&pruned));
    let report = PruneReport {
        layers,
        target,
        accuracy_before,
        accuracy_after_pruning: current,
        accuracy_after_retraining: None,
        weights_before: wb,
        weights_after: wa,
        ratio: wa as f64 / wb as f64,
        trace,
        gate_set: gate.tag.clone(),
    };
    Ok((pruned, report))
}

/// Prunes with the target set to `target_fraction` times the accuracy on
/// `validation_set`, which also gates every removal.
pub fn prune(net: &Network, validation_set: &Dataset, cfg: &PruneConfig) -> Result<(Network, PruneReport)> {
    cfg.validate()?;
    let target = cfg.target_fraction * evaluate(net, validation_set, Metric::Accuracy)?;
    prune_to_target(net, validation_set, target, &cfg.layer_order)
}

/// Prunes (target from the reference set, decisions on `val_set`) and then
/// retrains the pruned network on `train_set` for `cfg.retrain_epochs` epochs.
pub fn prune_and_retrain(
    net: &Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &PruneConfig,
    retrain: &TrainConfig,
) -> Result<(Network, PruneReport)> {
    cfg.validate()?;
    let reference = match cfg.reference {
        EvalSet::Train => train_set,
        EvalSet::Validation => val_set,
    };
    let target = cfg.target_fraction * evaluate(net, reference, Metric::Accuracy)?;
    let (mut pruned, mut report) = prune_to_target(net, val_set, target, &cfg.layer_order)?;
    if cfg.retrain_epochs > 0 {
        let mut tc = *retrain;
        tc.epochs = cfg.retrain_epochs;
        train(&mut pruned, train_set, None, &tc)?;
        report.accuracy_after_retraining = Some(evaluate(&pruned, val_set, Metric::Accuracy)?);
    } else {
        report.accuracy_after_retraining = Some(report.accuracy_after_pruning);
    }
    Ok((pruned, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMeasure {
    /// Position in the layer; lower indices are more important.
    NodeIndex,
    Random,
    L2Norm,
    L1Norm,
    /// Largest absolute cosine with another node's weight vector.
    Correlation,
}

/// Per-node scores of a hidden or output layer.
///
/// `L2Norm`/`L1Norm` score the incoming weight vector (flattened filter for
/// conv layers), `Correlation` the maximum absolute cosine with any other
/// node, `Random` a permutation drawn from `rng`, and `NodeIndex` gives node
/// `i` of `n` the score `n - i`.
pub fn importance_scores(net: &Network, layer: usize, measure: ImportanceMeasure, rng: &mut Rng) -> Result<Vec<f64>> {
    let l = net
        .layers
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} of {}", net.layers.len())))?;
    let Some((w, _)) = l.params() else {
        return Err(Error::UnsupportedLayer {
            layer,
            kind: l.kind_name(),
        });
    };
    let n = w.shape()[0];
    let rows: Vec<&[f64]> = (0..n).map(|i| w.row(i)).collect();
    Ok(match measure {
        ImportanceMeasure::NodeIndex => (0..n).map(|i| (n - i) as f64).collect(),
        ImportanceMeasure::Random => rng.permutation(n).into_iter().map(|v| v as f64).collect(),
        ImportanceMeasure::L2Norm => rows
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        ImportanceMeasure::L1Norm => rows.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).collect(),
        ImportanceMeasure::Correlation => {
            let norms: Vec<f64> = rows
                .iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            if norms[i] == 0.0 || norms[j] == 0.0 {
                                0.0
                            } else {
                                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                                (dot / (norms[i] * norms[j])).abs().min(1.0)
                            }
                        })
                        .fold(0.0, f64::max)
                })
                .collect()
        }
    })
}

/// Nodes of `layer` in the order they would be removed: ascending score, except
/// `Correlation` (most redundant first). Ties remove the higher index first.
pub fn removal_order(net: &Network, layer: usize, measure: ImportanceMeasure, rng: &mut Rng) -> Result<Vec<usize>> {
    let scores = importance_scores(net, layer, measure, rng)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = match measure {
            ImportanceMeasure::Correlation => scores[b].total_cmp(&scores[a]),
            _ => scores[a].total_cmp(&scores[b]),
        };
        c.then(b.cmp(&a))
    });
    Ok(order)
}

/// Removes `nodes` from `layer` of a copy of `net`.
pub fn without_nodes(net: &Network, layer: usize, nodes: &[usize]) -> Result<Network> {
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();
    let mut out = net.clone();
    for node in sorted {
        out.remove_node(layer, node)?;
    }
    Ok(out)
}

/// Accuracy after removing `round(f * n)` nodes (at most `n - 1`) of `layer`
/// in the order given by `measure`, for each fraction `f`. Every point is
/// computed on a fresh copy; `net` is not touched.
pub fn removal_curve(
    net: &Network,
    data: &Dataset,
    layer: usize,
    measure: ImportanceMeasure,
    fractions: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if !net.hidden_layers().contains(&layer) {
        return match net.layers.get(layer) {
            Some(l) if !l.is_weighted() => Err(Error::UnsupportedLayer {
                layer,
                kind: l.kind_name(),
            }),
            _ => Err(Error::Validation(format!(
                "layer {layer} is not a prunable hidden layer"
            ))),
        };
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::Validation(format!("fraction {f} is outside [0, 1)")));
    }
    let order = removal_order(net, layer, measure, rng)?;
    let n = order.len();
    fractions
        .iter()
        .map(|&f| {
            let k = ((f * n as f64).round() as usize).min(n - 1);
            let copy = without_nodes(net, layer, &order[..k])?;
            evaluate(&copy, data, Metric::Accuracy)
        })
        .collect()
}

/// Trapezoidal area under a removal curve over its fractions.
pub fn curve_area(fractions: &[f64], accuracies: &[f64]) -> f64 {
    fractions
        .windows(2)
        .zip(accuracies.windows(2))
        .map(|(f, a)| (f[1] - f[0]) * (a[0] + a[1]) / 2.0)
        .sum()
}
