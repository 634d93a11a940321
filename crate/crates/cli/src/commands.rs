//! Experiment runners behind the subcommands.

use std::path::{Path, PathBuf};

use asymnet::analysis::{
    align_report, fit_shallow, importance_correlation, reconstruction_curve, repeatability, staged_fit,
    CorrelationMode, Selection, ShallowModel,
};
use asymnet::datasets::{self, Dataset};
use asymnet::network::{load_model, Dense, Layer, ProfileSpec};
use asymnet::pruning::{prune_and_retrain, removal_curve};
use asymnet::training::{train, LossKind, OptimizerConfig, OptimizerKind, TrainConfig, TrainRecord};
use asymnet::{Activation, Error, Network, Rng, SensitivityProfile, Tensor};
use serde::Serialize;

use crate::config::{AnalysisSection, ArchitectureConfig, DataSource, ExperimentConfig, ExperimentKind};
use crate::output::{num, OutputDir};
use crate::CliError;

/// Offsets of the sub-seeds derived from the master seed.
pub mod seeds {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const CURVES: u64 = 5;
    /// Replica `r` of a repeatability run uses `REPLICA + r`.
    pub const REPLICA: u64 = 6;
}

pub fn sub_seed(master: u64, offset: u64) -> u64 {
    Rng::derive(master, offset).next_u64()
}

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn kind_name(kind: ExperimentKind) -> String {
    label(&kind)
}

/// The serialized name of a unit enum variant.
fn label<T: Serialize>(v: &T) -> String {
    match toml::Value::try_from(v) {
        Ok(toml::Value::String(s)) => s,
        _ => "?".into(),
    }
}

/// Checks every input path and flag combination before any compute.
fn preflight(cfg: &ExperimentConfig, base: &Path, model: Option<&Path>) -> Result<(), CliError> {
    let takes_model = matches!(cfg.kind, ExperimentKind::Prune | ExperimentKind::AnalyzeSorting);
    match model {
        Some(_) if !takes_model => return Err(user("--model applies to prune and analyze-sorting only")),
        Some(_) if cfg.analysis.as_ref().is_some_and(|a| a.control) => {
            return Err(user("a symmetric control cannot be paired with --model"))
        }
        Some(p) if !p.is_file() => return Err(user(format!("model file {} not found", p.display()))),
        None if takes_model && cfg.architecture.is_none() => {
            return Err(user("give --model or an [architecture] section to train one"))
        }
        _ => {}
    }
    let d = &cfg.dataset;
    let paths: Vec<&PathBuf> = d
        .images
        .iter()
        .chain(d.labels.iter())
        .chain(d.files.iter().flatten())
        .collect();
    for p in paths {
        let full = resolve(base, p);
        if !full.is_file() {
            return Err(user(format!("dataset file {} not found", full.display())));
        }
    }
    Ok(())
}

pub fn execute(cfg: &ExperimentConfig, base: &Path, model: Option<&Path>) -> Result<(), CliError> {
    preflight(cfg, base, model)?;
    let mut out = OutputDir::create(&cfg.out_dir)?;
    match cfg.kind {
        ExperimentKind::Train => run_train(cfg, base, &mut out)?,
        ExperimentKind::Prune => run_prune(cfg, base, model, &mut out)?,
        ExperimentKind::AnalyzeGaussian => run_gaussian(cfg, base, &mut out)?,
        ExperimentKind::AnalyzeSorting => run_sorting(cfg, base, model, &mut out)?,
        ExperimentKind::Repeatability => run_repeatability(cfg, base, &mut out)?,
    }
    out.finish(cfg, &kind_name(cfg.kind))?;
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

/// Loads the configured dataset. File sources keep `samples` of a seeded
/// shuffle when `subset` is set; auto-associative data is flattened.
pub fn load_data(cfg: &ExperimentConfig, base: &Path, subset: bool) -> Result<Dataset, CliError> {
    let d = &cfg.dataset;
    let seed = sub_seed(cfg.seed, seeds::DATA);
    let mut data = match d.source {
        DataSource::Gaussian => {
            let cov = match &d.covariance {
                Some(rows) => Tensor::from_rows(rows)?,
                None => datasets::alignment_covariance(),
            };
            datasets::gaussian_correlated(d.samples.unwrap_or(0), &cov, seed)?
        }
        DataSource::MnistIdx => {
            let (Some(images), Some(labels)) = (&d.images, &d.labels) else {
                return Err(user("mnist_idx needs images and labels"));
            };
            datasets::load_mnist_idx(resolve(base, images), resolve(base, labels))?
        }
        DataSource::Cifar10 => {
            let files: Vec<PathBuf> = d.files.iter().flatten().map(|p| resolve(base, p)).collect();
            datasets::load_cifar10_bin(&files)?
        }
    };
    if subset && d.source != DataSource::Gaussian {
        if let Some(n) = d.samples {
            data = data.take_shuffled(n, seed)?;
        }
    }
    if d.autoassociative {
        let flat = data.flattened();
        data = Dataset::autoassociative(flat.inputs, flat.tag)?;
    }
    Ok(data)
}

/// Training part and optional validation part.
pub fn split_data(cfg: &ExperimentConfig, data: Dataset) -> Result<(Dataset, Option<Dataset>), CliError> {
    if cfg.dataset.split.len() == 1 {
        return Ok((data, None));
    }
    let mut parts = datasets::split(&data, &cfg.dataset.split, sub_seed(cfg.seed, seeds::SPLIT))?;
    let val = parts.pop();
    Ok((parts.remove(0), val))
}

fn train_config(cfg: &ExperimentConfig) -> Option<TrainConfig> {
    let (t, o) = (cfg.training.as_ref()?, cfg.optimizer?);
    Some(TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        optimizer: o,
        loss: t.loss,
        seed: sub_seed(cfg.seed, seeds::TRAIN),
        compensate: t.compensate,
    })
}

fn architecture(cfg: &ExperimentConfig) -> Result<&ArchitectureConfig, CliError> {
    cfg.architecture
        .as_ref()
        .ok_or_else(|| user("this experiment needs an [architecture] section"))
}

/// Builds a network from the architecture with the given profile and init seed.
pub fn build_network(
    cfg: &ExperimentConfig,
    profile: &ProfileSpec,
    sample_shape: &[usize],
    init_seed: u64,
) -> Result<Network, CliError> {
    let arch = architecture(cfg)?;
    let mut net = arch.spec(sample_shape)?.build(profile, &mut Rng::new(init_seed))?;
    if arch.init_gain != 1.0 {
        net.scale_weights(arch.init_gain);
    }
    Ok(net)
}

fn fit_network(
    cfg: &ExperimentConfig,
    profile: &ProfileSpec,
    train_set: &Dataset,
    val: Option<&Dataset>,
) -> Result<(Network, Vec<TrainRecord>), CliError> {
    let mut net = build_network(cfg, profile, train_set.sample_shape(), sub_seed(cfg.seed, seeds::INIT))?;
    let tc = train_config(cfg).ok_or_else(|| user("training needs [training] and [optimizer]"))?;
    let records = train(&mut net, train_set, val, &tc)?;
    Ok((net, records))
}

fn write_records(out: &mut OutputDir, records: &[TrainRecord]) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                num(r.train_loss),
                num(r.val_loss),
                num(r.val_accuracy),
            ]
        })
        .collect();
    out.csv("train.csv", &["epoch", "train_loss", "val_loss", "val_accuracy"], &rows)
}

fn shallow_fits(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<ShallowModel>, CliError> {
    let s = cfg
        .shallow
        .as_ref()
        .ok_or_else(|| user("this experiment needs a [shallow] section"))?;
    let seed = sub_seed(cfg.seed, seeds::INIT);
    Ok(match &s.stages {
        Some(stages) => staged_fit(data, &s.config(), stages, seed)?,
        None => vec![fit_shallow(data, &s.config(), &cfg.profile.profile(s.hidden)?, seed)?],
    })
}

/// A shallow model as an encoder/decoder network with zero biases.
pub fn shallow_network(m: &ShallowModel) -> Result<Network, CliError> {
    let encoder = Layer::Dense(Dense {
        weights: m.w1.clone(),
        bias: vec![0.0; m.hidden()],
        profile: m.profile.clone(),
        activation: m.base,
    });
    let decoder = Layer::Dense(Dense {
        weights: m.decoder(),
        bias: vec![0.0; m.outputs()],
        profile: SensitivityProfile::flat(m.outputs()),
        activation: Activation::Linear,
    });
    Ok(Network::new(vec![m.inputs()], vec![encoder, decoder])?)
}

fn run_train(cfg: &ExperimentConfig, base: &Path, out: &mut OutputDir) -> Result<(), CliError> {
    let (train_set, val) = split_data(cfg, load_data(cfg, base, true)?)?;
    if cfg.shallow.is_some() {
        let fits = shallow_fits(cfg, &train_set)?;
        let mut rows = Vec::with_capacity(fits.len());
        for (k, m) in fits.iter().enumerate() {
            rows.push(vec![k.to_string(), num(m.error(&train_set)?)]);
        }
        out.csv("train.csv", &["stage", "error"], &rows)?;
        let last = fits.last().ok_or_else(|| CliError::Internal("no shallow fit".into()))?;
        return out.model("model.asym", &shallow_network(last)?);
    }
    let (net, records) = fit_network(cfg, &cfg.profile, &train_set, val.as_ref())?;
    if let Some(r) = records.last() {
        println!(
            "epoch {}: train loss {:.6}, val loss {:.6}, val accuracy {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy
        );
    }
    write_records(out, &records)?;
    out.model("model.asym", &net)
}

/// The network under study: loaded from `--model` or trained here.
fn subject(
    cfg: &ExperimentConfig,
    model: Option<&Path>,
    train_set: &Dataset,
    val: Option<&Dataset>,
    out: &mut OutputDir,
) -> Result<Network, CliError> {
    match model {
        Some(p) => Ok(load_model(p)?),
        None => {
            let (net, records) = fit_network(cfg, &cfg.profile, train_set, val)?;
            write_records(out, &records)?;
            out.model("model.asym", &net)?;
            Ok(net)
        }
    }
}

fn run_prune(cfg: &ExperimentConfig, base: &Path, model: Option<&Path>, out: &mut OutputDir) -> Result<(), CliError> {
    let prune_cfg = cfg
        .prune
        .as_ref()
        .ok_or_else(|| user("kind = \"prune\" needs a [prune] section"))?;
    let (train_set, val) = split_data(cfg, load_data(cfg, base, true)?)?;
    let net = subject(cfg, model, &train_set, val.as_ref(), out)?;
    // Only consulted when retrain_epochs > 0, which validation ties to [training].
    let retrain = train_config(cfg).unwrap_or(TrainConfig {
        epochs: 0,
        batch_size: 1,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            decay: 0.0,
        },
        loss: LossKind::SoftmaxCrossEntropy,
        seed: 0,
        compensate: false,
    });
    let gate = val.as_ref().unwrap_or(&train_set);
    let (pruned, report) = prune_and_retrain(&net, &train_set, gate, prune_cfg, &retrain)?;
    let trace: Vec<Vec<String>> = report
        .trace
        .iter()
        .enumerate()
        .map(|(k, r)| vec![k.to_string(), r.layer.to_string(), r.node.to_string(), num(r.accuracy)])
        .collect();
    out.csv("prune_trace.csv", &["step", "layer", "node", "accuracy"], &trace)?;
    let layers: Vec<Vec<String>> = report
        .layers
        .iter()
        .map(|l| {
            vec![
                l.layer.to_string(),
                l.nodes_before.to_string(),
                l.nodes_after.to_string(),
                l.weights_before.to_string(),
                l.weights_after.to_string(),
            ]
        })
        .collect();
    out.csv(
        "prune_layers.csv",
        &[
            "layer",
            "nodes_before",
            "nodes_after",
            "weights_before",
            "weights_after",
        ],
        &layers,
    )?;
    let summary = report.summary();
    print!("{summary}");
    out.text("prune_summary.txt", &summary)?;
    out.model("pruned.asym", &pruned)
}

fn run_gaussian(cfg: &ExperimentConfig, base: &Path, out: &mut OutputDir) -> Result<(), CliError> {
    let (data, _) = split_data(cfg, load_data(cfg, base, true)?)?;
    let inputs = data.flattened().inputs;
    let cov = asymnet::tensor::covariance(&inputs)?;
    let fits = shallow_fits(cfg, &data)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for (k, m) in fits.iter().enumerate() {
        let rep = align_report(&m.w1, &cov)?;
        for (node, cos) in rep.cosines.iter().enumerate() {
            for (comp, c) in cos.iter().enumerate() {
                rows.push(vec![
                    k.to_string(),
                    node.to_string(),
                    comp.to_string(),
                    num(rep.eigenvalues[comp]),
                    num(*c),
                ]);
            }
        }
        let matched: Vec<String> = rep
            .matched
            .iter()
            .map(|m| m.map_or_else(|| "-".to_string(), |c| c.to_string()))
            .collect();
        text.push_str(&format!("stage {k}: error {:.6e}\n", m.error(&data)?));
        text.push_str(&rep.matrix_dump());
        text.push_str(&format!("matched components: {}\n\n", matched.join(" ")));
    }
    print!("{text}");
    out.csv(
        "alignment.csv",
        &["stage", "node", "component", "eigenvalue", "cosine"],
        &rows,
    )?;
    out.text("alignment.txt", &text)?;
    let last = fits.last().ok_or_else(|| CliError::Internal("no shallow fit".into()))?;
    out.model("model.asym", &shallow_network(last)?)
}

/// Pearson correlations that are undefined (constant importances) are reported as NaN.
fn correlation(net: &Network, data: &Dataset, mode: CorrelationMode) -> Result<f64, CliError> {
    match importance_correlation(net, data, mode) {
        Err(Error::UndefinedCorrelation(_)) => Ok(f64::NAN),
        r => Ok(r?),
    }
}

fn run_sorting(cfg: &ExperimentConfig, base: &Path, model: Option<&Path>, out: &mut OutputDir) -> Result<(), CliError> {
    let a: &AnalysisSection = cfg
        .analysis
        .as_ref()
        .ok_or_else(|| user("needs an [analysis] section"))?;
    let (train_set, val) = split_data(cfg, load_data(cfg, base, true)?)?;
    let net = subject(cfg, model, &train_set, val.as_ref(), out)?;
    let mut variants = vec![("asymmetric", net)];
    if a.control {
        let (twin, _) = fit_network(cfg, &ProfileSpec::flat(), &train_set, val.as_ref())?;
        out.model("control.asym", &twin)?;
        variants.push(("symmetric", twin));
    }
    let eval = val.as_ref().unwrap_or(&train_set);
    let hidden = variants[0].1.hidden_layers();
    let layers = a.layers.clone().unwrap_or_else(|| hidden.clone());
    if let Some(l) = layers.iter().find(|l| !hidden.contains(l)) {
        return Err(user(format!(
            "layer {l} is not a hidden layer; hidden layers are {hidden:?}"
        )));
    }
    let loss = cfg.training.as_ref().map_or(
        if cfg.dataset.autoassociative {
            LossKind::Mse
        } else {
            LossKind::SoftmaxCrossEntropy
        },
        |t| t.loss,
    );
    let curve_seed = sub_seed(cfg.seed, seeds::CURVES);

    let mut corr_rows = Vec::new();
    let mut curve_rows = Vec::new();
    for (name, net) in &variants {
        for &layer in &layers {
            if !cfg.dataset.autoassociative {
                for &measure in &a.measures {
                    let acc = removal_curve(net, eval, layer, measure, &a.fractions, &mut Rng::new(curve_seed))?;
                    for (f, v) in a.fractions.iter().zip(acc) {
                        curve_rows.push(vec![
                            name.to_string(),
                            layer.to_string(),
                            label(&measure),
                            num(*f),
                            num(v),
                        ]);
                    }
                }
            }
            if a.removal_loss {
                let r = correlation(net, eval, CorrelationMode::RemovalLoss { layer, loss })?;
                corr_rows.push(vec![name.to_string(), layer.to_string(), "removal_loss".into(), num(r)]);
            }
        }
        if a.sparse {
            let layer = *hidden
                .last()
                .ok_or_else(|| user("sparse analysis needs a hidden layer"))?;
            let mode = CorrelationMode::SparseWeights {
                mu: a.mu,
                samples: a.sparse_samples,
            };
            let r = correlation(net, eval, mode)?;
            corr_rows.push(vec![
                name.to_string(),
                layer.to_string(),
                "sparse_weights".into(),
                num(r),
            ]);
        }
    }
    for row in &corr_rows {
        println!("{}", row.join(" "));
    }
    out.csv("correlation.csv", &["variant", "layer", "mode", "pearson"], &corr_rows)?;
    if !curve_rows.is_empty() {
        out.csv(
            "curves.csv",
            &["variant", "layer", "measure", "fraction", "accuracy"],
            &curve_rows,
        )?;
    }
    if a.sparse {
        let mut rows = Vec::new();
        for (name, net) in &variants {
            let layer = *net.hidden_layers().last().expect("checked above");
            let width = net.layers[layer].width();
            let counts = a.node_counts.clone().unwrap_or_else(|| (0..=width).collect());
            let first = reconstruction_curve(net, eval, &counts, Selection::FirstP)?;
            let random = reconstruction_curve(net, eval, &counts, Selection::RandomP { seed: curve_seed })?;
            for ((p, f), r) in counts.iter().zip(first).zip(random) {
                rows.push(vec![name.to_string(), p.to_string(), num(f), num(r)]);
            }
        }
        out.csv(
            "reconstruction.csv",
            &["variant", "nodes", "first_p_mse", "random_p_mse"],
            &rows,
        )?;
    }
    Ok(())
}

fn run_repeatability(cfg: &ExperimentConfig, base: &Path, out: &mut OutputDir) -> Result<(), CliError> {
    let a = cfg
        .analysis
        .as_ref()
        .ok_or_else(|| user("needs an [analysis] section"))?;
    let tc = train_config(cfg).ok_or_else(|| user("repeatability needs [training] and [optimizer]"))?;
    let arch = architecture(cfg)?;
    let data = if a.resample {
        load_data(cfg, base, false)?
    } else {
        split_data(cfg, load_data(cfg, base, true)?)?.0
    };
    let spec = arch.spec(data.sample_shape())?;
    let mut profiles = vec![("asymmetric", cfg.profile.clone())];
    if a.control {
        profiles.push(("symmetric", ProfileSpec::flat()));
    }
    let mut rows = Vec::new();
    for (name, profile) in &profiles {
        let trainer = |run: usize| -> asymnet::Result<Network> {
            let replica_seed = sub_seed(cfg.seed, seeds::REPLICA + run as u64);
            let subset;
            let train_set = match (a.resample, cfg.dataset.samples) {
                (true, Some(n)) => {
                    subset = data.take_shuffled(n.min(data.len()), replica_seed)?;
                    &subset
                }
                _ => &data,
            };
            let mut net = spec.build(profile, &mut Rng::new(replica_seed))?;
            if arch.init_gain != 1.0 {
                net.scale_weights(arch.init_gain);
            }
            train(&mut net, train_set, None, &tc)?;
            Ok(net)
        };
        let mse = repeatability(a.runs, trainer)?;
        let weighted = spec.build(profile, &mut Rng::new(0))?.weighted_layers();
        for (layer, m) in weighted.iter().zip(mse) {
            println!("{name} layer {layer}: pairwise weight mse {m:.6e}");
            rows.push(vec![name.to_string(), layer.to_string(), num(m)]);
        }
    }
    out.csv("repeatability.csv", &["variant", "layer", "mse"], &rows)
}
