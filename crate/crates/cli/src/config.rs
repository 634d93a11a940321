//! Experiment configuration: TOML text (`key = value` lines under
//! `[section]` headers), validated in full before any compute starts.

use std::path::{Path, PathBuf};

use asymnet::network::{Activation, LayerSpec, NetworkSpec, ProfileSpec};
use asymnet::pruning::{ImportanceMeasure, PruneConfig};
use asymnet::training::{LossKind, OptimizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Prune,
    AnalyzeGaussian,
    AnalyzeSorting,
    Repeatability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ArchitectureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shallow: Option<ShallowSection>,
    pub profile: ProfileSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisSection>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Gaussian,
    MnistIdx,
    Cifar10,
}

/// Relative paths are resolved against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Gaussian: number of samples. Files: keep the first N after a seeded shuffle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Gaussian covariance rows; defaults to the 3x3 alignment covariance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<Vec<PathBuf>>,
    /// Fractions for the train and (optional) validation parts.
    #[serde(default = "default_split")]
    pub split: Vec<f64>,
    /// Replace targets by the (flattened) inputs.
    #[serde(default)]
    pub autoassociative: bool,
}

fn default_split() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    DeskCnn,
    LenetDesk,
    CifarCnn,
    /// One dense hidden layer of `hidden` units and a linear decoder.
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Autoencoder preset only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Autoencoder preset only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
    /// Multiplies the Glorot-uniform initial weights.
    #[serde(default = "one")]
    pub init_gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowSection {
    pub hidden: usize,
    #[serde(default = "yes")]
    pub tied: bool,
    #[serde(default = "linear")]
    pub base: Activation,
    pub iterations: usize,
    pub learning_rate: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Cumulative sensitivity vectors; when set, they replace the profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<Vec<f64>>>,
}

fn yes() -> bool {
    true
}

fn linear() -> Activation {
    Activation::Linear
}

fn default_init_scale() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    #[serde(default)]
    pub compensate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Layers for curves and removal-loss correlations; default all hidden.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_measures")]
    pub measures: Vec<ImportanceMeasure>,
    #[serde(default = "yes")]
    pub removal_loss: bool,
    /// Sparse-code correlation and reconstruction curve (autoencoders).
    #[serde(default)]
    pub sparse: bool,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_sparse_samples")]
    pub sparse_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_counts: Option<Vec<usize>>,
    /// Replica count for repeatability runs.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Draw a different data subset for every replica.
    #[serde(default)]
    pub resample: bool,
    /// Also train the symmetric twin (flat profile, same seeds) and report it.
    #[serde(default)]
    pub control: bool,
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 0.9]
}

fn default_measures() -> Vec<ImportanceMeasure> {
    vec![ImportanceMeasure::NodeIndex, ImportanceMeasure::Random]
}

fn default_mu() -> f64 {
    asymnet::analysis::DEFAULT_MU
}

fn default_sparse_samples() -> usize {
    asymnet::analysis::MIN_SPARSE_SAMPLES
}

fn default_runs() -> usize {
    5
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::User(format!("config: {}", msg.into()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// The serialization that identifies the experiment: `out_dir` is reset,
    /// so the same experiment written elsewhere keeps its hash.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.out_dir = default_out_dir();
        c.to_toml()
    }

    /// SHA-256 of [`Self::canonical`], lowercase hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.validate_dataset()?;
        let takes_model = matches!(self.kind, ExperimentKind::Prune | ExperimentKind::AnalyzeSorting);
        match (&self.architecture, &self.shallow) {
            (Some(_), Some(_)) => return Err(invalid("[architecture] and [shallow] are mutually exclusive")),
            (None, None) if !takes_model => return Err(invalid("one of [architecture] or [shallow] is required")),
            _ => {}
        }
        if self.kind == ExperimentKind::AnalyzeGaussian && self.shallow.is_none() {
            return Err(invalid("analyze-gaussian needs a [shallow] section"));
        }
        if let Some(arch) = &self.architecture {
            arch.spec(&[1])?;
            if !(arch.init_gain > 0.0 && arch.init_gain.is_finite()) {
                return Err(invalid(format!("init_gain {} must be positive", arch.init_gain)));
            }
            if self.training.is_none() || self.optimizer.is_none() {
                return Err(invalid("network experiments need [training] and [optimizer]"));
            }
        }
        if let Some(s) = &self.shallow {
            s.config().validate().map_err(|e| invalid(e.to_string()))?;
            if let Some(stages) = &s.stages {
                if stages.is_empty() {
                    return Err(invalid("[shallow] stages is empty"));
                }
                for st in stages {
                    asymnet::SensitivityProfile::explicit(st.clone()).map_err(|e| invalid(e.to_string()))?;
                    if st.len() != s.hidden {
                        return Err(invalid(format!(
                            "stage of {} values for {} hidden nodes",
                            st.len(),
                            s.hidden
                        )));
                    }
                }
            }
            if takes_model || self.kind == ExperimentKind::Repeatability {
                return Err(invalid("shallow models support train and analyze-gaussian only"));
            }
        }
        if let Some(p) = &self.prune {
            if p.retrain_epochs > 0 && (self.training.is_none() || self.optimizer.is_none()) {
                return Err(invalid("retraining needs [training] and [optimizer]"));
            }
        }
        if let Some(o) = &self.optimizer {
            o.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(t) = &self.training {
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(invalid("epochs and batch_size must be positive"));
            }
        }
        match &self.profile.values {
            Some(v) => asymnet::SensitivityProfile::explicit(v.clone()).map(|_| ()),
            None => self.profile.profile(4).map(|_| ()),
        }
        .map_err(|e| invalid(e.to_string()))?;
        if let Some(p) = &self.prune {
            p.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if self.kind == ExperimentKind::Prune && self.prune.is_none() {
            return Err(invalid("kind = \"prune\" needs a [prune] section"));
        }
        if let Some(a) = &self.analysis {
            if a.fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
                return Err(invalid("analysis fractions must lie in [0, 1)"));
            }
            if self.kind == ExperimentKind::Repeatability && a.runs < 2 {
                return Err(invalid("repeatability needs runs >= 2"));
            }
            if !(a.mu >= 0.0 && a.mu.is_finite()) {
                return Err(invalid(format!("mu {} must be non-negative", a.mu)));
            }
            if a.sparse && !self.dataset.autoassociative {
                return Err(invalid("sparse analysis needs an autoassociative dataset"));
            }
            if a.control && self.architecture.is_none() {
                return Err(invalid("a symmetric control needs [architecture]"));
            }
            if a.resample && self.dataset.samples.is_none() {
                return Err(invalid("resample needs dataset samples"));
            }
        }
        if matches!(
            self.kind,
            ExperimentKind::AnalyzeSorting | ExperimentKind::Repeatability
        ) && self.analysis.is_none()
        {
            return Err(invalid("analysis kinds need an [analysis] section"));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.split.is_empty() || d.split.len() > 2 || d.split.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(invalid("dataset split must hold one or two fractions in (0, 1]"));
        }
        if (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("dataset split fractions must sum to 1"));
        }
        match d.source {
            DataSource::Gaussian => {
                if d.samples.unwrap_or(0) < 2 {
                    return Err(invalid("gaussian data needs samples >= 2"));
                }
            }
            DataSource::MnistIdx => {
                if d.images.is_none() || d.labels.is_none() {
                    return Err(invalid("mnist_idx needs images and labels paths"));
                }
            }
            DataSource::Cifar10 => {
                if d.files.as_ref().is_none_or(Vec::is_empty) {
                    return Err(invalid("cifar10 needs a non-empty files list"));
                }
            }
        }
        Ok(())
    }
}

impl ArchitectureConfig {
    /// Network layout; `sample_shape` sizes the autoencoder preset.
    pub fn spec(&self, sample_shape: &[usize]) -> Result<NetworkSpec, CliError> {
        match (self.preset, &self.layers) {
            (Some(_), Some(_)) => Err(invalid("give either preset or layers, not both")),
            (None, None) => Err(invalid("[architecture] needs preset or layers")),
            (Some(preset), None) => {
                if preset != Preset::Autoencoder && (self.hidden.is_some() || self.activation.is_some()) {
                    return Err(invalid("hidden and activation apply to the autoencoder preset only"));
                }
                Ok(match preset {
                    Preset::DeskCnn => NetworkSpec::desk_cnn(),
                    Preset::LenetDesk => NetworkSpec::lenet_desk(),
                    Preset::CifarCnn => NetworkSpec::cifar_cnn(),
                    Preset::Autoencoder => {
                        let hidden = self.hidden.ok_or_else(|| invalid("autoencoder preset needs hidden"))?;
                        let n: usize = sample_shape.iter().product();
                        NetworkSpec::autoencoder(n, hidden, self.activation.unwrap_or(Activation::Relu))
                    }
                })
            }
            (None, Some(layers)) => Ok(NetworkSpec {
                input_shape: self
                    .input_shape
                    .clone()
                    .ok_or_else(|| invalid("explicit layers need input_shape"))?,
                layers: layers.clone(),
            }),
        }
    }
}

impl ShallowSection {
    pub fn config(&self) -> asymnet::analysis::ShallowConfig {
        asymnet::analysis::ShallowConfig {
            hidden: self.hidden,
            tied: self.tied,
            base: self.base,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            init_scale: self.init_scale,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
