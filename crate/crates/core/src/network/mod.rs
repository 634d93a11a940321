//! Layers with node-wise variant activations and the networks built from them.

mod activation;
mod format;
mod profile;
mod propagate;
mod surgery;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{pooled_extent, ConvGeometry, Padding, Tensor};

pub use activation::{scaled_activation, scaled_derivative, Activation};
pub use format::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use profile::{make_profile, Schedule, SensitivityProfile, DEFAULT_FLOOR};
pub use propagate::{apply_update, BackpropState, Gradients, ParamGrad};
pub use surgery::{count_weights, prune_ratio};

/// Fully connected layer: `u = W x + b`, `x_i = s_i f0(u_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `n_out x n_in`
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub profile: SensitivityProfile,
    pub activation: Activation,
}

/// Convolutional layer over `C x H x W` inputs (cross-correlation, stride 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `C_out x C_in x kh x kw`
    pub filters: Tensor,
    pub bias: Vec<f64>,
    pub profile: SensitivityProfile,
    pub activation: Activation,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    /// 2x2 window, stride 2.
    MaxPool,
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    /// Output nodes (dense units or conv channels); zero for pool/flatten.
    pub fn width(&self) -> usize {
        match self {
            Layer::Dense(d) => d.bias.len(),
            Layer::Conv2d(c) => c.bias.len(),
            _ => 0,
        }
    }

    pub fn profile(&self) -> Option<&SensitivityProfile> {
        match self {
            Layer::Dense(d) => Some(&d.profile),
            Layer::Conv2d(c) => Some(&c.profile),
            _ => None,
        }
    }

    pub fn profile_mut(&mut self) -> Option<&mut SensitivityProfile> {
        match self {
            Layer::Dense(d) => Some(&mut d.profile),
            Layer::Conv2d(c) => Some(&mut c.profile),
            _ => None,
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            Layer::Dense(d) => Some(d.activation),
            Layer::Conv2d(c) => Some(c.activation),
            _ => None,
        }
    }

    /// Weight tensor and bias of a weighted layer.
    pub fn params(&self) -> Option<(&Tensor, &[f64])> {
        match self {
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            Layer::Conv2d(c) => Some((&c.filters, &c.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Vec<f64>)> {
        match self {
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            Layer::Conv2d(c) => Some((&mut c.filters, &mut c.bias)),
            _ => None,
        }
    }

    /// Incoming weight vector of node `i` (a row, or a flattened filter).
    pub fn node_weights(&self, i: usize) -> Option<&[f64]> {
        self.params().map(|(w, _)| w.row(i))
    }

    /// Output sample shape given the input sample shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let n_in = d.weights.shape()[1];
                if input != [n_in] {
                    return Err(Error::Dimension(format!(
                        "dense layer expects input [{n_in}], got {input:?}"
                    )));
                }
                Ok(vec![d.bias.len()])
            }
            Layer::Conv2d(c) => {
                let fs = c.filters.shape();
                if input.len() != 3 || input[0] != fs[1] {
                    return Err(Error::Dimension(format!(
                        "conv2d layer with filters {fs:?} expects [{}, H, W], got {input:?}",
                        fs[1]
                    )));
                }
                let g = ConvGeometry::new(input[0], input[1], input[2], fs[2], fs[3], c.padding)?;
                Ok(vec![fs[0], g.out_h, g.out_w])
            }
            Layer::MaxPool => {
                if input.len() != 3 {
                    return Err(Error::Dimension(format!("maxpool expects [C, H, W], got {input:?}")));
                }
                Ok(vec![input[0], pooled_extent(input[1]), pooled_extent(input[2])])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Validates that the layer shapes chain and every profile matches its layer width.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Network { input_shape, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Dimension(format!("invalid input shape {:?}", self.input_shape)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some((w, b)), Some(p)) = (layer.params(), layer.profile()) {
                if w.shape()[0] != b.len() || p.len() != b.len() {
                    return Err(Error::Dimension(format!(
                        "layer {i}: weights {:?}, bias {}, profile {} disagree",
                        w.shape(),
                        b.len(),
                        p.len()
                    )));
                }
            }
        }
        self.layer_shapes().map(|_| ())
    }

    /// Sample shapes flowing through the network: entry 0 is the input,
    /// entry `l + 1` the output of layer `l`.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind_name())))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().unwrap())
    }

    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_weighted())
            .collect()
    }

    /// Weighted layers whose nodes may be removed: all but the output layer.
    pub fn hidden_layers(&self) -> Vec<usize> {
        let mut w = self.weighted_layers();
        w.pop();
        w
    }

    pub fn output_layer(&self) -> Option<usize> {
        self.weighted_layers().pop()
    }

    /// Profiles of the hidden (prunable) layers.
    pub fn hidden_profiles(&self) -> Vec<&SensitivityProfile> {
        self.hidden_layers()
            .into_iter()
            .filter_map(|i| self.layers[i].profile())
            .collect()
    }

    /// Multiplies every weight (not bias) by `factor`.
    pub fn scale_weights(&mut self, factor: f64) {
        for layer in &mut self.layers {
            if let Some((w, _)) = layer.params_mut() {
                w.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Replaces every profile with all-ones, producing the symmetric twin.
    pub fn symmetric_twin(&self) -> Network {
        let mut twin = self.clone();
        for layer in &mut twin.layers {
            if let Some(p) = layer.profile_mut() {
                *p = SensitivityProfile::flat(p.len());
            }
        }
        twin
    }

    /// Parameter shapes per layer; identifies which network a state belongs to.
    pub(crate) fn signature(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| match l.params() {
                Some((w, _)) => w.shape().to_vec(),
                None => Vec::new(),
            })
            .collect()
    }
}

/// Declarative layer description used to build networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv {
        channels: usize,
        kernel: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool,
    Flatten,
}

/// How hidden layers get their sensitivities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub schedule: Schedule,
    #[serde(default = "default_floor")]
    pub floor: f64,
    /// Values for `Schedule::Explicit`; every hidden layer must have this width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl ProfileSpec {
    pub fn new(schedule: Schedule) -> Self {
        ProfileSpec {
            schedule,
            floor: DEFAULT_FLOOR,
            values: None,
        }
    }

    pub fn flat() -> Self {
        Self::new(Schedule::Flat)
    }

    pub fn profile(&self, n: usize) -> Result<SensitivityProfile> {
        match self.schedule {
            Schedule::Explicit => {
                let v = self
                    .values
                    .clone()
                    .ok_or_else(|| Error::Profile("explicit schedule without values".into()))?;
                if v.len() != n {
                    return Err(Error::Profile(format!(
                        "explicit profile has {} values for a layer of width {n}",
                        v.len()
                    )));
                }
                SensitivityProfile::explicit(v)
            }
            s => SensitivityProfile::make(s, n, self.floor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Builds a network with Glorot-uniform weights and zero biases. Hidden
    /// layers take their profile from `profile`; the output layer is always flat.
    pub fn build(&self, profile: &ProfileSpec, rng: &mut Rng) -> Result<Network> {
        let last_weighted = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv { .. }));
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let is_output = Some(i) == last_weighted;
            let layer = match *spec {
                LayerSpec::Dense { units, activation } => {
                    if shape.len() != 1 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: dense layer after non-flat shape {shape:?}"
                        )));
                    }
                    let n_in = shape[0];
                    let limit = (6.0 / (n_in + units) as f64).sqrt();
                    let w = (0..units * n_in).map(|_| rng.uniform(-limit, limit)).collect();
                    Layer::Dense(Dense {
                        weights: Tensor::new(&[units, n_in], w)?,
                        bias: vec![0.0; units],
                        profile: if is_output {
                            SensitivityProfile::flat(units)
                        } else {
                            profile.profile(units)?
                        },
                        activation,
                    })
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    padding,
                    activation,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv layer needs [C, H, W], got {shape:?}"
                        )));
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    let fan_out = channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let w = (0..channels * fan_in).map(|_| rng.uniform(-limit, limit)).collect();
                    Layer::Conv2d(Conv2d {
                        filters: Tensor::new(&[channels, shape[0], kernel, kernel], w)?,
                        bias: vec![0.0; channels],
                        profile: if is_output {
                            SensitivityProfile::flat(channels)
                        } else {
                            profile.profile(channels)?
                        },
                        activation,
                        padding,
                    })
                }
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
            layers.push(layer);
        }
        Network::new(self.input_shape.clone(), layers)
    }

    /// The CIFAR-class layout shrunk for 28x28 grey images: two valid 3x3
    /// conv layers (8 channels), pool, two more (16), pool, dense 128 and a
    /// 10-way output.
    pub fn desk_cnn() -> Self {
        let conv = |channels| LayerSpec::Conv {
            channels,
            kernel: 3,
            padding: Padding::Valid,
            activation: Activation::Relu,
        };
        NetworkSpec {
            input_shape: vec![1, 28, 28],
            layers: vec![
                conv(8),
                conv(8),
                LayerSpec::MaxPool,
                conv(16),
                conv(16),
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 128,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 10,
                    activation: Activation::Linear,
                },
            ],
        }
    }

    /// LeNet-style CNN for 28x28 grey images: conv 5x5 (6), pool, conv 5x5 (16),
    /// pool, dense 64, 10-way output.
    pub fn lenet_desk() -> Self {
        NetworkSpec {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv {
                    channels: 6,
                    kernel: 5,
                    padding: Padding::Valid,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    channels: 16,
                    kernel: 5,
                    padding: Padding::Valid,
                    activation: Activation::Relu,
                },
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 64,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 10,
                    activation: Activation::Linear,
                },
            ],
        }
    }

    /// The 32x32x3 object-recognition CNN: conv 128, 128, 256, 256 (3x3,
    /// valid) with pooling after each pair, dense 512, 10-way output.
    pub fn cifar_cnn() -> Self {
        let conv = |channels| LayerSpec::Conv {
            channels,
            kernel: 3,
            padding: Padding::Valid,
            activation: Activation::Relu,
        };
        NetworkSpec {
            input_shape: vec![3, 32, 32],
            layers: vec![
                conv(128),
                conv(128),
                LayerSpec::MaxPool,
                conv(256),
                conv(256),
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 512,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 10,
                    activation: Activation::Linear,
                },
            ],
        }
    }

    /// Single-hidden-layer auto-associative network.
    pub fn autoencoder(inputs: usize, hidden: usize, activation: Activation) -> Self {
        NetworkSpec {
            input_shape: vec![inputs],
            layers: vec![
                LayerSpec::Dense {
                    units: hidden,
                    activation,
                },
                LayerSpec::Dense {
                    units: inputs,
                    activation: Activation::Linear,
                },
            ],
        }
    }
}
