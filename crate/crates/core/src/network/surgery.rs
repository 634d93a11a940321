use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Network {
    /// Removes node `node` (a dense unit or conv channel) of hidden layer
    /// `layer` together with every weight that reads it downstream.
    ///
    /// A conv channel that reaches a dense layer through a flatten drops the
    /// whole block of dense input columns fed by that channel's positions.
    pub fn remove_node(&mut self, layer: usize, node: usize) -> Result<()> {
        let l = self.check_removable(layer, node, true)?;
        let shapes = self.layer_shapes()?;
        let next = (l + 1..self.layers.len())
            .find(|&m| self.layers[m].is_weighted())
            .expect("a hidden layer has a weighted successor");
        let block = channel_block(&self.layers, &shapes, l, next);

        match &mut self.layers[l] {
            Layer::Dense(d) => {
                d.weights = drop_rows(&d.weights, node, 1)?;
                d.bias.remove(node);
                d.profile.remove(node);
            }
            Layer::Conv2d(c) => {
                c.filters = drop_rows(&c.filters, node, 1)?;
                c.bias.remove(node);
                c.profile.remove(node);
            }
            _ => unreachable!(),
        }
        match &mut self.layers[next] {
            Layer::Dense(d) => {
                d.weights = drop_cols(&d.weights, node * block, block)?;
            }
            Layer::Conv2d(c) => {
                c.filters = drop_input_channel(&c.filters, node)?;
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    /// Copying variant of [`remove_node`](Self::remove_node).
    pub fn with_node_removed(&self, layer: usize, node: usize) -> Result<Network> {
        let mut net = self.clone();
        net.remove_node(layer, node)?;
        Ok(net)
    }

    /// Zeros every weight that reads node `node` of hidden layer `layer`, so
    /// the node no longer contributes while all shapes stay unchanged.
    pub fn silence_node(&mut self, layer: usize, node: usize) -> Result<()> {
        let l = self.check_removable(layer, node, false)?;
        let shapes = self.layer_shapes()?;
        let next = (l + 1..self.layers.len())
            .find(|&m| self.layers[m].is_weighted())
            .expect("a hidden layer has a weighted successor");
        let per_channel = channel_block(&self.layers, &shapes, l, next);
        match &mut self.layers[next] {
            Layer::Dense(d) => {
                let cols = d.weights.cols();
                let rows = d.weights.rows();
                let data = d.weights.data_mut();
                for r in 0..rows {
                    for c in node * per_channel..(node + 1) * per_channel {
                        data[r * cols + c] = 0.0;
                    }
                }
            }
            Layer::Conv2d(c) => {
                let fs = c.filters.shape().to_vec();
                let k = fs[2] * fs[3];
                let data = c.filters.data_mut();
                for o in 0..fs[0] {
                    let at = (o * fs[1] + node) * k;
                    data[at..at + k].fill(0.0);
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    fn check_removable(&self, layer: usize, node: usize, removing: bool) -> Result<usize> {
        let target = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Index(format!("layer {layer} of a {}-layer network", self.layers.len())))?;
        if !target.is_weighted() {
            return Err(Error::UnsupportedLayer {
                layer,
                kind: target.kind_name(),
            });
        }
        if Some(layer) == self.output_layer() {
            return Err(Error::Validation(format!(
                "layer {layer} is the output layer; its nodes are not removable"
            )));
        }
        let width = target.width();
        if node >= width {
            return Err(Error::Index(format!("node {node} of layer {layer} with {width} nodes")));
        }
        if removing && width == 1 {
            return Err(Error::Validation(format!("layer {layer} has a single node left")));
        }
        Ok(layer)
    }
}

// Dense input columns fed by one node of layer `l`: the spatial extent of a
// channel at the flatten between `l` and `next`, or 1 without one.
fn channel_block(layers: &[Layer], shapes: &[Vec<usize>], l: usize, next: usize) -> usize {
    (l + 1..next)
        .rev()
        .find(|&f| matches!(layers[f], Layer::Flatten))
        .map(|f| shapes[f][1..].iter().product::<usize>().max(1))
        .unwrap_or(1)
}

// Deletes `count` leading-axis slices starting at `at`.
fn drop_rows(t: &Tensor, at: usize, count: usize) -> Result<Tensor> {
    let stride = t.len() / t.shape()[0];
    let mut data = t.data().to_vec();
    data.drain(at * stride..(at + count) * stride);
    let mut shape = t.shape().to_vec();
    shape[0] -= count;
    Tensor::new(&shape, data)
}

fn drop_cols(t: &Tensor, at: usize, count: usize) -> Result<Tensor> {
    let (rows, cols) = (t.rows(), t.cols());
    if at + count > cols {
        return Err(Error::Dimension(format!(
            "columns {at}..{} of a {rows}x{cols} matrix",
            at + count
        )));
    }
    let mut data = Vec::with_capacity(rows * (cols - count));
    for r in 0..rows {
        let row = t.row(r);
        data.extend_from_slice(&row[..at]);
        data.extend_from_slice(&row[at + count..]);
    }
    Tensor::new(&[rows, cols - count], data)
}

fn drop_input_channel(t: &Tensor, channel: usize) -> Result<Tensor> {
    let s = t.shape();
    let k = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * (s[1] - 1) * k);
    for o in 0..s[0] {
        for i in 0..s[1] {
            if i != channel {
                let at = (o * s[1] + i) * k;
                data.extend_from_slice(&t.data()[at..at + k]);
            }
        }
    }
    Tensor::new(&[s[0], s[1] - 1, s[2], s[3]], data)
}

/// Number of weight and bias scalars.
pub fn count_weights(net: &Network) -> usize {
    net.layers
        .iter()
        .filter_map(Layer::params)
        .map(|(w, b)| w.len() + b.len())
        .sum()
}

/// `count_weights(after) / count_weights(before)`.
pub fn prune_ratio(before: &Network, after: &Network) -> f64 {
    count_weights(after) as f64 / count_weights(before) as f64
}
