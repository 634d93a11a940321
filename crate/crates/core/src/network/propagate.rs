use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, maxpool_into, ConvGeometry, Tensor};

/// Values cached by a forward pass over a batch, needed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct BackpropState {
    signature: Vec<Vec<usize>>,
    batch: usize,
    single: bool,
    /// Per layer: the layer input, `batch x in_len`.
    inputs: Vec<Vec<f64>>,
    /// Per weighted layer: pre-activations `u`, `batch x out_len`.
    pre: Vec<Vec<f64>>,
    /// Per pooling layer: winner indices, `batch x out_len`.
    pool: Vec<Vec<usize>>,
    shapes: Vec<Vec<usize>>,
}

impl BackpropState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Pre-activations of layer `l` as `[batch, ...output shape]`; `None` for
    /// pool/flatten layers.
    pub fn pre_activations(&self, l: usize) -> Option<Tensor> {
        let u = self.pre.get(l)?;
        if u.is_empty() {
            return None;
        }
        Some(batched(self.batch, &self.shapes[l + 1], u.clone()))
    }

    /// Post-activations of layer `l`, for every layer but the last (whose
    /// output the forward pass returns).
    pub fn activations(&self, l: usize) -> Option<Tensor> {
        let x = self.inputs.get(l + 1)?;
        Some(batched(self.batch, &self.shapes[l + 1], x.clone()))
    }
}

fn batched(batch: usize, sample: &[usize], data: Vec<f64>) -> Tensor {
    let mut shape = vec![batch];
    shape.extend_from_slice(sample);
    Tensor::new(&shape, data).expect("cached buffer matches its shape")
}

/// Gradient of the loss with respect to one weighted layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Aligned with `Network::layers`; `None` for pool/flatten layers.
    pub layers: Vec<Option<ParamGrad>>,
    /// Sensitivities `delta = dE/du` per weighted layer, shaped `[batch, ...output shape]`.
    pub deltas: Vec<Option<Tensor>>,
}

impl Network {
    /// Runs a batch `[N, ...input_shape]` (or one sample shaped `input_shape`)
    /// through the network, caching what backpropagation needs.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, BackpropState)> {
        let mut state = BackpropState {
            signature: self.signature(),
            batch: 0,
            single: false,
            inputs: Vec::with_capacity(self.layers.len() + 1),
            pre: Vec::with_capacity(self.layers.len()),
            pool: Vec::with_capacity(self.layers.len()),
            shapes: Vec::new(),
        };
        let out = self.run(input, Some(&mut state))?;
        Ok((out, state))
    }

    /// Forward pass without caching.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, None)
    }

    fn run(&self, input: &Tensor, mut state: Option<&mut BackpropState>) -> Result<Tensor> {
        let shapes = self.layer_shapes()?;
        let (batch, single) = batch_of(input.shape(), &self.input_shape)?;
        let mut x = input.data().to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let (ins, outs) = (&shapes[l], &shapes[l + 1]);
            let out_len: usize = outs.iter().product();
            let mut u = Vec::new();
            let mut index = Vec::new();
            let y = match layer {
                Layer::Dense(d) => {
                    let (n_out, n_in) = (d.weights.shape()[0], d.weights.shape()[1]);
                    let mut wt = vec![0.0; n_in * n_out];
                    crate::tensor::transpose_into(d.weights.data(), n_out, n_in, &mut wt);
                    u = vec![0.0; batch * n_out];
                    gemm_acc(batch, n_in, n_out, &x, &wt, &mut u);
                    for row in u.chunks_mut(n_out) {
                        for (v, b) in row.iter_mut().zip(&d.bias) {
                            *v += b;
                        }
                    }
                    activate(&u, d.profile.values(), d.activation, n_out, 1)
                }
                Layer::Conv2d(c) => {
                    let fs = c.filters.shape();
                    let g = ConvGeometry::new(ins[0], ins[1], ins[2], fs[2], fs[3], c.padding)?;
                    let (pl, ol, in_len) = (g.patch_len(), g.out_len(), g.c_in * g.h * g.w);
                    let mut cols = vec![0.0; pl * ol];
                    u = vec![0.0; batch * fs[0] * ol];
                    for n in 0..batch {
                        g.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
                        let un = &mut u[n * fs[0] * ol..(n + 1) * fs[0] * ol];
                        gemm_acc(fs[0], pl, ol, c.filters.data(), &cols, un);
                        for (ch, plane) in un.chunks_mut(ol).enumerate() {
                            for v in plane {
                                *v += c.bias[ch];
                            }
                        }
                    }
                    activate(&u, c.profile.values(), c.activation, fs[0], ol)
                }
                Layer::MaxPool => {
                    let in_len: usize = ins.iter().product();
                    let mut y = vec![0.0; batch * out_len];
                    index = vec![0; batch * out_len];
                    for n in 0..batch {
                        maxpool_into(
                            &x[n * in_len..(n + 1) * in_len],
                            ins[0],
                            ins[1],
                            ins[2],
                            &mut y[n * out_len..(n + 1) * out_len],
                            &mut index[n * out_len..(n + 1) * out_len],
                        );
                    }
                    y
                }
                Layer::Flatten => x.clone(),
            };
            if let Some(s) = state.as_deref_mut() {
                s.inputs.push(std::mem::take(&mut x));
                s.pre.push(u);
                s.pool.push(index);
            }
            x = y;
        }
        let out_sample = shapes.last().unwrap().clone();
        if let Some(s) = state {
            s.batch = batch;
            s.single = single;
            s.shapes = shapes;
        }
        if single {
            Tensor::new(&out_sample, x)
        } else {
            Ok(batched(batch, &out_sample, x))
        }
    }

    /// Backpropagates `loss_grad = dE/d(output)` through the state of a
    /// matching forward pass.
    ///
    /// Each weighted layer's sensitivity is `delta_i = s_i * (dE/dx_i * f0'(u_i))`;
    /// dense weight gradients are `delta x^T` summed over the batch, conv filter
    /// gradients correlate `delta` with the cached input, and pooling routes
    /// gradients through the stored winner indices.
    pub fn backward(&self, state: &BackpropState, loss_grad: &Tensor) -> Result<Gradients> {
        let signature = self.signature();
        if state.signature != signature {
            return Err(Error::State(format!(
                "state recorded parameter shapes {:?}, network has {:?}",
                state.signature, signature
            )));
        }
        let shapes = &state.shapes;
        let batch = state.batch;
        let out_sample = shapes.last().unwrap();
        let mut expected = if state.single { vec![] } else { vec![batch] };
        expected.extend_from_slice(out_sample);
        if loss_grad.shape() != expected.as_slice() {
            return Err(Error::Dimension(format!(
                "loss gradient {:?} does not match network output {:?}",
                loss_grad.shape(),
                expected
            )));
        }
        let first_weighted = self.weighted_layers().first().copied();
        let mut layers: Vec<Option<ParamGrad>> = vec![None; self.layers.len()];
        let mut deltas: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut g = loss_grad.data().to_vec();
        for l in (0..self.layers.len()).rev() {
            let (ins, outs) = (&shapes[l], &shapes[l + 1]);
            let in_len: usize = ins.iter().product();
            let x = &state.inputs[l];
            let need_input_grad = first_weighted.is_some_and(|f| l > f);
            match &self.layers[l] {
                Layer::Dense(d) => {
                    let (n_out, n_in) = (d.weights.shape()[0], d.weights.shape()[1]);
                    let delta = sensitivity(&g, &state.pre[l], d.profile.values(), d.activation, n_out, 1);
                    let mut dt = vec![0.0; n_out * batch];
                    crate::tensor::transpose_into(&delta, batch, n_out, &mut dt);
                    let mut dw = vec![0.0; n_out * n_in];
                    gemm_acc(n_out, batch, n_in, &dt, x, &mut dw);
                    let mut db = vec![0.0; n_out];
                    for row in delta.chunks(n_out) {
                        for (b, v) in db.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    let mut gx = Vec::new();
                    if need_input_grad {
                        gx = vec![0.0; batch * n_in];
                        gemm_acc(batch, n_out, n_in, &delta, d.weights.data(), &mut gx);
                    }
                    layers[l] = Some(ParamGrad {
                        weights: Tensor::new(d.weights.shape(), dw)?,
                        bias: db,
                    });
                    deltas[l] = Some(batched(batch, outs, delta));
                    g = gx;
                }
                Layer::Conv2d(c) => {
                    let fs = c.filters.shape();
                    let g_ = ConvGeometry::new(ins[0], ins[1], ins[2], fs[2], fs[3], c.padding)?;
                    let (co, pl, ol) = (fs[0], g_.patch_len(), g_.out_len());
                    let delta = sensitivity(&g, &state.pre[l], c.profile.values(), c.activation, co, ol);
                    let mut df = vec![0.0; co * pl];
                    let mut db = vec![0.0; co];
                    let mut cols = vec![0.0; pl * ol];
                    let mut ft = Vec::new();
                    let mut dcols = Vec::new();
                    let mut gx = Vec::new();
                    if need_input_grad {
                        ft = vec![0.0; pl * co];
                        crate::tensor::transpose_into(c.filters.data(), co, pl, &mut ft);
                        dcols = vec![0.0; pl * ol];
                        gx = vec![0.0; batch * in_len];
                    }
                    for n in 0..batch {
                        g_.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
                        let dn = &delta[n * co * ol..(n + 1) * co * ol];
                        for ch in 0..co {
                            let dplane = &dn[ch * ol..(ch + 1) * ol];
                            for p in 0..pl {
                                let mut acc = df[ch * pl + p];
                                for (dv, cv) in dplane.iter().zip(&cols[p * ol..(p + 1) * ol]) {
                                    acc += dv * cv;
                                }
                                df[ch * pl + p] = acc;
                            }
                            let mut acc = db[ch];
                            for dv in dplane {
                                acc += dv;
                            }
                            db[ch] = acc;
                        }
                        if need_input_grad {
                            dcols.fill(0.0);
                            gemm_acc(pl, co, ol, &ft, dn, &mut dcols);
                            g_.col2im(&dcols, &mut gx[n * in_len..(n + 1) * in_len]);
                        }
                    }
                    layers[l] = Some(ParamGrad {
                        weights: Tensor::new(fs, df)?,
                        bias: db,
                    });
                    deltas[l] = Some(batched(batch, outs, delta));
                    g = gx;
                }
                Layer::MaxPool => {
                    if !need_input_grad {
                        g = Vec::new();
                        continue;
                    }
                    let out_len: usize = outs.iter().product();
                    let mut gx = vec![0.0; batch * in_len];
                    let index = &state.pool[l];
                    for n in 0..batch {
                        let dst = &mut gx[n * in_len..(n + 1) * in_len];
                        for k in n * out_len..(n + 1) * out_len {
                            dst[index[k]] += g[k];
                        }
                    }
                    g = gx;
                }
                Layer::Flatten => {}
            }
        }
        Ok(Gradients { layers, deltas })
    }
}

/// `W <- W - step * grad` and `b <- b - step * grad_b` for every weighted layer.
pub fn apply_update(net: &mut Network, grads: &Gradients, step: f64) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} layers",
            grads.layers.len(),
            net.layers.len()
        )));
    }
    for (l, (layer, grad)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
        match (layer.params_mut(), grad) {
            (Some((w, b)), Some(gr)) => {
                if w.shape() != gr.weights.shape() || b.len() != gr.bias.len() {
                    return Err(Error::Dimension(format!(
                        "layer {l}: gradient {:?} for weights {:?}",
                        gr.weights.shape(),
                        w.shape()
                    )));
                }
                for (wv, gv) in w.data_mut().iter_mut().zip(gr.weights.data()) {
                    *wv -= step * gv;
                }
                for (bv, gv) in b.iter_mut().zip(&gr.bias) {
                    *bv -= step * gv;
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "layer {l}: gradient presence does not match layer kind"
                )))
            }
        }
    }
    Ok(())
}

fn batch_of(shape: &[usize], input_shape: &[usize]) -> Result<(usize, bool)> {
    if shape == input_shape {
        return Ok((1, true));
    }
    if shape.len() == input_shape.len() + 1 && &shape[1..] == input_shape {
        return Ok((shape[0], false));
    }
    Err(Error::Dimension(format!(
        "input {shape:?} does not conform to network input {input_shape:?}"
    )))
}

// x = s * f0(u); `plane` values share one node (1 for dense, H*W for conv).
fn activate(u: &[f64], s: &[f64], f0: super::Activation, nodes: usize, plane: usize) -> Vec<f64> {
    let mut y = vec![0.0; u.len()];
    for (k, (yv, &uv)) in y.iter_mut().zip(u).enumerate() {
        *yv = s[(k / plane) % nodes] * f0.apply(uv);
    }
    y
}

fn sensitivity(g: &[f64], u: &[f64], s: &[f64], f0: super::Activation, nodes: usize, plane: usize) -> Vec<f64> {
    let mut d = vec![0.0; u.len()];
    for (k, (dv, (&gv, &uv))) in d.iter_mut().zip(g.iter().zip(u)).enumerate() {
        *dv = s[(k / plane) % nodes] * (gv * f0.derivative(uv));
    }
    d
}
