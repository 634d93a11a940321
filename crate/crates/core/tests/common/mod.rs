//! Independent oracles shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use asymnet::datasets::Dataset;
use asymnet::network::{Layer, LayerSpec, NetworkSpec, ProfileSpec, Schedule};
use asymnet::tensor::Padding;
use asymnet::training::{evaluate, loss, LossKind, Metric};
use asymnet::{Activation, Network, Rng, Tensor};

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

// ---------------------------------------------------------------------------
// Plain network with base activations and no sensitivities.

#[derive(Debug, Clone)]
pub enum PlainLayer {
    Dense {
        w: Vec<f64>,
        b: Vec<f64>,
        n_out: usize,
        n_in: usize,
        f0: Activation,
    },
    Conv {
        f: Vec<f64>,
        b: Vec<f64>,
        c_out: usize,
        c_in: usize,
        k: usize,
        pad: usize,
        h: usize,
        w: usize,
        f0: Activation,
    },
    Pool {
        c: usize,
        h: usize,
        w: usize,
    },
    Flatten,
}

#[derive(Debug, Clone)]
pub struct PlainNet {
    pub layers: Vec<PlainLayer>,
    pub in_len: usize,
}

pub struct PlainCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    winners: Vec<Vec<usize>>,
}

/// Per layer, the weight gradient and bias gradient (empty for pool/flatten).
pub type PlainGrads = Vec<(Vec<f64>, Vec<f64>)>;

impl PlainNet {
    /// Copies the parameters of `net`, dropping every sensitivity.
    pub fn from_network(net: &Network) -> PlainNet {
        let shapes = net.layer_shapes().unwrap();
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| match layer {
                Layer::Dense(d) => PlainLayer::Dense {
                    w: d.weights.data().to_vec(),
                    b: d.bias.clone(),
                    n_out: d.weights.shape()[0],
                    n_in: d.weights.shape()[1],
                    f0: d.activation,
                },
                Layer::Conv2d(c) => {
                    let s = c.filters.shape();
                    PlainLayer::Conv {
                        f: c.filters.data().to_vec(),
                        b: c.bias.clone(),
                        c_out: s[0],
                        c_in: s[1],
                        k: s[2],
                        pad: if c.padding == Padding::Same { s[2] / 2 } else { 0 },
                        h: shapes[l][1],
                        w: shapes[l][2],
                        f0: c.activation,
                    }
                }
                Layer::MaxPool => PlainLayer::Pool {
                    c: shapes[l][0],
                    h: shapes[l][1],
                    w: shapes[l][2],
                },
                Layer::Flatten => PlainLayer::Flatten,
            })
            .collect();
        PlainNet {
            layers,
            in_len: shapes[0].iter().product(),
        }
    }

    /// Parameters in the layout of [`Network`] layers.
    pub fn params(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|l| match l {
                PlainLayer::Dense { w, b, .. } => (w.clone(), b.clone()),
                PlainLayer::Conv { f, b, .. } => (f.clone(), b.clone()),
                _ => (Vec::new(), Vec::new()),
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> (Vec<f64>, PlainCache) {
        let mut cache = PlainCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            winners: Vec::new(),
        };
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut pre = Vec::new();
            let mut win = Vec::new();
            let next = match layer {
                PlainLayer::Dense { w, b, n_out, n_in, f0 } => {
                    let mut y = Vec::with_capacity(batch * n_out);
                    for n in 0..batch {
                        let xs = &cur[n * n_in..(n + 1) * n_in];
                        for j in 0..*n_out {
                            let mut acc = 0.0;
                            for t in 0..*n_in {
                                acc += xs[t] * w[j * n_in + t];
                            }
                            let u = acc + b[j];
                            pre.push(u);
                            y.push(f0.apply(u));
                        }
                    }
                    y
                }
                PlainLayer::Conv {
                    f,
                    b,
                    c_out,
                    c_in,
                    k,
                    pad,
                    h,
                    w,
                    f0,
                } => {
                    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
                    let in_len = c_in * h * w;
                    let mut y = Vec::new();
                    for n in 0..batch {
                        let xs = &cur[n * in_len..(n + 1) * in_len];
                        for co in 0..*c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut acc = 0.0;
                                    for ci in 0..*c_in {
                                        for ky in 0..*k {
                                            for kx in 0..*k {
                                                let iy = (oy + ky) as isize - *pad as isize;
                                                let ix = (ox + kx) as isize - *pad as isize;
                                                let v = if iy < 0 || ix < 0 || iy >= *h as isize || ix >= *w as isize {
                                                    0.0
                                                } else {
                                                    xs[(ci * h + iy as usize) * w + ix as usize]
                                                };
                                                acc += f[((co * c_in + ci) * k + ky) * k + kx] * v;
                                            }
                                        }
                                    }
                                    let u = acc + b[co];
                                    pre.push(u);
                                    y.push(f0.apply(u));
                                }
                            }
                        }
                    }
                    y
                }
                PlainLayer::Pool { c, h, w } => {
                    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                    let in_len = c * h * w;
                    let mut y = Vec::new();
                    for n in 0..batch {
                        for ch in 0..*c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best: Option<(f64, usize)> = None;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                                            if iy < *h && ix < *w {
                                                let at = (ch * h + iy) * w + ix;
                                                let v = cur[n * in_len + at];
                                                if best.is_none_or(|(bv, _)| v > bv) {
                                                    best = Some((v, at));
                                                }
                                            }
                                        }
                                    }
                                    let (v, at) = best.unwrap();
                                    y.push(v);
                                    win.push(at);
                                }
                            }
                        }
                    }
                    y
                }
                PlainLayer::Flatten => cur.clone(),
            };
            cache.inputs.push(std::mem::replace(&mut cur, next));
            cache.pre.push(pre);
            cache.winners.push(win);
        }
        (cur, cache)
    }

    /// Gradients for `g = dE/d(output)`.
    pub fn backward(&self, cache: &PlainCache, g: &[f64], batch: usize) -> PlainGrads {
        let mut grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut g = g.to_vec();
        for l in (0..self.layers.len()).rev() {
            let x = &cache.inputs[l];
            match &self.layers[l] {
                PlainLayer::Dense { w, n_out, n_in, f0, .. } => {
                    let u = &cache.pre[l];
                    let delta: Vec<f64> = g.iter().zip(u).map(|(gv, uv)| gv * f0.derivative(*uv)).collect();
                    let mut dw = vec![0.0; n_out * n_in];
                    let mut db = vec![0.0; *n_out];
                    for j in 0..*n_out {
                        for i in 0..*n_in {
                            let mut acc = 0.0;
                            for n in 0..batch {
                                acc += delta[n * n_out + j] * x[n * n_in + i];
                            }
                            dw[j * n_in + i] = acc;
                        }
                        for n in 0..batch {
                            db[j] += delta[n * n_out + j];
                        }
                    }
                    let mut gx = vec![0.0; batch * n_in];
                    for n in 0..batch {
                        for i in 0..*n_in {
                            let mut acc = 0.0;
                            for j in 0..*n_out {
                                acc += delta[n * n_out + j] * w[j * n_in + i];
                            }
                            gx[n * n_in + i] = acc;
                        }
                    }
                    grads[l] = (dw, db);
                    g = gx;
                }
                PlainLayer::Conv {
                    f,
                    c_out,
                    c_in,
                    k,
                    pad,
                    h,
                    w,
                    f0,
                    ..
                } => {
                    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
                    let (in_len, ol) = (c_in * h * w, oh * ow);
                    let u = &cache.pre[l];
                    let delta: Vec<f64> = g.iter().zip(u).map(|(gv, uv)| gv * f0.derivative(*uv)).collect();
                    let mut df = vec![0.0; f.len()];
                    let mut db = vec![0.0; *c_out];
                    let mut gx = vec![0.0; batch * in_len];
                    let inside = |oy: usize, ox: usize, ky: usize, kx: usize| -> Option<(usize, usize)> {
                        let iy = (oy + ky) as isize - *pad as isize;
                        let ix = (ox + kx) as isize - *pad as isize;
                        (iy >= 0 && ix >= 0 && iy < *h as isize && ix < *w as isize)
                            .then_some((iy as usize, ix as usize))
                    };
                    for n in 0..batch {
                        let xs = &x[n * in_len..(n + 1) * in_len];
                        let d = &delta[n * c_out * ol..(n + 1) * c_out * ol];
                        for co in 0..*c_out {
                            for ci in 0..*c_in {
                                for ky in 0..*k {
                                    for kx in 0..*k {
                                        let idx = ((co * c_in + ci) * k + ky) * k + kx;
                                        for oy in 0..oh {
                                            for ox in 0..ow {
                                                let v = inside(oy, ox, ky, kx)
                                                    .map_or(0.0, |(iy, ix)| xs[(ci * h + iy) * w + ix]);
                                                df[idx] += d[co * ol + oy * ow + ox] * v;
                                            }
                                        }
                                    }
                                }
                            }
                            for o in 0..ol {
                                db[co] += d[co * ol + o];
                            }
                        }
                        let gs = &mut gx[n * in_len..(n + 1) * in_len];
                        for ci in 0..*c_in {
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let Some((iy, ix)) = inside(oy, ox, ky, kx) else {
                                                continue;
                                            };
                                            let mut acc = 0.0;
                                            for co in 0..*c_out {
                                                acc +=
                                                    f[((co * c_in + ci) * k + ky) * k + kx] * d[co * ol + oy * ow + ox];
                                            }
                                            gs[(ci * h + iy) * w + ix] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    grads[l] = (df, db);
                    g = gx;
                }
                PlainLayer::Pool { c, h, w } => {
                    let in_len = c * h * w;
                    let out_len = g.len() / batch;
                    let mut gx = vec![0.0; batch * in_len];
                    for n in 0..batch {
                        for o in 0..out_len {
                            gx[n * in_len + cache.winners[l][n * out_len + o]] += g[n * out_len + o];
                        }
                    }
                    g = gx;
                }
                PlainLayer::Flatten => {}
            }
        }
        grads
    }

    pub fn sgd(&mut self, grads: &PlainGrads, step: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            let (w, b) = match layer {
                PlainLayer::Dense { w, b, .. } => (w, b),
                PlainLayer::Conv { f, b, .. } => (f, b),
                _ => continue,
            };
            for (v, g) in w.iter_mut().zip(gw) {
                *v -= step * g;
            }
            for (v, g) in b.iter_mut().zip(gb) {
                *v -= step * g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Random architectures.

pub fn random_activation(rng: &mut Rng) -> Activation {
    [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Linear,
        Activation::Relu,
    ][rng.below(4)]
}

pub fn random_schedule(rng: &mut Rng) -> Schedule {
    [
        Schedule::Linear,
        Schedule::Quadratic,
        Schedule::ClampedRamp,
        Schedule::Flat,
    ][rng.below(4)]
}

/// Up to three weighted layers: optional convs (each maybe pooled), then dense.
pub fn random_spec(rng: &mut Rng) -> NetworkSpec {
    let side = 4 + rng.below(3);
    let input = vec![1 + rng.below(2), side, side];
    let weighted = 1 + rng.below(3);
    let convs = rng.below(weighted);
    let mut layers = Vec::new();
    let mut size = side;
    for _ in 0..convs {
        let padding = if size < 3 || rng.below(2) == 0 {
            Padding::Same
        } else {
            Padding::Valid
        };
        if padding == Padding::Valid {
            size -= 2;
        }
        layers.push(LayerSpec::Conv {
            channels: 2 + rng.below(2),
            kernel: 3,
            padding,
            activation: random_activation(rng),
        });
        if size >= 2 && rng.below(2) == 0 {
            layers.push(LayerSpec::MaxPool);
            size /= 2;
        }
    }
    layers.push(LayerSpec::Flatten);
    for i in convs..weighted {
        let last = i + 1 == weighted;
        layers.push(LayerSpec::Dense {
            units: if last { 2 + rng.below(2) } else { 3 + rng.below(4) },
            activation: if last {
                Activation::Linear
            } else {
                random_activation(rng)
            },
        });
    }
    NetworkSpec {
        input_shape: input,
        layers,
    }
}

/// Random weights from `build` plus random non-zero biases.
pub fn random_network(spec: &NetworkSpec, profile: &ProfileSpec, rng: &mut Rng) -> Network {
    let mut net = spec.build(profile, rng).unwrap();
    for layer in &mut net.layers {
        if let Some((_, b)) = layer.params_mut() {
            for v in b.iter_mut() {
                *v = rng.uniform(-0.3, 0.3);
            }
        }
    }
    net
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

pub fn batch_shape(batch: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(sample);
    s
}

// ---------------------------------------------------------------------------
// Central finite differences.

/// Largest relative error between backprop and central differences over all
/// parameters whose one-sided differences agree (so no ReLU kink is straddled).
/// Returns `(max relative error, compared, skipped)`.
pub fn gradient_check(net: &Network, x: &Tensor, target: &Tensor, h: f64) -> (f64, usize, usize) {
    let (out, state) = net.forward(x).unwrap();
    let (base, g) = loss(LossKind::Mse, &out, target).unwrap();
    let grads = net.backward(&state, &g).unwrap();
    let eval = |n: &Network| loss(LossKind::Mse, &n.predict(x).unwrap(), target).unwrap().0;
    let (mut worst, mut compared, mut skipped) = (0.0f64, 0, 0);
    for l in 0..net.layers.len() {
        let Some(pg) = &grads.layers[l] else { continue };
        let n_w = pg.weights.len();
        for k in 0..n_w + pg.bias.len() {
            let analytic = if k < n_w {
                pg.weights.data()[k]
            } else {
                pg.bias[k - n_w]
            };
            let shifted = |delta: f64| {
                let mut n = net.clone();
                let (w, b) = n.layers[l].params_mut().unwrap();
                if k < n_w {
                    w.data_mut()[k] += delta;
                } else {
                    b[k - n_w] += delta;
                }
                eval(&n)
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            let (fwd, bwd) = ((plus - base) / h, (base - minus) / h);
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) + 1e-6 {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            compared += 1;
        }
    }
    (worst, compared, skipped)
}

// ---------------------------------------------------------------------------
// Characteristic polynomial roots.

/// Coefficients `c[0..=n]` of `det(lambda I - A) = sum c[k] lambda^k`
/// by the Faddeev-LeVerrier recursion.
pub fn char_poly(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let mut m = vec![vec![0.0; n]; n];
    for k in 1..=n {
        // M_k = A M_{k-1} + c_{n-k+1} I
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = (0..n).map(|t| a[i][t] * m[t][j]).sum::<f64>();
            }
            next[i][i] += c[n - k + 1];
        }
        m = next;
        let am_trace: f64 = (0..n).map(|i| (0..n).map(|t| a[i][t] * m[t][i]).sum::<f64>()).sum();
        c[n - k] = -am_trace / k as f64;
    }
    c
}

fn horner(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Real roots of the characteristic polynomial, ascending, found by sign
/// changes on a grid over the Gershgorin interval and bisection. `None` when
/// fewer than `n` roots are bracketed.
pub fn char_poly_roots(a: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = a.len();
    let c = char_poly(a);
    let r = (0..n)
        .map(|i| a[i].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1e-6;
    for grid in [20_000usize, 2_000_000] {
        let mut roots = Vec::new();
        let step = 2.0 * r / grid as f64;
        let mut lo = -r;
        let mut plo = horner(&c, lo);
        for i in 1..=grid {
            let hi = -r + step * i as f64;
            let phi = horner(&c, hi);
            if plo == 0.0 {
                roots.push(lo);
            } else if plo.signum() != phi.signum() && phi != 0.0 {
                let (mut a0, mut b0, mut pa) = (lo, hi, plo);
                for _ in 0..200 {
                    let mid = 0.5 * (a0 + b0);
                    let pm = horner(&c, mid);
                    if pm == 0.0 {
                        a0 = mid;
                        b0 = mid;
                        break;
                    }
                    if pm.signum() == pa.signum() {
                        a0 = mid;
                        pa = pm;
                    } else {
                        b0 = mid;
                    }
                }
                roots.push(0.5 * (a0 + b0));
            }
            lo = hi;
            plo = phi;
        }
        if roots.len() == n {
            return Some(roots);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Square-root lasso by cyclic coordinate descent.

/// `||y - W z||_2 + mu ||z||_1` for `W` given as columns.
pub fn sqrt_lasso_objective(cols: &[Vec<f64>], y: &[f64], z: &[f64], mu: f64) -> f64 {
    let r: Vec<f64> = (0..y.len())
        .map(|i| y[i] - cols.iter().zip(z).map(|(c, zv)| c[i] * zv).sum::<f64>())
        .collect();
    r.iter().map(|v| v * v).sum::<f64>().sqrt() + mu * z.iter().map(|v| v.abs()).sum::<f64>()
}

/// Minimizes the objective over unit-norm columns one coordinate at a time.
/// With the others fixed and `c = w_j . r_j`, `b = |r_j - c w_j|`, the exact
/// minimizer is `sign(c) max(|c| - mu b / sqrt(1 - mu^2), 0)` (0 for `mu >= 1`).
pub fn sqrt_lasso_cd(cols: &[Vec<f64>], y: &[f64], mu: f64) -> (Vec<f64>, f64) {
    let n = cols.len();
    let mut z = vec![0.0; n];
    let mut r = y.to_vec();
    let mut obj = sqrt_lasso_objective(cols, y, &z, mu);
    for _ in 0..200_000 {
        for j in 0..n {
            for (ri, ci) in r.iter_mut().zip(&cols[j]) {
                *ri += ci * z[j];
            }
            let c: f64 = cols[j].iter().zip(&r).map(|(a, b)| a * b).sum();
            let perp2: f64 = r.iter().zip(&cols[j]).map(|(ri, ci)| (ri - c * ci).powi(2)).sum();
            let b = perp2.sqrt();
            z[j] = if mu >= 1.0 {
                0.0
            } else {
                c.signum() * (c.abs() - mu * b / (1.0 - mu * mu).sqrt()).max(0.0)
            };
            for (ri, ci) in r.iter_mut().zip(&cols[j]) {
                *ri -= ci * z[j];
            }
        }
        let next = sqrt_lasso_objective(cols, y, &z, mu);
        if obj - next <= 1e-15 * obj.max(1e-300) {
            obj = next.min(obj);
            break;
        }
        obj = next;
    }
    (z, obj)
}

// ---------------------------------------------------------------------------
// Reference pruning procedure, one loop per step.

/// Hidden layers by node count, largest first; equal counts take the deeper layer.
pub fn layers_by_width(net: &Network) -> Vec<usize> {
    let mut layers = net.hidden_layers();
    layers.sort_by(|&a, &b| net.layers[b].width().cmp(&net.layers[a].width()).then(b.cmp(&a)));
    layers
}

/// Returns the pruned net and the `(layer, node, accuracy measured before removal)` sequence.
pub fn reference_prune(
    net: &Network,
    gate: &Dataset,
    target: f64,
    order: &[usize],
) -> (Network, Vec<(usize, usize, f64)>) {
    let mut net = net.clone();
    let mut trace = Vec::new();
    // for zeta = 1 to L-1
    for &l in order {
        let n_l = net.layers[l].width();
        // for i = n_l to 1 (node 1 is kept so the layer never empties)
        for i in (2..=n_l).rev() {
            let accuracy = evaluate(&net, gate, Metric::Accuracy).unwrap();
            if accuracy <= target {
                break;
            } else {
                net.remove_node(l, i - 1).unwrap();
                trace.push((l, i - 1, accuracy));
            }
        }
    }
    (net, trace)
}

/// Dense toy classifier: `inputs -> hidden... -> classes`, labels from a random teacher.
pub fn toy_problem(rng: &mut Rng) -> (Network, Dataset) {
    let inputs = 2 + rng.below(3);
    let classes = 2 + rng.below(2);
    let mut layers = Vec::new();
    for _ in 0..1 + rng.below(2) {
        layers.push(LayerSpec::Dense {
            units: 2 + rng.below(5),
            activation: Activation::Relu,
        });
    }
    layers.push(LayerSpec::Dense {
        units: classes,
        activation: Activation::Linear,
    });
    let spec = NetworkSpec {
        input_shape: vec![inputs],
        layers,
    };
    let net = random_network(&spec, &ProfileSpec::new(Schedule::Quadratic), rng);
    let teacher = random_network(&spec, &ProfileSpec::flat(), rng);
    let n = 40;
    let x = random_tensor(&[n, inputs], rng);
    let y = teacher.predict(&x).unwrap();
    let mut onehot = vec![0.0; n * classes];
    for i in 0..n {
        let row = &y.data()[i * classes..(i + 1) * classes];
        let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        onehot[i * classes + best] = 1.0;
    }
    let data = Dataset::new(x, Tensor::new(&[n, classes], onehot).unwrap(), "toy").unwrap();
    (net, data)
}
