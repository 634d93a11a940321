//! Shallow-model eigen-alignment, staged sensitivity schedules, sparse
//! decomposition over learned features, importance correlations,
//! reconstruction curves and repeatability statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::eigen::sym_eig;
use crate::error::{Error, Result};
use crate::network::{Activation, Layer, Network, SensitivityProfile};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{evaluate, evaluate_loss, LossKind, Metric};

/// `y = W2 D f0(W1 x)` with one hidden layer and no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowModel {
    /// `p x n`; row `i` is the input weight vector of hidden node `i`.
    pub w1: Tensor,
    /// `m x p` decoder, or `None` when tied to the transpose of `w1`.
    pub w2: Option<Tensor>,
    pub profile: SensitivityProfile,
    pub base: Activation,
}

impl ShallowModel {
    pub fn new(w1: Tensor, w2: Option<Tensor>, profile: SensitivityProfile, base: Activation) -> Result<Self> {
        check_base(base)?;
        if w1.rank() != 2 {
            return Err(Error::Dimension(format!("w1 must be p x n, got {:?}", w1.shape())));
        }
        let p = w1.rows();
        if profile.len() != p {
            return Err(Error::Dimension(format!(
                "{} sensitivity values for {p} hidden nodes",
                profile.len()
            )));
        }
        if let Some(w2) = &w2 {
            if w2.rank() != 2 || w2.cols() != p {
                return Err(Error::Dimension(format!("w2 must be m x {p}, got {:?}", w2.shape())));
            }
        }
        Ok(ShallowModel { w1, w2, profile, base })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn inputs(&self) -> usize {
        self.w1.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w2.as_ref().map_or(self.inputs(), Tensor::rows)
    }

    pub fn is_tied(&self) -> bool {
        self.w2.is_none()
    }

    /// The `m x p` decoder matrix, materialized for tied models.
    pub fn decoder(&self) -> Tensor {
        match &self.w2 {
            Some(w2) => w2.clone(),
            None => self.w1.transpose().expect("w1 is a matrix"),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let (p, n) = (self.hidden(), self.inputs());
        let s = self.profile.values();
        let h: Vec<f64> = (0..p)
            .map(|i| {
                let u: f64 = self.w1.row(i).iter().zip(x).map(|(w, v)| w * v).sum();
                s[i] * self.base.apply(u)
            })
            .collect();
        let m = self.outputs();
        let mut y = vec![0.0; m];
        match &self.w2 {
            Some(w2) => {
                for (r, out) in y.iter_mut().enumerate() {
                    *out = w2.row(r).iter().zip(&h).map(|(w, v)| w * v).sum();
                }
            }
            None => {
                for (i, hv) in h.iter().enumerate() {
                    for (out, w) in y.iter_mut().zip(&self.w1.data()[i * n..(i + 1) * n]) {
                        *out += w * hv;
                    }
                }
            }
        }
        y
    }

    /// Mean over samples of `||y - y_hat||^2`.
    pub fn error(&self, data: &Dataset) -> Result<f64> {
        let (x, y) = shallow_matrices(data)?;
        let mut total = 0.0;
        for i in 0..x.rows() {
            let pred = self.predict(x.row(i));
            total += pred.iter().zip(y.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / x.rows() as f64)
    }
}

fn check_base(base: Activation) -> Result<()> {
    match base {
        Activation::Linear | Activation::Relu => Ok(()),
        other => Err(Error::Validation(format!(
            "shallow models use a linear or relu base, got {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShallowConfig {
    pub hidden: usize,
    pub tied: bool,
    pub base: Activation,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Standard deviation of the Gaussian initial weights.
    pub init_scale: f64,
}

impl Default for ShallowConfig {
    fn default() -> Self {
        ShallowConfig {
            hidden: 4,
            tied: true,
            base: Activation::Linear,
            iterations: 200_000,
            learning_rate: 0.05,
            init_scale: 0.01,
        }
    }
}

impl ShallowConfig {
    pub fn validate(&self) -> Result<()> {
        check_base(self.base)?;
        if self.hidden == 0 {
            return Err(Error::Validation(
                "a shallow model needs at least one hidden node".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Validation(format!("init scale {}", self.init_scale)));
        }
        Ok(())
    }
}

fn shallow_matrices(data: &Dataset) -> Result<(Tensor, Tensor)> {
    if data.len() < 2 {
        return Err(Error::InsufficientSamples(data.len()));
    }
    let flat = data.flattened();
    Ok((flat.inputs, flat.targets))
}

fn init_model(cfg: &ShallowConfig, n: usize, m: usize, profile: SensitivityProfile, seed: u64) -> Result<ShallowModel> {
    cfg.validate()?;
    if cfg.tied && m != n {
        return Err(Error::Dimension(format!(
            "tied weights need equal input and output widths, got {n} and {m}"
        )));
    }
    let mut rng = Rng::new(seed);
    let p = cfg.hidden;
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| cfg.init_scale * rng.normal()).collect() };
    let w1 = Tensor::new(&[p, n], draw(p * n))?;
    let w2 = if cfg.tied {
        None
    } else {
        Some(Tensor::new(&[m, p], draw(m * p))?)
    };
    ShallowModel::new(w1, w2, profile, cfg.base)
}

/// Trains a shallow model on `data` (targets are the regression outputs) by
/// full-batch gradient descent on the mean squared error, starting from
/// small Gaussian weights drawn from `seed`.
pub fn fit_shallow(
    data: &Dataset,
    cfg: &ShallowConfig,
    profile: &SensitivityProfile,
    seed: u64,
) -> Result<ShallowModel> {
    let (x, y) = shallow_matrices(data)?;
    let mut model = init_model(cfg, x.cols(), y.cols(), profile.clone(), seed)?;
    descend(&mut model, &x, &y, cfg.iterations, cfg.learning_rate)?;
    Ok(model)
}

/// Trains through a sequence of sensitivity vectors, carrying the weights
/// from one stage into the next. Returns one snapshot per stage; the last is
/// the final model.
pub fn staged_fit(data: &Dataset, cfg: &ShallowConfig, stages: &[Vec<f64>], seed: u64) -> Result<Vec<ShallowModel>> {
    let Some(first) = stages.first() else {
        return Err(Error::Validation("staged fit needs at least one stage".into()));
    };
    let (x, y) = shallow_matrices(data)?;
    let mut model = init_model(
        cfg,
        x.cols(),
        y.cols(),
        SensitivityProfile::explicit(first.clone())?,
        seed,
    )?;
    let mut snapshots = Vec::with_capacity(stages.len());
    for stage in stages {
        let profile = SensitivityProfile::explicit(stage.clone())?;
        if profile.len() != cfg.hidden {
            return Err(Error::Dimension(format!(
                "stage with {} values for {} hidden nodes",
                profile.len(),
                cfg.hidden
            )));
        }
        model.profile = profile;
        descend(&mut model, &x, &y, cfg.iterations, cfg.learning_rate)?;
        snapshots.push(model.clone());
    }
    Ok(snapshots)
}

fn descend(model: &mut ShallowModel, x: &Tensor, y: &Tensor, iterations: usize, rate: f64) -> Result<()> {
    match model.base {
        Activation::Linear => descend_linear(model, x, y, iterations, rate),
        _ => descend_pointwise(model, x, y, iterations, rate),
    }
}

// c (r x k) = a (r x t) b (t x k)
fn mul(a: &[f64], b: &[f64], r: usize, t: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; r * k];
    for i in 0..r {
        for j in 0..t {
            let av = a[i * t + j];
            for (cv, bv) in c[i * k..(i + 1) * k].iter_mut().zip(&b[j * k..(j + 1) * k]) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transposed(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

// A linear model only sees the data through its second moments, so each step
// costs O(m n p) regardless of the sample count.
fn descend_linear(model: &mut ShallowModel, x: &Tensor, y: &Tensor, iterations: usize, rate: f64) -> Result<()> {
    let (samples, n, m, p) = (x.rows() as f64, x.cols(), y.cols(), model.hidden());
    let xt = transposed(x.data(), x.rows(), n);
    let yt = transposed(y.data(), y.rows(), m);
    let cxx: Vec<f64> = mul(&xt, x.data(), n, x.rows(), n).iter().map(|v| v / samples).collect();
    let cyx: Vec<f64> = mul(&yt, x.data(), m, y.rows(), n).iter().map(|v| v / samples).collect();
    let tr_yy = y.data().iter().map(|v| v * v).sum::<f64>() / samples;
    let s = model.profile.values().to_vec();

    for iteration in 0..iterations {
        let w1 = model.w1.data();
        let dw1: Vec<f64> = (0..p * n).map(|k| s[k / n] * w1[k]).collect();
        let w2 = match &model.w2 {
            Some(w2) => w2.data().to_vec(),
            None => transposed(w1, p, n),
        };
        let a = mul(&w2, &dw1, m, p, n);
        let acxx = mul(&a, &cxx, m, n, n);
        let mut err = tr_yy;
        for k in 0..m * n {
            err += a[k] * acxx[k] - 2.0 * a[k] * cyx[k];
        }
        if !err.is_finite() {
            return Err(Error::FitDivergence { iteration });
        }
        let g: Vec<f64> = (0..m * n).map(|k| 2.0 * (acxx[k] - cyx[k])).collect();
        match &mut model.w2 {
            None => {
                // dE/dW = D W (G + G^T), one accumulation for both roles.
                let sym: Vec<f64> = (0..n * n).map(|k| g[k] + g[(k % n) * n + k / n]).collect();
                let step = mul(&dw1, &sym, p, n, n);
                for (w, d) in model.w1.data_mut().iter_mut().zip(step) {
                    *w -= rate * d;
                }
            }
            Some(w2m) => {
                // dE/dW2 = G W1^T D, dE/dW1 = D W2^T G.
                let grad2 = mul(&g, &transposed(&dw1, p, n), m, n, p);
                let grad1 = mul(&transposed(&w2, m, p), &g, p, m, n);
                for (w, d) in w2m.data_mut().iter_mut().zip(grad2) {
                    *w -= rate * d;
                }
                for (k, (w, d)) in model.w1.data_mut().iter_mut().zip(grad1).enumerate() {
                    *w -= rate * s[k / n] * d;
                }
            }
        }
    }
    Ok(())
}

fn descend_pointwise(model: &mut ShallowModel, x: &Tensor, y: &Tensor, iterations: usize, rate: f64) -> Result<()> {
    let (samples, n, m, p) = (x.rows(), x.cols(), y.cols(), model.hidden());
    let s = model.profile.values().to_vec();
    let base = model.base;
    let mut u = vec![0.0; p];
    let mut h = vec![0.0; p];
    let mut dh = vec![0.0; p];
    for iteration in 0..iterations {
        let w2 = model.decoder().into_data();
        let mut g1 = vec![0.0; p * n];
        let mut g2 = vec![0.0; m * p];
        let mut err = 0.0;
        for i in 0..samples {
            let xi = x.row(i);
            for j in 0..p {
                u[j] = model.w1.row(j).iter().zip(xi).map(|(w, v)| w * v).sum();
                h[j] = s[j] * base.apply(u[j]);
            }
            dh.fill(0.0);
            for (r, &yr) in y.row(i).iter().enumerate() {
                let row = &w2[r * p..(r + 1) * p];
                let e = row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() - yr;
                err += e * e;
                for j in 0..p {
                    g2[r * p + j] += 2.0 * e * h[j];
                    dh[j] += 2.0 * e * row[j];
                }
            }
            for j in 0..p {
                let d = dh[j] * s[j] * base.derivative(u[j]);
                for (g, v) in g1[j * n..(j + 1) * n].iter_mut().zip(xi) {
                    *g += d * v;
                }
            }
        }
        if !err.is_finite() {
            return Err(Error::FitDivergence { iteration });
        }
        let scale = rate / samples as f64;
        match &mut model.w2 {
            None => {
                // Tied: the decoder gradient lands on w1 transposed.
                for j in 0..p {
                    for c in 0..n {
                        g1[j * n + c] += g2[c * p + j];
                    }
                }
            }
            Some(w2m) => {
                for (w, g) in w2m.data_mut().iter_mut().zip(&g2) {
                    *w -= scale * g;
                }
            }
        }
        for (w, g) in model.w1.data_mut().iter_mut().zip(&g1) {
            *w -= scale * g;
        }
    }
    Ok(())
}

/// Absolute cosines between node weight vectors and covariance eigenvectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `cosines[node][k]` against eigenvector `k` (descending eigenvalue).
    pub cosines: Vec<Vec<f64>>,
    /// Best-matching eigenvector per node; `None` for zero-norm weights.
    pub matched: Vec<Option<usize>>,
    pub zero_norm: Vec<bool>,
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors, one per entry of `eigenvalues`.
    pub eigenvectors: Vec<Vec<f64>>,
}

impl AlignmentReport {
    pub fn cosine(&self, node: usize, eigenvector: usize) -> f64 {
        self.cosines[node][eigenvector]
    }

    /// Whitespace-separated matrices: eigenvectors as columns, then the
    /// normalized node weights as rows of cosines.
    pub fn matrix_dump(&self) -> String {
        let mut out = String::from("# eigenvalues\n");
        let line = |v: &[f64]| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{}", line(&self.eigenvalues));
        out.push_str("# eigenvectors (one per line)\n");
        for v in &self.eigenvectors {
            let _ = writeln!(out, "{}", line(v));
        }
        out.push_str("# |cos| node x eigenvector\n");
        for row in &self.cosines {
            let _ = writeln!(out, "{}", line(row));
        }
        out
    }
}

/// Compares each row of `weights` with the eigenvectors of `covariance`.
pub fn align_report(weights: &Tensor, covariance: &Tensor) -> Result<AlignmentReport> {
    if weights.rank() != 2 {
        return Err(Error::Dimension(format!(
            "weights must be a matrix, got {:?}",
            weights.shape()
        )));
    }
    let n = weights.cols();
    if covariance.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "covariance {:?} for {n}-dimensional weights",
            covariance.shape()
        )));
    }
    let tol = 1e-10 * covariance.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (covariance.get(&[i, j]) - covariance.get(&[j, i])).abs() > tol {
                return Err(Error::Validation("covariance is not symmetric".into()));
            }
        }
    }
    let eig = sym_eig(covariance)?;
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::Validation(format!(
            "covariance is not positive semidefinite (eigenvalue {neg:e})"
        )));
    }
    let eigenvectors: Vec<Vec<f64>> = (0..n).map(|k| eig.vector(k)).collect();
    let mut report = AlignmentReport {
        cosines: Vec::new(),
        matched: Vec::new(),
        zero_norm: Vec::new(),
        eigenvalues: eig.eigenvalues.clone(),
        eigenvectors,
    };
    for i in 0..weights.rows() {
        let w = weights.row(i);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            report.cosines.push(vec![0.0; n]);
            report.matched.push(None);
            report.zero_norm.push(true);
            continue;
        }
        let cos: Vec<f64> = report
            .eigenvectors
            .iter()
            .map(|v| (w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm).abs().min(1.0))
            .collect();
        let best = (0..n).fold(0, |b, k| if cos[k] > cos[b] { k } else { b });
        report.cosines.push(cos);
        report.matched.push(Some(best));
        report.zero_norm.push(false);
    }
    Ok(report)
}

/// Incoming weight vectors of a network layer, one row per node (conv
/// filters flattened).
pub fn layer_weight_rows(net: &Network, layer: usize) -> Result<Tensor> {
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
    Tensor::new(&[w.rows(), w.cols()], w.data().to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub z: Vec<f64>,
    pub residual_norm: f64,
    pub mu: f64,
    /// `||y - W z||_2 + mu ||z||_1` at `z`.
    pub objective: f64,
    /// Objective after each accepted iteration, starting with `z = 0`.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseOptions {
    /// Stop once the relative objective change of a step is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SparseOptions {
    fn default() -> Self {
        SparseOptions {
            tolerance: 1e-8,
            max_iterations: 100_000,
        }
    }
}

/// Default `mu` for [`sparse_decompose`].
pub const DEFAULT_MU: f64 = 0.01;

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Columns of `features` scaled to unit length; zero columns stay zero.
pub fn normalize_columns(features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(Error::Dimension(format!(
            "features must be a matrix, got {:?}",
            features.shape()
        )));
    }
    let (d, n) = (features.rows(), features.cols());
    let mut out = features.clone();
    for c in 0..n {
        let norm = (0..d).map(|r| features.data()[r * n + c].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..d {
                out.data_mut()[r * n + c] /= norm;
            }
        }
    }
    Ok(out)
}

/// Minimizes `||y - W z||_2 + mu ||z||_1` over `z`, where `W` is `features`
/// (`d x n`, one feature per column) with unit-normalized columns.
///
/// Proximal gradient descent with soft-thresholding from `z = 0`. The step
/// is `||r|| / lambda_max(W^T W)`, backtracked if rounding breaks descent.
pub fn sparse_decompose(features: &Tensor, y: &[f64], mu: f64, options: SparseOptions) -> Result<SparseCode> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::Validation(format!(
            "mu must be finite and non-negative, got {mu}"
        )));
    }
    let w = normalize_columns(features)?;
    let (d, n) = (w.rows(), w.cols());
    if y.len() != d {
        return Err(Error::Dimension(format!(
            "sample of length {} for {d}-row features",
            y.len()
        )));
    }
    let residual = |z: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|r| y[r] - w.row(r).iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let l1 = |z: &[f64]| z.iter().map(|v| v.abs()).sum::<f64>();

    let mut z = vec![0.0; n];
    let mut r = y.to_vec();
    let mut f = norm2(&r);
    let mut objective = f;
    let mut history = vec![objective];
    // sqrt(q) <= sqrt(q0) + (q - q0) / (2 sqrt(q0)) makes ||W||^2 / ||r|| a
    // valid local curvature bound, so the step f / lambda majorizes.
    let gram = mul(&transposed(w.data(), d, n), w.data(), n, d, n);
    let lambda = sym_eig(&Tensor::new(&[n, n], gram)?)?.eigenvalues[0];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        if f == 0.0 || lambda <= 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut step = f / lambda;
        let grad: Vec<f64> = (0..n)
            .map(|c| -(0..d).map(|row| w.data()[row * n + c] * r[row]).sum::<f64>() / f)
            .collect();
        let mut accepted = None;
        while step > 1e-300 {
            let cand: Vec<f64> = z
                .iter()
                .zip(&grad)
                .map(|(zv, g)| soft(zv - step * g, step * mu))
                .collect();
            let rc = residual(&cand);
            let fc = norm2(&rc);
            let diff: Vec<f64> = cand.iter().zip(&z).map(|(a, b)| a - b).collect();
            let lin: f64 = grad.iter().zip(&diff).map(|(g, v)| g * v).sum();
            let quad = diff.iter().map(|v| v * v).sum::<f64>() / (2.0 * step);
            if fc <= f + lin + quad + 1e-15 * f.max(1.0) {
                accepted = Some((cand, rc, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, rc, fc)) = accepted else {
            converged = true;
            break;
        };
        let next = fc + mu * l1(&cand);
        if next > objective {
            // No descent left at machine precision.
            converged = true;
            break;
        }
        let change = (objective - next) / objective.max(f64::MIN_POSITIVE);
        z = cand;
        r = rc;
        f = fc;
        objective = next;
        history.push(objective);
        if change <= options.tolerance {
            converged = true;
            break;
        }
    }
    Ok(SparseCode {
        z,
        residual_norm: f,
        mu,
        objective,
        history,
        iterations,
        converged,
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "correlating {} with {} values",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples(a.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(format!(
            "zero variance in {} input",
            if saa == 0.0 { "the first" } else { "the second" }
        )));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation of per-node values with the reversed node index, so values
/// that fall with the index give a positive result.
pub fn index_correlation(values: &[f64]) -> Result<f64> {
    let n = values.len();
    let reversed: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
    pearson(values, &reversed)
}

/// Decoder columns of an auto-associative network: the output layer's
/// weights, one column per node of the last hidden layer.
pub fn decoder_features(net: &Network) -> Result<Tensor> {
    let out = net
        .output_layer()
        .ok_or_else(|| Error::Validation("network has no weighted layer".into()))?;
    match &net.layers[out] {
        Layer::Dense(d) => Ok(d.weights.clone()),
        other => Err(Error::UnsupportedLayer {
            layer: out,
            kind: other.kind_name(),
        }),
    }
}

/// Mean `|z|` per decoder feature over the first `samples` inputs of `data`.
pub fn mean_sparse_weights(net: &Network, data: &Dataset, mu: f64, samples: usize) -> Result<Vec<f64>> {
    check_autoassociative(net, data)?;
    if samples == 0 || data.len() < samples {
        return Err(Error::InsufficientSamples(data.len().min(samples)));
    }
    let features = decoder_features(net)?;
    let mut mean = vec![0.0; features.cols()];
    for i in 0..samples {
        let code = sparse_decompose(&features, data.input_row(i), mu, SparseOptions::default())?;
        for (m, z) in mean.iter_mut().zip(&code.z) {
            *m += z.abs();
        }
    }
    mean.iter_mut().for_each(|m| *m /= samples as f64);
    Ok(mean)
}

/// Increase of the dataset loss when each node of `layer` is removed alone.
pub fn removal_loss_increase(net: &Network, data: &Dataset, layer: usize, kind: LossKind) -> Result<Vec<f64>> {
    let base = evaluate_loss(net, data, kind)?;
    let width = net
        .layers
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} of {}", net.layers.len())))?
        .width();
    (0..width)
        .map(|node| Ok(evaluate_loss(&net.with_node_removed(layer, node)?, data, kind)? - base))
        .collect()
}

/// Minimum sample count averaged by the sparse-weight correlation.
pub const MIN_SPARSE_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum CorrelationMode {
    /// Mean `|z|` over `samples` inputs against the reversed decoder index.
    SparseWeights { mu: f64, samples: usize },
    /// Single-node removal loss increase on `layer` against its reversed index.
    RemovalLoss { layer: usize, loss: LossKind },
}

/// How well node order matches node importance: 1 is perfectly sorted.
pub fn importance_correlation(net: &Network, data: &Dataset, mode: CorrelationMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = match mode {
        CorrelationMode::SparseWeights { mu, samples } => {
            if samples < MIN_SPARSE_SAMPLES {
                return Err(Error::InsufficientSamples(samples));
            }
            mean_sparse_weights(net, data, mu, samples)?
        }
        CorrelationMode::RemovalLoss { layer, loss } => removal_loss_increase(net, data, layer, loss)?,
    };
    index_correlation(&values)
}

fn check_autoassociative(net: &Network, data: &Dataset) -> Result<()> {
    let out = net.output_shape()?;
    let flat_out: usize = out.iter().product();
    let flat_in: usize = net.input_shape.iter().product();
    if flat_out != flat_in || data.sample_shape().iter().product::<usize>() != flat_out {
        return Err(Error::Validation(format!(
            "analysis needs an auto-associative network; input {:?} and output {:?} differ",
            net.input_shape, out
        )));
    }
    Ok(())
}

/// Which hidden nodes a reconstruction keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    FirstP,
    /// A prefix of one fixed random permutation, so the kept sets are nested.
    RandomP {
        seed: u64,
    },
}

/// Reconstruction MSE (mean over every output element) keeping `p` nodes of
/// the last hidden layer for each `p` in `node_counts`. The other nodes are
/// silenced by zeroing their outgoing weights; biases are left alone, so at
/// `p = 0` the output is the decoder bias.
pub fn reconstruction_curve(
    net: &Network,
    data: &Dataset,
    node_counts: &[usize],
    selection: Selection,
) -> Result<Vec<f64>> {
    check_autoassociative(net, data)?;
    let layer = *net
        .hidden_layers()
        .last()
        .ok_or_else(|| Error::Validation("reconstruction needs a hidden layer".into()))?;
    let width = net.layers[layer].width();
    let order: Vec<usize> = match selection {
        Selection::FirstP => (0..width).collect(),
        Selection::RandomP { seed } => Rng::new(seed).permutation(width),
    };
    node_counts
        .iter()
        .map(|&p| {
            if p > width {
                return Err(Error::Index(format!("{p} nodes of a {width}-node layer")));
            }
            let mut copy = net.clone();
            for &node in &order[p..] {
                copy.silence_node(layer, node)?;
            }
            evaluate(&copy, data, Metric::Mse)
        })
        .collect()
}

/// Mean over unordered pairs of the per-layer mean squared weight difference,
/// one entry per weighted layer. Biases are not compared.
pub fn pairwise_weight_mse(nets: &[Network]) -> Result<Vec<f64>> {
    if nets.len() < 2 {
        return Err(Error::InsufficientSamples(nets.len()));
    }
    let layers = nets[0].weighted_layers();
    for net in &nets[1..] {
        if net.weighted_layers() != layers {
            return Err(Error::Dimension("replicas have different layer layouts".into()));
        }
    }
    let mut out = Vec::with_capacity(layers.len());
    for &l in &layers {
        let weights: Vec<&Tensor> = nets.iter().map(|n| n.layers[l].params().unwrap().0).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for a in 0..weights.len() {
            for b in a + 1..weights.len() {
                if weights[a].shape() != weights[b].shape() {
                    return Err(Error::Dimension(format!("layer {l} differs in shape between replicas")));
                }
                let sq: f64 = weights[a]
                    .data()
                    .iter()
                    .zip(weights[b].data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                total += sq / weights[a].len() as f64;
                pairs += 1;
            }
        }
        out.push(total / pairs as f64);
    }
    Ok(out)
}

/// Trains `n_runs` replicas in parallel with `trainer(run)` and reports
/// [`pairwise_weight_mse`]. The trainer decides what varies between runs
/// (initialization seed, resampled data).
pub fn repeatability<F>(n_runs: usize, trainer: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<Network> + Sync,
{
    if n_runs < 2 {
        return Err(Error::InsufficientSamples(n_runs));
    }
    let nets: Vec<Result<Network>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_runs)
            .map(|run| {
                let trainer = &trainer;
                scope.spawn(move || trainer(run))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Validation("replica trainer panicked".into())))
            })
            .collect()
    });
    let nets = nets.into_iter().collect::<Result<Vec<_>>>()?;
    pairwise_weight_mse(&nets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{alignment_covariance, gaussian_correlated};
    use crate::network::{Dense, NetworkSpec, ProfileSpec, Schedule};

    fn heterogeneous(k: i32) -> SensitivityProfile {
        SensitivityProfile::explicit(vec![1.0, 0.5f64.powi(k), 0.25f64.powi(k), 0.125f64.powi(k)]).unwrap()
    }

    #[test]
    fn one_dimensional_direction() {
        let x = Tensor::new(&[50, 1], (0..50).map(|i| (i as f64 - 25.0) / 10.0).collect()).unwrap();
        let data = Dataset::autoassociative(x, "line").unwrap();
        let cfg = ShallowConfig {
            hidden: 1,
            iterations: 5_000,
            ..ShallowConfig::default()
        };
        let m = fit_shallow(&data, &cfg, &SensitivityProfile::flat(1), 3).unwrap();
        assert!((m.w1.data()[0].abs() - 1.0).abs() < 1e-6);
        assert!(m.error(&data).unwrap() < 1e-10);
    }

    #[test]
    fn gaussian_alignment_heterogeneous() {
        let cov = alignment_covariance();
        let data = gaussian_correlated(2048, &cov, 11).unwrap();
        let m = fit_shallow(&data, &ShallowConfig::default(), &heterogeneous(8), 5).unwrap();
        let rep = align_report(&m.w1, &cov).unwrap();
        assert!(rep.cosine(0, 0) >= 0.95, "{rep:?}");
        assert!(rep.cosine(1, 1) >= 0.95, "{rep:?}");
    }

    #[test]
    fn staged_alignment() {
        let cov = alignment_covariance();
        let data = gaussian_correlated(2048, &cov, 2).unwrap();
        let eps = 1e-8;
        let stages = vec![vec![1.0, eps, eps, eps], vec![1.0, 1.0, eps, eps]];
        let cfg = ShallowConfig {
            iterations: 20_000,
            ..ShallowConfig::default()
        };
        let snaps = staged_fit(&data, &cfg, &stages, 9).unwrap();
        let first = align_report(&snaps[0].w1, &cov).unwrap();
        let second = align_report(&snaps[1].w1, &cov).unwrap();
        assert!(first.cosine(0, 0) >= 0.95, "{first:?}");
        assert!(second.cosine(0, 0) >= 0.95, "{second:?}");
        assert!(second.cosine(1, 1) >= 0.95, "{second:?}");
    }

    #[test]
    fn rank_one_second_stage_only_lowers_error() {
        let x = Tensor::new(&[40, 2], (0..40).flat_map(|i| [i as f64 / 20.0 - 1.0, 0.0]).collect()).unwrap();
        let data = Dataset::autoassociative(x, "rank1").unwrap();
        let cfg = ShallowConfig {
            hidden: 2,
            iterations: 5_000,
            ..ShallowConfig::default()
        };
        let snaps = staged_fit(&data, &cfg, &[vec![1.0, 1e-8], vec![1.0, 1.0]], 4).unwrap();
        assert!(snaps[1].error(&data).unwrap() <= snaps[0].error(&data).unwrap());
    }

    #[test]
    fn untied_and_relu_fits_reduce_error() {
        let cov = alignment_covariance();
        let data = gaussian_correlated(256, &cov, 1).unwrap();
        let profile = heterogeneous(2);
        for (tied, base) in [
            (false, Activation::Linear),
            (true, Activation::Relu),
            (false, Activation::Relu),
        ] {
            let cfg = ShallowConfig {
                tied,
                base,
                iterations: 300,
                learning_rate: 0.02,
                init_scale: 0.1,
                hidden: 4,
            };
            let start = init_model(&cfg, 3, 3, profile.clone(), 6)
                .unwrap()
                .error(&data)
                .unwrap();
            let fitted = fit_shallow(&data, &cfg, &profile, 6).unwrap().error(&data).unwrap();
            assert!(fitted < start, "{tied} {base:?}: {fitted} !< {start}");
        }
    }

    #[test]
    fn linear_fast_path_matches_pointwise_gradient() {
        let cov = alignment_covariance();
        let data = gaussian_correlated(64, &cov, 3).unwrap();
        let (x, y) = shallow_matrices(&data).unwrap();
        for tied in [true, false] {
            let cfg = ShallowConfig {
                tied,
                init_scale: 0.5,
                ..ShallowConfig::default()
            };
            let start = init_model(&cfg, 3, 3, heterogeneous(1), 8).unwrap();
            let (mut a, mut b) = (start.clone(), start);
            descend_linear(&mut a, &x, &y, 3, 0.01).unwrap();
            descend_pointwise(&mut b, &x, &y, 3, 0.01).unwrap();
            for (p, q) in a.w1.data().iter().zip(b.w1.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_reports_iteration() {
        let data = gaussian_correlated(32, &alignment_covariance(), 0).unwrap();
        let cfg = ShallowConfig {
            learning_rate: 1e3,
            init_scale: 1.0,
            iterations: 1_000,
            ..ShallowConfig::default()
        };
        let err = fit_shallow(&data, &cfg, &SensitivityProfile::flat(4), 0).unwrap_err();
        assert!(matches!(err, Error::FitDivergence { .. }));
    }

    #[test]
    fn shallow_preconditions() {
        let one = Dataset::autoassociative(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), "one").unwrap();
        assert!(matches!(
            fit_shallow(&one, &ShallowConfig::default(), &SensitivityProfile::flat(4), 0),
            Err(Error::InsufficientSamples(1))
        ));
        let cfg = ShallowConfig {
            base: Activation::Tanh,
            ..ShallowConfig::default()
        };
        let data = gaussian_correlated(8, &alignment_covariance(), 0).unwrap();
        assert!(fit_shallow(&data, &cfg, &SensitivityProfile::flat(4), 0).is_err());
    }

    #[test]
    fn alignment_trivial_cases() {
        let cov = alignment_covariance();
        let eig = sym_eig(&cov).unwrap();
        let w = Tensor::from_rows(&[eig.vector(0), vec![0.0; 3]]).unwrap();
        let rep = align_report(&w, &cov).unwrap();
        assert!((rep.cosine(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(rep.matched, vec![Some(0), None]);
        assert_eq!(rep.zero_norm, vec![false, true]);

        let diag = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let rep = align_report(&Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap(), &diag).unwrap();
        assert_eq!(rep.cosine(0, 0), 0.0);
        assert!(rep.matrix_dump().contains("# eigenvectors"));
    }

    #[test]
    fn alignment_matches_dot_products() {
        let mut rng = Rng::new(21);
        let b: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let mut c = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                c[i * 4 + j] = (0..4).map(|k| b[i * 4 + k] * b[j * 4 + k]).sum();
            }
        }
        let cov = Tensor::new(&[4, 4], c).unwrap();
        let w = Tensor::new(&[3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let rep = align_report(&w, &cov).unwrap();
        let eig = sym_eig(&cov).unwrap();
        for i in 0..3 {
            let row = w.row(i);
            let norm = norm2(row);
            for k in 0..4 {
                let v = eig.vector(k);
                let expect = (row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / norm).abs();
                assert!((rep.cosine(i, k) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alignment_rejects_bad_covariance() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let asym = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(align_report(&w, &asym), Err(Error::Validation(_))));
        let indefinite = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(align_report(&w, &indefinite), Err(Error::Validation(_))));
    }

    #[test]
    fn sparse_orthonormal_projection() {
        // Columns e0, e1 scaled by 3: normalization recovers an orthonormal pair.
        let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let y = [0.7, -1.2, 0.4];
        let code = sparse_decompose(&w, &y, 0.0, SparseOptions::default()).unwrap();
        assert!(code.converged);
        assert!((code.z[0] - 0.7).abs() <= 1e-8, "{:?}", code.z);
        assert!((code.z[1] + 1.2).abs() <= 1e-8, "{:?}", code.z);
        assert!((code.residual_norm - 0.4).abs() <= 1e-8);
    }

    #[test]
    fn sparse_large_mu_gives_zero() {
        let mut rng = Rng::new(3);
        let w = Tensor::new(&[6, 3], (0..18).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let code = sparse_decompose(&w, &y, 1.0, SparseOptions::default()).unwrap();
        assert!(code.z.iter().all(|&v| v == 0.0));
        assert_eq!(code.objective, norm2(&y));
    }

    #[test]
    fn sparse_objective_never_rises() {
        let mut rng = Rng::new(8);
        let w = Tensor::new(&[10, 4], (0..40).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let code = sparse_decompose(&w, &y, 0.01, SparseOptions::default()).unwrap();
        assert!(code.converged);
        assert!(code.history.windows(2).all(|p| p[1] <= p[0]));
        assert!(code.objective <= norm2(&y));
    }

    #[test]
    fn sparse_zero_column_and_cap() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let code = sparse_decompose(&w, &[1.0, 2.0], 0.0, SparseOptions::default()).unwrap();
        assert_eq!(code.z[1], 0.0);
        let capped = sparse_decompose(
            &w,
            &[1.0, 2.0],
            0.0,
            SparseOptions {
                tolerance: 0.0,
                max_iterations: 1,
            },
        )
        .unwrap();
        assert!(!capped.converged);
        assert_eq!(capped.iterations, 1);
        assert!(sparse_decompose(&w, &[1.0], 0.0, SparseOptions::default()).is_err());
        assert!(sparse_decompose(&w, &[1.0, 2.0], -1.0, SparseOptions::default()).is_err());
    }

    #[test]
    fn correlation_examples() {
        assert!((index_correlation(&[4.0, 3.0, 2.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((index_correlation(&[1.0, 2.0, 3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            index_correlation(&[2.0; 5]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::InsufficientSamples(1))));
    }

    fn linear_autoencoder(seed: u64) -> Network {
        let mut net = NetworkSpec::autoencoder(6, 3, Activation::Linear)
            .build(&ProfileSpec::new(Schedule::Linear), &mut Rng::new(seed))
            .unwrap();
        for l in net.weighted_layers() {
            if let Layer::Dense(Dense { bias, .. }) = &mut net.layers[l] {
                bias.fill(0.0);
            }
        }
        net
    }

    fn small_images(seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        Dataset::autoassociative(
            Tensor::new(&[20, 6], (0..120).map(|_| rng.normal()).collect()).unwrap(),
            "x",
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_endpoints() {
        let net = linear_autoencoder(1);
        let data = small_images(2);
        let curve = reconstruction_curve(&net, &data, &[0, 3], Selection::FirstP).unwrap();
        let mean_sq = data.inputs.data().iter().map(|v| v * v).sum::<f64>() / data.inputs.len() as f64;
        assert!((curve[0] - mean_sq).abs() < 1e-12);
        assert_eq!(curve[1], evaluate(&net, &data, Metric::Mse).unwrap());
        assert!(matches!(
            reconstruction_curve(&net, &data, &[4], Selection::FirstP),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn reconstruction_matches_copy_and_zero() {
        let net = linear_autoencoder(4);
        let data = small_images(5);
        let curve = reconstruction_curve(&net, &data, &[1, 2], Selection::FirstP).unwrap();
        for (k, &p) in [1usize, 2].iter().enumerate() {
            let mut copy = net.clone();
            if let Layer::Dense(d) = &mut copy.layers[1] {
                for r in 0..6 {
                    for c in p..3 {
                        d.weights.set(&[r, c], 0.0);
                    }
                }
            }
            assert_eq!(curve[k], evaluate(&copy, &data, Metric::Mse).unwrap());
        }
        let random = reconstruction_curve(&net, &data, &[0, 3], Selection::RandomP { seed: 1 }).unwrap();
        assert_eq!(random[1], evaluate(&net, &data, Metric::Mse).unwrap());
    }

    #[test]
    fn reconstruction_needs_autoassociation() {
        let net = NetworkSpec::lenet_desk()
            .build(&ProfileSpec::flat(), &mut Rng::new(0))
            .unwrap();
        let data = Dataset::autoassociative(Tensor::zeros(&[2, 1, 28, 28]), "z").unwrap();
        assert!(matches!(
            reconstruction_curve(&net, &data, &[1], Selection::FirstP),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn pairwise_mse_double_loop() {
        let nets: Vec<Network> = (0..4).map(linear_autoencoder).collect();
        let got = pairwise_weight_mse(&nets).unwrap();
        for (k, &l) in nets[0].weighted_layers().iter().enumerate() {
            let mut sum = 0.0;
            let mut count = 0.0;
            for a in &nets {
                for b in &nets {
                    let (wa, wb) = (a.layers[l].params().unwrap().0, b.layers[l].params().unwrap().0);
                    let mse = wa
                        .data()
                        .iter()
                        .zip(wb.data())
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        / wa.len() as f64;
                    sum += mse;
                    count += 1.0;
                }
            }
            // Ordered pairs count each unordered pair twice plus zero diagonals.
            let expect = sum / (count - 4.0);
            assert!((got[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_replicas_have_zero_spread() {
        let spread = repeatability(3, |_| Ok(linear_autoencoder(7))).unwrap();
        assert!(spread.iter().all(|&v| v == 0.0));
        assert!(repeatability(1, |_| Ok(linear_autoencoder(7))).is_err());
        let failing = repeatability(2, |run| {
            if run == 1 {
                Err(Error::EmptyDataset)
            } else {
                Ok(linear_autoencoder(0))
            }
        });
        assert!(matches!(failing, Err(Error::EmptyDataset)));
    }

    #[test]
    fn removal_loss_of_dead_node_is_zero() {
        let mut net = linear_autoencoder(3);
        net.silence_node(0, 2).unwrap();
        let data = small_images(1);
        let inc = removal_loss_increase(&net, &data, 0, LossKind::Mse).unwrap();
        assert_eq!(inc[2], 0.0);
        assert!(inc[0] != 0.0);
    }
}
