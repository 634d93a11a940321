//! Dense row-major `f64` tensors and the numeric kernels the networks use.
//!
//! Convolution is cross-correlation (no kernel flip), as in every mainstream
//! deep learning toolkit. All reductions sum in ascending index order starting
//! from `0.0`, so results are reproducible bit-for-bit and match naive loops.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(&[r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            acc * e + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Row `i` of a matrix (or of the leading axis in general).
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        transpose_into(&self.data, r, c, &mut out);
        Tensor::new(&[c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
///
/// Every output element accumulates its `k` products in ascending order.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                // 0 * finite adds +0.0, which never changes a partial sum except -0.0 + 0.0.
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!("matmul of {:?} and {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = vec![0.0; m * n];
    gemm_exact(m, k, n, &a.data, &b.data, &mut c);
    Tensor::new(&[m, n], c)
}

// Public matmul must not skip zero products: 0 * inf is NaN and the caller
// may rely on IEEE propagation.
fn gemm_exact(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            for (cv, &bv) in c_row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Geometry of a 2-D convolution over one `C x H x W` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> Result<Self> {
        match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Dimension(format!(
                        "{kh}x{kw} kernel larger than {h}x{w} input under valid padding"
                    )));
                }
                Ok(ConvGeometry {
                    c_in,
                    h,
                    w,
                    kh,
                    kw,
                    pad_h: 0,
                    pad_w: 0,
                    out_h: h - kh + 1,
                    out_w: w - kw + 1,
                })
            }
            Padding::Same => {
                if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
                    return Err(Error::Dimension(format!(
                        "same padding needs odd kernel extents, got {kh}x{kw}"
                    )));
                }
                Ok(ConvGeometry {
                    c_in,
                    h,
                    w,
                    kh,
                    kw,
                    pad_h: kh / 2,
                    pad_w: kw / 2,
                    out_h: h,
                    out_w: w,
                })
            }
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one sample into a `patch_len x out_len` matrix (zero padded).
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.out_len();
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy + ky) as isize - self.pad_h as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - self.pad_w as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back
    /// onto the input, accumulating into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.out_len();
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.out_w {
                            let ix = (ox + kx) as isize - self.pad_w as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a `C_in x H x W` input with `C_out x C_in x kh x kw` filters.
pub fn conv2d(input: &Tensor, filters: &Tensor, padding: Padding) -> Result<Tensor> {
    if input.rank() != 3 || filters.rank() != 4 || input.shape[0] != filters.shape[1] {
        return Err(Error::Dimension(format!(
            "conv2d of input {:?} with filters {:?}",
            input.shape, filters.shape
        )));
    }
    let (c_out, kh, kw) = (filters.shape[0], filters.shape[2], filters.shape[3]);
    let g = ConvGeometry::new(input.shape[0], input.shape[1], input.shape[2], kh, kw, padding)?;
    let mut cols = vec![0.0; g.patch_len() * g.out_len()];
    g.im2col(&input.data, &mut cols);
    let mut out = vec![0.0; c_out * g.out_len()];
    gemm_exact(c_out, g.patch_len(), g.out_len(), &filters.data, &cols, &mut out);
    Tensor::new(&[c_out, g.out_h, g.out_w], out)
}

/// Winner positions of a 2x2/stride-2 max pool: for each output element, the
/// flat index of the selected input element within the same sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndex(pub Vec<usize>);

pub(crate) fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 max pool with stride 2 over each `C x H x W` channel, writing into
/// `out` and the winner map into `index`. Odd extents are padded with `-inf`
/// on the bottom/right; ties go to the first element in row-major order.
pub(crate) fn maxpool_into(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], index: &mut [usize]) {
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for dy in 0..2 {
                    let iy = 2 * oy + dy;
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let ix = 2 * ox + dx;
                        if ix >= w {
                            continue;
                        }
                        let at = base + iy * w + ix;
                        if best_at == usize::MAX || x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                index[o] = best_at;
            }
        }
    }
}

pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, PoolIndex)> {
    if input.rank() != 3 {
        return Err(Error::Dimension(format!(
            "maxpool2d needs C x H x W, got {:?}",
            input.shape
        )));
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let mut out = vec![0.0; c * oh * ow];
    let mut index = vec![0; c * oh * ow];
    maxpool_into(&input.data, c, h, w, &mut out, &mut index);
    Ok((Tensor::new(&[c, oh, ow], out)?, PoolIndex(index)))
}

/// Unbiased sample covariance of the rows of an `N x d` matrix.
pub fn covariance(samples: &Tensor) -> Result<Tensor> {
    if samples.rank() != 2 {
        return Err(Error::Dimension(format!(
            "covariance needs N x d samples, got {:?}",
            samples.shape
        )));
    }
    let (n, d) = (samples.shape[0], samples.shape[1]);
    if n < 2 {
        return Err(Error::InsufficientSamples(n));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(samples.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let norm = 1.0 / (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] * norm;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Tensor::new(&[d, d], cov)
}
