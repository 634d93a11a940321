//! Datasets: a correlated Gaussian sampler, MNIST IDX and CIFAR-10 binary
//! readers, seeded splits and a binary cache format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::eigen::sym_eig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CACHE_MAGIC: &[u8; 4] = b"ASDS";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x ...sample shape`
    pub inputs: Tensor,
    /// `N x ...target shape`: one-hot rows for classification, a copy of the
    /// inputs for auto-association.
    pub targets: Tensor,
    pub tag: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor, tag: impl Into<String>) -> Result<Self> {
        if inputs.rank() < 2 || targets.rank() < 2 || inputs.shape()[0] != targets.shape()[0] {
            return Err(Error::Dimension(format!(
                "inputs {:?} and targets {:?} must share a leading sample axis",
                inputs.shape(),
                targets.shape()
            )));
        }
        Ok(Dataset {
            inputs,
            targets,
            tag: tag.into(),
        })
    }

    /// An auto-associative dataset whose targets equal its inputs.
    pub fn autoassociative(inputs: Tensor, tag: impl Into<String>) -> Result<Self> {
        let targets = inputs.clone();
        Self::new(inputs, targets, tag)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.targets.shape()[1..]
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        let k = self.inputs.len() / self.len();
        &self.inputs.data()[i * k..(i + 1) * k]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        let k = self.targets.len() / self.len();
        &self.targets.data()[i * k..(i + 1) * k]
    }

    /// Inputs and targets of the given samples, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        (gather(&self.inputs, indices), gather(&self.targets, indices))
    }

    pub fn subset(&self, indices: &[usize], tag: impl Into<String>) -> Dataset {
        let (inputs, targets) = self.batch(indices);
        Dataset {
            inputs,
            targets,
            tag: tag.into(),
        }
    }

    /// The first `n` samples after a seeded shuffle.
    pub fn take_shuffled(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(Error::Validation(format!("cannot take {n} of {} samples", self.len())));
        }
        let perm = Rng::new(seed).permutation(self.len());
        Ok(self.subset(&perm[..n], self.tag.clone()))
    }

    /// Flattens every sample (and target) to a vector.
    pub fn flattened(&self) -> Dataset {
        let n = self.len();
        let flat = |t: &Tensor| {
            t.clone()
                .reshape(&[n, t.len() / n])
                .expect("element count is preserved")
        };
        Dataset {
            inputs: flat(&self.inputs),
            targets: flat(&self.targets),
            tag: self.tag.clone(),
        }
    }

    /// Class index per sample (argmax of the target row, first on ties).
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.target_row(i))).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn gather(t: &Tensor, indices: &[usize]) -> Tensor {
    let n = t.shape()[0];
    let k = t.len() / n;
    let mut data = Vec::with_capacity(indices.len() * k);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * k..(i + 1) * k]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    if indices.is_empty() {
        // Tensors have positive extents; an empty gather keeps one zero row.
        shape[0] = 1;
        data = vec![0.0; k];
    }
    Tensor::new(&shape, data).expect("gathered rows match the shape")
}

/// `n_samples` zero-mean Gaussian samples with the given covariance.
///
/// Samples are `L z` where `L = V sqrt(Lambda)` comes from the eigendecomposition
/// of the covariance and `z` holds Box-Muller standard normals. Targets equal inputs.
pub fn gaussian_correlated(n_samples: usize, covariance: &Tensor, seed: u64) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let eig = sym_eig(covariance)?;
    let d = eig.eigenvalues.len();
    let tol = 1e-10 * covariance.max_abs().max(1.0);
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::Validation(format!(
            "covariance is not positive semidefinite (eigenvalue {neg:e})"
        )));
    }
    let mut factor = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            factor[r * d + c] = eig.eigenvectors.get(&[r, c]) * eig.eigenvalues[c].max(0.0).sqrt();
        }
    }
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0; n_samples * d];
    let mut z = vec![0.0; d];
    for row in data.chunks_mut(d) {
        z.iter_mut().for_each(|v| *v = rng.normal());
        for (r, out) in row.iter_mut().enumerate() {
            *out = factor[r * d..(r + 1) * d].iter().zip(&z).map(|(a, b)| a * b).sum();
        }
    }
    Dataset::autoassociative(Tensor::new(&[n_samples, d], data)?, "gaussian")
}

/// The correlated three-dimensional covariance used for the eigen-alignment
/// experiments: unit variances with 0.9 correlation on the first two axes and
/// standard deviation 0.01 on the third.
pub fn alignment_covariance() -> Tensor {
    Tensor::from_rows(&[vec![1.0, 0.9, 0.0], vec![0.9, 1.0, 0.0], vec![0.0, 0.0, 1e-4]]).expect("fixed 3x3 matrix")
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            what,
            detail: "truncated header".into(),
        })
}

/// Parses IDX image bytes into `N x 1 x rows x cols` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "IDX image file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let len = n * rows * cols;
    let body = &bytes[16..];
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("zero extent in {n}x{rows}x{cols}"),
        });
    }
    if body.len() != len {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("{} pixel bytes for {n}x{rows}x{cols}", body.len()),
        });
    }
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[n, 1, rows, cols], data)
}

/// Parses IDX label bytes into class indices `0..=9`.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const WHAT: &str = "IDX label file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            what: WHAT,
            detail: format!("{} label bytes for {n} labels", body.len()),
        });
    }
    body.iter()
        .enumerate()
        .map(|(i, &b)| {
            if b > 9 {
                Err(Error::Format {
                    what: WHAT,
                    detail: format!("label {b} at index {i} is outside 0..=9"),
                })
            } else {
                Ok(b as usize)
            }
        })
        .collect()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Index(format!("label {l} for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Loads an MNIST-style IDX image/label pair (gzip is detected automatically).
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gz(images.as_ref())?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels.as_ref())?)?;
    if x.shape()[0] != y.len() {
        return Err(Error::Format {
            what: "IDX pair",
            detail: format!("{} images but {} labels", x.shape()[0], y.len()),
        });
    }
    Dataset::new(x, one_hot(&y, 10)?, "mnist")
}

/// Parses CIFAR-10 binary records (label byte then 3072 channel-major pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            what: "CIFAR-10 batch",
            detail: format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format {
                what: "CIFAR-10 batch",
                detail: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Tensor::new(&[n, 3, 32, 32], pixels)?, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (x, y) = parse_cifar10(&read_maybe_gz(p.as_ref())?)?;
        pixels.extend_from_slice(x.data());
        labels.extend(y);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = Tensor::new(&[labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(x, one_hot(&labels, 10)?, "cifar10")
}

/// Seeded shuffled partition into parts of the given fractions. Part sizes
/// are `floor(f * N)`, with the rounding remainder going to the last part.
pub fn split(data: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be in (0, 1] and sum to 1"
        )));
    }
    let n = data.len();
    let perm = Rng::new(seed).permutation(n);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let size = if k + 1 == fractions.len() {
            n - start
        } else {
            (f * n as f64).floor() as usize
        };
        if size == 0 {
            return Err(Error::Validation(format!(
                "split part {k} would be empty ({n} samples)"
            )));
        }
        parts.push(data.subset(&perm[start..start + size], format!("{}[{k}]", data.tag)));
        start += size;
    }
    Ok(parts)
}

pub fn write_cache<W: Write>(data: &Dataset, mut w: W) -> std::io::Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(data.tag.len() as u32).to_le_bytes())?;
    w.write_all(data.tag.as_bytes())?;
    for t in [&data.inputs, &data.targets] {
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_cache<R: Read>(mut r: R) -> Result<Dataset> {
    let bad = |detail: String| Error::Format {
        what: "dataset cache",
        detail,
    };
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| bad(e.to_string()))?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(at..at + n).ok_or_else(|| bad("truncated".into()))?;
        at += n;
        Ok(s)
    };
    if take(4)? != CACHE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Version(version));
    }
    let tag_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let tag = String::from_utf8(take(tag_len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
    let mut tensors = Vec::new();
    for _ in 0..2 {
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| bad("extent overflow".into()))?;
        let raw = take(len.checked_mul(8).ok_or_else(|| bad("extent overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if at != buf.len() {
        return Err(bad("trailing bytes".into()));
    }
    let targets = tensors.pop().unwrap();
    let inputs = tensors.pop().unwrap();
    Dataset::new(inputs, targets, tag)
}

pub fn save_cache(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_cache(data, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cache(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::covariance;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn zero_covariance_gives_zero_samples() {
        let d = gaussian_correlated(50, &Tensor::zeros(&[3, 3]), 1).unwrap();
        assert!(d.inputs.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.inputs, d.targets);
    }

    #[test]
    fn alignment_data_correlation() {
        let d = gaussian_correlated(2048, &alignment_covariance(), 7).unwrap();
        let c = covariance(&d.inputs).unwrap();
        let r = c.get(&[0, 1]) / (c.get(&[0, 0]) * c.get(&[1, 1])).sqrt();
        assert!((0.85..=0.95).contains(&r), "{r}");
        assert!((c.get(&[0, 1]) - 0.9).abs() <= 0.05);
    }

    #[test]
    fn large_sample_covariance_and_mean() {
        let cov = alignment_covariance();
        let n = 100_000;
        let d = gaussian_correlated(n, &cov, 99).unwrap();
        let c = covariance(&d.inputs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.get(&[i, j]) - cov.get(&[i, j])).abs() <= 0.02);
            }
            let mean: f64 = (0..n).map(|k| d.inputs.get(&[k, i])).sum::<f64>() / n as f64;
            let sigma = cov.get(&[i, i]).sqrt();
            assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt());
        }
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(gaussian_correlated(10, &c, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn idx_single_pixel_fixture() {
        let x = parse_idx_images(&idx_images(1, 1, 1, &[255])).unwrap();
        assert_eq!(x.shape(), &[1, 1, 1, 1]);
        assert_eq!(x.data(), &[1.0]);
    }

    #[test]
    fn idx_errors() {
        let mut b = idx_images(1, 2, 2, &[0, 1, 2, 3]);
        b[3] = 0x01;
        assert!(parse_idx_images(&b).is_err());
        assert!(parse_idx_images(&idx_images(1, 2, 2, &[0, 1, 2])).is_err());
        let mut l = Vec::new();
        l.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        l.extend_from_slice(&2u32.to_be_bytes());
        l.extend_from_slice(&[3, 10]);
        assert!(parse_idx_labels(&l).is_err());
        l[9] = 9;
        assert_eq!(parse_idx_labels(&l).unwrap(), vec![3, 9]);
    }

    #[test]
    fn cifar_single_record() {
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 7;
        rec[1] = 255;
        rec[2] = 51;
        let (x, y) = parse_cifar10(&rec).unwrap();
        assert_eq!(y, vec![7]);
        assert_eq!(x.data()[0], 1.0);
        assert_eq!(x.data()[1], 0.2);
        assert!(parse_cifar10(&rec[..CIFAR_RECORD - 1]).is_err());
    }

    #[test]
    fn split_cases() {
        let x = Tensor::new(&[10, 2], (0..20).map(|v| v as f64).collect()).unwrap();
        let d = Dataset::autoassociative(x, "toy").unwrap();
        let whole = split(&d, &[1.0], 3).unwrap();
        assert_eq!(whole.len(), 1);
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| whole[0].input_row(i).to_vec()).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, (0..10).map(|i| d.input_row(i).to_vec()).collect::<Vec<_>>());
        let halves = split(&d, &[0.5, 0.5], 3).unwrap();
        assert_eq!((halves[0].len(), halves[1].len()), (5, 5));
        let mut seen: Vec<f64> = halves.iter().flat_map(|h| (0..5).map(|i| h.input_row(i)[0])).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|v| (2 * v) as f64).collect::<Vec<_>>());
        assert!(split(&d, &[0.5, 0.6], 3).is_err());
        assert_eq!(split(&d, &[0.3, 0.7], 11).unwrap(), split(&d, &[0.3, 0.7], 11).unwrap());
    }

    #[test]
    fn cache_round_trip() {
        let d = gaussian_correlated(33, &alignment_covariance(), 5).unwrap();
        let mut bytes = Vec::new();
        write_cache(&d, &mut bytes).unwrap();
        let back = read_cache(bytes.as_slice()).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.inputs.data().iter().zip(d.inputs.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(read_cache(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let t = one_hot(&[0, 3, 9], 10).unwrap();
        for i in 0..3 {
            assert_eq!(t.row(i).iter().sum::<f64>(), 1.0);
        }
        assert!(one_hot(&[10], 10).is_err());
    }
}
