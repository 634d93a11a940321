//! Binary model files.
//!
//! Layout, all little-endian: magic `ASYM`, `u32` version, `u32` input rank
//! and extents, `u32` layer count, then per layer a `u8` kind (0 dense,
//! 1 conv, 2 maxpool, 3 flatten). Weighted layers continue with `u8`
//! activation, `u8` schedule, conv only a `u8` padding, `u32` weight extents,
//! then profile values, weights and biases as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Conv2d, Dense, Layer, Network, Schedule, SensitivityProfile};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"ASYM";
pub const MODEL_VERSION: u32 = 1;

const MAX_EXTENT: u32 = 1 << 28;

pub fn write_model<W: Write>(net: &Network, mut w: W) -> std::io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    put_u32(&mut w, MODEL_VERSION)?;
    put_u32(&mut w, net.input_shape.len() as u32)?;
    for &e in &net.input_shape {
        put_u32(&mut w, e as u32)?;
    }
    put_u32(&mut w, net.layers.len() as u32)?;
    for layer in &net.layers {
        match layer {
            Layer::Dense(d) => {
                w.write_all(&[0, d.activation.code(), d.profile.schedule().code()])?;
                put_weighted(&mut w, &d.weights, &d.profile, &d.bias)?;
            }
            Layer::Conv2d(c) => {
                let pad = match c.padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                };
                w.write_all(&[1, c.activation.code(), c.profile.schedule().code(), pad])?;
                put_weighted(&mut w, &c.filters, &c.profile, &c.bias)?;
            }
            Layer::MaxPool => w.write_all(&[2])?,
            Layer::Flatten => w.write_all(&[3])?,
        }
    }
    w.flush()
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_weighted<W: Write>(w: &mut W, t: &Tensor, p: &SensitivityProfile, b: &[f64]) -> std::io::Result<()> {
    for &e in t.shape() {
        put_u32(w, e as u32)?;
    }
    put_f64s(w, p.values())?;
    put_f64s(w, t.data())?;
    put_f64s(w, b)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Format {
            what: "model file",
            detail: format!("truncated while reading {what}: {e}"),
        })?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn extent(&mut self, what: &str) -> Result<usize> {
        let v = self.u32(what)?;
        if v == 0 || v > MAX_EXTENT {
            return Err(bad(format!("{what} = {v}")));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes::<8>(what)?))).collect()
    }
}

fn bad(detail: String) -> Error {
    Error::Format {
        what: "model file",
        detail,
    }
}

pub fn read_model<R: Read>(r: R) -> Result<Network> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>("magic")? != MODEL_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Version(version));
    }
    let rank = r.u32("input rank")?;
    if rank == 0 || rank > 8 {
        return Err(bad(format!("input rank {rank}")));
    }
    let input_shape = (0..rank)
        .map(|_| r.extent("input extent"))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u32("layer count")?;
    let mut layers = Vec::new();
    for l in 0..count {
        let kind = r.u8("layer kind")?;
        let layer = match kind {
            0 | 1 => {
                let act = r.u8("activation")?;
                let activation =
                    Activation::from_code(act).ok_or_else(|| bad(format!("layer {l}: activation code {act}")))?;
                let sch = r.u8("schedule")?;
                let schedule =
                    Schedule::from_code(sch).ok_or_else(|| bad(format!("layer {l}: schedule code {sch}")))?;
                let padding = if kind == 1 {
                    match r.u8("padding")? {
                        0 => Some(Padding::Valid),
                        1 => Some(Padding::Same),
                        p => return Err(bad(format!("layer {l}: padding code {p}"))),
                    }
                } else {
                    None
                };
                let rank = if kind == 0 { 2 } else { 4 };
                let shape = (0..rank)
                    .map(|_| r.extent("weight extent"))
                    .collect::<Result<Vec<_>>>()?;
                let n_out = shape[0];
                let len: usize = shape.iter().product();
                let values = r.f64s(n_out, "profile")?;
                let profile =
                    SensitivityProfile::from_parts(values, schedule).map_err(|e| bad(format!("layer {l}: {e}")))?;
                let weights = Tensor::new(&shape, r.f64s(len, "weights")?)?;
                let bias = r.f64s(n_out, "bias")?;
                match padding {
                    None => Layer::Dense(Dense {
                        weights,
                        bias,
                        profile,
                        activation,
                    }),
                    Some(padding) => Layer::Conv2d(Conv2d {
                        filters: weights,
                        bias,
                        profile,
                        activation,
                        padding,
                    }),
                }
            }
            2 => Layer::MaxPool,
            3 => Layer::Flatten,
            k => return Err(bad(format!("layer {l}: kind code {k}"))),
        };
        layers.push(layer);
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last layer".into()));
    }
    Network::new(input_shape, layers)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(net, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(file))
}
