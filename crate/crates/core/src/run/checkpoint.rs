//! Binary checkpoint: `VCK1` magic, little-endian `u32` layer count, the
//! `count + 1` layer widths as `u32`, the current epsilon as `f64`, then for
//! every layer its weight matrix (row-major, `out × in`) and bias as `f64`.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::encoder::{DenseLayer, MlpEncoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: MlpEncoder,
    pub epsilon: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.encoder.layer_dims();
        let mut out = Vec::with_capacity(16 + 8 * self.encoder.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.encoder.layers().len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        for layer in self.encoder.layers() {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = Reader { bytes, pos: 0 };
        if reader.take(4)? != MAGIC {
            return Err(Error::MalformedFile("checkpoint magic is not VCK1".into()));
        }
        let count = reader.u32()? as usize;
        if count == 0 || count > 1024 {
            return Err(Error::MalformedFile(format!("implausible layer count {count}")));
        }
        let dims = (0..=count)
            .map(|_| reader.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let epsilon = reader.f64()?;
        let mut layers = Vec::with_capacity(count);
        for w in dims.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let weight = (0..inp * out).map(|_| reader.f64()).collect::<Result<Vec<_>>>()?;
            let bias = (0..out).map(|_| reader.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(DenseLayer {
                weight: Array2::from_shape_vec((out, inp), weight).expect("sized above"),
                bias: Array1::from(bias),
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::MalformedFile(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - reader.pos
            )));
        }
        Ok(Self {
            encoder: MlpEncoder::from_layers(layers)?,
            epsilon,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::MalformedFile("checkpoint is truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
