//! The `LSW1` weight file: a flat little-endian list of named conv kernels.
//!
//! ```text
//! magic      b"LSW1"
//! count      u32
//! entry*     u16 name_len | name (UTF-8) | u32 out_c | u32 in_c | u32 kh | u32 kw
//!            | f32 kernel[out_c * in_c * kh * kw] | u32 bias_len | f32 bias[bias_len]
//! ```
//!
//! Entries are written sorted by name, so saving a loaded canonical file
//! reproduces it byte for byte. Kernels are row-major (out_c, in_c, kh, kw)
//! and expect RGB input on a 0-255 scale with the VGG channel means removed.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"LSW1";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not an LSW1 file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("entry name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate entry `{0}`")]
    DuplicateName(String),
    #[error("entry `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("entry `{name}` has {bias} bias values for {out_c} output channels")]
    BiasLength { name: String, bias: usize, out_c: usize },
    #[error("entry `{name}` is too large for the format")]
    TooLarge { name: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Kernel and bias for one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    fn check(&self, name: &str) -> Result<(), WeightsError> {
        let out_c = self.kernel.shape().n;
        if self.bias.len() != out_c {
            return Err(WeightsError::BiasLength {
                name: name.to_owned(),
                bias: self.bias.len(),
                out_c,
            });
        }
        if !self.kernel.all_finite() || !self.bias.iter().all(|b| b.is_finite()) {
            return Err(WeightsError::NonFinite(name.to_owned()));
        }
        Ok(())
    }

    fn encoded_len(&self, name: &str) -> usize {
        2 + name.len() + 16 + 4 * self.kernel.len() + 4 + 4 * self.bias.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, ConvWeights>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, weights: ConvWeights) -> Result<(), WeightsError> {
        let name = name.into();
        weights.check(&name)?;
        if self.entries.contains_key(&name) {
            return Err(WeightsError::DuplicateName(name));
        }
        self.entries.insert(name, weights);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ConvWeights> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ConvWeights> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in canonical (name-sorted) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ConvWeights)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Exact size of the canonical encoding.
    pub fn encoded_len(&self) -> usize {
        8 + self.iter().map(|(n, w)| w.encoded_len(n)).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, WeightsError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, w) in self.iter() {
            // Insertion validates, but get_mut can bypass it.
            w.check(name)?;
            let too_large = || WeightsError::TooLarge { name: name.to_owned() };
            let name_len = u16::try_from(name.len()).map_err(|_| too_large())?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let s = w.kernel.shape();
            for d in [s.n, s.c, s.h, s.w] {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large())?.to_le_bytes());
            }
            w.kernel.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            out.extend_from_slice(&(w.bias.len() as u32).to_le_bytes());
            w.bias.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let count = r.u32("entry count")?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("two bytes"));
            let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
                .map_err(|_| WeightsError::InvalidName)?
                .to_owned();
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32("kernel dims")? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let kernel = r.f32s(shape.len(), "kernel values")?;
            let bias_len = r.u32("bias length")? as usize;
            let bias = r.f32s(bias_len, "bias values")?;
            let kernel = Tensor::from_vec(shape, kernel).expect("length matches shape");
            store.insert(name, ConvWeights { kernel, bias })?;
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes the canonical encoding. Nothing is written if any value is
    /// non-finite.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightsError::Truncated {
                offset: self.bytes.len(),
                what,
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, WeightsError> {
        let byte_len = n.checked_mul(4).ok_or(WeightsError::Truncated {
            offset: self.bytes.len(),
            what,
        })?;
        Ok(self
            .take(byte_len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }
}
