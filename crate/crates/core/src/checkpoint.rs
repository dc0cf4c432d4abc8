//! Binary tensor container used for parameter checkpoints and generated
//! latents.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes   b"EVTNSR01"
//! hdr_len   u64 LE    length of the JSON header in bytes
//! header    JSON      {"seed": u64, "meta": any, "tensors": [{"name", "shape": [r, c], "offset"}]}
//! payload   f64 LE    all tensors back to back, row-major
//! ```
//!
//! `offset` counts f64 elements from the start of the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"EVTNSR01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of the container. Tensors are kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub seed: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix<f64>)>,
}

impl TensorFile {
    pub fn new(seed: u64, meta: serde_json::Value) -> Self {
        Self { seed, meta, tensors: Vec::new() }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.tensors.push((name.into(), Matrix::from_vec(m.rows(), m.cols(), m.to_f64())));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn from_params<T: Scalar>(store: &ParamStore<T>, seed: u64, meta: serde_json::Value) -> Self {
        let mut file = Self::new(seed, meta);
        for (name, m) in store.iter() {
            file.push(name, m);
        }
        file
    }

    /// Overwrites every tensor of `store` with the same-named tensor here.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d = T::of(s);
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let entry = TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset };
                offset += m.len();
                entry
            })
            .collect();
        let header = Header { seed: self.seed, meta: self.meta.clone(), tensors };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let total: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        let mut payload = Vec::with_capacity(total);
        let mut buf = [0u8; 8];
        for _ in 0..total {
            r.read_exact(&mut buf)?;
            payload.push(f64::from_le_bytes(buf));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.shape[0] * t.shape[1];
            let data = payload
                .get(t.offset..t.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` extends past payload", t.name)))?;
            tensors.push((t.name, Matrix::from_vec(t.shape[0], t.shape[1], data.to_vec())));
        }
        Ok(Self { seed: header.seed, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            seed in any::<u64>(),
            values in proptest::collection::vec(any::<f64>(), 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec());
            let mut file = TensorFile::new(seed, serde_json::json!({"kind": "test"}));
            file.tensors.push(("a".into(), m.clone()));
            file.tensors.push(("b.c".into(), Matrix::from_vec(1, 1, vec![-0.0])));
            let mut bytes = Vec::new();
            file.write_to(&mut bytes).unwrap();
            let back = TensorFile::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.seed, seed);
            for ((na, ma), (nb, mb)) in file.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(na, nb);
                let bits_a: Vec<u64> = ma.as_slice().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = mb.as_slice().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        let err = TensorFile::read_from(&b"NOTATENSORFILE.."[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
