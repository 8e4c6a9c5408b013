//! Parameter checkpoint file.
//!
//! Layout: magic `DRW1`, a little-endian `u32` byte length, that many bytes of
//! UTF-8 JSON manifest, then the tensor payload as little-endian `f32`.
//! Manifest offsets are byte offsets into the payload.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::{Parameters, Tensor};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const MAGIC: &[u8; 4] = b"DRW1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.cast()));
    }

    pub fn push_params<T: Scalar, M: Parameters<T> + ?Sized>(&mut self, prefix: &str, model: &M) {
        model.visit(prefix, &mut |name, p| self.tensors.push((name.to_string(), p.value.cast())));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `model` from the tensor of the same name.
    pub fn load_params<T: Scalar, M: Parameters<T> + ?Sized>(
        &self,
        prefix: &str,
        model: &mut M,
    ) -> Result<()> {
        let index: HashMap<&str, &Tensor<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        model.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match index.get(name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.cast(),
                Some(t) => {
                    err = Some(Error::Shape(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => err = Some(Error::Invalid(format!("checkpoint lacks tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            version: 1,
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(8 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing DRW1 magic"));
        }
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload_start = 8 + mlen;
        if bytes.len() < payload_start {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(bad(&format!("tensor {} overruns payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
        }
        Ok(Self {
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_starts_with_magic_and_manifest() {
        let mut ck = Checkpoint::new(serde_json::json!({"k": 1}));
        ck.push("a", &Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DRW1");
        let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        assert_eq!(manifest["tensors"][0]["name"], "a");
        assert_eq!(manifest["tensors"][0]["offset"], 0);
        assert_eq!(&bytes[8 + mlen..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40]);
    }

    #[test]
    fn model_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lin = Linear::<f32>::new(3, 2, &mut rng);
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push_params("enc", &lin);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap();
        let mut other = Linear::<f32>::new(3, 2, &mut rng);
        back.load_params("enc", &mut other).unwrap();
        assert_eq!(other.weight.value, lin.weight.value);
        let mut wrong = Linear::<f32>::new(2, 2, &mut rng);
        assert!(back.load_params("enc", &mut wrong).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE\0\0\0\0", Path::new("x")).is_err());
    }
}
