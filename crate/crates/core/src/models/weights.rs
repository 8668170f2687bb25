use std::io::Write;
use std::path::Path;

use condensegan_tensor::{DType, Tensor};

use crate::error::{invalid, CoreError, Result};
use crate::io::Reader;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ITGW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ModelWeights {
    entries: Vec<(String, Tensor)>,
}

impl ModelWeights {
    pub fn new() -> ModelWeights {
        ModelWeights::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(invalid(format!("weight name too long: {} bytes", name.len())));
        }
        if self.contains(&name) {
            return Err(invalid(format!("duplicate weight name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| invalid(format!("missing weight {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replaces every tensor, keeping names and order.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(invalid("tensor count changed"));
        }
        for ((name, old), new) in self.entries.iter_mut().zip(tensors) {
            if old.shape() != new.shape() {
                return Err(invalid(format!("shape of {name} changed")));
            }
            *old = new;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> ModelWeights {
        ModelWeights {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), f(t))).collect(),
        }
    }

    /// Copy whose tensors are fresh gradient-tracking leaves.
    pub fn trainable(&self) -> ModelWeights {
        self.map(|t| t.requires_grad())
    }

    pub fn detached(&self) -> ModelWeights {
        self.map(|t| t.detach())
    }

    pub fn to_dtype(&self, dtype: DType) -> ModelWeights {
        self.map(|t| t.to_dtype(dtype))
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix_stripped(&self, prefix: &str) -> ModelWeights {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ModelWeights) -> Result<()> {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ModelWeights) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.to_f32_vec() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
        let mut r = Reader::new(bytes, "weights file");
        r.magic(WEIGHTS_MAGIC)?;
        r.version(WEIGHTS_VERSION)?;
        let count = r.u32()?;
        let mut weights = ModelWeights::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|_| CoreError::Format {
                what: "weights file",
                msg: "tensor name is not UTF-8".into(),
            })?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(CoreError::Format {
                    what: "weights file",
                    msg: format!("unsupported dtype tag {dtype}"),
                });
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CoreError::Format {
                what: "weights file",
                msg: "tensor too large".into(),
            })?;
            let values = r.f32_vec(n)?;
            weights.insert(name, Tensor::from_vec(values, &shape)?).map_err(|e| CoreError::Format {
                what: "weights file",
                msg: e.to_string(),
            })?;
        }
        r.finish()?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelWeights> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        ModelWeights::from_bytes(&bytes)
    }
}
