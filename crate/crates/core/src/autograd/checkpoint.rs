//! Checkpoint container: a UTF-8 JSON header followed by a little-endian
//! f64 payload holding every parameter in header order. The header records
//! the byte offset at which the payload starts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::optim::ParamSet;
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Optimizer hyperparameters recorded alongside the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub params: Vec<ParamEntry>,
    pub optimizer: OptimizerMeta,
    pub payload_offset: usize,
}

/// Serialize every parameter of `params`, in registration order.
pub fn save_checkpoint(path: &Path, params: &ParamSet, optimizer: OptimizerMeta) -> Result<()> {
    let entries: Vec<ParamEntry> = params
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let mut header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        params: entries,
        optimizer,
        payload_offset: 0,
    };
    // The offset equals the header's own byte length, which depends on the
    // offset's digit count; iterate until it is self-consistent.
    let mut bytes = serde_json::to_vec(&header)?;
    loop {
        header.payload_offset = bytes.len();
        let next = serde_json::to_vec(&header)?;
        if next.len() == bytes.len() {
            bytes = next;
            break;
        }
        bytes = next;
    }
    let mut payload = Vec::with_capacity(8 * params.iter().map(|(_, p)| p.value.numel()).sum::<usize>());
    for (_, p) in params.iter() {
        for &v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

/// A checkpoint read back into memory, not yet applied to a model.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut stream = serde_json::Deserializer::from_slice(&bytes).into_iter::<CheckpointHeader>();
        let header = stream
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("{}: empty file", path.display())))?
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut off = header.payload_offset;
        let mut tensors = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let numel: usize = entry.shape.iter().product();
            let end = off + 8 * numel;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "payload truncated while reading `{}`",
                    entry.name
                )));
            }
            let data: Vec<f64> = bytes[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
            off = end;
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .params
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensor(name).is_some()
    }

    /// Copy stored tensors into `params` by name.
    ///
    /// In strict mode the checkpoint and the model must carry exactly the
    /// same parameter names; otherwise, stored names missing from the model
    /// are an error but model parameters absent from the checkpoint keep
    /// their current values (used to warm-start from a pretraining file).
    pub fn apply(&self, params: &mut ParamSet, strict: bool) -> Result<()> {
        for (entry, tensor) in self.header.params.iter().zip(&self.tensors) {
            let id = params.find(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter `{}` not in model", entry.name))
            })?;
            if params.value(id).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: checkpoint {:?} vs model {:?}",
                    entry.name,
                    tensor.shape(),
                    params.value(id).shape()
                )));
            }
            *params.value_mut(id) = tensor.clone();
        }
        if strict {
            for (_, p) in params.iter() {
                if !self.has(&p.name) {
                    return Err(Error::Checkpoint(format!(
                        "model parameter `{}` missing from checkpoint",
                        p.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::optim::ParamSet;

    fn meta() -> OptimizerMeta {
        OptimizerMeta {
            kind: "adamw".into(),
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ps = ParamSet::new();
        ps.register("a.w", Tensor::new(vec![2, 2], vec![1.0, -0.5, 3e-300, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        ps.register("b.bias", Tensor::from_vec(vec![0.25; 3])).unwrap();
        save_checkpoint(&path, &ps, meta()).unwrap();

        let ck = Checkpoint::read(&path).unwrap();
        assert_eq!(ck.header.payload_offset > 0, true);
        let mut restored = ParamSet::new();
        restored.register("a.w", Tensor::zeros(&[2, 2])).unwrap();
        restored.register("b.bias", Tensor::zeros(&[3])).unwrap();
        ck.apply(&mut restored, true).unwrap();
        assert_eq!(
            restored.value(restored.find("a.w").unwrap()).data(),
            ps.value(ps.find("a.w").unwrap()).data()
        );
    }

    #[test]
    fn header_offset_is_self_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::from_vec(vec![1.0])).unwrap();
        save_checkpoint(&path, &ps, meta()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header: CheckpointHeader = serde_json::Deserializer::from_slice(&bytes)
            .into_iter()
            .next()
            .unwrap()
            .unwrap();
        let json_len = serde_json::to_vec(&header).unwrap().len();
        assert_eq!(header.payload_offset, json_len);
        assert_eq!(bytes.len(), json_len + 8);
    }

    #[test]
    fn strict_apply_rejects_partial_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::from_vec(vec![2.0])).unwrap();
        save_checkpoint(&path, &ps, meta()).unwrap();

        let ck = Checkpoint::read(&path).unwrap();
        let mut bigger = ParamSet::new();
        bigger.register("w", Tensor::from_vec(vec![0.0])).unwrap();
        bigger.register("extra", Tensor::from_vec(vec![0.0])).unwrap();
        assert!(ck.apply(&mut bigger, true).is_err());
        assert!(ck.apply(&mut bigger, false).is_ok());
        assert_eq!(bigger.value(bigger.find("w").unwrap()).data(), &[2.0]);
    }
}
