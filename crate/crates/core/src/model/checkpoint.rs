//! Checkpoint: a JSON manifest plus a little-endian f32 payload holding every
//! parameter and then every buffer, in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::network::{Model, ModelConfig};
use crate::diffcore::Tensor;
use crate::error::{bail, Result};

pub const FORMAT: &str = "midecomp checkpoint v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Payload path that accompanies a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode(model: &Model<f32>, seed: u64, epoch: usize) -> (Manifest, Vec<u8>) {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: &str, t: &Tensor<f32>, kind| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            kind,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.store.params() {
        push(&p.name, &p.tensor, TensorKind::Param);
    }
    for b in model.store.buffers() {
        push(&b.name, &b.tensor, TensorKind::Buffer);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: model.config.clone(),
        seed,
        epoch,
        tensors,
    };
    (manifest, payload)
}

pub fn decode(manifest: &Manifest, payload: &[u8]) -> Result<Model<f32>> {
    if manifest.format != FORMAT {
        bail!(
            Format,
            "unsupported checkpoint format {:?}",
            manifest.format
        );
    }
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| 4 * t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected {
        bail!(
            Format,
            "checkpoint payload holds {} bytes, manifest implies {expected}",
            payload.len()
        );
    }
    let mut model = Model::<f32>::new(manifest.config.clone(), manifest.seed)?;
    let (n_p, n_b) = (model.store.params().len(), model.store.buffers().len());
    if manifest.tensors.len() != n_p + n_b {
        bail!(
            Format,
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            n_p + n_b
        );
    }
    let mut offset = 0;
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let target = if i < n_p {
            let p = &mut model.store.params_mut()[i];
            (&p.name, &mut p.tensor, TensorKind::Param)
        } else {
            let b = &mut model.store.buffers_mut()[i - n_p];
            (&b.name, &mut b.tensor, TensorKind::Buffer)
        };
        let (name, tensor, kind) = target;
        if *name != entry.name || tensor.shape() != entry.shape.as_slice() || kind != entry.kind {
            bail!(
                Format,
                "checkpoint tensor {:?} {:?} does not match model tensor {name:?} {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            );
        }
        let n = tensor.len();
        for (dst, b) in tensor
            .data_mut()
            .iter_mut()
            .zip(payload[offset..offset + 4 * n].chunks_exact(4))
        {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        offset += 4 * n;
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, seed: u64, epoch: usize, manifest_path: &Path) -> Result<()> {
    let (manifest, payload) = encode(model, seed, epoch);
    std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(payload_path(manifest_path), payload)?;
    Ok(())
}

pub fn load(manifest_path: &Path) -> Result<(Manifest, Model<f32>)> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    let payload = std::fs::read(payload_path(manifest_path))?;
    let model = decode(&manifest, &payload)?;
    Ok((manifest, model))
}
