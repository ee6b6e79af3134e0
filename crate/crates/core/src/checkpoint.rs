//! Binary checkpoints: a magic line, a one-line JSON manifest, then
//! little-endian `f32` blobs in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::Module;
use crate::model::{IstaNet, ModelConfig, ModelError};
use crate::tensor::{numel, Real};
use crate::train::{Nesterov, TrainConfig, Trainer};

pub const MAGIC: &str = "ISTACKPT 1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic line)")]
    BadMagic,
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("checkpoint truncated: need {need} bytes of tensor data, found {found}")]
    Truncated { need: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("cannot read checkpoint {}: {source}", path.display())]
    Read {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the blob section, in `f32` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

pub fn save<R: Real>(trainer: &Trainer<R>) -> Result<Vec<u8>, CheckpointError> {
    let mut entries = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |name: &str, kind, shape: Vec<usize>, values: &mut dyn Iterator<Item = f32>| {
        entries.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape,
            offset: blob.len(),
        });
        blob.extend(values);
    };
    let f = |v: &R| v.as_f64() as f32;
    let mut params = Vec::new();
    trainer.model.visit_params(&mut |p| {
        params.push((
            p.name.clone(),
            p.tensor.shape().to_vec(),
            p.tensor.data().iter().map(f).collect::<Vec<_>>(),
        ))
    });
    let mut buffers = Vec::new();
    trainer.model.visit_buffers(&mut |n, b| {
        buffers.push((n.to_string(), b.iter().map(f).collect::<Vec<_>>()))
    });
    for (name, shape, data) in &params {
        push(
            name,
            TensorKind::Param,
            shape.clone(),
            &mut data.iter().copied(),
        );
    }
    for (name, data) in &buffers {
        push(
            name,
            TensorKind::Buffer,
            vec![data.len()],
            &mut data.iter().copied(),
        );
    }
    for (name, shape, _) in &params {
        if let Some(v) = trainer.optimizer.velocity.get(name) {
            push(
                name,
                TensorKind::Velocity,
                shape.clone(),
                &mut v.iter().map(f),
            );
        }
    }
    let manifest = Manifest {
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        epoch: trainer.epoch,
        rng: RngState {
            seed: trainer.config.seed,
            next_epoch: trainer.epoch,
        },
        tensors: entries,
    };
    let json =
        serde_json::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + blob.len() * 4);
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    let rest = bytes
        .strip_prefix(MAGIC.as_bytes())
        .ok_or(CheckpointError::BadMagic)?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Manifest("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..nl])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok((manifest, &rest[nl + 1..]))
}

pub fn load<R: Real>(bytes: &[u8]) -> Result<Trainer<R>, CheckpointError> {
    let (manifest, blob) = read_manifest(bytes)?;
    let need = manifest
        .tensors
        .iter()
        .map(|t| (t.offset + numel(&t.shape)) * 4)
        .max()
        .unwrap_or(0);
    if blob.len() != need {
        return Err(CheckpointError::Truncated {
            need,
            found: blob.len(),
        });
    }
    let read = |t: &TensorEntry| -> Vec<R> {
        blob[t.offset * 4..(t.offset + numel(&t.shape)) * 4]
            .chunks_exact(4)
            .map(|c| R::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect()
    };
    let mut by_kind: BTreeMap<(TensorKind, &str), &TensorEntry> = BTreeMap::new();
    for t in &manifest.tensors {
        if by_kind.insert((t.kind, t.name.as_str()), t).is_some() {
            return Err(CheckpointError::Manifest(format!(
                "duplicate tensor {}",
                t.name
            )));
        }
    }

    let mut model = IstaNet::<R>::new(manifest.model.clone(), 0)?;
    let mut problem = None;
    let mut used = 0;
    model.visit_params_mut(
        &mut |p| match by_kind.get(&(TensorKind::Param, p.name.as_str())) {
            Some(t) if t.shape == p.tensor.shape() => {
                p.tensor.data_mut().copy_from_slice(&read(t));
                used += 1;
            }
            Some(t) => {
                problem.get_or_insert(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    t.shape,
                    p.tensor.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("missing parameter {}", p.name));
            }
        },
    );
    model.visit_buffers_mut(
        &mut |name, b| match by_kind.get(&(TensorKind::Buffer, name)) {
            Some(t) if t.shape == [b.len()] => {
                *b = read(t);
                used += 1;
            }
            _ => {
                problem.get_or_insert(format!("missing or misshapen buffer {name}"));
            }
        },
    );
    let mut optimizer = Nesterov::<R>::new(manifest.train.momentum);
    for t in manifest
        .tensors
        .iter()
        .filter(|t| t.kind == TensorKind::Velocity)
    {
        optimizer.velocity.insert(t.name.clone(), read(t));
        used += 1;
    }
    if let Some(p) = problem {
        return Err(CheckpointError::Mismatch(p));
    }
    if used != manifest.tensors.len() {
        return Err(CheckpointError::Mismatch(
            "checkpoint holds unknown tensors".into(),
        ));
    }
    Ok(Trainer {
        model,
        optimizer,
        config: manifest.train,
        epoch: manifest.epoch,
    })
}

pub fn load_file<R: Real>(path: &Path) -> Result<Trainer<R>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    load(&bytes)
}
