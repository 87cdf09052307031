//! Self-describing binary checkpoint container.
//!
//! Layout: the magic `TOKELCK1`, a little-endian u64 manifest length, a
//! JSON manifest (encoder config, KB size, vocabulary hashes, training
//! phase, step count, tensor directory), then every tensor as raw
//! little-endian f32 in manifest order. The loader checks manifest hashes
//! against the data artifacts it is handed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, EncoderParams, EntityClassifier};

const MAGIC: &[u8; 8] = b"TOKELCK1";

/// Manifest metadata carried alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub kb_size: usize,
    pub token_vocab_hash: String,
    pub entity_vocab_hash: String,
    /// `frozen` or `finetune`.
    pub phase: String,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A loaded model: encoder parameters, classifier and manifest metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub classifier: EntityClassifier,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(
    path: &Path,
    params: &EncoderParams,
    classifier: &EntityClassifier,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f64>)> = params
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, (_, t))| (format!("encoder.{i}"), t.to_owned()))
        .collect();
    tensors.push(("classifier.weights".into(), classifier.weights.clone().into_dyn()));

    let manifest = Manifest {
        version: 1,
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Data(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in &tensors {
        for &x in t.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Data(format!("unsupported checkpoint version {}", manifest.version)));
    }

    let mut params = EncoderParams::zeros_like(&manifest.meta.encoder);
    let mut classifier_weights = None;
    {
        let mut targets = params.tensors_mut();
        for (idx, entry) in manifest.tensors.iter().enumerate() {
            let count: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(|_| {
                Error::Data(format!("checkpoint truncated while reading {}", entry.name))
            })?;
            let values: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if entry.name == "classifier.weights" {
                if entry.shape.len() != 2 {
                    return Err(Error::Shape("classifier tensor must be 2-d".into()));
                }
                classifier_weights = Some(
                    ndarray::Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
                        .map_err(|e| Error::Shape(e.to_string()))?,
                );
            } else {
                let (_, target) = targets.get_mut(idx).ok_or_else(|| {
                    Error::Data(format!("unexpected tensor {} in checkpoint", entry.name))
                })?;
                if target.shape() != entry.shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        entry.name,
                        entry.shape,
                        target.shape()
                    )));
                }
                for (dst, src) in target.iter_mut().zip(values) {
                    *dst = src;
                }
            }
        }
    }
    let weights = classifier_weights
        .ok_or_else(|| Error::Data("checkpoint is missing classifier.weights".into()))?;
    if weights.nrows() != manifest.meta.kb_size || weights.ncols() != manifest.meta.encoder.d {
        return Err(Error::Shape(format!(
            "classifier shape {:?} does not match manifest (kb_size={}, d={})",
            weights.dim(),
            manifest.meta.kb_size,
            manifest.meta.encoder.d
        )));
    }
    Ok(Checkpoint { params, classifier: EntityClassifier { weights }, meta: manifest.meta })
}

impl Checkpoint {
    /// Validates the manifest's vocabulary hashes against the artifacts the
    /// caller is about to use.
    pub fn validate_hashes(&self, token_vocab_hash: &str, entity_vocab_hash: &str) -> Result<()> {
        if self.meta.token_vocab_hash != token_vocab_hash {
            return Err(Error::Data(format!(
                "token vocabulary hash mismatch: checkpoint has {}, artifact has {token_vocab_hash}",
                self.meta.token_vocab_hash
            )));
        }
        if self.meta.entity_vocab_hash != entity_vocab_hash {
            return Err(Error::Data(format!(
                "entity vocabulary hash mismatch: checkpoint has {}, artifact has {entity_vocab_hash}",
                self.meta.entity_vocab_hash
            )));
        }
        Ok(())
    }
}
