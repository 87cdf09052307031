//! The contextual encoder and entity classification layer.
//!
//! A pre-layer-norm self-attention encoder with learned positional
//! embeddings produces one contextual vector per token; the classifier
//! scores each vector against rows of the entity embedding matrix with an
//! independent sigmoid per entity. Nil is never scored: row 0 exists only
//! to keep dense ids aligned, and Nil arises from thresholding.
//!
//! Forward and backward passes are written by hand over f64 `ndarray`
//! tensors so that gradients can be verified against finite differences.

mod checkpoint;
mod classifier;
mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use classifier::{predict, score_entities, score_entities_backward, EntityClassifier, TokenScores};
pub use encoder::{encode, encode_backward, EncodeCache};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding width `d`.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }

    /// Desk-scale default: the smallest configuration that still exercises
    /// contextual disambiguation.
    pub fn small(vocab_size: usize, max_len: usize) -> Self {
        Self { d: 128, n_layers: 4, n_heads: 4, max_len, vocab_size, dropout: 0.0 }
    }

    pub fn apply_overrides(&mut self, kv: &crate::config::KvConfig) -> Result<()> {
        for (key, _) in kv.entries() {
            match key {
                "d" => self.d = kv.parse(key)?,
                "n_layers" => self.n_layers = kv.parse(key)?,
                "n_heads" => self.n_heads = kv.parse(key)?,
                "max_len" => self.max_len = kv.parse(key)?,
                "dropout" => self.dropout = kv.parse(key)?,
                other => return Err(Error::Config(format!("unknown encoder config key: {other}"))),
            }
        }
        self.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    fn ones(d: usize) -> Self {
        Self { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        Self { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

/// All encoder parameters. Also reused, zero-initialized, as the gradient
/// and optimizer-moment containers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_ln: LayerNormParams,
}

/// Which part of the encoder a tensor belongs to, for selective freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSection {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize),
    FinalNorm,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl EncoderParams {
    /// Scaled-uniform fan-in initialization from a fixed seed.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let hidden = 4 * d;
        let wb = 1.0 / (d as f64).sqrt();
        let hb = 1.0 / (hidden as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::ones(d),
                attn: AttentionParams {
                    wq: uniform(&mut rng, d, d, wb),
                    bq: Array1::zeros(d),
                    wk: uniform(&mut rng, d, d, wb),
                    bk: Array1::zeros(d),
                    wv: uniform(&mut rng, d, d, wb),
                    bv: Array1::zeros(d),
                    wo: uniform(&mut rng, d, d, wb),
                    bo: Array1::zeros(d),
                },
                ln2: LayerNormParams::ones(d),
                ffn: FeedForwardParams {
                    w1: uniform(&mut rng, d, hidden, wb),
                    b1: Array1::zeros(hidden),
                    w2: uniform(&mut rng, hidden, d, hb),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb: uniform(&mut rng, config.vocab_size, d, wb),
            pos_emb: uniform(&mut rng, config.max_len, d, wb),
            layers,
            final_ln: LayerNormParams::ones(d),
        })
    }

    /// Zero tensors of identical shape, for gradients and moments.
    pub fn zeros_like(config: &EncoderConfig) -> Self {
        let d = config.d;
        let hidden = 4 * d;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::zeros(d),
                attn: AttentionParams {
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                },
                ln2: LayerNormParams::zeros(d),
                ffn: FeedForwardParams {
                    w1: Array2::zeros((d, hidden)),
                    b1: Array1::zeros(hidden),
                    w2: Array2::zeros((hidden, d)),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        Self {
            config: config.clone(),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            layers,
            final_ln: LayerNormParams::zeros(d),
        }
    }

    /// All tensors in a fixed traversal order with their section tags.
    pub fn tensors(&self) -> Vec<(ParamSection, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            (ParamSection::TokenEmbedding, self.tok_emb.view().into_dyn()),
            (ParamSection::PositionEmbedding, self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let s = ParamSection::Layer(i);
            out.push((s, l.ln1.gamma.view().into_dyn()));
            out.push((s, l.ln1.beta.view().into_dyn()));
            out.push((s, l.attn.wq.view().into_dyn()));
            out.push((s, l.attn.bq.view().into_dyn()));
            out.push((s, l.attn.wk.view().into_dyn()));
            out.push((s, l.attn.bk.view().into_dyn()));
            out.push((s, l.attn.wv.view().into_dyn()));
            out.push((s, l.attn.bv.view().into_dyn()));
            out.push((s, l.attn.wo.view().into_dyn()));
            out.push((s, l.attn.bo.view().into_dyn()));
            out.push((s, l.ln2.gamma.view().into_dyn()));
            out.push((s, l.ln2.beta.view().into_dyn()));
            out.push((s, l.ffn.w1.view().into_dyn()));
            out.push((s, l.ffn.b1.view().into_dyn()));
            out.push((s, l.ffn.w2.view().into_dyn()));
            out.push((s, l.ffn.b2.view().into_dyn()));
        }
        out.push((ParamSection::FinalNorm, self.final_ln.gamma.view().into_dyn()));
        out.push((ParamSection::FinalNorm, self.final_ln.beta.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(ParamSection, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            (ParamSection::TokenEmbedding, self.tok_emb.view_mut().into_dyn()),
            (ParamSection::PositionEmbedding, self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let s = ParamSection::Layer(i);
            out.push((s, l.ln1.gamma.view_mut().into_dyn()));
            out.push((s, l.ln1.beta.view_mut().into_dyn()));
            out.push((s, l.attn.wq.view_mut().into_dyn()));
            out.push((s, l.attn.bq.view_mut().into_dyn()));
            out.push((s, l.attn.wk.view_mut().into_dyn()));
            out.push((s, l.attn.bk.view_mut().into_dyn()));
            out.push((s, l.attn.wv.view_mut().into_dyn()));
            out.push((s, l.attn.bv.view_mut().into_dyn()));
            out.push((s, l.attn.wo.view_mut().into_dyn()));
            out.push((s, l.attn.bo.view_mut().into_dyn()));
            out.push((s, l.ln2.gamma.view_mut().into_dyn()));
            out.push((s, l.ln2.beta.view_mut().into_dyn()));
            out.push((s, l.ffn.w1.view_mut().into_dyn()));
            out.push((s, l.ffn.b1.view_mut().into_dyn()));
            out.push((s, l.ffn.w2.view_mut().into_dyn()));
            out.push((s, l.ffn.b2.view_mut().into_dyn()));
        }
        out.push((ParamSection::FinalNorm, self.final_ln.gamma.view_mut().into_dyn()));
        out.push((ParamSection::FinalNorm, self.final_ln.beta.view_mut().into_dyn()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for (_, mut t) in self.tensors_mut() {
            let n = t.len();
            if offset + n > flat.len() {
                return Err(Error::Shape("flat parameter vector too short".into()));
            }
            for (dst, src) in t.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::Shape("flat parameter vector too long".into()));
        }
        Ok(())
    }

    /// Adds `other`'s tensors into self (gradient accumulation).
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t *= factor;
        }
    }

    /// SHA-256 over the little-endian f64 bytes of all tensors, used to
    /// verify frozen-phase purity at bit level.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (_, t) in self.tensors() {
            for x in t.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = EncoderConfig { d: 10, n_layers: 1, n_heads: 3, max_len: 4, vocab_size: 4, dropout: 0.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = EncoderConfig { d: 8, n_layers: 2, n_heads: 2, max_len: 6, vocab_size: 5, dropout: 0.0 };
        let a = EncoderParams::init(&cfg, 3).unwrap();
        let b = EncoderParams::init(&cfg, 3).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = EncoderParams::init(&cfg, 4).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn flatten_round_trips() {
        let cfg = EncoderConfig { d: 8, n_layers: 1, n_heads: 2, max_len: 6, vocab_size: 5, dropout: 0.0 };
        let p = EncoderParams::init(&cfg, 3).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut q = EncoderParams::zeros_like(&cfg);
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&flat[1..]).is_err());
    }
}
