//! The entity classification layer: a |KB| x d matrix scored row-by-row
//! against contextual token vectors with an independent sigmoid per entity.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{ClassId, NIL_ID};

/// `E` with row 0 reserved for Nil. The Nil row is never scored.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityClassifier {
    pub weights: Array2<f64>,
}

impl EntityClassifier {
    /// Rows initialized small so initial probabilities sit near 0.5.
    pub fn init(kb_size: usize, d: usize, seed: u64) -> Result<Self> {
        if kb_size < 2 {
            return Err(Error::Config("entity vocabulary needs at least one real entity".into()));
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Uniform with std 0.02.
        let bound = 0.02 * 3.0_f64.sqrt();
        let weights = Array2::from_shape_fn((kb_size, d), |_| rng.gen_range(-bound..bound));
        Ok(Self { weights })
    }

    pub fn kb_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d(&self) -> usize {
        self.weights.ncols()
    }

    /// All scoreable class ids, i.e. everything except Nil.
    pub fn all_entity_ids(&self) -> Vec<ClassId> {
        (1..self.kb_size() as ClassId).collect()
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for x in self.weights.iter() {
            hasher.update(x.to_le_bytes());
        }
        super::hex_string(&hasher.finalize())
    }
}

/// Per-token logits over an ordered entity-id subset.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub entity_ids: Vec<ClassId>,
    /// n x |S| logit matrix.
    pub logits: Array2<f64>,
}

impl TokenScores {
    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `logit[i][j] = dot(E[entity_ids[j]], c_i)`.
pub fn score_entities(
    classifier: &EntityClassifier,
    entity_ids: &[ClassId],
    c: &Array2<f64>,
) -> Result<TokenScores> {
    if c.ncols() != classifier.d() {
        return Err(Error::Shape(format!(
            "context width {} does not match classifier width {}",
            c.ncols(),
            classifier.d()
        )));
    }
    let kb = classifier.kb_size() as ClassId;
    for &id in entity_ids {
        if id == NIL_ID {
            return Err(Error::Shape("Nil (id 0) is not a scoreable class".into()));
        }
        if id >= kb {
            return Err(Error::Shape(format!("entity id {id} outside KB of size {kb}")));
        }
    }
    let subset = classifier.weights.select(Axis(0), &entity_ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
    Ok(TokenScores {
        entity_ids: entity_ids.to_vec(),
        logits: c.dot(&subset.t()),
    })
}

/// Backward of [`score_entities`]: given d_logits, accumulates the
/// classifier-row gradients into `d_weights` and returns d_c.
pub fn score_entities_backward(
    classifier: &EntityClassifier,
    scores: &TokenScores,
    c: &Array2<f64>,
    d_logits: &Array2<f64>,
    d_weights: &mut Array2<f64>,
) -> Result<Array2<f64>> {
    if d_logits.dim() != scores.logits.dim() {
        return Err(Error::Shape("logit gradient shape mismatch".into()));
    }
    let subset_rows: Vec<usize> = scores.entity_ids.iter().map(|&i| i as usize).collect();
    let d_subset = d_logits.t().dot(c);
    for (j, &row) in subset_rows.iter().enumerate() {
        let mut dst = d_weights.row_mut(row);
        dst += &d_subset.row(j);
    }
    let subset = classifier.weights.select(Axis(0), &subset_rows);
    Ok(d_logits.dot(&subset))
}

/// Per-token decision: argmax entity when its probability clears the
/// threshold, Nil otherwise. Exact ties go to the lower entity id.
pub fn predict(scores: &TokenScores, threshold: f64) -> Vec<ClassId> {
    let n = scores.logits.nrows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<(ClassId, f64)> = None;
        for (j, &id) in scores.entity_ids.iter().enumerate() {
            let logit = scores.logits[[i, j]];
            match best {
                Some((bid, blogit)) if logit < blogit || (logit == blogit && id >= bid) => {}
                _ => best = Some((id, logit)),
            }
        }
        match best {
            Some((id, logit)) if sigmoid(logit) >= threshold => out.push(id),
            _ => out.push(NIL_ID),
        }
    }
    out
}
