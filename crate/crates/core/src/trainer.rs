//! Training: per-token label vectors, batch-level hard-negative mining,
//! the subset binary-cross-entropy loss, Adam, and the two-phase
//! (frozen encoder, then full fine-tune) schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::evaluator::{extract_spans, strong_weak_f1, GoldSpan};
use crate::fragmenter::Fragment;
use crate::model::{
    encode, encode_backward, predict, save_checkpoint, score_entities, score_entities_backward,
    CheckpointMeta, EncoderParams, EntityClassifier, ParamSection, TokenScores,
};
use crate::{ClassId, NIL_ID};

/// Per-token soft targets over entity ids. Absent entries mean target 0.
pub type TokenLabels = Vec<BTreeMap<ClassId, f64>>;

/// Maps a fragment's annotations (already validated as non-overlapping)
/// onto per-token label maps: every token of a span carries the span's
/// full label map.
pub fn build_labels(
    fragment: &Fragment,
    id_of: &(impl Fn(&str) -> Option<ClassId> + ?Sized),
) -> Result<TokenLabels> {
    let mut labels: TokenLabels = vec![BTreeMap::new(); fragment.token_ids.len()];
    let mut covered = vec![false; fragment.token_ids.len()];
    for ann in &fragment.annotations {
        if ann.end >= fragment.token_ids.len() {
            return Err(Error::Data(format!(
                "fragment {}: annotation [{}, {}] out of bounds",
                fragment.frag_id, ann.start, ann.end
            )));
        }
        let map: BTreeMap<ClassId, f64> = ann
            .labels
            .iter()
            .filter_map(|(e, p)| id_of(e).map(|id| (id, *p)))
            .collect();
        for i in ann.start..=ann.end {
            if covered[i] {
                return Err(Error::Data(format!(
                    "fragment {}: overlapping annotations at token {i}",
                    fragment.frag_id
                )));
            }
            covered[i] = true;
            labels[i] = map.clone();
        }
    }
    Ok(labels)
}

/// Ordered union of all entity ids with nonzero targets across the batch.
pub fn collect_positives(batch_labels: &[TokenLabels]) -> Vec<ClassId> {
    let mut set = BTreeSet::new();
    for labels in batch_labels {
        for token in labels {
            set.extend(token.keys().copied());
        }
    }
    set.into_iter().collect()
}

/// The joined label subset `N_b` for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSampleSet {
    pub positives: Vec<ClassId>,
    pub negatives: Vec<ClassId>,
}

impl NegativeSampleSet {
    /// `N_b = N_b+ then N_b-`, the scoring order used by the loss.
    pub fn joined(&self) -> Vec<ClassId> {
        let mut out = self.positives.clone();
        out.extend(&self.negatives);
        out
    }
}

/// Mines hard negatives: per token the top-k entities by logit, each
/// candidate's logits summed over every token where it appeared in a
/// top-k list, sorted by aggregated logit descending. Positives are
/// removed and the negative tail truncated so `|N_b| <= max_size`.
pub fn mine_negatives(
    params: &EncoderParams,
    classifier: &EntityClassifier,
    batch: &[Fragment],
    positives: Vec<ClassId>,
    top_k: usize,
    max_size: usize,
) -> Result<NegativeSampleSet> {
    let all_ids = classifier.all_entity_ids();
    let mut batch_scores = Vec::with_capacity(batch.len());
    for fragment in batch {
        let (c, _) = encode(params, &fragment.token_ids, None)?;
        batch_scores.push(score_entities(classifier, &all_ids, &c)?);
    }

    let positive_set: BTreeSet<ClassId> = positives.iter().copied().collect();
    let mut candidates = rank_negative_candidates(&batch_scores, top_k);
    candidates.retain(|(id, _)| !positive_set.contains(id));

    let room = max_size.saturating_sub(positives.len());
    if max_size < positives.len() {
        eprintln!(
            "warning: max label size {max_size} below |N_b+| = {}; keeping all positives, no negatives",
            positives.len()
        );
    }
    let negatives = candidates.into_iter().take(room).map(|(id, _)| id).collect();
    Ok(NegativeSampleSet { positives, negatives })
}

/// Ranks candidate entities for negative mining: per token the `top_k`
/// entities by logit enter a candidate pool, each candidate's logits are
/// summed over every token list it appeared in, and candidates come back
/// sorted by aggregated logit descending (ties to the lower entity id).
pub fn rank_negative_candidates(batch_scores: &[TokenScores], top_k: usize) -> Vec<(ClassId, f64)> {
    let mut aggregated: BTreeMap<ClassId, f64> = BTreeMap::new();
    for scores in batch_scores {
        for row in scores.logits.rows() {
            let mut indexed: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            // Top-k by logit, ties to the lower entity id.
            indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            for &(j, logit) in indexed.iter().take(top_k) {
                *aggregated.entry(scores.entity_ids[j]).or_insert(0.0) += logit;
            }
        }
    }
    let mut candidates: Vec<(ClassId, f64)> = aggregated.into_iter().collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    candidates
}

/// Numerically stable per-term BCE on a logit: `max(z,0) - z*y + ln(1+e^-|z|)`.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Subset BCE: `L = 1/(|N_b|*|C|) sum_i sum_j bce(logit_ij, y_ij)`.
/// Labels are restricted to the scored subset by lookup; entities outside
/// a token's label map have target 0.
pub fn compute_loss(scores: &TokenScores, labels: &TokenLabels) -> Result<f64> {
    let (n_tokens, n_entities) = scores.logits.dim();
    if labels.len() != n_tokens {
        return Err(Error::Shape(format!(
            "labels cover {} tokens, scores cover {n_tokens}",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, token_labels) in labels.iter().enumerate() {
        for (j, &id) in scores.entity_ids.iter().enumerate() {
            let y = token_labels.get(&id).copied().unwrap_or(0.0);
            total += bce_term(scores.logits[[i, j]], y);
        }
    }
    let loss = total / (n_entities as f64 * n_tokens as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss over {n_tokens} tokens")));
    }
    Ok(loss)
}

/// Gradient of [`compute_loss`] w.r.t. the logits: `(sigma(z) - y) / (|N_b|*|C|)`.
pub fn loss_logit_grad(scores: &TokenScores, labels: &TokenLabels) -> Array2<f64> {
    let (n_tokens, n_entities) = scores.logits.dim();
    let norm = 1.0 / (n_entities as f64 * n_tokens as f64);
    let mut grad = Array2::zeros((n_tokens, n_entities));
    for (i, token_labels) in labels.iter().enumerate() {
        for (j, &id) in scores.entity_ids.iter().enumerate() {
            let y = token_labels.get(&id).copied().unwrap_or(0.0);
            let z = scores.logits[[i, j]];
            grad[[i, j]] = (sigmoid(z) - y) * norm;
        }
    }
    grad
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Which parameters stay fixed during an update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub encoder: bool,
    pub token_embeddings: bool,
    pub first_layers: usize,
    pub classifier: bool,
}

impl FreezeSpec {
    fn skips(&self, section: ParamSection) -> bool {
        if self.encoder {
            return true;
        }
        match section {
            ParamSection::TokenEmbedding => self.token_embeddings,
            ParamSection::Layer(i) => i < self.first_layers,
            _ => false,
        }
    }
}

/// Adam with conventional beta/epsilon defaults and separate learning
/// rates for the encoder and the entity classifier.
pub struct Adam {
    m_enc: EncoderParams,
    v_enc: EncoderParams,
    m_cls: Array2<f64>,
    v_cls: Array2<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &EncoderParams, classifier: &EntityClassifier) -> Self {
        Self {
            m_enc: EncoderParams::zeros_like(&params.config),
            v_enc: EncoderParams::zeros_like(&params.config),
            m_cls: Array2::zeros(classifier.weights.raw_dim()),
            v_cls: Array2::zeros(classifier.weights.raw_dim()),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(
        &mut self,
        params: &mut EncoderParams,
        classifier: &mut EntityClassifier,
        grads_enc: &EncoderParams,
        grads_cls: &Array2<f64>,
        lr_encoder: f64,
        lr_classifier: f64,
        freeze: &FreezeSpec,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        if !freeze.encoder {
            let p = params.tensors_mut();
            let g = grads_enc.tensors();
            let m = self.m_enc.tensors_mut();
            let v = self.v_enc.tensors_mut();
            for ((((section, mut p), (_, g)), (_, mut m)), (_, mut v)) in
                p.into_iter().zip(g).zip(m).zip(v)
            {
                if freeze.skips(section) {
                    continue;
                }
                Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr_encoder * m_hat / (v_hat.sqrt() + eps);
                });
            }
        }

        if !freeze.classifier {
            Zip::from(&mut classifier.weights)
                .and(grads_cls)
                .and(&mut self.m_cls)
                .and(&mut self.v_cls)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr_classifier * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Training hyperparameters, loadable from a flat key=value file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_label_size: usize,
    pub lr_encoder: f64,
    pub lr_classifier: f64,
    pub top_k_mining: usize,
    pub epochs: usize,
    pub frozen_epochs: usize,
    pub seed: u64,
    pub freeze_spec: FreezeSpec,
    /// Stop when strong span F1 on validation has not improved for this
    /// many epochs; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            grad_accum_steps: 4,
            max_label_size: 10240,
            lr_encoder: 5e-5,
            lr_classifier: 0.01,
            top_k_mining: 5,
            epochs: 10,
            frozen_epochs: 3,
            seed: 0,
            freeze_spec: FreezeSpec::default(),
            early_stop_patience: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.max_label_size == 0 {
            return Err(Error::Config("batch_size, grad_accum_steps and max_label_size must be positive".into()));
        }
        if self.frozen_epochs > self.epochs {
            return Err(Error::Config(format!(
                "frozen_epochs {} exceeds epochs {}",
                self.frozen_epochs, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0,1]", self.threshold)));
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, kv: &KvConfig) -> Result<()> {
        for (key, _) in kv.entries() {
            match key {
                "batch_size" => self.batch_size = kv.parse(key)?,
                "grad_accum_steps" => self.grad_accum_steps = kv.parse(key)?,
                "max_label_size" => self.max_label_size = kv.parse(key)?,
                "lr_encoder" => self.lr_encoder = kv.parse(key)?,
                "lr_classifier" => self.lr_classifier = kv.parse(key)?,
                "top_k_mining" => self.top_k_mining = kv.parse(key)?,
                "epochs" => self.epochs = kv.parse(key)?,
                "frozen_epochs" => self.frozen_epochs = kv.parse(key)?,
                "seed" => self.seed = kv.parse(key)?,
                "early_stop_patience" => self.early_stop_patience = kv.parse(key)?,
                "threshold" => self.threshold = kv.parse(key)?,
                "freeze_token_embeddings" => self.freeze_spec.token_embeddings = kv.parse(key)?,
                "freeze_first_layers" => self.freeze_spec.first_layers = kv.parse(key)?,
                "freeze_classifier" => self.freeze_spec.classifier = kv.parse(key)?,
                other => return Err(Error::Config(format!("unknown train config key: {other}"))),
            }
        }
        self.validate()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub phase: String,
    pub wall_secs: f64,
}

/// A trained model plus its training trace.
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub classifier: EntityClassifier,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
}

/// Entity-id lookup used when converting annotation labels; the trainer is
/// agnostic to how ids were assigned.
pub struct TrainData<'a> {
    pub train: &'a [Fragment],
    pub valid: &'a [Fragment],
    pub id_of: &'a dyn Fn(&str) -> Option<ClassId>,
}

/// Runs the two-phase schedule: `frozen_epochs` with the encoder fixed,
/// then full fine-tuning. Emits one checkpoint per epoch into
/// `checkpoint_dir` when given, and appends metrics records.
pub fn train(
    mut params: EncoderParams,
    mut classifier: EntityClassifier,
    data: &TrainData,
    config: &TrainConfig,
    checkpoint_dir: Option<(&Path, &CheckpointMeta)>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("no training fragments".into()));
    }

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(&params, &classifier);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut epochs_since_best = 0;
    let mut global_step: u64 = 0;

    // Precompute labels once; fragments are immutable during training.
    let labels: Vec<TokenLabels> = data
        .train
        .iter()
        .map(|f| build_labels(f, data.id_of))
        .collect::<Result<_>>()?;

    for epoch in 0..config.epochs {
        let frozen = epoch < config.frozen_epochs;
        let phase = if frozen { "frozen" } else { "finetune" };
        let mut freeze = config.freeze_spec.clone();
        freeze.encoder = freeze.encoder || frozen;

        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut grads_enc = EncoderParams::zeros_like(&params.config);
        let mut grads_cls: Array2<f64> = Array2::zeros(classifier.weights.raw_dim());
        let mut accumulated = 0;
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;

        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<Fragment> = batch_idx.iter().map(|&i| data.train[i].clone()).collect();
            let batch_labels: Vec<&TokenLabels> = batch_idx.iter().map(|&i| &labels[i]).collect();

            // Negative mining under the parameter snapshot at batch start.
            let positives = {
                let owned: Vec<TokenLabels> = batch_labels.iter().map(|l| (*l).clone()).collect();
                collect_positives(&owned)
            };
            let sample = mine_negatives(
                &params,
                &classifier,
                &batch,
                positives,
                config.top_k_mining,
                config.max_label_size,
            )?;
            let subset = sample.joined();
            if subset.is_empty() {
                continue;
            }

            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for (fragment, frag_labels) in batch.iter().zip(&batch_labels) {
                let (c, cache) = encode(&params, &fragment.token_ids, Some(&mut rng))?;
                let scores = score_entities(&classifier, &subset, &c)?;
                let loss = compute_loss(&scores, frag_labels).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "step {global_step}, fragment {}: {msg}",
                        fragment.frag_id
                    )),
                    other => other,
                })?;
                batch_loss += loss * scale;

                let mut d_logits = loss_logit_grad(&scores, frag_labels);
                d_logits *= scale;
                let d_c =
                    score_entities_backward(&classifier, &scores, &c, &d_logits, &mut grads_cls)?;
                if !freeze.encoder {
                    encode_backward(&params, &cache, &d_c, &mut grads_enc)?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "divergence: non-finite batch loss at step {global_step}"
                )));
            }
            epoch_loss += batch_loss;
            n_batches += 1;
            accumulated += 1;

            if accumulated == config.grad_accum_steps {
                let norm = 1.0 / accumulated as f64;
                grads_enc.scale(norm);
                grads_cls *= norm;
                optimizer.update(
                    &mut params,
                    &mut classifier,
                    &grads_enc,
                    &grads_cls,
                    config.lr_encoder,
                    config.lr_classifier,
                    &freeze,
                );
                global_step += 1;
                grads_enc = EncoderParams::zeros_like(&params.config);
                grads_cls.fill(0.0);
                accumulated = 0;
            }
        }
        // Leftover partial accumulation is dropped, matching step count
        // floor(batches / grad_accum_steps) per epoch.

        let (p, r, f1) = token_f1(&params, &classifier, data.valid, data.id_of, config.threshold)?;
        let record = MetricsRecord {
            epoch,
            step: global_step,
            loss: if n_batches > 0 { epoch_loss / n_batches as f64 } else { 0.0 },
            precision: p,
            recall: r,
            f1,
            phase: phase.to_string(),
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(log) = log.as_deref_mut() {
            serde_json::to_writer(&mut *log, &record).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(log)?;
        }
        metrics.push(record);

        if let Some((dir, meta)) = checkpoint_dir {
            let mut meta = meta.clone();
            meta.phase = phase.to_string();
            meta.step = global_step;
            let path = dir.join(format!("epoch-{epoch:03}.ckpt"));
            save_checkpoint(&path, &params, &classifier, &meta)?;
            checkpoints.push(path);
        }

        if config.early_stop_patience > 0 {
            let strong = strong_span_f1(&params, &classifier, data.valid, data.id_of, config.threshold)?;
            if strong > best_f1 {
                best_f1 = strong;
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= config.early_stop_patience {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome { params, classifier, metrics, checkpoints, steps: global_step })
}

/// Per-token InKB precision/recall/F1 on a fragment set, scored against
/// gold-source annotations.
pub fn token_f1(
    params: &EncoderParams,
    classifier: &EntityClassifier,
    frags: &[Fragment],
    id_of: &dyn Fn(&str) -> Option<ClassId>,
    threshold: f64,
) -> Result<(f64, f64, f64)> {
    let all_ids = classifier.all_entity_ids();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for fragment in frags {
        let gold = gold_token_vector(fragment, id_of);
        let (c, _) = encode(params, &fragment.token_ids, None)?;
        let scores = score_entities(classifier, &all_ids, &c)?;
        let pred = predict(&scores, threshold);
        for (p, g) in pred.iter().zip(&gold) {
            match (p, g) {
                (&p, &g) if p != NIL_ID && p == g => tp += 1,
                (&p, &g) => {
                    if p != NIL_ID {
                        fp += 1;
                    }
                    if g != NIL_ID {
                        fn_ += 1;
                    }
                }
            }
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

fn gold_token_vector(fragment: &Fragment, id_of: &dyn Fn(&str) -> Option<ClassId>) -> Vec<ClassId> {
    let mut gold = vec![NIL_ID; fragment.token_ids.len()];
    for ann in fragment.gold_annotations() {
        if let Some(entity) = ann.labels.keys().next() {
            if let Some(id) = id_of(entity) {
                for slot in &mut gold[ann.start..=ann.end] {
                    *slot = id;
                }
            }
        }
    }
    gold
}

/// Span-level strong F1 over a fragment set, used for early stopping and
/// the toy acceptance runs. Each fragment is treated as one document.
pub fn strong_span_f1(
    params: &EncoderParams,
    classifier: &EntityClassifier,
    frags: &[Fragment],
    id_of: &dyn Fn(&str) -> Option<ClassId>,
    threshold: f64,
) -> Result<f64> {
    let all_ids = classifier.all_entity_ids();
    let mut gold_spans = Vec::new();
    let mut pred_spans = Vec::new();
    for fragment in frags {
        for ann in fragment.gold_annotations() {
            if let Some(entity) = ann.labels.keys().next() {
                if id_of(entity).is_some() {
                    gold_spans.push(GoldSpan {
                        doc_id: fragment.frag_id.clone(),
                        start: ann.start,
                        end: ann.end,
                        entity: entity.clone(),
                    });
                }
            }
        }
        let (c, _) = encode(params, &fragment.token_ids, None)?;
        let scores = score_entities(classifier, &all_ids, &c)?;
        let pred = predict(&scores, threshold);
        pred_spans.extend(extract_spans(&fragment.frag_id, &pred, |id| {
            format!("#{id}")
        }));
    }
    // Rename gold entities into the same dense-id namespace.
    for g in &mut gold_spans {
        let id = id_of(&g.entity).unwrap();
        g.entity = format!("#{id}");
    }
    let in_kb = |_: &str| true;
    let report = strong_weak_f1(&gold_spans, &pred_spans, &in_kb)?;
    Ok(report.strong.f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::WeightedAnnotation;
    use ndarray::array;

    fn frag(len: usize, annotations: Vec<WeightedAnnotation>) -> Fragment {
        Fragment {
            frag_id: "f".into(),
            token_ids: vec![2; len],
            annotations,
            origin: ("d".into(), 0),
        }
    }

    fn ids(entity: &str) -> Option<ClassId> {
        match entity {
            "Thor" => Some(1),
            "A" => Some(2),
            "B" => Some(3),
            _ => None,
        }
    }

    #[test]
    fn gold_span_broadcasts_label() {
        let f = frag(4, vec![WeightedAnnotation::gold(1, 2, "Thor".into())]);
        let labels = build_labels(&f, &ids).unwrap();
        assert!(labels[0].is_empty());
        assert_eq!(labels[1][&1], 1.0);
        assert_eq!(labels[2][&1], 1.0);
        assert!(labels[3].is_empty());
    }

    #[test]
    fn weak_span_attaches_full_map() {
        let mut ann = WeightedAnnotation::gold(0, 1, "A".into());
        ann.labels = [("A".to_string(), 0.75), ("B".to_string(), 0.25)].into();
        ann.source = crate::annotator::AnnotationSource::Weak;
        let labels = build_labels(&frag(2, vec![ann]), &ids).unwrap();
        for i in 0..2 {
            assert_eq!(labels[i][&2], 0.75);
            assert_eq!(labels[i][&3], 0.25);
        }
    }

    #[test]
    fn overlapping_annotations_rejected() {
        let f = frag(
            3,
            vec![
                WeightedAnnotation::gold(0, 1, "A".into()),
                WeightedAnnotation::gold(1, 2, "B".into()),
            ],
        );
        assert!(build_labels(&f, &ids).is_err());
    }

    #[test]
    fn positives_are_sorted_union() {
        let l1: TokenLabels = vec![BTreeMap::from([(2, 1.0)])];
        let l2: TokenLabels = vec![BTreeMap::from([(2, 1.0), (3, 0.5)]), BTreeMap::new()];
        assert_eq!(collect_positives(&[l1, l2]), vec![2, 3]);
        assert!(collect_positives(&[vec![BTreeMap::new()]]).is_empty());
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        // 1 token, 1 entity, logit 0, y=1 -> ln 2.
        let s = TokenScores { entity_ids: vec![1], logits: array![[0.0]] };
        let labels: TokenLabels = vec![BTreeMap::from([(1, 1.0)])];
        assert!((compute_loss(&s, &labels).unwrap() - 2.0_f64.ln()).abs() < 1e-12);

        // 1 token, 2 entities, logits (0,0), y=(1,0) -> ln 2.
        let s = TokenScores { entity_ids: vec![1, 2], logits: array![[0.0, 0.0]] };
        let labels: TokenLabels = vec![BTreeMap::from([(1, 1.0)])];
        assert!((compute_loss(&s, &labels).unwrap() - 2.0_f64.ln()).abs() < 1e-12);

        // Soft target y=0.25 at logit 0 -> ln 2.
        let s = TokenScores { entity_ids: vec![1], logits: array![[0.0]] };
        let labels: TokenLabels = vec![BTreeMap::from([(1, 0.25)])];
        assert!((compute_loss(&s, &labels).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_stable_at_extreme_logits() {
        let s = TokenScores { entity_ids: vec![1], logits: array![[-800.0]] };
        let labels: TokenLabels = vec![BTreeMap::new()];
        let l = compute_loss(&s, &labels).unwrap();
        assert!(l.is_finite());
        assert!(l < 1e-12);
    }

    #[test]
    fn adding_cold_negative_barely_changes_loss() {
        let s1 = TokenScores { entity_ids: vec![1], logits: array![[0.3]] };
        let labels: TokenLabels = vec![BTreeMap::from([(1, 1.0)])];
        let l1 = compute_loss(&s1, &labels).unwrap();
        // Add an entity with y=0 and a strongly negative logit: the new term
        // vanishes, only the 1/|N_b| normalization changes.
        let s2 = TokenScores { entity_ids: vec![1, 2], logits: array![[0.3, -40.0]] };
        let l2 = compute_loss(&s2, &labels).unwrap();
        assert!((l2 - l1 / 2.0).abs() < 1e-6);
    }
}
