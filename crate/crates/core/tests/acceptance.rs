//! Acceptance gate: every release-blocking criterion, one test each,
//! printing one PASS line on success. Oracles are implemented from
//! scratch in this file so they cannot share bugs with the library.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use ndarray::{array, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tokel::annotator::{annotate, AnnotationSource, MentionMatcher};
use tokel::corpus::{discount_nil, Document, LinkAnnotation, MentionTable};
use tokel::evaluator::{strong_weak_f1, GoldSpan, SpanPrediction};
use tokel::fragmenter::{split, Fragment};
use tokel::model::{
    encode, encode_backward, score_entities, score_entities_backward, EncoderConfig,
    EncoderParams, EntityClassifier, TokenScores,
};
use tokel::toy::{generate, ToyConfig};
use tokel::trainer::{
    compute_loss, loss_logit_grad, mine_negatives, rank_negative_candidates, strong_span_f1,
    train, FreezeSpec, TokenLabels, TrainConfig, TrainData,
};
use tokel::ClassId;

// ---------------------------------------------------------------------------
// Discounting arithmetic
// ---------------------------------------------------------------------------

#[test]
fn acceptance_discounting_arithmetic() {
    let started = Instant::now();

    // Worked example: two mentions, k = 2, prior mean 0.2, factor 0.25.
    let mut table = MentionTable::default();
    table.counts.insert(
        "m1".into(),
        BTreeMap::from([(Some("e1".to_string()), 9.0), (None, 1.0)]),
    );
    table.counts.insert(
        "m2".into(),
        BTreeMap::from([(Some("e2".to_string()), 7.0), (None, 3.0)]),
    );
    let discounted = discount_nil(&table, 2).unwrap();
    assert!((discounted.nil_prior_mean - 0.2).abs() < 1e-9);
    // m1: 1 - 0.25 * 9 clamps to zero, so the Nil entry disappears.
    assert!(discounted.counts["m1"].get(&None).is_none());
    // m2: 3 - 0.25 * 7 = 1.25.
    assert!((discounted.counts["m2"][&None] - 1.25).abs() < 1e-9);
    let p = discounted.conditional_prob("m2").unwrap();
    assert!((p[&None] - 1.25 / 8.25).abs() < 1e-9);
    // Bare Nil counts from a single-entity table zero out completely.
    let mut single = MentionTable::default();
    single.counts.insert(
        "solo".into(),
        BTreeMap::from([(Some("e".to_string()), 4.0), (None, 1.0)]),
    );
    let d = discount_nil(&single, 1).unwrap();
    assert!(d.counts["solo"].get(&None).is_none());

    // Property suite over 1000 random tables.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let n_entities = rng.gen_range(2..6);
        let n_mentions = rng.gen_range(2..8);
        let mut table = MentionTable::default();
        for m in 0..n_mentions {
            let mut counts: BTreeMap<Option<String>, f64> = BTreeMap::new();
            let n_links = rng.gen_range(1..=n_entities);
            for _ in 0..n_links {
                let e = format!("e{}", rng.gen_range(0..n_entities));
                *counts.entry(Some(e)).or_insert(0.0) += rng.gen_range(1..20) as f64;
            }
            if rng.gen_bool(0.7) {
                counts.insert(None, rng.gen_range(0..15) as f64);
            }
            table.counts.insert(format!("m{m}"), counts);
        }
        // Guarantee the top-2 entities have distinct best surface forms.
        table
            .counts
            .insert("anchor-a".into(), BTreeMap::from([(Some("e0".to_string()), 1000.0)]));
        table
            .counts
            .insert("anchor-b".into(), BTreeMap::from([(Some("e1".to_string()), 999.0)]));

        let d = discount_nil(&table, 2).unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        for (mention, counts) in &table.counts {
            let old_nil = counts.get(&None).copied().unwrap_or(0.0);
            let new_nil = d.counts[mention].get(&None).copied().unwrap_or(0.0);
            // Monotonicity: discounting never increases a Nil count and
            // never pushes it below zero.
            assert!(new_nil <= old_nil + 1e-12, "trial {trial}: Nil grew on {mention}");
            assert!(new_nil >= 0.0);
            // Non-Nil counts are untouched.
            for (entity, count) in counts {
                if entity.is_some() {
                    assert_eq!(d.counts[mention][entity], *count);
                }
            }
        }

        // Idempotence at zero: a table without Nil mass is a fixed point.
        let mut clean = d.clone();
        for counts in clean.counts.values_mut() {
            counts.remove(&None);
        }
        let again = discount_nil(&clean, 2).unwrap();
        for (mention, counts) in &clean.counts {
            assert_eq!(&again.counts[mention], counts, "trial {trial}: zero-Nil table moved");
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "discounting suite took {elapsed:?}");
    println!("PASS discounting arithmetic: worked examples to 1e-9, 1000-table property suite in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// Matcher oracle
// ---------------------------------------------------------------------------

/// Independent leftmost-longest selection: at each position take the
/// longest pattern match, emit, jump past it.
fn oracle_leftmost_longest(tokens: &[String], patterns: &BTreeSet<Vec<String>>) -> Vec<(usize, usize)> {
    let mut hits = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut best = 0;
        for p in patterns {
            if p.len() > best && i + p.len() <= tokens.len() && tokens[i..i + p.len()] == p[..] {
                best = p.len();
            }
        }
        if best > 0 {
            hits.push((i, i + best - 1));
            i += best;
        } else {
            i += 1;
        }
    }
    hits
}

#[test]
fn acceptance_matcher_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let alphabet = ["a", "b", "c", "d", "e"];

    for trial in 0..1000 {
        let n = rng.gen_range(1..=40);
        let tokens: Vec<String> =
            (0..n).map(|_| alphabet.choose(&mut rng).unwrap().to_string()).collect();

        let mut patterns: BTreeSet<Vec<String>> = BTreeSet::new();
        for _ in 0..rng.gen_range(1..=10) {
            let len = rng.gen_range(1..=3);
            patterns.insert(
                (0..len).map(|_| alphabet.choose(&mut rng).unwrap().to_string()).collect(),
            );
        }

        // Random non-overlapping gold links.
        let mut links = Vec::new();
        let mut pos = 0;
        while pos < n {
            if rng.gen_bool(0.15) {
                let end = (pos + rng.gen_range(0..2)).min(n - 1);
                links.push(LinkAnnotation { start: pos, end, entity: "G".into() });
                pos = end + 1;
            } else {
                pos += 1;
            }
        }
        let doc = Document { doc_id: format!("doc{trial}"), tokens: tokens.clone(), links };
        doc.validate().unwrap();

        let mut table = MentionTable::default();
        for p in &patterns {
            table
                .counts
                .insert(p.join(" "), BTreeMap::from([(Some("E".to_string()), 1.0)]));
        }
        let matcher = MentionMatcher::from_patterns(table.counts.keys().map(|s| s.as_str())).unwrap();
        let annotations = annotate(&doc, &matcher, &table).unwrap();

        // Expected: leftmost-longest hits selected first, then those
        // overlapping a gold link dropped.
        let expected: Vec<(usize, usize)> = oracle_leftmost_longest(&tokens, &patterns)
            .into_iter()
            .filter(|&(s, e)| !doc.links.iter().any(|l| l.start <= e && s <= l.end))
            .collect();
        let weak: Vec<(usize, usize)> = annotations
            .iter()
            .filter(|a| a.source == AnnotationSource::Weak)
            .map(|a| (a.start, a.end))
            .collect();
        assert_eq!(weak, expected, "trial {trial}: tokens {tokens:?} patterns {patterns:?}");

        // Gold links all present and untouched.
        for l in &doc.links {
            assert!(annotations
                .iter()
                .any(|a| a.source == AnnotationSource::Gold && a.start == l.start && a.end == l.end));
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "matcher oracle took {elapsed:?}");
    println!("PASS matcher oracle: 1000 random instances agree with brute force in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// Metric oracle
// ---------------------------------------------------------------------------

struct OracleCounts {
    strong_tp: u64,
    weak_tp: u64,
    weak_fp: u64,
}

/// All-pairs reference implementation of the span metrics.
fn oracle_metrics(gold: &[GoldSpan], preds: &[SpanPrediction]) -> OracleCounts {
    let strong_tp = preds
        .iter()
        .filter(|p| {
            gold.iter().any(|g| {
                g.doc_id == p.doc_id && g.start == p.start && g.end == p.end && g.entity == p.entity
            })
        })
        .count() as u64;
    let token_hit = |g: &GoldSpan, p: &SpanPrediction| {
        g.doc_id == p.doc_id
            && g.entity == p.entity
            && (g.start..=g.end).any(|t| (p.start..=p.end).contains(&t))
    };
    let weak_tp = gold.iter().filter(|g| preds.iter().any(|p| token_hit(g, p))).count() as u64;
    let weak_fp = preds.iter().filter(|p| !gold.iter().any(|g| token_hit(g, p))).count() as u64;
    OracleCounts { strong_tp, weak_tp, weak_fp }
}

#[test]
fn acceptance_metric_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let entities = ["A", "B", "C", "D"];

    for trial in 0..1000 {
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        for doc in 0..rng.gen_range(1..=3) {
            let doc_id = format!("d{doc}");
            // Non-overlapping random spans for each side independently.
            for out in [&mut gold as &mut dyn SpanSink, &mut preds] {
                let mut pos = 0;
                while pos < 20 {
                    if rng.gen_bool(0.25) {
                        let end = pos + rng.gen_range(0..3).min(19 - pos);
                        out.push(
                            &doc_id,
                            pos,
                            end,
                            entities.choose(&mut rng).unwrap(),
                        );
                        pos = end + 2;
                    } else {
                        pos += 1;
                    }
                }
            }
        }

        let report = strong_weak_f1(&gold, &preds, &|_| true).unwrap();
        let oracle = oracle_metrics(&gold, &preds);
        assert_eq!(report.strong.tp, oracle.strong_tp, "trial {trial}");
        assert_eq!(report.strong.fp, preds.len() as u64 - oracle.strong_tp, "trial {trial}");
        assert_eq!(report.strong.fn_, gold.len() as u64 - oracle.strong_tp, "trial {trial}");
        assert_eq!(report.weak.tp, oracle.weak_tp, "trial {trial}");
        assert_eq!(report.weak.fp, oracle.weak_fp, "trial {trial}");
        assert_eq!(report.weak.fn_, gold.len() as u64 - oracle.weak_tp, "trial {trial}");
        assert!(
            report.strong.f1 <= report.weak.f1 + 1e-12,
            "trial {trial}: strong F1 {} > weak F1 {}",
            report.strong.f1,
            report.weak.f1
        );
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "metric oracle took {elapsed:?}");
    println!("PASS metric oracle: 1000 random instances, strong F1 <= weak F1 throughout, in {elapsed:?}");
}

trait SpanSink {
    fn push(&mut self, doc_id: &str, start: usize, end: usize, entity: &str);
}

impl SpanSink for Vec<GoldSpan> {
    fn push(&mut self, doc_id: &str, start: usize, end: usize, entity: &str) {
        Vec::push(self, GoldSpan { doc_id: doc_id.into(), start, end, entity: entity.into() });
    }
}

impl SpanSink for Vec<SpanPrediction> {
    fn push(&mut self, doc_id: &str, start: usize, end: usize, entity: &str) {
        Vec::push(self, SpanPrediction { doc_id: doc_id.into(), start, end, entity: entity.into() });
    }
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[test]
fn acceptance_gradient_check() {
    let started = Instant::now();
    let config = EncoderConfig {
        d: 16,
        n_layers: 2,
        n_heads: 2,
        max_len: 8,
        vocab_size: 20,
        dropout: 0.0,
    };
    let mut params = EncoderParams::init(&config, 5).unwrap();
    let mut classifier = EntityClassifier::init(11, config.d, 6).unwrap();
    let token_ids: Vec<u32> = vec![3, 7, 2, 11, 5, 19, 4, 8];
    let subset: Vec<ClassId> = vec![2, 4, 5, 7, 9];

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let labels: TokenLabels = token_ids
        .iter()
        .map(|_| {
            let mut token: BTreeMap<ClassId, f64> = BTreeMap::new();
            for &id in &subset {
                if rng.gen_bool(0.4) {
                    token.insert(id, rng.gen_range(0.1..1.0));
                }
            }
            token
        })
        .collect();

    let loss_of = |params: &EncoderParams, classifier: &EntityClassifier| -> f64 {
        let (c, _) = encode(params, &token_ids, None).unwrap();
        let scores = score_entities(classifier, &subset, &c).unwrap();
        compute_loss(&scores, &labels).unwrap()
    };

    // Analytic gradient.
    let mut grads_enc = EncoderParams::zeros_like(&config);
    let mut grads_cls: Array2<f64> = Array2::zeros(classifier.weights.raw_dim());
    let (c, cache) = encode(&params, &token_ids, None).unwrap();
    let scores = score_entities(&classifier, &subset, &c).unwrap();
    let d_logits = loss_logit_grad(&scores, &labels);
    let d_c = score_entities_backward(&classifier, &scores, &c, &d_logits, &mut grads_cls).unwrap();
    encode_backward(&params, &cache, &d_c, &mut grads_enc).unwrap();

    let analytic: Vec<f64> = grads_enc
        .flatten()
        .into_iter()
        .chain(grads_cls.iter().copied())
        .collect();
    let n_enc = params.param_count();
    let n_total = analytic.len();

    // 50 deterministic coordinates spread over parameters with
    // non-negligible analytic gradient, covering encoder and classifier.
    let candidates: Vec<usize> = (0..n_total).filter(|&i| analytic[i].abs() > 1e-7).collect();
    assert!(candidates.len() >= 50, "only {} live gradient coordinates", candidates.len());
    let coords: Vec<usize> = (0..50).map(|i| candidates[i * candidates.len() / 50]).collect();

    const EPS: f64 = 1e-4;
    let mut max_rel = 0.0f64;
    for &coord in &coords {
        let numeric = if coord < n_enc {
            let mut flat = params.flatten();
            let orig = flat[coord];
            flat[coord] = orig + EPS;
            params.assign_flat(&flat).unwrap();
            let plus = loss_of(&params, &classifier);
            flat[coord] = orig - EPS;
            params.assign_flat(&flat).unwrap();
            let minus = loss_of(&params, &classifier);
            flat[coord] = orig;
            params.assign_flat(&flat).unwrap();
            (plus - minus) / (2.0 * EPS)
        } else {
            let idx = coord - n_enc;
            let (rows, cols) = classifier.weights.dim();
            assert!(idx < rows * cols);
            let (r, cidx) = (idx / cols, idx % cols);
            let orig = classifier.weights[[r, cidx]];
            classifier.weights[[r, cidx]] = orig + EPS;
            let plus = loss_of(&params, &classifier);
            classifier.weights[[r, cidx]] = orig - EPS;
            let minus = loss_of(&params, &classifier);
            classifier.weights[[r, cidx]] = orig;
            (plus - minus) / (2.0 * EPS)
        };
        let a = analytic[coord];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        assert!(
            rel < 1e-4,
            "coordinate {coord}: analytic {a:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
        );
        max_rel = max_rel.max(rel);
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "gradient check took {elapsed:?}");
    println!("PASS gradient check: 50 coordinates, max relative error {max_rel:.3e}, in {elapsed:?}");
}

// ---------------------------------------------------------------------------
// Negative-sampling invariants
// ---------------------------------------------------------------------------

#[test]
fn acceptance_negative_sampling_invariants() {
    // Aggregation worked example: entity 2 appears in two tokens' top-k
    // with logits 3 and 4 (sum 7); entity 3 once with 6. The summed 7
    // outranks the single highest logit 6.
    let scores = vec![TokenScores {
        entity_ids: vec![2, 3, 4],
        logits: array![[3.0, 6.0, -100.0], [4.0, -100.0, -99.0]],
    }];
    let ranked = rank_negative_candidates(&scores, 2);
    assert_eq!(ranked[0].0, 2);
    assert!((ranked[0].1 - 7.0).abs() < 1e-12);
    assert_eq!(ranked[1].0, 3);
    assert!((ranked[1].1 - 6.0).abs() < 1e-12);

    // Structural invariants on a real model, across batch shapes and caps.
    let config = EncoderConfig { d: 16, n_layers: 1, n_heads: 2, max_len: 12, vocab_size: 30, dropout: 0.0 };
    let params = EncoderParams::init(&config, 3).unwrap();
    let classifier = EntityClassifier::init(21, config.d, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    for trial in 0..50 {
        let batch: Vec<Fragment> = (0..rng.gen_range(1..4))
            .map(|i| Fragment {
                frag_id: format!("f{trial}-{i}"),
                token_ids: (0..rng.gen_range(1..12)).map(|_| rng.gen_range(0..30)).collect(),
                annotations: vec![],
                origin: (format!("d{trial}"), 0),
            })
            .collect();
        let positives: Vec<ClassId> = {
            let mut s = BTreeSet::new();
            for _ in 0..rng.gen_range(0..6) {
                s.insert(rng.gen_range(1..21) as ClassId);
            }
            s.into_iter().collect()
        };
        let max_size = rng.gen_range(1..15);
        let top_k = rng.gen_range(1..6);
        let sample =
            mine_negatives(&params, &classifier, &batch, positives.clone(), top_k, max_size)
                .unwrap();

        // N_b+ is a prefix of N_b.
        assert_eq!(sample.positives, positives);
        assert_eq!(&sample.joined()[..positives.len()], &positives[..]);
        // Disjointness.
        let pos_set: BTreeSet<_> = sample.positives.iter().collect();
        assert!(sample.negatives.iter().all(|id| !pos_set.contains(id)));
        // No duplicates in the negatives.
        let neg_set: BTreeSet<_> = sample.negatives.iter().collect();
        assert_eq!(neg_set.len(), sample.negatives.len());
        // Size bound: |N_b| <= max_size unless positives alone exceed it.
        assert!(sample.joined().len() <= max_size.max(positives.len()));
    }

    println!("PASS negative sampling: subset/disjointness/size invariants and 7 > 6 aggregation example");
}

// ---------------------------------------------------------------------------
// Toy end-to-end and ordering property
// ---------------------------------------------------------------------------

struct ToyRun {
    train_f1: f64,
    valid_f1: f64,
}

fn toy_encoder_config(vocab_size: usize, max_len: usize) -> EncoderConfig {
    EncoderConfig { d: 32, n_layers: 2, n_heads: 2, max_len, vocab_size, dropout: 0.0 }
}

fn run_toy(seed: u64, epochs: usize, frozen_epochs: usize, freeze_encoder: bool) -> ToyRun {
    let corpus = generate(&ToyConfig { seed: 1000 + seed, ..ToyConfig::default() });
    assert!(corpus.ambiguous_mention_count() >= 5);
    assert!(corpus.ambiguous_surfaces.len() >= 5);
    let entity_vocab = corpus.entity_vocab().unwrap();
    let token_vocab = corpus.token_vocab();
    let frags = corpus.fragments(&token_vocab);
    let max_len = frags.iter().map(|f| f.token_ids.len()).max().unwrap();
    let (train_f, valid_f, _) = split(frags, 40, 0, 7).unwrap();

    let config = toy_encoder_config(token_vocab.size(), max_len);
    let params = EncoderParams::init(&config, seed).unwrap();
    let classifier = EntityClassifier::init(entity_vocab.size(), config.d, seed ^ 1).unwrap();

    let train_config = TrainConfig {
        batch_size: 16,
        grad_accum_steps: 1,
        max_label_size: 64,
        lr_encoder: 1e-3,
        lr_classifier: 5e-2,
        top_k_mining: 3,
        epochs,
        frozen_epochs,
        seed,
        freeze_spec: FreezeSpec { encoder: freeze_encoder, ..Default::default() },
        early_stop_patience: 0,
        threshold: 0.5,
    };
    let id_of = |e: &str| entity_vocab.id_of(e);
    let data = TrainData { train: &train_f, valid: &valid_f, id_of: &id_of };
    let outcome = train(params, classifier, &data, &train_config, None, None).unwrap();

    let train_f1 =
        strong_span_f1(&outcome.params, &outcome.classifier, &train_f, &id_of, 0.5).unwrap();
    let valid_f1 =
        strong_span_f1(&outcome.params, &outcome.classifier, &valid_f, &id_of, 0.5).unwrap();
    ToyRun { train_f1, valid_f1 }
}

#[test]
fn acceptance_toy_end_to_end() {
    let started = Instant::now();
    let run = run_toy(0, 30, 3, false);
    let elapsed = started.elapsed();
    assert!(
        run.train_f1 >= 0.95,
        "training-set strong F1 {:.4} below 0.95",
        run.train_f1
    );
    assert!(run.valid_f1 >= 0.70, "held-out strong F1 {:.4} below 0.70", run.valid_f1);
    assert!(elapsed.as_secs() < 1800, "toy end-to-end took {elapsed:?}");
    println!(
        "PASS toy end-to-end: train strong F1 {:.4} >= 0.95, held-out {:.4} >= 0.70, in {elapsed:?}",
        run.train_f1, run.valid_f1
    );
}

#[test]
fn acceptance_ordering_property() {
    // (a) classifier-only with the short (frozen-phase-length) budget,
    // (b) classifier-only with the full budget, (c) the full two-phase
    // schedule. Median held-out strong F1 over 3 seeds must be
    // monotone with (c) - (a) >= 0.05.
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let seeds = [0u64, 1, 2];
    let a = median(seeds.iter().map(|&s| run_toy(s, 3, 3, true).valid_f1).collect());
    let b = median(seeds.iter().map(|&s| run_toy(s, 30, 30, true).valid_f1).collect());
    let c = median(seeds.iter().map(|&s| run_toy(s, 30, 3, false).valid_f1).collect());

    assert!(a <= b + 1e-9, "(a) {a:.4} > (b) {b:.4}");
    assert!(b <= c + 1e-9, "(b) {b:.4} > (c) {c:.4}");
    assert!(c - a >= 0.05, "(c) - (a) = {:.4} < 0.05", c - a);
    println!(
        "PASS ordering property: (a) {a:.4} <= (b) {b:.4} <= (c) {c:.4}, gap {:.4} >= 0.05",
        c - a
    );
}

// ---------------------------------------------------------------------------
// Determinism
// ---------------------------------------------------------------------------

#[test]
fn acceptance_pipeline_determinism() {
    use std::process::Command;

    let work = tempfile::tempdir().unwrap();
    let corpus_path = work.path().join("corpus.jsonl");
    let corpus = generate(&ToyConfig { n_docs: 40, ..ToyConfig::default() });
    let mut body = Vec::new();
    tokel::corpus::write_corpus(&mut body, &corpus.documents).unwrap();
    std::fs::write(&corpus_path, &body).unwrap();

    let config_path = work.path().join("train.conf");
    std::fs::write(
        &config_path,
        "d=16\nn_layers=1\nn_heads=2\nepochs=2\nfrozen_epochs=1\nbatch_size=16\nmax_label_size=32\nseed=5\n",
    )
    .unwrap();

    let run_pipeline = |dir: &std::path::Path| {
        for args in [
            vec![
                "stats".to_string(),
                "--dir".into(),
                dir.display().to_string(),
                "--corpus".into(),
                corpus_path.display().to_string(),
                "--nil-prior-k".into(),
                "2".into(),
            ],
            vec![
                "annotate".into(),
                "--dir".into(),
                dir.display().to_string(),
                "--corpus".into(),
                corpus_path.display().to_string(),
            ],
            vec![
                "fragment".into(),
                "--dir".into(),
                dir.display().to_string(),
                "--preset".into(),
                "setting2".into(),
                "--seed".into(),
                "3".into(),
                "--n-valid".into(),
                "8".into(),
            ],
            vec![
                "train".into(),
                "--dir".into(),
                dir.display().to_string(),
                "--config".into(),
                config_path.display().to_string(),
            ],
        ] {
            let output = Command::new(env!("CARGO_BIN_EXE_tokel")).args(&args).output().unwrap();
            assert!(
                output.status.success(),
                "{:?} failed: {}",
                args,
                String::from_utf8_lossy(&output.stderr)
            );
        }
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        manifest["artifacts"]
            .as_object()
            .unwrap()
            .iter()
            .map(|(name, record)| (name.clone(), record["sha256"].as_str().unwrap().to_string()))
            .collect::<BTreeMap<String, String>>()
    };

    let first = run_pipeline(&work.path().join("run1"));
    let second = run_pipeline(&work.path().join("run2"));
    assert!(!first.is_empty());
    assert_eq!(first, second, "artifact hashes differ between identically seeded reruns");
    println!(
        "PASS determinism: {} artifact hashes bit-identical across reruns",
        first.len()
    );
}
