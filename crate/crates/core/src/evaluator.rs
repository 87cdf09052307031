//! Span-level evaluation: strong and weak micro-averaged in-KB
//! precision/recall/F1, plus disambiguation precision at 1.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, EntityId, NIL_ID};

/// A linked span in the reference annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

/// A predicted span: a maximal run of tokens assigned the same entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PrfScores {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1, tp, fp, fn_ }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strong: PrfScores,
    pub weak: PrfScores,
}

/// Collapses a per-token class-id sequence into maximal equal-entity runs,
/// dropping Nil tokens. `name_of` maps a class id back to its entity name.
pub fn extract_spans(
    doc_id: &str,
    token_classes: &[ClassId],
    name_of: impl Fn(ClassId) -> EntityId,
) -> Vec<SpanPrediction> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < token_classes.len() {
        let id = token_classes[i];
        if id == NIL_ID {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < token_classes.len() && token_classes[i + 1] == id {
            i += 1;
        }
        spans.push(SpanPrediction {
            doc_id: doc_id.to_string(),
            start,
            end: i,
            entity: name_of(id),
        });
        i += 1;
    }
    spans
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Micro-averaged in-KB strong and weak span scores.
///
/// Strong: a prediction is a true positive iff some gold span matches it
/// exactly in document, boundaries and entity. Weak: a gold span counts
/// as found iff at least one of its tokens is predicted as its entity; a
/// prediction is a weak false positive iff it shares no token with any
/// gold span of the same entity. Gold spans whose entity fails `in_kb`
/// are ignored, as are predictions of out-of-KB entities.
pub fn strong_weak_f1(
    gold: &[GoldSpan],
    predictions: &[SpanPrediction],
    in_kb: &dyn Fn(&str) -> bool,
) -> Result<MetricsReport> {
    for g in gold {
        if g.end < g.start {
            return Err(Error::Data(format!("gold span with end {} before start {}", g.end, g.start)));
        }
    }
    for p in predictions {
        if p.end < p.start {
            return Err(Error::Data(format!("prediction with end {} before start {}", p.end, p.start)));
        }
    }
    let gold: Vec<&GoldSpan> = gold.iter().filter(|g| in_kb(&g.entity)).collect();
    let preds: Vec<&SpanPrediction> = predictions.iter().filter(|p| in_kb(&p.entity)).collect();

    // Group by document for the overlap scans.
    let mut gold_by_doc: BTreeMap<&str, Vec<&GoldSpan>> = BTreeMap::new();
    for g in &gold {
        gold_by_doc.entry(&g.doc_id).or_default().push(g);
    }
    let mut preds_by_doc: BTreeMap<&str, Vec<&SpanPrediction>> = BTreeMap::new();
    for p in &preds {
        preds_by_doc.entry(&p.doc_id).or_default().push(p);
    }

    let empty_g: Vec<&GoldSpan> = Vec::new();
    let empty_p: Vec<&SpanPrediction> = Vec::new();

    let mut strong_tp = 0u64;
    let mut weak_fp = 0u64;
    for p in &preds {
        let doc_gold = gold_by_doc.get(p.doc_id.as_str()).unwrap_or(&empty_g);
        if doc_gold
            .iter()
            .any(|g| g.start == p.start && g.end == p.end && g.entity == p.entity)
        {
            strong_tp += 1;
        }
        if !doc_gold
            .iter()
            .any(|g| g.entity == p.entity && overlaps((g.start, g.end), (p.start, p.end)))
        {
            weak_fp += 1;
        }
    }

    let mut weak_tp = 0u64;
    for g in &gold {
        let doc_preds = preds_by_doc.get(g.doc_id.as_str()).unwrap_or(&empty_p);
        if doc_preds
            .iter()
            .any(|p| p.entity == g.entity && overlaps((g.start, g.end), (p.start, p.end)))
        {
            weak_tp += 1;
        }
    }

    let strong = PrfScores::from_counts(
        strong_tp,
        preds.len() as u64 - strong_tp,
        gold.len() as u64 - strong_tp,
    );
    let weak = PrfScores::from_counts(weak_tp, weak_fp, gold.len() as u64 - weak_tp);
    Ok(MetricsReport { strong, weak })
}

/// Disambiguation precision at 1: for each gold span, average the logits
/// over the span's tokens and pick the argmax non-Nil entity; correct iff
/// it equals the gold entity. Gold spans give the mention boundaries, so
/// detection is factored out. Returns 1.0 with a warning when there are
/// no gold spans.
pub fn ed_precision_at_1(
    gold: &[GoldSpan],
    span_logits: impl Fn(&GoldSpan) -> Result<(Vec<ClassId>, Array2<f64>)>,
    name_of: impl Fn(ClassId) -> EntityId,
) -> Result<f64> {
    if gold.is_empty() {
        eprintln!("warning: disambiguation scored on zero gold spans; reporting 1.0");
        return Ok(1.0);
    }
    let mut correct = 0u64;
    for g in gold {
        let (entity_ids, logits) = span_logits(g)?;
        if logits.nrows() != g.end - g.start + 1 || logits.ncols() != entity_ids.len() {
            return Err(Error::Shape(format!(
                "span logits for {}[{},{}] have shape {:?}",
                g.doc_id,
                g.start,
                g.end,
                logits.dim()
            )));
        }
        let mean = logits.mean_axis(ndarray::Axis(0)).unwrap();
        let mut best: Option<(ClassId, f64)> = None;
        for (j, &id) in entity_ids.iter().enumerate() {
            if id == NIL_ID {
                continue;
            }
            let v = mean[j];
            match best {
                Some((bid, bv)) if v < bv || (v == bv && id >= bid) => {}
                _ => best = Some((id, v)),
            }
        }
        if let Some((id, _)) = best {
            if name_of(id) == g.entity {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

/// Writes spans as TSV: `doc_id start end entity`, one per line, with a
/// versioned header.
pub fn write_spans<W: Write>(mut w: W, spans: &[SpanPrediction]) -> Result<()> {
    writeln!(w, "#spans\tv1")?;
    for s in spans {
        writeln!(w, "{}\t{}\t{}\t{}", s.doc_id, s.start, s.end, s.entity)?;
    }
    Ok(())
}

pub fn read_spans<R: BufRead>(r: R) -> Result<Vec<SpanPrediction>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(header)) if header.trim_end() == "#spans\tv1" => {}
        _ => return Err(Error::Parse { line: 1, msg: "expected header '#spans\\tv1'".into() }),
    }
    let mut spans = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: idx + 2,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_idx = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: idx + 2,
                msg: format!("invalid token index '{s}'"),
            })
        };
        let start = parse_idx(fields[1])?;
        let end = parse_idx(fields[2])?;
        if end < start {
            return Err(Error::Parse { line: idx + 2, msg: "span end before start".into() });
        }
        spans.push(SpanPrediction {
            doc_id: fields[0].to_string(),
            start,
            end,
            entity: fields[3].to_string(),
        });
    }
    Ok(spans)
}

/// Writes a per-token column file: one token label per line (`O` for Nil),
/// blank line between documents.
pub fn write_token_column<W: Write>(mut w: W, docs: &[(String, Vec<Option<EntityId>>)]) -> Result<()> {
    for (i, (doc_id, labels)) in docs.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        writeln!(w, "#doc\t{doc_id}")?;
        for label in labels {
            writeln!(w, "{}", label.as_deref().unwrap_or("O"))?;
        }
    }
    Ok(())
}
