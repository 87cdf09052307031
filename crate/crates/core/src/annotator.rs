//! Trie-based multi-pattern matching over the linkable strings `M` and
//! weak annotation of their occurrences with `p(e|m)`-weighted labels.
//!
//! Match semantics are leftmost-longest, non-overlapping, token-boundary
//! aligned. Gold links always win: a weak hit overlapping any gold span is
//! suppressed entirely.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MentionTable};
use crate::error::{Error, Result};
use crate::EntityId;

#[derive(Debug, Default)]
struct TrieNode {
    children: HashMap<String, TrieNode>,
    /// Pattern length in tokens when a pattern ends here.
    terminal: Option<usize>,
}

/// Token-level trie over the mention strings of a [`MentionTable`].
/// Immutable after build.
#[derive(Debug)]
pub struct MentionMatcher {
    root: TrieNode,
    pattern_count: usize,
}

impl MentionMatcher {
    /// Builds the matcher from every mention string of the table.
    pub fn build(table: &MentionTable) -> Result<Self> {
        Self::from_patterns(table.mentions().map(|m| m.as_str()))
    }

    pub fn from_patterns<'a, I: IntoIterator<Item = &'a str>>(patterns: I) -> Result<Self> {
        let mut root = TrieNode::default();
        let mut pattern_count = 0;
        for pattern in patterns {
            let tokens: Vec<&str> = pattern.split(' ').collect();
            if pattern.is_empty() || tokens.iter().any(|t| t.is_empty()) {
                return Err(Error::Data(format!("degenerate mention pattern: {pattern:?}")));
            }
            let len = tokens.len();
            let mut node = &mut root;
            for tok in tokens {
                node = node.children.entry(tok.to_string()).or_default();
            }
            if node.terminal.is_none() {
                pattern_count += 1;
            }
            node.terminal = Some(len);
        }
        Ok(Self { root, pattern_count })
    }

    pub fn pattern_count(&self) -> usize {
        self.pattern_count
    }

    /// Exact membership test for a space-joined pattern.
    pub fn contains(&self, pattern: &str) -> bool {
        let mut node = &self.root;
        for tok in pattern.split(' ') {
            match node.children.get(tok) {
                Some(next) => node = next,
                None => return false,
            }
        }
        node.terminal.is_some()
    }

    /// Length of the longest pattern matching at `pos`, if any.
    fn longest_at(&self, tokens: &[String], pos: usize) -> Option<usize> {
        let mut node = &self.root;
        let mut best = None;
        for tok in &tokens[pos..] {
            match node.children.get(tok.as_str()) {
                Some(next) => {
                    node = next;
                    if let Some(len) = node.terminal {
                        best = Some(len);
                    }
                }
                None => break,
            }
        }
        best
    }

    /// Leftmost-longest, non-overlapping hits over the token stream.
    pub fn scan(&self, tokens: &[String]) -> Vec<(usize, usize)> {
        let mut hits = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            match self.longest_at(tokens, pos) {
                Some(len) => {
                    hits.push((pos, pos + len - 1));
                    pos += len;
                }
                None => pos += 1,
            }
        }
        hits
    }
}

/// Provenance of an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Gold,
    Weak,
}

/// A labeled span. Gold annotations carry a single label with probability 1;
/// weak labels are `p(e|m)` restricted to non-Nil entries, so they sum to
/// `1 - p(Nil|m)`. The Nil mass is implicit.
///
/// On the wire this is the array `[start, end, {entity: prob, ...}, source]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AnnotationRepr", into = "AnnotationRepr")]
pub struct WeightedAnnotation {
    pub start: usize,
    pub end: usize,
    pub labels: BTreeMap<EntityId, f64>,
    pub source: AnnotationSource,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRepr(usize, usize, BTreeMap<EntityId, f64>, AnnotationSource);

impl From<AnnotationRepr> for WeightedAnnotation {
    fn from(r: AnnotationRepr) -> Self {
        Self { start: r.0, end: r.1, labels: r.2, source: r.3 }
    }
}

impl From<WeightedAnnotation> for AnnotationRepr {
    fn from(a: WeightedAnnotation) -> Self {
        Self(a.start, a.end, a.labels, a.source)
    }
}

impl WeightedAnnotation {
    pub fn gold(start: usize, end: usize, entity: EntityId) -> Self {
        Self {
            start,
            end,
            labels: BTreeMap::from([(entity, 1.0)]),
            source: AnnotationSource::Gold,
        }
    }

    pub fn is_gold(&self) -> bool {
        self.source == AnnotationSource::Gold
    }

    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start <= end && start <= self.end
    }
}

/// Gold annotations for every original link plus weak annotations for every
/// selected matcher hit that does not overlap a gold span. Output is sorted
/// by start index.
pub fn annotate(
    doc: &Document,
    matcher: &MentionMatcher,
    table: &MentionTable,
) -> Result<Vec<WeightedAnnotation>> {
    let mut out: Vec<WeightedAnnotation> = doc
        .links
        .iter()
        .map(|l| WeightedAnnotation::gold(l.start, l.end, l.entity.clone()))
        .collect();

    for (start, end) in matcher.scan(&doc.tokens) {
        if doc.links.iter().any(|l| l.start <= end && start <= l.end) {
            continue;
        }
        let mention = doc.surface(start, end);
        let probs = table.conditional_prob(&mention)?;
        let labels: BTreeMap<EntityId, f64> = probs
            .into_iter()
            .filter_map(|(e, p)| e.map(|e| (e, p)))
            .collect();
        if labels.is_empty() {
            continue;
        }
        out.push(WeightedAnnotation { start, end, labels, source: AnnotationSource::Weak });
    }

    out.sort_by_key(|a| a.start);
    Ok(out)
}

/// A document together with its weighted annotations, the unit exchanged
/// between the annotate and fragment stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub annotations: Vec<WeightedAnnotation>,
}

pub fn annotate_corpus(
    docs: &[Document],
    matcher: &MentionMatcher,
    table: &MentionTable,
) -> Result<Vec<AnnotatedDocument>> {
    docs.iter()
        .map(|doc| {
            Ok(AnnotatedDocument {
                doc_id: doc.doc_id.clone(),
                tokens: doc.tokens.clone(),
                annotations: annotate(doc, matcher, table)?,
            })
        })
        .collect()
}

pub fn write_annotated<W: std::io::Write>(w: &mut W, docs: &[AnnotatedDocument]) -> Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut *w, doc).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_annotated<R: std::io::BufRead>(reader: R) -> Result<Vec<AnnotatedDocument>> {
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: AnnotatedDocument = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}
