//! Corpus ingestion, entity vocabulary and mention–entity statistics.
//!
//! Documents arrive as line-delimited JSON records (one document per line,
//! tokens pre-split). From the gold links we build the entity vocabulary,
//! accumulate `#(m,e)` counts for every linked surface string, realize
//! `#(m,Nil)` as unlinked occurrences of those strings, and apply the
//! Nil-discounting correction so that surface forms of very frequent
//! entities end up with `p(Nil|m) ~ 0`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, EntityId, NIL_ID};

/// A gold link annotation: token span (inclusive end) plus target entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAnnotation {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

/// One ingested document: lowercased tokens plus sorted, non-overlapping links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub links: Vec<LinkAnnotation>,
}

impl Document {
    /// Validates link bounds, ordering and non-overlap.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        let mut prev_end: Option<usize> = None;
        for link in &self.links {
            if link.entity.is_empty() {
                return Err(Error::Data(format!("doc {}: empty entity id", self.doc_id)));
            }
            if link.start > link.end || link.end >= n {
                return Err(Error::Data(format!(
                    "doc {}: link [{}, {}] out of bounds for {} tokens",
                    self.doc_id, link.start, link.end, n
                )));
            }
            if let Some(pe) = prev_end {
                if link.start <= pe {
                    return Err(Error::Data(format!(
                        "doc {}: links overlap or are unsorted at token {}",
                        self.doc_id, link.start
                    )));
                }
            }
            prev_end = Some(link.end);
        }
        Ok(())
    }

    /// Surface string of a span: tokens joined by single spaces.
    pub fn surface(&self, start: usize, end: usize) -> String {
        self.tokens[start..=end].join(" ")
    }
}

#[derive(Deserialize)]
struct RawDocument {
    doc_id: String,
    tokens: Vec<String>,
    links: Vec<(usize, usize, EntityId)>,
}

/// Parses a line-delimited corpus. Tokens are lowercased at ingestion;
/// malformed records abort with the offending line number or doc id.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let doc = Document {
            doc_id: raw.doc_id,
            tokens: raw.tokens.iter().map(|t| t.to_lowercase()).collect(),
            links: raw
                .links
                .into_iter()
                .map(|(start, end, entity)| LinkAnnotation { start, end, entity })
                .collect(),
        };
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes documents in the same JSON-lines shape [`parse_corpus`] reads:
/// `{"doc_id", "tokens", "links": [[start, end, entity], ...]}`.
pub fn write_corpus<W: std::io::Write>(w: &mut W, docs: &[Document]) -> Result<()> {
    for doc in docs {
        let links: Vec<(usize, usize, &EntityId)> =
            doc.links.iter().map(|l| (l.start, l.end, &l.entity)).collect();
        let line = serde_json::json!({
            "doc_id": doc.doc_id,
            "tokens": doc.tokens,
            "links": links,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Dense entity id assignment. Id 0 is Nil and maps to no [`EntityId`];
/// real entities occupy ids `1..=entries.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityVocabulary {
    entries: Vec<EntityId>,
    index: HashMap<EntityId, ClassId>,
}

impl EntityVocabulary {
    pub fn from_entries(entries: Vec<EntityId>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::Data("empty entity id in vocabulary".into()));
            }
            if index.insert(e.clone(), (i + 1) as ClassId).is_some() {
                return Err(Error::Data(format!("duplicate entity {e} in vocabulary")));
            }
        }
        Ok(Self { entries, index })
    }

    /// Number of classifier rows including the reserved Nil row 0.
    pub fn size(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.index.contains_key(entity)
    }

    pub fn id_of(&self, entity: &str) -> Option<ClassId> {
        self.index.get(entity).copied()
    }

    /// Entity for a dense id; `None` for Nil or out of range.
    pub fn entity_of(&self, id: ClassId) -> Option<&EntityId> {
        if id == NIL_ID {
            None
        } else {
            self.entries.get(id as usize - 1)
        }
    }

    pub fn entries(&self) -> &[EntityId] {
        &self.entries
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.as_bytes());
            hasher.update([0]);
        }
        crate::model::hex_string(&hasher.finalize())
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "#entity-vocab\tv1\tsize={}", self.size())?;
        for e in &self.entries {
            writeln!(w, "{e}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty vocabulary file".into()))??;
        if !header.starts_with("#entity-vocab\tv1") {
            return Err(Error::Data(format!("bad vocabulary header: {header}")));
        }
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if !line.is_empty() {
                entries.push(line);
            }
        }
        Self::from_entries(entries)
    }
}

/// Gold-link frequency per entity, the ranking key for vocabulary
/// construction and for picking the discounting mentions.
pub fn entity_frequencies(docs: &[Document]) -> BTreeMap<EntityId, u64> {
    let mut freq = BTreeMap::new();
    for doc in docs {
        for link in &doc.links {
            *freq.entry(link.entity.clone()).or_insert(0) += 1;
        }
    }
    freq
}

/// Top-k entities by gold-link frequency (ties lexicographic), plus all of
/// `must_include`. Mirrors building the vocabulary from the most frequent
/// entities and force-adding the benchmark's.
pub fn build_entity_vocab(
    docs: &[Document],
    top_k: usize,
    must_include: &BTreeSet<EntityId>,
) -> Result<EntityVocabulary> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    let freq = entity_frequencies(docs);
    let mut ranked: Vec<(&EntityId, u64)> = freq.iter().map(|(e, c)| (e, *c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut entries: Vec<EntityId> = ranked.iter().take(top_k).map(|(e, _)| (*e).clone()).collect();
    for e in must_include {
        if !entries.contains(e) {
            entries.push(e.clone());
        }
    }
    EntityVocabulary::from_entries(entries)
}

/// Per-mention entity counts. The Nil count lives under `None`.
pub type MentionCounts = BTreeMap<Option<EntityId>, f64>;

/// The linkable-string set `M` with `#(m,e)` and `#(m,Nil)` counts and the
/// recorded discounting statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MentionTable {
    pub counts: BTreeMap<String, MentionCounts>,
    /// `p_bar_Nil` after discounting; 0 before.
    pub nil_prior_mean: f64,
    /// `k` used to compute `nil_prior_mean`; 0 before discounting.
    pub top_k: usize,
}

/// Skipped-link tally emitted by [`collect_mention_stats`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub out_of_vocab_links: u64,
}

impl MentionTable {
    pub fn total(&self, mention: &str) -> Option<f64> {
        self.counts.get(mention).map(|c| c.values().sum())
    }

    /// `p(e|m)` including the Nil component under `None`.
    pub fn conditional_prob(&self, mention: &str) -> Result<MentionCounts> {
        let counts = self
            .counts
            .get(mention)
            .ok_or_else(|| Error::Data(format!("unknown mention: {mention:?}")))?;
        let total: f64 = counts.values().sum();
        if total <= 0.0 {
            return Err(Error::Data(format!("mention {mention:?} has zero total count")));
        }
        Ok(counts.iter().map(|(e, c)| (e.clone(), c / total)).collect())
    }

    pub fn mentions(&self) -> impl Iterator<Item = &String> {
        self.counts.keys()
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "#mention-table\tv1\tnil_prior_mean={}\ttop_k={}",
            self.nil_prior_mean, self.top_k
        )?;
        for (mention, counts) in &self.counts {
            for (entity, count) in counts {
                let e = entity.as_deref().unwrap_or(NIL_LABEL);
                writeln!(w, "{mention}\t{e}\t{count}")?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Data("empty mention table".into()))?;
        let header = header?;
        let mut nil_prior_mean = 0.0;
        let mut top_k = 0;
        let mut fields = header.split('\t');
        if fields.next() != Some("#mention-table") || fields.next() != Some("v1") {
            return Err(Error::Data(format!("bad mention table header: {header}")));
        }
        for field in fields {
            if let Some(v) = field.strip_prefix("nil_prior_mean=") {
                nil_prior_mean = v
                    .parse()
                    .map_err(|_| Error::Data(format!("bad nil_prior_mean: {v}")))?;
            } else if let Some(v) = field.strip_prefix("top_k=") {
                top_k = v.parse().map_err(|_| Error::Data(format!("bad top_k: {v}")))?;
            }
        }
        let mut counts: BTreeMap<String, MentionCounts> = BTreeMap::new();
        for (idx, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (m, e, c) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(m), Some(e), Some(c), None) => (m, e, c),
                _ => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        msg: "expected mention<TAB>entity<TAB>count".into(),
                    })
                }
            };
            let count: f64 = c.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                msg: format!("bad count: {c}"),
            })?;
            let entity = if e == NIL_LABEL { None } else { Some(e.to_string()) };
            counts.entry(m.to_string()).or_default().insert(entity, count);
        }
        Ok(Self { counts, nil_prior_mean, top_k })
    }
}

/// Spelling of the Nil pseudo-entity in the persisted table.
pub const NIL_LABEL: &str = "<Nil>";

/// Collects `#(m,e)` from in-vocabulary gold links, then realizes
/// `#(m,Nil)` as occurrences of collected mention strings not covered by
/// any gold link. Occurrence scanning uses the same leftmost-longest
/// non-overlapping rule as the weak annotator, so the Nil counts agree
/// with the weak annotations produced later.
pub fn collect_mention_stats(
    docs: &[Document],
    vocab: &EntityVocabulary,
) -> (MentionTable, SkipReport) {
    let mut report = SkipReport::default();
    let mut counts: BTreeMap<String, MentionCounts> = BTreeMap::new();

    // Pass 1: gold counts over the whole corpus; M must be complete before
    // unlinked occurrences can be attributed.
    for doc in docs {
        for link in &doc.links {
            if !vocab.contains(&link.entity) {
                report.out_of_vocab_links += 1;
                continue;
            }
            let m = doc.surface(link.start, link.end);
            *counts
                .entry(m)
                .or_default()
                .entry(Some(link.entity.clone()))
                .or_insert(0.0) += 1.0;
        }
    }

    // Pass 2: unlinked occurrences become Nil counts.
    let patterns: Vec<Vec<String>> = counts
        .keys()
        .map(|m| m.split(' ').map(str::to_string).collect())
        .collect();
    for doc in docs {
        for (start, end) in scan_occurrences(&doc.tokens, &patterns) {
            let covered = doc
                .links
                .iter()
                .any(|l| l.start <= end && start <= l.end);
            if covered {
                continue;
            }
            let m = doc.surface(start, end);
            *counts.get_mut(&m).unwrap().entry(None).or_insert(0.0) += 1.0;
        }
    }

    (MentionTable { counts, nil_prior_mean: 0.0, top_k: 0 }, report)
}

/// Brute-force leftmost-longest non-overlapping occurrence scan. Quadratic
/// in pattern count; the trie matcher in [`crate::annotator`] is the fast
/// path, this one doubles as its oracle.
pub fn scan_occurrences(tokens: &[String], patterns: &[Vec<String>]) -> Vec<(usize, usize)> {
    let mut hits = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut best_len = 0;
        for p in patterns {
            if p.len() > best_len
                && pos + p.len() <= tokens.len()
                && tokens[pos..pos + p.len()].iter().zip(p).all(|(a, b)| a == b)
            {
                best_len = p.len();
            }
        }
        if best_len > 0 {
            hits.push((pos, pos + best_len - 1));
            pos += best_len;
        } else {
            pos += 1;
        }
    }
    hits
}

/// Applies the Nil discount: `p_bar_Nil` is averaged over the single
/// most-frequent surface form of each of the `k` most frequent entities,
/// then every mention's Nil count is reduced by
/// `p_bar_Nil/(1-p_bar_Nil) * #(m, e_*)` and clamped at zero.
pub fn discount_nil(table: &MentionTable, k: usize) -> Result<MentionTable> {
    if k == 0 {
        return Err(Error::Config("discount k must be >= 1".into()));
    }

    // Rank entities by gold-link count, recovered as the per-entity column
    // sums over all mentions. Descending, ties lexicographic.
    let mut freq: BTreeMap<&EntityId, f64> = BTreeMap::new();
    for entity_counts in table.counts.values() {
        for (entity, count) in entity_counts {
            if let Some(e) = entity {
                *freq.entry(e).or_insert(0.0) += count;
            }
        }
    }
    let mut ranked: Vec<(&EntityId, f64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));

    // For each top entity, its most frequent surface form (ties lexicographic).
    let mut top_mentions: Vec<&String> = Vec::with_capacity(k);
    for (entity, _) in ranked {
        let key = Some((*entity).clone());
        let best = table
            .counts
            .iter()
            .filter_map(|(m, c)| c.get(&key).map(|n| (m, *n)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(a.0)));
        if let Some((m, _)) = best {
            if !top_mentions.contains(&m) {
                top_mentions.push(m);
                if top_mentions.len() == k {
                    break;
                }
            }
        }
    }
    if top_mentions.len() < k {
        return Err(Error::Data(format!(
            "need {k} mentions of distinct top entities, found {}",
            top_mentions.len()
        )));
    }

    let mut p_bar = 0.0;
    for m in &top_mentions {
        let counts = &table.counts[*m];
        let total: f64 = counts.values().sum();
        let nil = counts.get(&None).copied().unwrap_or(0.0);
        p_bar += nil / total;
    }
    p_bar /= k as f64;
    if p_bar >= 1.0 {
        return Err(Error::Numeric(format!(
            "degenerate corpus: nil prior mean {p_bar} >= 1"
        )));
    }

    let factor = p_bar / (1.0 - p_bar);
    let mut counts = table.counts.clone();
    for entity_counts in counts.values_mut() {
        let linked: f64 = entity_counts
            .iter()
            .filter(|(e, _)| e.is_some())
            .map(|(_, c)| *c)
            .sum();
        if let Some(nil) = entity_counts.get_mut(&None) {
            *nil = (*nil - factor * linked).max(0.0);
            if *nil == 0.0 {
                entity_counts.remove(&None);
            }
        }
    }

    Ok(MentionTable { counts, nil_prior_mean: p_bar, top_k: k })
}

/// Human-readable dump of the skip report for stage logs.
pub fn format_skip_report(report: &SkipReport) -> String {
    let mut s = String::new();
    let _ = write!(s, "out-of-vocab links skipped: {}", report.out_of_vocab_links);
    s
}
