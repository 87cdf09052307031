//! Chunking annotated documents into overlapping fixed-length fragments,
//! the Setting I / Setting II retention rules, the per-entity cap, and the
//! seeded train/valid/test split.

use std::collections::{BTreeMap, HashMap};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotator::{AnnotatedDocument, AnnotationSource, WeightedAnnotation};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::EntityId;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Word-level token vocabulary with reserved PAD and UNK entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocabulary {
    /// Builds from corpus tokens: keeps the `max_size` most frequent words
    /// (ties lexicographic) after the two reserved slots.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I, max_size: usize) -> Self {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for t in tokens {
            *freq.entry(t).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut entries = vec!["<pad>".to_string(), "<unk>".to_string()];
        entries.extend(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(2))
                .map(|(t, _)| t.to_string()),
        );
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { entries, index }
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|s| s.as_str())
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for t in &self.entries {
            hasher.update(t.as_bytes());
            hasher.update([0]);
        }
        crate::model::hex_string(&hasher.finalize())
    }

    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "#token-vocab\tv1\tsize={}", self.size())?;
        for t in &self.entries[2..] {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty token vocabulary".into()))??;
        if !header.starts_with("#token-vocab\tv1") {
            return Err(Error::Data(format!("bad token vocabulary header: {header}")));
        }
        let mut entries = vec!["<pad>".to_string(), "<unk>".to_string()];
        for line in lines {
            let line = line?;
            if !line.is_empty() {
                entries.push(line);
            }
        }
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { entries, index })
    }
}

/// Fragment retention presets. `setting_1` and `setting_2` mirror the two
/// published filtering regimes, scaled by `fragment_len`/`overlap`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettingPreset {
    pub name: String,
    pub fragment_len: usize,
    pub overlap: usize,
    /// Keep if at least this many gold links to infrequent entities (0 disables).
    pub min_infrequent: usize,
    /// Keep if at least this many gold links to frequent entities (0 disables).
    pub min_frequent: usize,
    /// Keep if at least this many gold links of any kind (0 disables).
    pub min_any: usize,
    /// Per-entity fragment cap; `None` disables capping.
    pub per_entity_cap: Option<usize>,
    /// Entities with corpus frequency below this count as infrequent.
    pub infrequent_threshold: u64,
}

impl SettingPreset {
    /// Setting I: length 110, overlap 20, keep fragments with >= 1
    /// infrequent link or >= 3 frequent ones, no cap.
    pub fn setting_1() -> Self {
        Self {
            name: "setting_1".into(),
            fragment_len: 110,
            overlap: 20,
            min_infrequent: 1,
            min_frequent: 3,
            min_any: 0,
            per_entity_cap: None,
            infrequent_threshold: 10,
        }
    }

    /// Setting II: length 250, keep fragments with >= 1 link, at most 500
    /// fragments per entity.
    pub fn setting_2() -> Self {
        Self {
            name: "setting_2".into(),
            fragment_len: 250,
            overlap: 20,
            min_infrequent: 0,
            min_frequent: 0,
            min_any: 1,
            per_entity_cap: Some(500),
            infrequent_threshold: 10,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "setting_1" | "setting1" => Ok(Self::setting_1()),
            "setting_2" | "setting2" => Ok(Self::setting_2()),
            other => Err(Error::Config(format!("unknown preset: {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fragment_len == 0 || self.overlap >= self.fragment_len {
            return Err(Error::Config(format!(
                "preset {}: need 0 <= overlap < fragment_len, got {} / {}",
                self.name, self.overlap, self.fragment_len
            )));
        }
        Ok(())
    }

    /// Applies key=value overrides onto the preset.
    pub fn apply_overrides(&mut self, kv: &KvConfig) -> Result<()> {
        for (key, value) in kv.entries() {
            match key {
                "name" => self.name = value.to_string(),
                "fragment_len" => self.fragment_len = kv.parse(key)?,
                "overlap" => self.overlap = kv.parse(key)?,
                "min_infrequent" => self.min_infrequent = kv.parse(key)?,
                "min_frequent" => self.min_frequent = kv.parse(key)?,
                "min_any" => self.min_any = kv.parse(key)?,
                "per_entity_cap" => {
                    self.per_entity_cap = if value == "none" {
                        None
                    } else {
                        Some(kv.parse(key)?)
                    }
                }
                "infrequent_threshold" => self.infrequent_threshold = kv.parse(key)?,
                other => return Err(Error::Config(format!("unknown preset key: {other}"))),
            }
        }
        self.validate()
    }
}

/// A fixed-length token window with fragment-local annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub frag_id: String,
    pub token_ids: Vec<u32>,
    pub annotations: Vec<WeightedAnnotation>,
    pub origin: (String, usize),
}

impl Fragment {
    pub fn gold_annotations(&self) -> impl Iterator<Item = &WeightedAnnotation> {
        self.annotations.iter().filter(|a| a.source == AnnotationSource::Gold)
    }

    /// The single entity of a gold annotation.
    pub fn gold_entities(&self) -> impl Iterator<Item = &EntityId> {
        self.gold_annotations().flat_map(|a| a.labels.keys())
    }
}

/// Chunks one document into fragments at offsets `0, L-O, 2(L-O), ...`.
/// Annotations crossing a fragment boundary are dropped from that fragment;
/// with enough overlap they survive in a neighbor.
pub fn fragment(
    doc: &AnnotatedDocument,
    preset: &SettingPreset,
    vocab: &TokenVocabulary,
) -> Result<Vec<Fragment>> {
    preset.validate()?;
    let n = doc.tokens.len();
    let stride = preset.fragment_len - preset.overlap;
    let mut out = Vec::new();
    let mut offset = 0;
    loop {
        let end = (offset + preset.fragment_len).min(n);
        let token_ids = doc.tokens[offset..end].iter().map(|t| vocab.id_of(t)).collect();
        let annotations = doc
            .annotations
            .iter()
            .filter(|a| a.start >= offset && a.end < end)
            .map(|a| WeightedAnnotation {
                start: a.start - offset,
                end: a.end - offset,
                labels: a.labels.clone(),
                source: a.source,
            })
            .collect();
        out.push(Fragment {
            frag_id: format!("{}@{}", doc.doc_id, offset),
            token_ids,
            annotations,
            origin: (doc.doc_id.clone(), offset),
        });
        offset += stride;
        if offset >= n {
            break;
        }
    }
    Ok(out)
}

pub fn fragment_corpus(
    docs: &[AnnotatedDocument],
    preset: &SettingPreset,
    vocab: &TokenVocabulary,
) -> Result<Vec<Fragment>> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend(fragment(doc, preset, vocab)?);
    }
    Ok(out)
}

/// Retention rule: a fragment is kept when any enabled criterion is met.
/// Only gold annotations count.
pub fn filter_fragments(
    frags: Vec<Fragment>,
    preset: &SettingPreset,
    entity_freq: &BTreeMap<EntityId, u64>,
) -> Vec<Fragment> {
    frags
        .into_iter()
        .filter(|f| {
            let gold: Vec<&EntityId> = f.gold_entities().collect();
            let infrequent = gold
                .iter()
                .filter(|e| entity_freq.get(**e).copied().unwrap_or(0) < preset.infrequent_threshold)
                .count();
            let frequent = gold.len() - infrequent;
            (preset.min_infrequent > 0 && infrequent >= preset.min_infrequent)
                || (preset.min_frequent > 0 && frequent >= preset.min_frequent)
                || (preset.min_any > 0 && gold.len() >= preset.min_any)
        })
        .collect()
}

/// Greedy per-entity cap in seeded-shuffled order: a fragment is kept iff
/// every gold entity in it is still below the cap. Output keeps the
/// original fragment order.
pub fn cap_per_entity(frags: Vec<Fragment>, cap: usize, seed: u64) -> Result<Vec<Fragment>> {
    if cap == 0 {
        return Err(Error::Config("per-entity cap must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..frags.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut kept = vec![false; frags.len()];
    let mut counts: HashMap<&EntityId, usize> = HashMap::new();
    for &i in &order {
        let entities: Vec<&EntityId> = frags[i].gold_entities().collect();
        if entities.iter().any(|e| counts.get(*e).copied().unwrap_or(0) >= cap) {
            continue;
        }
        for e in entities {
            *counts.entry(e).or_insert(0) += 1;
        }
        kept[i] = true;
    }
    Ok(frags
        .into_iter()
        .zip(kept)
        .filter_map(|(f, k)| k.then_some(f))
        .collect())
}

/// Seeded disjoint partition into train / valid / test.
pub fn split(
    frags: Vec<Fragment>,
    n_valid: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<Fragment>, Vec<Fragment>, Vec<Fragment>)> {
    if n_valid + n_test > frags.len() {
        return Err(Error::Data(format!(
            "cannot take {n_valid}+{n_test} from {} fragments",
            frags.len()
        )));
    }
    let mut order: Vec<usize> = (0..frags.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut slot = vec![0u8; frags.len()];
    for &i in order.iter().take(n_valid) {
        slot[i] = 1;
    }
    for &i in order.iter().skip(n_valid).take(n_test) {
        slot[i] = 2;
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (f, s) in frags.into_iter().zip(slot) {
        match s {
            1 => valid.push(f),
            2 => test.push(f),
            _ => train.push(f),
        }
    }
    Ok((train, valid, test))
}

pub fn write_fragments<W: std::io::Write>(w: &mut W, frags: &[Fragment]) -> Result<()> {
    for f in frags {
        serde_json::to_writer(&mut *w, f).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_fragments<R: std::io::BufRead>(reader: R) -> Result<Vec<Fragment>> {
    let mut frags = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Fragment = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        frags.push(f);
    }
    Ok(frags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TokenVocabulary {
        TokenVocabulary::build(["a", "b", "c", "d"], 16)
    }

    fn doc_with(tokens: usize, annotations: Vec<WeightedAnnotation>) -> AnnotatedDocument {
        AnnotatedDocument {
            doc_id: "d".into(),
            tokens: (0..tokens).map(|_| "a".to_string()).collect(),
            annotations,
        }
    }

    fn preset(len: usize, overlap: usize) -> SettingPreset {
        SettingPreset {
            name: "custom".into(),
            fragment_len: len,
            overlap,
            min_infrequent: 0,
            min_frequent: 0,
            min_any: 1,
            per_entity_cap: None,
            infrequent_threshold: 10,
        }
    }

    #[test]
    fn fragment_offsets_and_lengths() {
        // 12 tokens, L=5, O=2 -> offsets 0,3,6,9 with lengths 5,5,5,3.
        let frags = fragment(&doc_with(12, vec![]), &preset(5, 2), &vocab()).unwrap();
        let shape: Vec<(usize, usize)> =
            frags.iter().map(|f| (f.origin.1, f.token_ids.len())).collect();
        assert_eq!(shape, vec![(0, 5), (3, 5), (6, 5), (9, 3)]);
    }

    #[test]
    fn boundary_annotation_survives_in_neighbor() {
        let ann = WeightedAnnotation::gold(4, 5, "E".into());
        let frags = fragment(&doc_with(12, vec![ann]), &preset(5, 2), &vocab()).unwrap();
        assert!(frags[0].annotations.is_empty());
        assert_eq!(frags[1].annotations.len(), 1);
        assert_eq!((frags[1].annotations[0].start, frags[1].annotations[0].end), (1, 2));
    }

    #[test]
    fn short_doc_yields_single_fragment() {
        let frags = fragment(&doc_with(3, vec![]), &preset(5, 2), &vocab()).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].token_ids.len(), 3);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let doc = AnnotatedDocument {
            doc_id: "d".into(),
            tokens: vec!["zzz".into()],
            annotations: vec![],
        };
        let frags = fragment(&doc, &preset(5, 2), &vocab()).unwrap();
        assert_eq!(frags[0].token_ids, vec![UNK_ID]);
    }

    fn frag_with(entities: &[&str]) -> Fragment {
        Fragment {
            frag_id: "f".into(),
            token_ids: vec![2; 8],
            annotations: entities
                .iter()
                .enumerate()
                .map(|(i, e)| WeightedAnnotation::gold(i, i, (*e).to_string()))
                .collect(),
            origin: ("d".into(), 0),
        }
    }

    #[test]
    fn setting_1_keeps_single_infrequent() {
        let preset = SettingPreset::setting_1();
        let freq = BTreeMap::from([("rare".to_string(), 3u64)]);
        let kept = filter_fragments(vec![frag_with(&["rare"])], &preset, &freq);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn setting_1_drops_two_frequent() {
        let preset = SettingPreset::setting_1();
        let freq = BTreeMap::from([("pop1".to_string(), 100u64), ("pop2".to_string(), 100u64)]);
        let kept = filter_fragments(vec![frag_with(&["pop1", "pop2"])], &preset, &freq);
        assert!(kept.is_empty());
    }

    #[test]
    fn setting_2_drops_linkless_fragment() {
        let preset = SettingPreset::setting_2();
        let kept = filter_fragments(vec![frag_with(&[])], &preset, &BTreeMap::new());
        assert!(kept.is_empty());
    }

    #[test]
    fn cap_limits_per_entity_count() {
        let frags: Vec<Fragment> = (0..700).map(|_| frag_with(&["A"])).collect();
        let kept = cap_per_entity(frags, 500, 13).unwrap();
        assert_eq!(kept.len(), 500);
    }

    #[test]
    fn cap_not_binding_keeps_all() {
        let frags: Vec<Fragment> = (0..10).map(|_| frag_with(&["A"])).collect();
        let kept = cap_per_entity(frags, 500, 13).unwrap();
        assert_eq!(kept.len(), 10);
    }

    #[test]
    fn cap_with_cooccurring_entities() {
        let frags: Vec<Fragment> = (0..5).map(|_| frag_with(&["A", "B"])).collect();
        let kept = cap_per_entity(frags, 1, 13).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let frags: Vec<Fragment> = (0..100)
            .map(|i| Fragment {
                frag_id: format!("f{i}"),
                token_ids: vec![2],
                annotations: vec![],
                origin: ("d".into(), i),
            })
            .collect();
        let (tr, va, te) = split(frags.clone(), 10, 10, 42).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let (tr2, va2, te2) = split(frags.clone(), 10, 10, 42).unwrap();
        assert_eq!((tr, va, te), (tr2, va2, te2));
        assert!(split(frags, 60, 60, 42).is_err());
    }

    #[test]
    fn preset_overrides_parse() {
        let kv = KvConfig::parse_str("fragment_len=32\noverlap=8\nper_entity_cap=none\n").unwrap();
        let mut p = SettingPreset::setting_2();
        p.apply_overrides(&kv).unwrap();
        assert_eq!(p.fragment_len, 32);
        assert_eq!(p.overlap, 8);
        assert_eq!(p.per_entity_cap, None);
        let bad = KvConfig::parse_str("no_such_key=1\n").unwrap();
        assert!(p.apply_overrides(&bad).is_err());
    }
}
