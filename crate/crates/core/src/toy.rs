//! Synthetic corpus generation for end-to-end tests and demos: a small
//! closed world of entities whose mentions are disambiguated by nearby
//! cue tokens, so a small encoder can learn the task quickly.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, EntityVocabulary, LinkAnnotation};
use crate::error::Result;
use crate::fragmenter::{Fragment, TokenVocabulary};
use crate::EntityId;

/// Knobs for the generator. `n_ambiguous_surfaces` controls how many
/// surface forms are shared between two entities and require context to
/// resolve.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub n_docs: usize,
    pub n_entities: usize,
    pub n_ambiguous_surfaces: usize,
    pub mentions_per_doc: usize,
    pub filler_between: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_docs: 200,
            n_entities: 50,
            n_ambiguous_surfaces: 6,
            mentions_per_doc: 4,
            filler_between: 3,
            seed: 0,
        }
    }
}

/// The generated world: documents plus the vocabularies derived from them.
pub struct ToyCorpus {
    pub documents: Vec<Document>,
    pub entities: Vec<EntityId>,
    /// Surfaces shared by two entities, with the entity pair.
    pub ambiguous_surfaces: Vec<(String, [EntityId; 2])>,
}

const FILLERS: &[&str] = &[
    "the", "a", "of", "and", "said", "today", "also", "near", "with", "from",
    "report", "notes", "again", "about", "while", "more",
];

/// Builds a closed-world corpus. Each entity `k` has surface `ent<k>` and
/// a cue token `cue<k>` that appears right before every mention of it.
/// The first `n_ambiguous_surfaces` entity pairs additionally share a
/// surface `amb<j>`, resolvable only through the cue.
pub fn generate(config: &ToyConfig) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let entities: Vec<EntityId> = (0..config.n_entities).map(|k| format!("E{k:02}")).collect();

    let mut ambiguous = Vec::new();
    for j in 0..config.n_ambiguous_surfaces {
        let a = (2 * j) % config.n_entities;
        let b = (2 * j + 1) % config.n_entities;
        ambiguous.push((format!("amb{j}"), [entities[a].clone(), entities[b].clone()]));
    }
    // entity index -> ambiguous surface it can appear under
    let mut amb_of: BTreeMap<usize, String> = BTreeMap::new();
    for (surface, [a, b]) in &ambiguous {
        let ia = entities.iter().position(|e| e == a).unwrap();
        let ib = entities.iter().position(|e| e == b).unwrap();
        amb_of.insert(ia, surface.clone());
        amb_of.insert(ib, surface.clone());
    }

    let mut documents = Vec::with_capacity(config.n_docs);
    for d in 0..config.n_docs {
        let mut tokens: Vec<String> = Vec::new();
        let mut links = Vec::new();
        for _ in 0..config.mentions_per_doc {
            for _ in 0..config.filler_between {
                tokens.push(FILLERS.choose(&mut rng).unwrap().to_string());
            }
            let k = rng.gen_range(0..config.n_entities);
            // The cue makes every mention resolvable from context.
            tokens.push(format!("cue{k}"));
            let surface = match amb_of.get(&k) {
                Some(amb) if rng.gen_bool(0.5) => amb.clone(),
                _ => format!("ent{k}"),
            };
            let start = tokens.len();
            tokens.push(surface);
            links.push(LinkAnnotation { start, end: start, entity: entities[k].clone() });
        }
        for _ in 0..config.filler_between {
            tokens.push(FILLERS.choose(&mut rng).unwrap().to_string());
        }
        documents.push(Document { doc_id: format!("toy-{d:03}"), tokens, links });
    }

    ToyCorpus { documents, entities, ambiguous_surfaces: ambiguous }
}

impl ToyCorpus {
    pub fn entity_vocab(&self) -> Result<EntityVocabulary> {
        EntityVocabulary::from_entries(self.entities.clone())
    }

    pub fn token_vocab(&self) -> TokenVocabulary {
        TokenVocabulary::build(
            self.documents.iter().flat_map(|d| d.tokens.iter().map(|t| t.as_str())),
            10_000,
        )
    }

    /// One fragment per document, every link carried over as a gold
    /// annotation. Suited for training directly without the weak-label
    /// stages.
    pub fn fragments(&self, vocab: &TokenVocabulary) -> Vec<Fragment> {
        self.documents
            .iter()
            .map(|doc| Fragment {
                frag_id: doc.doc_id.clone(),
                token_ids: doc.tokens.iter().map(|t| vocab.id_of(t)).collect(),
                annotations: doc
                    .links
                    .iter()
                    .map(|l| crate::annotator::WeightedAnnotation::gold(l.start, l.end, l.entity.clone()))
                    .collect(),
                origin: (doc.doc_id.clone(), 0),
            })
            .collect()
    }

    /// Count of generated mentions that used an ambiguous surface.
    pub fn ambiguous_mention_count(&self) -> usize {
        self.documents
            .iter()
            .flat_map(|d| d.links.iter().map(move |l| &d.tokens[l.start]))
            .filter(|t| t.starts_with("amb"))
            .count()
    }
}
