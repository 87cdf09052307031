//! Per-token neural entity linking at desk scale.
//!
//! The pipeline turns link-annotated documents into a trained per-token
//! entity classifier:
//!
//! 1. [`corpus`] — entity vocabulary, mention statistics and the Nil
//!    discounting correction.
//! 2. [`annotator`] — trie-based weak annotation of all linkable strings
//!    with `p(e|m)`-weighted labels.
//! 3. [`fragmenter`] — fixed-length overlapping fragments with the
//!    Setting I / Setting II retention rules.
//! 4. [`model`] — a small self-attention encoder plus the entity
//!    classification layer scoring `sigmoid(E_j . c_i)` per token.
//! 5. [`trainer`] — soft-target subset BCE with batch-level hard-negative
//!    mining and the frozen-then-finetune schedule.
//! 6. [`evaluator`] — strong/weak Micro InKB F1 and ED Precision@1.
//!
//! Stages communicate only through files; the [`pipeline`] module owns the
//! manifest, content hashing and atomic writes used by the `tokel` binary.

pub mod annotator;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod fragmenter;
pub mod model;
pub mod pipeline;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};

/// Wikipedia-style entity identifier, e.g. `Thor_(Marvel)`.
pub type EntityId = String;

/// Dense class id into the entity vocabulary. Id 0 is reserved for Nil.
pub type ClassId = u32;

/// The reserved Nil class id. Never scored, never mapped to an [`EntityId`].
pub const NIL_ID: ClassId = 0;
