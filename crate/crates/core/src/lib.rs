//! Cross-lingual named entity recognition as token-pair relation
//! classification.
//!
//! Entities are encoded as `n × n` relation grids ([`relcodec`]). A small
//! from-scratch encoder ([`model`]) with biaffine and conditional layer
//! normalization relation layers is trained on labeled source sentences and
//! their code-switched counterparts ([`codeswitch`]) with a relation
//! cross-entropy plus sentence-level and relation-level contrastive losses
//! ([`objectives`]). The trained model then pseudo-labels unlabeled
//! target-language text and a student is distilled from it ([`selftrain`]).
//!
//! Everything numeric runs on the small reverse-mode engine in [`diff`].

pub mod benchmark;
pub mod codeswitch;
pub mod corpus;
pub mod diff;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod relcodec;
pub mod rng;
pub mod selftrain;
pub mod synth;

pub use corpus::{EntitySpan, F1Report, Label, LabeledSentence, TagSchema};
pub use error::{Error, Result};
pub use relcodec::{RelationClass, RelationGrid, ScoredGrid};
