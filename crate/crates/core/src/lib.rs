//! Protected-attribute removal and fairness auditing for vision-language
//! embeddings.
//!
//! The crate works purely on embedding vectors. A protected attribute
//! classifier ([`pac`]) is trained on labeled image embeddings and frozen; an
//! additive residual learner ([`arl`]) is then trained against it so that
//! `e + act(R e + b)` keeps the original content of `e` but no longer reveals
//! gender, race or age. [`metrics`] measures the effect as MaxSkew/MinSkew of
//! image-caption similarity, [`eval`] holds the surrounding scientific checks,
//! and [`synth`] produces data with planted attribute subspaces so every claim
//! can be checked against a known ground truth.

pub mod arl;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod numerics;
pub mod pac;
pub mod store;
pub mod synth;

mod binio;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use store::{
    Attribute, CaptionRecord, EmbeddingRecord, EmbeddingSet, LabelVocabulary, Sentiment, Split,
};
