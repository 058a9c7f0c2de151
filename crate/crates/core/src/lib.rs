//! Integrated Gradients explanations for bi-encoder dense retrievers.
//!
//! Documents are pre-indexed as mean-pooled vectors and ranked by dot
//! product. Token attributions come from Integrated Gradients in embedding
//! space, with the baseline built by replacing one side's content tokens with
//! `[PAD]` while the other side's vector stays fixed. On top of that sit
//! ranking-level aggregation over the top-k documents, title-span sums for
//! comparing two models, and NDCG@10 evaluation.

mod binio;

pub mod attribution;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod explain;
pub mod index;
pub mod report;
pub mod seeds;

pub use attribution::{AttributionResult, IgConfig, QuadratureRule};
pub use corpus::{Corpus, Document, Qrels, Queries, Query};
pub use encoder::{EncoderBackend, ReferenceEncoder, Side, TokenizedText, Vocabulary};
pub use error::{Error, Result};
pub use index::DenseIndex;
