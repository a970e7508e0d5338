//! Semi-parametric neural machine translation at desk scale.
//!
//! Three retrieval strategies ([`idf`] sentence retrieval, [`ngram`]
//! IDF n-gram retrieval and [`dense`] n-gram retrieval) produce neighbor
//! sets of training pairs. [`memory`] encodes the retrieved pairs into a
//! conditional source-target memory and decodes with gated multi-source
//! attention on top of the [`nn`] transformer, which runs on the
//! reverse-mode [`tensor`] engine. [`harness`] holds training, evaluation
//! and adaptation.

mod binio;
pub mod config;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod harness;
pub mod hashing;
pub mod idf;
pub mod memory;
pub mod neighbors;
pub mod ngram;
pub mod nn;
pub mod tensor;

pub use corpus::{Corpus, SentencePair, Split, TokenId, TokenizerConfig, TokenizerMode, Vocab};
pub use error::{Error, Result};
pub use neighbors::{Neighbor, NeighborSet};
