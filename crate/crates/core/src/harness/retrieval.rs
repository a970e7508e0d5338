use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::corpus::{Corpus, TokenId};
use crate::dense::{build_dense_index, retrieve_dense, DenseIndex, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::idf::{build_idf, retrieve_sentences, IdfTable, InvertedIndex};
use crate::memory::RetrievedBatch;
use crate::neighbors::NeighborSet;
use crate::ngram::{build_ngram_index, retrieve_by_ngrams, NGramIndex, NGramRetrievalConfig, RetrievalMode};
use crate::nn::{encode, ModelConfig, ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RetrievalStrategy {
    None,
    IdfSentence,
    IdfNgram,
    DenseNgram,
}

impl FromStr for RetrievalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RetrievalStrategy::None),
            "idf_sentence" => Ok(RetrievalStrategy::IdfSentence),
            "idf_ngram" => Ok(RetrievalStrategy::IdfNgram),
            "dense_ngram" => Ok(RetrievalStrategy::DenseNgram),
            other => Err(Error::Config(format!("unknown retrieval strategy {other}"))),
        }
    }
}

impl fmt::Display for RetrievalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalStrategy::None => "none",
            RetrievalStrategy::IdfSentence => "idf_sentence",
            RetrievalStrategy::IdfNgram => "idf_ngram",
            RetrievalStrategy::DenseNgram => "dense_ngram",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverConfig {
    pub strategy: RetrievalStrategy,
    /// Neighbors per query for sentence retrieval.
    pub neighbors: usize,
    pub ngram: NGramRetrievalConfig,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        RetrieverConfig {
            strategy: RetrievalStrategy::IdfSentence,
            neighbors: 10,
            ngram: NGramRetrievalConfig::default(),
        }
    }
}

/// A prebuilt index for one strategy.
pub enum RetrievalIndex {
    None,
    Sentence(IdfTable, InvertedIndex),
    NGram(NGramIndex),
    Dense(DenseIndex, Arc<dyn EmbeddingProvider>),
}

/// A retrieval corpus together with the index its strategy needs.
pub struct Retriever {
    corpus: Corpus,
    cfg: RetrieverConfig,
    index: RetrievalIndex,
}

impl Retriever {
    /// `provider` is required for the dense strategy and ignored otherwise.
    pub fn build(corpus: Corpus, cfg: RetrieverConfig, provider: Option<Arc<dyn EmbeddingProvider>>) -> Result<Self> {
        let index = match cfg.strategy {
            RetrievalStrategy::None => RetrievalIndex::None,
            RetrievalStrategy::IdfSentence => {
                let idf = build_idf(&corpus)?;
                let inv = InvertedIndex::build(&corpus);
                RetrievalIndex::Sentence(idf, inv)
            }
            RetrievalStrategy::IdfNgram => {
                let idf = build_idf(&corpus)?;
                RetrievalIndex::NGram(build_ngram_index(&corpus, &cfg.ngram, &idf)?)
            }
            RetrievalStrategy::DenseNgram => {
                let p = provider.ok_or_else(|| Error::Config("dense retrieval needs an embedding provider".into()))?;
                RetrievalIndex::Dense(build_dense_index(&corpus, p.as_ref(), &cfg.ngram)?, p)
            }
        };
        Ok(Retriever { corpus, cfg, index })
    }

    /// Wraps an index built earlier from `corpus`. The index kind must
    /// match `cfg.strategy`.
    pub fn from_index(corpus: Corpus, cfg: RetrieverConfig, index: RetrievalIndex) -> Result<Self> {
        let kind = match &index {
            RetrievalIndex::None => RetrievalStrategy::None,
            RetrievalIndex::Sentence(..) => RetrievalStrategy::IdfSentence,
            RetrievalIndex::NGram(_) => RetrievalStrategy::IdfNgram,
            RetrievalIndex::Dense(..) => RetrievalStrategy::DenseNgram,
        };
        if kind != cfg.strategy {
            return Err(Error::Config(format!(
                "{kind} index given for strategy {}",
                cfg.strategy
            )));
        }
        Ok(Retriever { corpus, cfg, index })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn config(&self) -> &RetrieverConfig {
        &self.cfg
    }

    pub fn neighbor_set(&self, x: &[TokenId], mode: RetrievalMode, exclude_id: Option<u32>) -> Result<NeighborSet> {
        match &self.index {
            RetrievalIndex::None => Ok(NeighborSet::default()),
            RetrievalIndex::Sentence(idf, inv) => Ok(retrieve_sentences(
                x,
                &self.corpus,
                idf,
                inv,
                self.cfg.neighbors,
                exclude_id,
            )),
            RetrievalIndex::NGram(idx) => retrieve_by_ngrams(x, idx, &self.cfg.ngram, mode, exclude_id),
            RetrievalIndex::Dense(idx, p) => retrieve_dense(x, idx, p.as_ref(), &self.cfg.ngram, mode, exclude_id),
        }
    }

    pub fn batch(&self, x: &[TokenId], mode: RetrievalMode, exclude_id: Option<u32>) -> Result<RetrievedBatch> {
        let set = self.neighbor_set(x, mode, exclude_id)?;
        RetrievedBatch::from_neighbors(&set, &self.corpus)
    }
}

/// Dense retrieval vectors taken from a trained encoder: one row per source
/// token (the appended EOS row is dropped).
pub struct ModelEmbedding {
    cfg: ModelConfig,
    store: ParamStore,
}

impl ModelEmbedding {
    pub fn new(cfg: ModelConfig, store: ParamStore) -> Self {
        ModelEmbedding { cfg, store }
    }
}

impl EmbeddingProvider for ModelEmbedding {
    fn dim(&self) -> usize {
        self.cfg.d_model
    }

    fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let mut s = Session::eval(&self.store);
        let enc = encode(&mut s, &self.cfg, tokens)?;
        let states = s.graph.value(enc.states);
        Ok(states.data()[..tokens.len() * self.cfg.d_model]
            .iter()
            .map(|&v| v as f32)
            .collect())
    }
}

/// One example per query pair, with neighbors from `retriever`. With
/// `exclude_self`, a query never retrieves the pair with its own id (use
/// when the queries are the retrieval corpus itself).
pub fn retrieve_examples(
    queries: &Corpus,
    retriever: &Retriever,
    mode: RetrievalMode,
    exclude_self: bool,
) -> Result<Vec<crate::harness::Example>> {
    queries
        .pairs
        .iter()
        .map(|p| {
            let exclude = exclude_self.then_some(p.id);
            Ok(crate::harness::Example {
                source: p.source.clone(),
                target: p.target.clone(),
                neighbors: retriever.batch(&p.source, mode, exclude)?,
            })
        })
        .collect()
}
