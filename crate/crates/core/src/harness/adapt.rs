use std::path::Path;
use std::sync::Arc;

use crate::corpus::{Corpus, TokenId};
use crate::dense::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::harness::retrieval::{retrieve_examples, Retriever, RetrieverConfig};
use crate::harness::train::{train, Example, TrainConfig, TrainOutcome};
use crate::ngram::RetrievalMode;
use crate::nn::{beam_decode, ModelConfig, ParamStore};

/// A trained model whose neighbors come from a new retrieval corpus.
/// Holds the parameters by shared reference only: adaptation cannot change
/// them.
pub struct NonParametricAdapter<'p> {
    store: &'p ParamStore,
    cfg: ModelConfig,
    retriever: Retriever,
}

pub fn adapt_nonparametric<'p>(
    store: &'p ParamStore,
    cfg: &ModelConfig,
    new_corpus: Corpus,
    rcfg: RetrieverConfig,
    provider: Option<Arc<dyn EmbeddingProvider>>,
) -> Result<NonParametricAdapter<'p>> {
    if new_corpus.is_empty() {
        return Err(Error::EmptyCorpus("adaptation corpus"));
    }
    Ok(NonParametricAdapter {
        store,
        cfg: cfg.clone(),
        retriever: Retriever::build(new_corpus, rcfg, provider)?,
    })
}

impl NonParametricAdapter<'_> {
    pub fn retriever(&self) -> &Retriever {
        &self.retriever
    }

    /// Queries paired with neighbors from the adaptation corpus.
    pub fn examples(&self, queries: &Corpus) -> Result<Vec<Example>> {
        retrieve_examples(queries, &self.retriever, RetrievalMode::Decode, false)
    }

    pub fn translate(&self, x: &[TokenId], beam: usize, max_out_len: usize) -> Result<Vec<TokenId>> {
        let batch = self.retriever.batch(x, RetrievalMode::Decode, None)?;
        beam_decode(self.store, &self.cfg, x, Some(&batch), beam, max_out_len)
    }
}

/// Continued training of a copy of `base` on in-domain examples. The
/// examples decide the flavor: empty neighbors for plain fine-tuning,
/// in-domain neighbors for retrieval-aware fine-tuning.
pub fn finetune(
    cfg: &ModelConfig,
    base: &ParamStore,
    in_domain: &[Example],
    dev: &[Example],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train(cfg, base.clone(), in_domain, dev, tc, out_dir)
}
