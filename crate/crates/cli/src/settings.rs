//! Every key a `--config` file may hold. Unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use spnmt::config::KvConfig;
use spnmt::harness::{RetrievalStrategy, RetrieverConfig, TrainConfig};
use spnmt::ngram::NGramRetrievalConfig;
use spnmt::nn::ModelConfig;
use spnmt::{TokenizerConfig, TokenizerMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseProvider {
    /// Context-free vectors hashed from token surfaces.
    Hash,
    /// Encoder states of a trained checkpoint.
    Model,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrieverConfig,
    pub dense_provider: DenseProvider,
    pub dense_dim: usize,
    pub dense_seed: u64,
    pub tokenizer: TokenizerConfig,
    pub beam: usize,
    /// 0 means the model's `max_len`.
    pub max_out_len: usize,
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .with_context(|| format!("ngram_widths entry {w:?}"))
        })
        .collect()
}

impl Settings {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let model = ModelConfig::from_kv(&mut kv)?;
        let train = TrainConfig::from_kv(&mut kv)?;
        let ngram_default = NGramRetrievalConfig::default();
        let widths: String = kv.take(
            "ngram_widths",
            ngram_default
                .widths
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        )?;
        let ngram = NGramRetrievalConfig {
            widths: parse_widths(&widths)?,
            train_cap: kv.take("train_cap", ngram_default.train_cap)?,
            seed: kv.take("ngram_seed", ngram_default.seed)?,
        };
        ngram.validate()?;
        let retrieval = RetrieverConfig {
            strategy: kv.take("retrieval_strategy", RetrievalStrategy::IdfSentence)?,
            neighbors: kv.take("neighbors", RetrieverConfig::default().neighbors)?,
            ngram,
        };
        let dense_provider = match kv.take("dense_provider", "hash".to_string())?.as_str() {
            "hash" => DenseProvider::Hash,
            "model" => DenseProvider::Model,
            other => bail!("dense_provider must be hash or model, got {other:?}"),
        };
        let tokenizer = TokenizerConfig {
            mode: match kv.take("tokenizer", "whitespace".to_string())?.as_str() {
                "whitespace" => TokenizerMode::Whitespace,
                "character" => TokenizerMode::Character,
                other => bail!("tokenizer must be whitespace or character, got {other:?}"),
            },
            lowercase: kv.take("lowercase", false)?,
        };
        let s = Settings {
            model,
            train,
            retrieval,
            dense_provider,
            dense_dim: kv.take("dense_dim", 64)?,
            dense_seed: kv.take("dense_seed", 0)?,
            tokenizer,
            beam: kv.take("beam", 4)?,
            max_out_len: kv.take("max_out_len", 0)?,
        };
        kv.finish()?;
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let kv = match path {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::new(),
        };
        Settings::from_kv(kv).with_context(|| match path {
            Some(p) => format!("reading config {}", p.display()),
            None => "default config".into(),
        })
    }
}
