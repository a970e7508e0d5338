//! Copy-with-substitution: a translation task whose keyword translations
//! depend on a hidden domain, so they can only be recovered from retrieved
//! in-domain examples.
//!
//! Sources mix content tokens `s*` with keywords `k*`. Targets map content
//! tokens through a fixed bijection onto `t*`, and keyword `j` onto one of
//! its candidates `v{j}_{c}`, where `c` is chosen by the domain table.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, SentencePair, Split, TokenId, Vocab};
use crate::harness::train::Example;
use crate::hashing::{combine, fnv1a};
use crate::memory::{RetrievedBatch, RetrievedPair};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub content: usize,
    pub keywords: usize,
    pub candidates: usize,
    /// Keywords per sentence, all distinct.
    pub keywords_per_sentence: usize,
    /// Number of training domains.
    pub domains: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            content: 15,
            keywords: 3,
            candidates: 4,
            keywords_per_sentence: 2,
            domains: 20,
            min_len: 5,
            max_len: 8,
            seed: 7,
        }
    }
}

/// Candidate index chosen for each keyword.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainTable {
    pub name: String,
    pub choice: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub cfg: SyntheticConfig,
    pub vocab: Vocab,
    source_content: Vec<TokenId>,
    target_content: Vec<TokenId>,
    keywords: Vec<TokenId>,
    candidates: Vec<Vec<TokenId>>,
}

impl SyntheticTask {
    pub fn new(cfg: SyntheticConfig) -> Self {
        assert!(cfg.keywords_per_sentence <= cfg.keywords && cfg.keywords_per_sentence <= cfg.min_len);
        assert!(
            cfg.domains < cfg.candidates.pow(cfg.keywords as u32),
            "not enough distinct tables"
        );
        let mut vocab = Vocab::new();
        let source_content: Vec<TokenId> = (0..cfg.content).map(|i| vocab.insert(&format!("s{i}"))).collect();
        let mut target_content: Vec<TokenId> = (0..cfg.content).map(|i| vocab.insert(&format!("t{i}"))).collect();
        let keywords = (0..cfg.keywords).map(|j| vocab.insert(&format!("k{j}"))).collect();
        let candidates = (0..cfg.keywords)
            .map(|j| {
                (0..cfg.candidates)
                    .map(|c| vocab.insert(&format!("v{j}_{c}")))
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(combine([cfg.seed, fnv1a(b"bijection")]));
        target_content.shuffle(&mut rng);
        SyntheticTask {
            cfg,
            vocab,
            source_content,
            target_content,
            keywords,
            candidates,
        }
    }

    /// Every possible table in a seeded order. The first is held out; the
    /// training domains are the next `domains`. Many training tables that
    /// share choices make memorizing them per domain harder than reading
    /// the choice off the neighbors.
    fn table_order(&self) -> Vec<Vec<usize>> {
        let (k, c) = (self.cfg.keywords, self.cfg.candidates);
        let mut all: Vec<Vec<usize>> = (0..c.pow(k as u32))
            .map(|code| (0..k).map(|j| code / c.pow(j as u32) % c).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(combine([self.cfg.seed, fnv1a(b"tables")]));
        all.shuffle(&mut rng);
        all
    }

    pub fn train_domains(&self) -> Vec<DomainTable> {
        self.table_order()
            .into_iter()
            .skip(1)
            .take(self.cfg.domains)
            .enumerate()
            .map(|(d, choice)| DomainTable {
                name: format!("d{d}"),
                choice,
            })
            .collect()
    }

    /// A table no training domain uses.
    pub fn held_out_domain(&self) -> DomainTable {
        DomainTable {
            name: "held_out".into(),
            choice: self.table_order().swap_remove(0),
        }
    }

    pub fn keyword_index(&self, t: TokenId) -> Option<usize> {
        self.keywords.iter().position(|&k| k == t)
    }

    /// Whether `t` is a keyword substitution on the target side.
    pub fn is_substitution(&self, t: TokenId) -> bool {
        self.candidates.iter().any(|c| c.contains(&t))
    }

    pub fn translate(&self, source: &[TokenId], table: &DomainTable) -> Vec<TokenId> {
        source
            .iter()
            .map(|&t| match self.keyword_index(t) {
                Some(j) => self.candidates[j][table.choice[j]],
                None => {
                    let i = self.source_content.iter().position(|&s| s == t).expect("source token");
                    self.target_content[i]
                }
            })
            .collect()
    }

    pub fn sample_source(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let len = rng.gen_range(self.cfg.min_len..=self.cfg.max_len);
        let mut s: Vec<TokenId> = (0..len)
            .map(|_| *self.source_content.choose(rng).expect("content tokens"))
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(rng);
        let mut kws = self.keywords.clone();
        kws.shuffle(rng);
        for (slot, kw) in slots.into_iter().zip(kws).take(self.cfg.keywords_per_sentence) {
            s[slot] = kw;
        }
        s
    }

    /// `n` pairs of one domain; the stream is keyed by `(seed, domain, tag)`.
    pub fn sample(&self, table: &DomainTable, n: usize, split: Split, tag: &str) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(combine([
            self.cfg.seed,
            fnv1a(table.name.as_bytes()),
            fnv1a(tag.as_bytes()),
        ]));
        let pairs = (0..n)
            .map(|i| {
                let source = self.sample_source(&mut rng);
                SentencePair {
                    id: i as u32,
                    target: self.translate(&source, table),
                    source,
                    domain: table.name.clone(),
                }
            })
            .collect();
        Corpus::new(pairs, split, self.vocab.clone())
    }
}

/// Concatenates corpora sharing one vocabulary, renumbering ids in order.
pub fn concat_corpora(parts: &[Corpus], split: Split) -> Corpus {
    let vocab = parts.first().map(|c| c.vocab.clone()).unwrap_or_default();
    let pairs = parts
        .iter()
        .flat_map(|c| c.pairs.iter())
        .enumerate()
        .map(|(i, p)| SentencePair {
            id: i as u32,
            ..p.clone()
        })
        .collect();
    Corpus::new(pairs, split, vocab)
}

/// Gives each example of group `g` the neighbors of an example of group
/// `(g + 1) mod groups`, so every memory comes from another domain.
pub fn mismatch_neighbors(groups: &[Vec<Example>]) -> Vec<Vec<Example>> {
    let n = groups.len();
    groups
        .iter()
        .enumerate()
        .map(|(g, exs)| {
            let donor = &groups[(g + 1) % n];
            exs.iter()
                .enumerate()
                .map(|(i, e)| Example {
                    neighbors: donor[i % donor.len()].neighbors.clone(),
                    ..e.clone()
                })
                .collect()
        })
        .collect()
}

/// Replaces each neighbor with probability `rate` by a uniformly drawn
/// pair of `pool`.
pub fn add_neighbor_noise(examples: &[Example], pool: &[RetrievedPair], rate: f64, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(combine([seed, fnv1a(b"noise")]));
    examples
        .iter()
        .map(|e| {
            let pairs = e
                .neighbors
                .pairs
                .iter()
                .map(|p| {
                    if rng.gen::<f64>() < rate {
                        pool.choose(&mut rng).cloned().unwrap_or_else(|| p.clone())
                    } else {
                        p.clone()
                    }
                })
                .collect();
            Example {
                neighbors: RetrievedBatch { pairs },
                ..e.clone()
            }
        })
        .collect()
}
