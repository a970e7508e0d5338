//! Reduced n-gram decomposition and n-gram level IDF retrieval.
//!
//! A sentence of length `T` is represented, for an even width `n`, by the
//! n-grams starting at every `n/2`-th position (0-based starts
//! `0, n/2, n, ...` below `T`), padded with `PAD` past the end. Every token
//! is covered, most of them twice.
//!
//! Retrieval takes each query n-gram, ranks the indexed n-grams by IDF
//! similarity, and maps the best one to a sentence containing it. When that
//! sentence has already been claimed by an earlier query n-gram the search
//! advances to the next candidate, so a query yields at most one neighbor
//! per n-gram and no duplicates.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId, PAD};
use crate::error::{Error, Result};
use crate::hashing;
use crate::idf::{distinct_tokens, set_similarity, top_n, IdfTable, BOUND_SLACK};
use crate::neighbors::{MatchInfo, Neighbor, NeighborSet};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NGram {
    pub tokens: Vec<TokenId>,
    /// 0-based start position in the originating sentence.
    pub start: usize,
}

impl NGram {
    pub fn width(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_count(&self) -> usize {
        self.tokens.iter().rev().take_while(|&&t| t == PAD).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducedNGramSet {
    pub width: usize,
    pub ngrams: Vec<NGram>,
}

pub fn check_width(n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "n-gram width must be an even integer >= 2, got {n}"
        )));
    }
    Ok(())
}

pub fn reduced_ngrams(x: &[TokenId], n: usize) -> Result<ReducedNGramSet> {
    check_width(n)?;
    if x.is_empty() {
        return Err(Error::Config("cannot decompose an empty sentence".into()));
    }
    let ngrams = (0..x.len())
        .step_by(n / 2)
        .map(|start| {
            let tokens = (start..start + n).map(|i| x.get(i).copied().unwrap_or(PAD)).collect();
            NGram { tokens, start }
        })
        .collect();
    Ok(ReducedNGramSet { width: n, ngrams })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramRetrievalConfig {
    pub widths: Vec<usize>,
    /// Neighbors kept per sentence in train mode.
    pub train_cap: usize,
    pub seed: u64,
}

impl Default for NGramRetrievalConfig {
    fn default() -> Self {
        NGramRetrievalConfig {
            widths: vec![6, 10, 18],
            train_cap: 10,
            seed: 0,
        }
    }
}

impl NGramRetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("n-gram widths list is empty".into()));
        }
        for &w in &self.widths {
            check_width(w)?;
        }
        if self.train_cap == 0 {
            return Err(Error::Config("train_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Keep the `train_cap` best neighbors.
    Train,
    /// Keep one neighbor per query n-gram.
    Decode,
}

impl std::str::FromStr for RetrievalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(RetrievalMode::Train),
            "decode" => Ok(RetrievalMode::Decode),
            other => Err(Error::Config(format!("unknown retrieval mode {other:?}"))),
        }
    }
}

/// Walks one preference-ordered candidate stream per query n-gram and claims
/// the first pair not yet taken (and not excluded) from each.
pub(crate) fn select_neighbors<S, I>(
    streams: S,
    exclude_id: Option<u32>,
    mode: RetrievalMode,
    train_cap: usize,
) -> NeighborSet
where
    S: IntoIterator<Item = I>,
    I: Iterator<Item = Neighbor>,
{
    let mut taken = HashSet::new();
    let mut out = Vec::new();
    for mut stream in streams {
        if let Some(n) = stream.find(|n| Some(n.pair_id) != exclude_id && !taken.contains(&n.pair_id)) {
            taken.insert(n.pair_id);
            out.push(n);
        }
    }
    match mode {
        RetrievalMode::Decode => NeighborSet::new(None, out),
        RetrievalMode::Train => top_n(out, train_cap, None),
    }
}

/// Order in which the pairs sharing one indexed n-gram are tried. A pure
/// function of the query n-gram, the matched n-gram and the seed.
pub fn seeded_pair_order(query: &[TokenId], key: &[TokenId], pairs: &mut [u32], seed: u64) {
    let words = std::iter::once(seed)
        .chain(query.iter().map(|&t| t as u64))
        .chain(std::iter::once(u64::MAX))
        .chain(key.iter().map(|&t| t as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine(words));
    pairs.shuffle(&mut rng);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WidthTable {
    width: usize,
    /// Distinct n-gram token keys, in first-seen order.
    keys: Vec<Vec<TokenId>>,
    /// Sorted distinct non-PAD tokens of each key.
    sets: Vec<Vec<TokenId>>,
    /// (pair_id, start) occurrences of each key, ascending.
    origins: Vec<Vec<(u32, usize)>>,
    /// Token -> keys containing it.
    by_token: BTreeMap<TokenId, Vec<usize>>,
}

impl WidthTable {
    fn new(width: usize) -> Self {
        WidthTable {
            width,
            keys: Vec::new(),
            sets: Vec::new(),
            origins: Vec::new(),
            by_token: BTreeMap::new(),
        }
    }

    fn insert(&mut self, lookup: &mut HashMap<Vec<TokenId>, usize>, g: NGram, pair_id: u32) {
        let k = *lookup.entry(g.tokens.clone()).or_insert_with(|| {
            let k = self.keys.len();
            let set = distinct_tokens(&g.tokens);
            for &t in &set {
                self.by_token.entry(t).or_default().push(k);
            }
            self.keys.push(g.tokens.clone());
            self.sets.push(set);
            self.origins.push(Vec::new());
            k
        });
        self.origins[k].push((pair_id, g.start));
    }

    fn first_origin(&self, k: usize) -> (u32, usize) {
        self.origins[k][0]
    }

    fn rank(&self, mut keyed: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
        keyed.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.first_origin(a.0).cmp(&self.first_origin(b.0)))
        });
        keyed
    }

    /// Keys sharing at least one token with `qset`, ranked.
    fn overlapping(&self, qset: &[TokenId], idf: &IdfTable) -> Vec<(usize, f64)> {
        let mut seen = vec![false; self.keys.len()];
        let mut keyed = Vec::new();
        for t in qset {
            for &k in self.by_token.get(t).map(Vec::as_slice).unwrap_or(&[]) {
                if !seen[k] {
                    seen[k] = true;
                    keyed.push((k, set_similarity(qset, &self.sets[k], idf)));
                }
            }
        }
        self.rank(keyed)
    }

    fn ranked_all(&self, qset: &[TokenId], idf: &IdfTable) -> Vec<(usize, f64)> {
        let keyed = (0..self.keys.len())
            .map(|k| (k, set_similarity(qset, &self.sets[k], idf)))
            .collect();
        self.rank(keyed)
    }

    /// All keys ranked for `qset`, computed lazily: overlapping keys that beat
    /// every possible disjoint key (whose score is at most `-S_q`) come first
    /// and the full ranking is only computed once that prefix runs out.
    fn ranked_lazy<'a>(&'a self, qset: Vec<TokenId>, idf: &'a IdfTable) -> impl Iterator<Item = (usize, f64)> + 'a {
        let ranked = self.overlapping(&qset, idf);
        let bound = -qset.iter().map(|&t| idf.weight(t)).sum::<f64>() + BOUND_SLACK;
        let split = ranked.iter().position(|&(_, s)| s <= bound).unwrap_or(ranked.len());
        let mut prefix = ranked;
        prefix.truncate(split);
        let done: HashSet<usize> = prefix.iter().map(|&(k, _)| k).collect();
        let rest = std::iter::once(()).flat_map(move |_| {
            let done = done.clone();
            self.ranked_all(&qset, idf)
                .into_iter()
                .filter(move |(k, _)| !done.contains(k))
        });
        prefix.into_iter().chain(rest)
    }
}

/// Per-width tables of reduced n-grams from the training sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramIndex {
    tables: Vec<WidthTable>,
    idf: IdfTable,
}

pub fn build_ngram_index(c: &Corpus, cfg: &NGramRetrievalConfig, idf: &IdfTable) -> Result<NGramIndex> {
    cfg.validate()?;
    let mut tables = Vec::new();
    for &w in &cfg.widths {
        if tables.iter().any(|t: &WidthTable| t.width == w) {
            continue;
        }
        let mut table = WidthTable::new(w);
        let mut lookup = HashMap::new();
        for p in &c.pairs {
            for g in reduced_ngrams(&p.source, w)?.ngrams {
                table.insert(&mut lookup, g, p.id);
            }
        }
        tables.push(table);
    }
    Ok(NGramIndex {
        tables,
        idf: idf.clone(),
    })
}

impl NGramIndex {
    fn table(&self, width: usize) -> Option<&WidthTable> {
        self.tables.iter().find(|t| t.width == width)
    }

    pub fn idf(&self) -> &IdfTable {
        &self.idf
    }

    pub fn widths(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.width).collect()
    }

    /// Occurrences of an exact n-gram key.
    pub fn origins(&self, tokens: &[TokenId]) -> Vec<(u32, usize)> {
        self.table(tokens.len())
            .and_then(|t| t.keys.iter().position(|k| k == tokens).map(|k| t.origins[k].clone()))
            .unwrap_or_default()
    }

    pub fn num_keys(&self, width: usize) -> usize {
        self.table(width).map_or(0, |t| t.keys.len())
    }

    /// Every indexed n-gram of the query's width, best first. Ties go to the
    /// n-gram whose first occurrence has the lower `(pair_id, start)`.
    pub fn best_matching_ngram(&self, q: &NGram) -> Vec<(NGram, f64)> {
        let Some(table) = self.table(q.width()) else {
            return Vec::new();
        };
        let qset = distinct_tokens(&q.tokens);
        table
            .ranked_all(&qset, &self.idf)
            .into_iter()
            .map(|(k, s)| {
                let (_, start) = table.first_origin(k);
                (
                    NGram {
                        tokens: table.keys[k].clone(),
                        start,
                    },
                    s,
                )
            })
            .collect()
    }

    /// Candidate sentences for one query n-gram, most preferred first.
    fn candidates<'a>(&'a self, table: &'a WidthTable, q: NGram, seed: u64) -> impl Iterator<Item = Neighbor> + 'a {
        let qset = distinct_tokens(&q.tokens);
        table.ranked_lazy(qset, &self.idf).flat_map(move |(k, score)| {
            let origins = &table.origins[k];
            let mut pairs: Vec<u32> = origins.iter().map(|o| o.0).collect();
            pairs.dedup();
            seeded_pair_order(&q.tokens, &table.keys[k], &mut pairs, seed);
            let query_start = q.start;
            pairs.into_iter().map(move |pair_id| {
                let match_start = origins.iter().find(|o| o.0 == pair_id).map(|o| o.1).unwrap_or(0);
                Neighbor {
                    pair_id,
                    score,
                    matched: Some(MatchInfo {
                        width: table.width,
                        query_start,
                        match_pair: pair_id,
                        match_start,
                    }),
                }
            })
        })
    }
}

pub fn retrieve_by_ngrams(
    x: &[TokenId],
    idx: &NGramIndex,
    cfg: &NGramRetrievalConfig,
    mode: RetrievalMode,
    exclude_id: Option<u32>,
) -> Result<NeighborSet> {
    cfg.validate()?;
    let mut streams = Vec::new();
    for &w in &cfg.widths {
        let table = idx
            .table(w)
            .ok_or_else(|| Error::Config(format!("index has no table for width {w}")))?;
        for g in reduced_ngrams(x, w)?.ngrams {
            streams.push(idx.candidates(table, g, cfg.seed));
        }
    }
    Ok(select_neighbors(streams, exclude_id, mode, cfg.train_cap))
}
