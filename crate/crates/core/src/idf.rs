//! IDF statistics, the set-based IDF similarity between two token sequences,
//! and top-N sentence retrieval over an inverted index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenId, PAD};
use crate::error::{Error, Result};
use crate::neighbors::{rank_order, Neighbor, NeighborSet};

/// Per-token weights `ln(|C| / n_t)` over the source side of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    weights: BTreeMap<TokenId, f64>,
    corpus_size: usize,
}

impl IdfTable {
    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    /// Tokens never seen on the source side weigh `ln(|C|)`, as if they
    /// occurred in exactly one sentence.
    pub fn weight(&self, t: TokenId) -> f64 {
        self.weights
            .get(&t)
            .copied()
            .unwrap_or_else(|| (self.corpus_size as f64).ln())
    }

    pub fn known(&self, t: TokenId) -> bool {
        self.weights.contains_key(&t)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn build_idf(c: &Corpus) -> Result<IdfTable> {
    if c.is_empty() {
        return Err(Error::EmptyCorpus("cannot compute IDF"));
    }
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for p in &c.pairs {
        for t in distinct_tokens(&p.source) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let size = c.len() as f64;
    let weights = counts.into_iter().map(|(t, n)| (t, (size / n as f64).ln())).collect();
    Ok(IdfTable {
        weights,
        corpus_size: c.len(),
    })
}

/// Sorted distinct tokens, PAD removed.
pub fn distinct_tokens(x: &[TokenId]) -> Vec<TokenId> {
    let mut v: Vec<TokenId> = x.iter().copied().filter(|&t| t != PAD).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// `2 * sum(f_t, t in A∩B) - sum(f_t, t in A∪B)` over sorted distinct token
/// sets. Both sums are accumulated in ascending token order, so equal sets
/// always produce bit-identical scores.
pub fn set_similarity(a: &[TokenId], b: &[TokenId], idf: &IdfTable) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut inter = 0.0;
    let mut union = 0.0;
    while i < a.len() || j < b.len() {
        let t = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) if x == y => {
                i += 1;
                j += 1;
                inter += idf.weight(x);
                x
            }
            (Some(&x), Some(&y)) if x < y => {
                i += 1;
                x
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (_, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        union += idf.weight(t);
    }
    2.0 * inter - union
}

pub fn sentence_similarity(a: &[TokenId], b: &[TokenId], idf: &IdfTable) -> f64 {
    set_similarity(&distinct_tokens(a), &distinct_tokens(b), idf)
}

/// Source-side postings: token -> increasing pair ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: BTreeMap<TokenId, Vec<u32>>,
    sets: Vec<Vec<TokenId>>,
}

impl InvertedIndex {
    pub fn build(c: &Corpus) -> Self {
        let mut postings: BTreeMap<TokenId, Vec<u32>> = BTreeMap::new();
        let mut sets = Vec::with_capacity(c.len());
        for p in &c.pairs {
            let set = distinct_tokens(&p.source);
            for &t in &set {
                postings.entry(t).or_default().push(p.id);
            }
            sets.push(set);
        }
        InvertedIndex { postings, sets }
    }

    pub fn postings(&self, t: TokenId) -> &[u32] {
        self.postings.get(&t).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tokens(&self) -> impl Iterator<Item = (&TokenId, &Vec<u32>)> {
        self.postings.iter()
    }

    pub fn num_pairs(&self) -> usize {
        self.sets.len()
    }

    pub fn source_set(&self, id: u32) -> &[TokenId] {
        &self.sets[id as usize]
    }
}

/// The `n` training pairs most similar to `query`, score descending with
/// ties to the lower pair id. `exclude_id` is never returned.
///
/// Pairs sharing a token with the query are scored through the postings.
/// A pair sharing nothing scores `-(S_q + S_d) <= -S_q` (`S` = summed
/// weights), so the remaining pairs are scanned only when the n-th best
/// overlapping score does not clear that bound.
pub fn retrieve_sentences(
    query: &[TokenId],
    c: &Corpus,
    idf: &IdfTable,
    index: &InvertedIndex,
    n: usize,
    exclude_id: Option<u32>,
) -> NeighborSet {
    if n == 0 {
        return NeighborSet::default();
    }
    debug_assert_eq!(index.num_pairs(), c.len());
    let q = distinct_tokens(query);
    let mut hit = vec![false; index.num_pairs()];
    let mut scored = Vec::new();
    for t in &q {
        for &id in index.postings(*t) {
            if !hit[id as usize] {
                hit[id as usize] = true;
                if Some(id) != exclude_id {
                    scored.push(Neighbor::new(id, set_similarity(&q, index.source_set(id), idf)));
                }
            }
        }
    }
    let bound = -q.iter().map(|&t| idf.weight(t)).sum::<f64>() + BOUND_SLACK;
    let clears = scored.iter().filter(|nb| nb.score > bound).count() >= n;
    if !clears {
        for id in 0..index.num_pairs() as u32 {
            if !hit[id as usize] && Some(id) != exclude_id {
                scored.push(Neighbor::new(id, set_similarity(&q, index.source_set(id), idf)));
            }
        }
    }
    top_n(scored, n, None)
}

/// Absorbs summation-order rounding when comparing against a bound.
pub(crate) const BOUND_SLACK: f64 = 1e-9;

pub(crate) fn top_n(mut scored: Vec<Neighbor>, n: usize, query_id: Option<u32>) -> NeighborSet {
    if scored.len() > n {
        scored.select_nth_unstable_by(n, rank_order);
        scored.truncate(n);
    }
    NeighborSet::new(query_id, scored)
}
