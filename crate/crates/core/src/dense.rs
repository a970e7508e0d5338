//! Dense n-gram retrieval: each reduced n-gram is the mean of its token
//! vectors, matched by exact L2 search.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::ByteCursor;
use crate::corpus::{Corpus, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::hashing;
use crate::neighbors::{MatchInfo, Neighbor, NeighborSet};
use crate::ngram::{reduced_ngrams, select_neighbors, NGramRetrievalConfig, RetrievalMode};

/// Maps a token sequence to one `dim()`-wide vector per token, returned
/// row-major.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f32>>;
}

/// Context-free embeddings: every token's vector is drawn from a generator
/// seeded by its surface form and a global seed, uniform in [-1, 1).
#[derive(Debug, Clone)]
pub struct HashEmbedding {
    dim: usize,
    seed: u64,
    vocab: Vocab,
}

impl HashEmbedding {
    pub fn new(vocab: Vocab, dim: usize, seed: u64) -> Self {
        HashEmbedding { dim, seed, vocab }
    }

    pub fn token_vector(&self, surface: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(hashing::combine([self.seed, hashing::fnv1a(surface.as_bytes())]));
        (0..self.dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        Ok(tokens
            .iter()
            .flat_map(|&t| self.token_vector(self.vocab.token(t)))
            .collect())
    }
}

/// Mean of rows `start..start + width - pad_count` of a row-major matrix.
pub fn ngram_embedding(
    token_vectors: &[f32],
    dim: usize,
    start: usize,
    width: usize,
    pad_count: usize,
) -> Result<Vec<f32>> {
    if pad_count >= width {
        return Err(Error::EmptyNGram);
    }
    let real = width - pad_count;
    let rows = token_vectors.len() / dim.max(1);
    if start + real > rows {
        return Err(Error::shape(
            "ngram_embedding",
            format!("span {start}+{real} exceeds {rows} rows"),
        ));
    }
    let mut acc = vec![0f64; dim];
    for r in start..start + real {
        for (a, &v) in acc.iter_mut().zip(&token_vectors[r * dim..(r + 1) * dim]) {
            *a += v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / real as f64) as f32).collect())
}

/// Squared L2 distance, accumulated in f64 in element order.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNGramEntry {
    pub vector: Vec<f32>,
    pub pair_id: u32,
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct DenseTable {
    vectors: Vec<f32>,
    meta: Vec<(u32, u32)>,
}

impl DenseTable {
    fn len(&self) -> usize {
        self.meta.len()
    }

    fn vector(&self, i: usize, dim: usize) -> &[f32] {
        &self.vectors[i * dim..(i + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    tables: BTreeMap<usize, DenseTable>,
}

const DENSE_MAGIC: &[u8; 8] = b"SPNMTDNS";
const DENSE_VERSION: u32 = 1;

/// Embeds a sentence and returns one mean vector per reduced n-gram.
fn sentence_ngram_vectors(
    x: &[TokenId],
    width: usize,
    provider: &dyn EmbeddingProvider,
    rows: &[f32],
) -> Result<Vec<(usize, Vec<f32>)>> {
    let dim = provider.dim();
    reduced_ngrams(x, width)?
        .ngrams
        .into_iter()
        .map(|g| {
            let v = ngram_embedding(rows, dim, g.start, width, g.pad_count())?;
            Ok((g.start, v))
        })
        .collect()
}

fn checked_embed(provider: &dyn EmbeddingProvider, x: &[TokenId]) -> std::result::Result<Vec<f32>, String> {
    let rows = provider.embed(x).map_err(|e| e.to_string())?;
    if rows.len() != x.len() * provider.dim() {
        return Err(format!(
            "provider returned {} values for {} tokens of dimension {}",
            rows.len(),
            x.len(),
            provider.dim()
        ));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err("provider returned a non-finite value".into());
    }
    Ok(rows)
}

pub fn build_dense_index(
    c: &Corpus,
    provider: &dyn EmbeddingProvider,
    cfg: &NGramRetrievalConfig,
) -> Result<DenseIndex> {
    if c.is_empty() {
        return Err(Error::EmptyCorpus("cannot build a dense index"));
    }
    cfg.validate()?;
    let dim = provider.dim();
    let mut tables: BTreeMap<usize, DenseTable> = cfg.widths.iter().map(|&w| (w, DenseTable::default())).collect();
    for p in &c.pairs {
        let rows = checked_embed(provider, &p.source).map_err(|msg| Error::Provider { pair_id: p.id, msg })?;
        for (&w, table) in tables.iter_mut() {
            for (start, v) in sentence_ngram_vectors(&p.source, w, provider, &rows)? {
                table.vectors.extend_from_slice(&v);
                table.meta.push((p.id, start as u32));
            }
        }
    }
    Ok(DenseIndex { dim, tables })
}

impl DenseIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn widths(&self) -> Vec<usize> {
        self.tables.keys().copied().collect()
    }

    pub fn len(&self, width: usize) -> usize {
        self.tables.get(&width).map_or(0, DenseTable::len)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.values().all(|t| t.len() == 0)
    }

    /// Builds an index from explicit entries.
    pub fn from_entries(dim: usize, entries: &[DenseNGramEntry]) -> Result<Self> {
        let mut tables: BTreeMap<usize, DenseTable> = BTreeMap::new();
        for e in entries {
            if e.vector.len() != dim {
                return Err(Error::shape(
                    "DenseIndex::from_entries",
                    format!("entry of dimension {} in index of dimension {dim}", e.vector.len()),
                ));
            }
            let t = tables.entry(e.width).or_default();
            t.vectors.extend_from_slice(&e.vector);
            t.meta.push((e.pair_id, e.start as u32));
        }
        Ok(DenseIndex { dim, tables })
    }

    pub fn entries(&self, width: usize) -> Vec<DenseNGramEntry> {
        let Some(t) = self.tables.get(&width) else {
            return Vec::new();
        };
        (0..t.len())
            .map(|i| DenseNGramEntry {
                vector: t.vector(i, self.dim).to_vec(),
                pair_id: t.meta[i].0,
                start: t.meta[i].1 as usize,
                width,
            })
            .collect()
    }

    /// Entry positions of `width` ordered by (distance, pair_id, start).
    pub fn nearest(&self, width: usize, query: &[f32]) -> Vec<(usize, f64)> {
        let Some(t) = self.tables.get(&width) else {
            return Vec::new();
        };
        let mut d: Vec<(usize, f64)> = (0..t.len())
            .map(|i| (i, squared_l2(query, t.vector(i, self.dim))))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| t.meta[a.0].cmp(&t.meta[b.0])));
        d
    }

    fn candidates(&self, width: usize, query_start: usize, query: Vec<f32>) -> impl Iterator<Item = Neighbor> + '_ {
        let t = &self.tables[&width];
        // The single nearest entry is enough unless its sentence is taken,
        // so the full sort is deferred.
        let best = (0..t.len()).min_by(|&a, &b| {
            squared_l2(&query, t.vector(a, self.dim))
                .total_cmp(&squared_l2(&query, t.vector(b, self.dim)))
                .then_with(|| t.meta[a].cmp(&t.meta[b]))
        });
        let to_neighbor = move |i: usize, d2: f64| {
            let (pair_id, start) = t.meta[i];
            Neighbor {
                pair_id,
                score: -d2.sqrt(),
                matched: Some(MatchInfo {
                    width,
                    query_start,
                    match_pair: pair_id,
                    match_start: start as usize,
                }),
            }
        };
        let first = best.map(|i| to_neighbor(i, squared_l2(&query, t.vector(i, self.dim))));
        first.into_iter().chain(std::iter::once(()).flat_map(move |_| {
            self.nearest(width, &query)
                .into_iter()
                .skip(1)
                .map(move |(i, d2)| to_neighbor(i, d2))
        }))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<dense index>", e);
        w.write_all(DENSE_MAGIC).map_err(io)?;
        let mut header = Vec::new();
        header.extend_from_slice(&DENSE_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.dim as u32).to_le_bytes());
        header.extend_from_slice(&(self.tables.len() as u32).to_le_bytes());
        for (&width, t) in &self.tables {
            header.extend_from_slice(&(width as u32).to_le_bytes());
            header.extend_from_slice(&(t.len() as u64).to_le_bytes());
        }
        w.write_all(&header).map_err(io)?;
        for (&width, t) in &self.tables {
            let mut buf = Vec::with_capacity(t.len() * (self.dim * 4 + 12));
            for i in 0..t.len() {
                for v in t.vector(i, self.dim) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&t.meta[i].0.to_le_bytes());
                buf.extend_from_slice(&t.meta[i].1.to_le_bytes());
                buf.extend_from_slice(&(width as u32).to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<dense index>", e))?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(8)? != DENSE_MAGIC {
            return Err(Error::Format("not a dense index file".into()));
        }
        let version = cur.u32()?;
        if version != DENSE_VERSION {
            return Err(Error::Format(format!("unsupported dense index version {version}")));
        }
        let dim = cur.u32()? as usize;
        let n_widths = cur.u32()? as usize;
        let mut header = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            header.push((cur.u32()? as usize, cur.u64()? as usize));
        }
        let mut tables = BTreeMap::new();
        for (width, count) in header {
            let mut t = DenseTable::default();
            for _ in 0..count {
                for _ in 0..dim {
                    t.vectors.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
                }
                let pair = cur.u32()?;
                let start = cur.u32()?;
                if cur.u32()? as usize != width {
                    return Err(Error::Format("entry width disagrees with its table".into()));
                }
                t.meta.push((pair, start));
            }
            tables.insert(width, t);
        }
        if !cur.is_done() {
            return Err(Error::Format("trailing bytes after dense index".into()));
        }
        Ok(DenseIndex { dim, tables })
    }
}

/// Dense counterpart of n-gram retrieval. Scores are negated L2 distances,
/// so the closest neighbor ranks first.
pub fn retrieve_dense(
    x: &[TokenId],
    idx: &DenseIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &NGramRetrievalConfig,
    mode: RetrievalMode,
    exclude_id: Option<u32>,
) -> Result<NeighborSet> {
    cfg.validate()?;
    if provider.dim() != idx.dim {
        return Err(Error::shape(
            "retrieve_dense",
            format!("provider dimension {} vs index dimension {}", provider.dim(), idx.dim),
        ));
    }
    let rows = checked_embed(provider, x).map_err(|msg| Error::Provider { pair_id: u32::MAX, msg })?;
    let mut streams = Vec::new();
    for &w in &cfg.widths {
        if !idx.tables.contains_key(&w) {
            return Err(Error::Config(format!("dense index has no table for width {w}")));
        }
        for (start, v) in sentence_ngram_vectors(x, w, provider, &rows)? {
            streams.push(idx.candidates(w, start, v));
        }
    }
    Ok(select_neighbors(streams, exclude_id, mode, cfg.train_cap))
}
