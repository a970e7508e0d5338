//! Oracles and fixtures shared by the integration tests. Every oracle here
//! is written independently of the library code it checks: brute force
//! over all candidates, no indexes, no lazy bounds.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use spnmt::dense::{ngram_embedding, squared_l2, EmbeddingProvider};
use spnmt::harness::synthetic::{SyntheticConfig, SyntheticTask};
use spnmt::harness::{retrieve_examples, Example, Retriever, RetrieverConfig, TrainConfig};
use spnmt::memory::{MemoryMode, RetrievedPair};
use spnmt::ngram::{seeded_pair_order, NGramRetrievalConfig, RetrievalMode};
use spnmt::nn::ModelConfig;
use spnmt::tensor::{Graph, Tensor, Var};
use spnmt::{Corpus, SentencePair, Split, TokenId, Vocab};

pub const PAD: TokenId = 0;

/// A random corpus over `vocab_words` surface forms `w0..`, source lengths
/// in `1..=max_len`. Targets are reversed sources.
pub fn random_corpus(rng: &mut ChaCha8Rng, pairs: usize, vocab_words: usize, max_len: usize) -> Corpus {
    let mut vocab = Vocab::new();
    let ids: Vec<TokenId> = (0..vocab_words).map(|i| vocab.insert(&format!("w{i}"))).collect();
    let pairs = (0..pairs)
        .map(|i| {
            let len = rng.gen_range(1..=max_len);
            let source: Vec<TokenId> = (0..len).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
            let mut target = source.clone();
            target.reverse();
            SentencePair {
                id: i as u32,
                source,
                target,
                domain: "r".into(),
            }
        })
        .collect();
    Corpus::new(pairs, Split::Train, vocab)
}

/// `ln(N / n_t)` from document frequencies over the source side; tokens
/// never seen weigh `ln(N)`.
pub struct OracleIdf {
    n: f64,
    df: HashMap<TokenId, usize>,
}

impl OracleIdf {
    pub fn new(c: &Corpus) -> Self {
        let mut df = HashMap::new();
        for p in &c.pairs {
            let set: BTreeSet<TokenId> = p.source.iter().copied().filter(|&t| t != PAD).collect();
            for t in set {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        OracleIdf { n: c.len() as f64, df }
    }

    pub fn weight(&self, t: TokenId) -> f64 {
        match self.df.get(&t) {
            Some(&k) => (self.n / k as f64).ln(),
            None => self.n.ln(),
        }
    }

    /// Both sums accumulate in ascending token order, the documented
    /// summation order, so ties compare bit-for-bit.
    pub fn similarity(&self, a: &[TokenId], b: &[TokenId]) -> f64 {
        let sa: BTreeSet<TokenId> = a.iter().copied().filter(|&t| t != PAD).collect();
        let sb: BTreeSet<TokenId> = b.iter().copied().filter(|&t| t != PAD).collect();
        let inter: f64 = sa.intersection(&sb).map(|&t| self.weight(t)).sum();
        let union: f64 = sa.union(&sb).map(|&t| self.weight(t)).sum();
        2.0 * inter - union
    }
}

/// Scores every pair, sorts by score descending then id ascending.
pub fn brute_force_sentences(q: &[TokenId], c: &Corpus, n: usize, exclude: Option<u32>) -> Vec<(u32, f64)> {
    let idf = OracleIdf::new(c);
    let mut all: Vec<(u32, f64)> = c
        .pairs
        .iter()
        .filter(|p| Some(p.id) != exclude)
        .map(|p| (p.id, idf.similarity(q, &p.source)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(n);
    all
}

/// 0-based starts of the reduced set: every `n/2`-th position below `T`.
pub fn oracle_ngrams(x: &[TokenId], n: usize) -> Vec<(usize, Vec<TokenId>)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < x.len() {
        let g = (start..start + n)
            .map(|i| if i < x.len() { x[i] } else { PAD })
            .collect();
        out.push((start, g));
        start += n / 2;
    }
    out
}

/// Walks per-query-n-gram preference lists and claims the first unclaimed,
/// non-excluded pair from each.
fn claim(streams: Vec<Vec<(u32, f64)>>, exclude: Option<u32>) -> Vec<(u32, f64)> {
    let mut taken = BTreeSet::new();
    let mut out = Vec::new();
    for s in streams {
        if let Some(&(id, score)) = s.iter().find(|(id, _)| Some(*id) != exclude && !taken.contains(id)) {
            taken.insert(id);
            out.push((id, score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Decode-mode n-gram retrieval by exhaustive scoring of every distinct
/// indexed n-gram.
pub fn brute_force_ngrams(
    x: &[TokenId],
    c: &Corpus,
    cfg: &NGramRetrievalConfig,
    exclude: Option<u32>,
) -> Vec<(u32, f64)> {
    let idf = OracleIdf::new(c);
    let mut streams = Vec::new();
    for &w in &cfg.widths {
        // distinct key -> occurrences (pair, start) in corpus order
        let mut keys: Vec<Vec<TokenId>> = Vec::new();
        let mut occ: HashMap<Vec<TokenId>, Vec<(u32, usize)>> = HashMap::new();
        for p in &c.pairs {
            for (start, g) in oracle_ngrams(&p.source, w) {
                if !occ.contains_key(&g) {
                    keys.push(g.clone());
                }
                occ.entry(g).or_default().push((p.id, start));
            }
        }
        for (_, q) in oracle_ngrams(x, w) {
            let mut ranked: Vec<(&Vec<TokenId>, f64)> = keys.iter().map(|k| (k, idf.similarity(&q, k))).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(occ[a.0][0].cmp(&occ[b.0][0])));
            let mut stream = Vec::new();
            for (k, score) in ranked {
                let mut ids: Vec<u32> = occ[k].iter().map(|o| o.0).collect();
                ids.dedup();
                seeded_pair_order(&q, k, &mut ids, cfg.seed);
                stream.extend(ids.into_iter().map(|id| (id, score)));
            }
            streams.push(stream);
        }
    }
    claim(streams, exclude)
}

/// Decode-mode dense retrieval by exhaustive L2 over every indexed
/// n-gram vector.
pub fn brute_force_dense(
    x: &[TokenId],
    c: &Corpus,
    provider: &dyn EmbeddingProvider,
    cfg: &NGramRetrievalConfig,
    exclude: Option<u32>,
) -> Vec<(u32, f64)> {
    let d = provider.dim();
    let vectors = |s: &[TokenId], w: usize| -> Vec<(usize, Vec<f32>)> {
        let rows = provider.embed(s).unwrap();
        oracle_ngrams(s, w)
            .into_iter()
            .map(|(start, g)| {
                let pads = g.iter().rev().take_while(|&&t| t == PAD).count();
                (start, ngram_embedding(&rows, d, start, w, pads).unwrap())
            })
            .collect()
    };
    let mut streams = Vec::new();
    for &w in &cfg.widths {
        let entries: Vec<(u32, usize, Vec<f32>)> = c
            .pairs
            .iter()
            .flat_map(|p| vectors(&p.source, w).into_iter().map(move |(s, v)| (p.id, s, v)))
            .collect();
        for (_, q) in vectors(x, w) {
            let mut ranked: Vec<(u32, usize, f64)> =
                entries.iter().map(|(id, s, v)| (*id, *s, squared_l2(&q, v))).collect();
            ranked.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
            streams.push(ranked.into_iter().map(|(id, _, d2)| (id, -d2.sqrt())).collect());
        }
    }
    claim(streams, exclude)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central-difference check of `f` at `inputs`. The op output is reduced to
/// a scalar through a fixed random weighting so every output entry
/// contributes a distinct coefficient. Returns the norm-wise relative error
/// over all inputs' gradients taken together, as for a parameter vector.
pub fn gradient_check<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> spnmt::Result<Var>,
{
    const H: f64 = 1e-5;
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        random_tensor(rng, g.shape(out), 1.0)
    };
    let eval = |ins: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone()).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item();
        let grads = if grads {
            let gr = g.backward(loss).unwrap();
            vars.iter().map(|&v| gr.get(v)).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = eval(inputs, true);
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *slot = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        }
        a.extend_from_slice(analytic[i].data());
        n.extend(numeric);
    }
    relative_error(&a, &n)
}

/// Desk-scale model used by the synthetic experiments. Without dropout the
/// copy behavior emerges within the step budget on every seed tried.
pub fn tiny_config(vocab_size: usize, mode: MemoryMode) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        num_heads: 2,
        d_ff: 64,
        enc_layers: 1,
        dec_layers: 2,
        dropout_rate: 0.0,
        vocab_size,
        max_len: 16,
        memory_mode: mode,
    }
}

pub fn synthetic_train_config(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_tokens: 64,
        lr_base: 3e-3,
        warmup_steps: 100,
        seed,
        checkpoint_every: 100,
        keep_last: 3,
        ..TrainConfig::default()
    }
}

/// The copy-with-substitution data: 25 train and 10 dev pairs for each of
/// the 20 training domains. Neighbors come from the query's own domain (retrieval
/// over that domain's train pairs), which is what makes them oracle
/// quality: they always carry the right keyword translations.
pub struct SyntheticData {
    pub task: SyntheticTask,
    pub train: Vec<Example>,
    pub dev_groups: Vec<Vec<Example>>,
    pub train_corpus: Corpus,
    /// Every train pair as a potential noise neighbor.
    pub pool: Vec<RetrievedPair>,
}

pub const NEIGHBORS: usize = 4;

impl SyntheticData {
    pub fn build() -> Self {
        let task = SyntheticTask::new(SyntheticConfig::default());
        let mut train = Vec::new();
        let mut dev_groups = Vec::new();
        let mut parts = Vec::new();
        for d in task.train_domains() {
            let tr = task.sample(&d, 25, Split::Train, "train");
            let dv = task.sample(&d, 10, Split::Dev, "dev");
            let r = Retriever::build(tr.clone(), retriever_config(), None).unwrap();
            train.extend(retrieve_examples(&tr, &r, RetrievalMode::Train, true).unwrap());
            dev_groups.push(retrieve_examples(&dv, &r, RetrievalMode::Decode, false).unwrap());
            parts.push(tr);
        }
        let train_corpus = spnmt::harness::synthetic::concat_corpora(&parts, Split::Train);
        let pool = train_corpus
            .pairs
            .iter()
            .map(|p| RetrievedPair {
                source: p.source.clone(),
                target: p.target.clone(),
                pair_id: p.id,
                score: 0.0,
            })
            .collect();
        SyntheticData {
            task,
            train,
            dev_groups,
            train_corpus,
            pool,
        }
    }

    pub fn dev(&self) -> Vec<Example> {
        self.dev_groups.concat()
    }
}

pub fn retriever_config() -> RetrieverConfig {
    RetrieverConfig {
        neighbors: NEIGHBORS,
        ..RetrieverConfig::default()
    }
}
