//! Acceptance run: one PASS/FAIL line per criterion. Tolerances are pinned
//! here and never loosened to make a run pass. Criterion 10 is advisory
//! and reports WARN instead of failing.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use spnmt::corpus::{load_corpus, CorpusFormat, LoadOptions};
use spnmt::dense::{build_dense_index, retrieve_dense, DenseIndex, DenseNGramEntry, HashEmbedding};
use spnmt::harness::synthetic::{add_neighbor_noise, mismatch_neighbors};
use spnmt::harness::*;
use spnmt::idf::{build_idf, retrieve_sentences, InvertedIndex};
use spnmt::memory::{build_memory, gate_combine, semiparametric_forward, MemoryMode, RetrievedBatch, RetrievedPair};
use spnmt::neighbors::{read_neighbor_sets, write_neighbor_sets};
use spnmt::ngram::{build_ngram_index, reduced_ngrams, retrieve_by_ngrams, NGramRetrievalConfig, RetrievalMode};
use spnmt::nn::{
    decode_logits, decoder_input, decoder_labels, encode, init_params, ModelConfig, ParamStore, Precision, Session,
};
use spnmt::tensor::{Graph, Tensor, Var};
use spnmt::{Corpus, TokenId, TokenizerConfig};

const IDF_SCORE_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-4;
const GATE_TOL: f64 = 1e-12;
const COLLAPSE_TOL: f64 = 1e-6;
const ORDER_TOL: f64 = 1e-6;
const SYNTH_ACC: f64 = 0.95;
const SYNTH_GAP: f64 = 0.10;
const ADAPT_GAIN: f64 = 0.05;
const SYNTH_STEPS: u64 = 1500;
const ABLATION_STEPS: u64 = 1200;
const ABLATION_NOISE: f64 = 0.25;
const FINETUNE_STEPS: u64 = 300;
const SEEDS: [u64; 3] = [1, 2, 3];

enum Verdict {
    Pass,
    Fail,
    Warn,
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, v: Verdict, detail: String) {
        let tag = match v {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failures += 1;
                "FAIL"
            }
            Verdict::Warn => "WARN",
        };
        println!("criterion {id:>2} {tag} {name}: {detail}");
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        self.line(id, name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }
}

fn random_query(rng: &mut ChaCha8Rng, c: &Corpus, max_len: usize) -> Vec<TokenId> {
    if rng.gen_bool(0.5) {
        let p = &c.pairs[rng.gen_range(0..c.len())];
        p.source.clone()
    } else {
        // 4 + vocab gives the occasional unseen token.
        let hi = c.vocab.len() as TokenId + 2;
        (0..rng.gen_range(1..=max_len)).map(|_| rng.gen_range(4..hi)).collect()
    }
}

fn criterion_1(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    let mut queries = 0;
    for _ in 0..50 {
        let pairs = rng.gen_range(1..=200);
        let words = rng.gen_range(2..=46);
        let c = random_corpus(&mut rng, pairs, words, 12);
        let idf = build_idf(&c).unwrap();
        let inv = InvertedIndex::build(&c);
        for _ in 0..20 {
            let q = random_query(&mut rng, &c, 12);
            let exclude = rng.gen_bool(0.3).then(|| rng.gen_range(0..c.len() as u32));
            let got = retrieve_sentences(&q, &c, &idf, &inv, 10, exclude);
            let want = brute_force_sentences(&q, &c, 10, exclude);
            queries += 1;
            let same = got.neighbors.len() == want.len()
                && got
                    .neighbors
                    .iter()
                    .zip(&want)
                    .all(|(g, w)| g.pair_id == w.0 && (g.score - w.1).abs() <= IDF_SCORE_TOL);
            if !same {
                mismatches += 1;
            }
        }
    }
    let el = t0.elapsed();
    r.check(
        1,
        "sentence retrieval oracle",
        mismatches == 0 && el < Duration::from_secs(30),
        format!(
            "{queries} queries over 50 corpora, {mismatches} mismatches, {:.2}s",
            el.as_secs_f64()
        ),
    );
}

fn criterion_2(r: &mut Report) {
    let mut bad = 0;
    for n in [2usize, 4, 6, 10] {
        for t in 1..=50usize {
            let x: Vec<TokenId> = (0..t as TokenId).map(|i| i + 10).collect();
            let s = reduced_ngrams(&x, n).unwrap();
            let half = n / 2;
            let want_count = t.div_ceil(half);
            // 1-based positions i with (i - 1) mod n/2 = 0.
            let want_starts: Vec<usize> = (1..=t).filter(|i| (i - 1) % half == 0).collect();
            let got_starts: Vec<usize> = s.ngrams.iter().map(|g| g.start + 1).collect();
            let tokens_ok = s.ngrams.iter().all(|g| {
                g.tokens.len() == n
                    && g.tokens
                        .iter()
                        .enumerate()
                        .all(|(k, &tok)| tok == x.get(g.start + k).copied().unwrap_or(PAD))
            });
            if s.ngrams.len() != want_count || got_starts != want_starts || !tokens_ok {
                bad += 1;
            }
        }
    }
    let x = [11, 12, 13, 14, 15];
    let worked: Vec<Vec<TokenId>> = reduced_ngrams(&x, 4)
        .unwrap()
        .ngrams
        .into_iter()
        .map(|g| g.tokens)
        .collect();
    let worked_ok = worked == [vec![11, 12, 13, 14], vec![13, 14, 15, PAD], vec![15, PAD, PAD, PAD]];
    r.check(
        2,
        "reduced n-gram law",
        bad == 0 && worked_ok,
        format!(
            "200 (T, n) cases, {bad} violations; T=5 n=4 example {}",
            if worked_ok { "ok" } else { "wrong" }
        ),
    );
}

fn criterion_3(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut mismatches = 0;
    let mut queries = 0;
    for k in 0..20 {
        let pairs = rng.gen_range(1..=100);
        let words = rng.gen_range(2..=20);
        let c = random_corpus(&mut rng, pairs, words, 10);
        let cfg = NGramRetrievalConfig {
            widths: vec![2, 4, 6],
            train_cap: 10,
            seed: 17 + k,
        };
        let idf = build_idf(&c).unwrap();
        let idx = build_ngram_index(&c, &cfg, &idf).unwrap();
        for _ in 0..10 {
            let q = random_query(&mut rng, &c, 10);
            let exclude = rng.gen_bool(0.3).then(|| rng.gen_range(0..c.len() as u32));
            let got = retrieve_by_ngrams(&q, &idx, &cfg, RetrievalMode::Decode, exclude).unwrap();
            let want = brute_force_ngrams(&q, &c, &cfg, exclude);
            queries += 1;
            let got: Vec<(u32, f64)> = got.neighbors.iter().map(|n| (n.pair_id, n.score)).collect();
            if got != want {
                mismatches += 1;
            }
        }
    }
    r.check(
        3,
        "n-gram retrieval oracle",
        mismatches == 0,
        format!("{queries} decode-mode queries over 20 corpora, {mismatches} mismatches"),
    );
}

fn criterion_4(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut mismatches = 0;
    let sizes = [1usize, 10, 1000, 10_000];
    for (k, &n) in sizes.iter().enumerate() {
        let d = [1usize, 8, 33, 64][k];
        // Coarse grid values make exact distance ties common.
        let entries: Vec<DenseNGramEntry> = (0..n)
            .map(|i| DenseNGramEntry {
                vector: (0..d).map(|_| rng.gen_range(-2i32..=2) as f32 * 0.5).collect(),
                pair_id: (i / 3) as u32,
                start: i % 3,
                width: 2,
            })
            .collect();
        let idx = DenseIndex::from_entries(d, &entries).unwrap();
        for _ in 0..20 {
            let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-2i32..=2) as f32 * 0.5).collect();
            let got = idx.nearest(2, &q)[0];
            let best = entries
                .iter()
                .map(|e| (squared_l2_oracle(&q, &e.vector), e.pair_id, e.start))
                .min_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))))
                .unwrap();
            let e = &entries[got.0];
            if (e.pair_id, e.start) != (best.1, best.2) || got.1 != best.0 {
                mismatches += 1;
            }
        }
    }
    // Whole retrieval path against exhaustive search.
    for _ in 0..5 {
        let c = random_corpus(&mut rng, 60, 15, 9);
        let p = HashEmbedding::new(c.vocab.clone(), 16, 5);
        let cfg = NGramRetrievalConfig {
            widths: vec![2, 4],
            train_cap: 10,
            seed: 0,
        };
        let idx = build_dense_index(&c, &p, &cfg).unwrap();
        for _ in 0..10 {
            let q = random_query(&mut rng, &c, 9);
            let q: Vec<TokenId> = q.into_iter().filter(|&t| (t as usize) < c.vocab.len()).collect();
            if q.is_empty() {
                continue;
            }
            let got = retrieve_dense(&q, &idx, &p, &cfg, RetrievalMode::Decode, None).unwrap();
            let got: Vec<(u32, f64)> = got.neighbors.iter().map(|n| (n.pair_id, n.score)).collect();
            if got != brute_force_dense(&q, &c, &p, &cfg, None) {
                mismatches += 1;
            }
        }
    }
    let hand = DenseIndex::from_entries(
        2,
        &[
            DenseNGramEntry {
                vector: vec![1.0, 1.0],
                pair_id: 0,
                start: 0,
                width: 2,
            },
            DenseNGramEntry {
                vector: vec![0.5, 0.5],
                pair_id: 1,
                start: 0,
                width: 2,
            },
        ],
    )
    .unwrap();
    let top = hand.nearest(2, &[0.0, 0.0])[0];
    let hand_ok = top.0 == 1 && (top.1.sqrt() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6;
    r.check(
        4,
        "dense retrieval oracle",
        mismatches == 0 && hand_ok,
        format!(
            "indexes up to 10^4 entries and d up to 64 plus 50 full retrievals, {mismatches} mismatches; hand example distance {:.6}",
            top.1.sqrt()
        ),
    );
}

fn squared_l2_oracle(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> spnmt::Result<Var>>)>;

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Values kept away from the relu kink so the finite difference is smooth.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn broadcast_shape(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Vec<usize> {
    match rng.gen_range(0..4) {
        0 => vec![m, n],
        1 => vec![1, n],
        2 => vec![m, 1],
        _ => vec![n],
    }
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    let mut v: Vec<(&'static str, OpCase)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            (
                vec![random_tensor(rng, &[m, k], 1.0), random_tensor(rng, &[k, n], 1.0)],
                Box::new(|g: &mut Graph, x: &[Var]| g.matmul(x[0], x[1])),
            )
        }),
    ));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        v.push((
            name,
            Box::new(move |rng| {
                let (m, n) = (dim(rng), dim(rng));
                let sb = broadcast_shape(rng, m, n);
                let (a, b) = (random_tensor(rng, &[m, n], 1.0), random_tensor(rng, &sb, 1.0));
                let ins = if rng.gen_bool(0.5) { vec![a, b] } else { vec![b, a] };
                (
                    ins,
                    Box::new(move |g: &mut Graph, x: &[Var]| match which {
                        0 => g.add(x[0], x[1]),
                        1 => g.sub(x[0], x[1]),
                        _ => g.mul(x[0], x[1]),
                    }),
                )
            }),
        ));
    }
    v.push((
        "affine",
        Box::new(|rng| {
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let (m, n) = (dim(rng), dim(rng));
            (
                vec![random_tensor(rng, &[m, n], 1.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.affine(x[0], a, b)),
            )
        }),
    ));
    v.push((
        "concat",
        Box::new(|rng| {
            let axis = rng.gen_range(0..2);
            let other = dim(rng);
            let parts = rng.gen_range(1..=3);
            let ins: Vec<Tensor> = (0..parts)
                .map(|_| {
                    let a = dim(rng);
                    let shape = if axis == 0 { [a, other] } else { [other, a] };
                    random_tensor(rng, &shape, 1.0)
                })
                .collect();
            (ins, Box::new(move |g: &mut Graph, x: &[Var]| g.concat(x, axis)))
        }),
    ));
    v.push((
        "narrow",
        Box::new(|rng| {
            let axis = rng.gen_range(0..2);
            let (m, n) = (dim(rng) + 1, dim(rng) + 1);
            let len_axis = if axis == 0 { m } else { n };
            let start = rng.gen_range(0..len_axis);
            let len = rng.gen_range(1..=len_axis - start);
            (
                vec![random_tensor(rng, &[m, n], 1.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.narrow(x[0], axis, start, len)),
            )
        }),
    ));
    v.push((
        "split",
        Box::new(|rng| {
            let (m, n) = (dim(rng) + 1, dim(rng));
            let first = rng.gen_range(1..m);
            // Recombined with distinct weights so both halves matter.
            (
                vec![random_tensor(rng, &[m, n], 1.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| {
                    let parts = g.split(x[0], 0, &[first, m - first])?;
                    let a = g.scale(parts[0], 2.0)?;
                    g.concat(&[parts[1], a], 0)
                }),
            )
        }),
    ));
    v.push((
        "transpose",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng));
            (
                vec![random_tensor(rng, &[m, n], 1.0)],
                Box::new(|g: &mut Graph, x: &[Var]| g.transpose(x[0])),
            )
        }),
    ));
    v.push((
        "softmax",
        Box::new(|rng| {
            let axis = rng.gen_range(0..2);
            let (m, n) = (dim(rng), dim(rng) + 1);
            (
                vec![random_tensor(rng, &[m, n], 2.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.softmax(x[0], axis)),
            )
        }),
    ));
    v.push((
        "masked_softmax",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng) + 1);
            let mut keep: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.7)).collect();
            for i in 0..m {
                keep[i * n + rng.gen_range(0..n)] = true;
            }
            let keep = std::rc::Rc::new(keep);
            (
                vec![random_tensor(rng, &[m, n], 2.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.masked_softmax(x[0], &keep)),
            )
        }),
    ));
    v.push((
        "sigmoid",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng));
            (
                vec![random_tensor(rng, &[m, n], 4.0)],
                Box::new(|g: &mut Graph, x: &[Var]| g.sigmoid(x[0])),
            )
        }),
    ));
    v.push((
        "relu",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng));
            (
                vec![away_from_zero(rng, &[m, n])],
                Box::new(|g: &mut Graph, x: &[Var]| g.relu(x[0])),
            )
        }),
    ));
    v.push((
        "layer_norm",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng) + 1);
            (
                vec![
                    random_tensor(rng, &[m, n], 1.0),
                    random_tensor(rng, &[n], 1.0),
                    random_tensor(rng, &[n], 1.0),
                ],
                Box::new(|g: &mut Graph, x: &[Var]| g.layer_norm(x[0], x[1], x[2], 1e-6)),
            )
        }),
    ));
    v.push((
        "dropout",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng));
            let seed = rng.gen();
            let rate = rng.gen_range(0.0..0.9);
            (
                vec![random_tensor(rng, &[m, n], 1.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.dropout(x[0], rate, seed, true)),
            )
        }),
    ));
    v.push((
        "embedding",
        Box::new(|rng| {
            let (vocab, d) = (dim(rng) + 1, dim(rng));
            let ids: Vec<usize> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..vocab)).collect();
            (
                vec![random_tensor(rng, &[vocab, d], 1.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.embedding(x[0], &ids)),
            )
        }),
    ));
    v.push((
        "cross_entropy",
        Box::new(|rng| {
            let (m, vocab) = (dim(rng), dim(rng) + 1);
            let targets: Vec<u32> = (0..m).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let u = if rng.gen_bool(0.5) {
                0.0
            } else {
                rng.gen_range(0.0..0.5)
            };
            (
                vec![random_tensor(rng, &[m, vocab], 2.0)],
                Box::new(move |g: &mut Graph, x: &[Var]| g.cross_entropy(x[0], &targets, u, 0)),
            )
        }),
    ));
    v.push((
        "sum",
        Box::new(|rng| {
            let (m, n) = (dim(rng), dim(rng));
            (
                vec![random_tensor(rng, &[m, n], 1.0)],
                Box::new(|g: &mut Graph, x: &[Var]| g.sum(x[0])),
            )
        }),
    ));
    v
}

/// Logits-level loss of the full semi-parametric model, smoothed CE.
fn model_loss(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[TokenId],
    y: &[TokenId],
    batch: &RetrievedBatch,
    grads: bool,
) -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
    let mut s = if grads {
        Session::train(store, 0.0, 0, 0)
    } else {
        Session::eval(store)
    };
    let logits = semiparametric_forward(&mut s, cfg, x, y, batch).unwrap();
    let loss = s.graph.cross_entropy(logits, &decoder_labels(y), 0.1, 0).unwrap();
    let value = s.graph.value(loss).item();
    let g = grads.then(|| s.gradients(loss).unwrap());
    (value, g)
}

fn model_gradient_error() -> (f64, usize) {
    let cfg = ModelConfig {
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        dropout_rate: 0.0,
        vocab_size: 7,
        max_len: 8,
        memory_mode: MemoryMode::Cstm,
    };
    let store = init_params(&cfg, 3, Precision::Double).unwrap();
    let x = [4, 5, 6, 4];
    let y = [6, 5];
    let batch = RetrievedBatch {
        pairs: vec![
            RetrievedPair {
                source: vec![4, 6],
                target: vec![5, 6, 4],
                pair_id: 0,
                score: 0.0,
            },
            RetrievedPair {
                source: vec![5, 0, 6],
                target: vec![4, 0],
                pair_id: 1,
                score: 0.0,
            },
        ],
    };
    let (_, analytic) = model_loss(&store, &cfg, &x, &y, &batch, true);
    let analytic = analytic.unwrap();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for (name, t) in store.iter() {
        let g = analytic.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let d = (model_loss(&plus, &cfg, &x, &y, &batch, false).0
                - model_loss(&minus, &cfg, &x, &y, &batch, false).0)
                / (2.0 * h);
            a.push(g.data()[j]);
            n.push(d);
        }
    }
    (relative_error(&a, &n), a.len())
}

fn criterion_5(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for (name, case) in op_cases() {
        let mut w: f64 = 0.0;
        for _ in 0..100 {
            let (inputs, f) = case(&mut rng);
            w = w.max(gradient_check(&mut rng, &inputs, |g, x| f(g, x)));
        }
        worst.push((name, w));
    }
    let (model_err, model_params) = model_gradient_error();
    let el = t0.elapsed();
    let op_worst = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<String> = worst
        .iter()
        .filter(|w| w.1.is_nan() || w.1 > GRAD_REL_TOL)
        .map(|w| format!("{} {:.2e}", w.0, w.1))
        .collect();
    r.check(
        5,
        "gradient suite",
        failing.is_empty() && model_err <= GRAD_REL_TOL && el < Duration::from_secs(300),
        format!(
            "{} ops x 100 instances, worst op error {op_worst:.2e}{}; full CSTM model ({model_params} parameters) error {model_err:.2e}; {:.1}s",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!(" (failing: {})", failing.join(", ")) },
            el.as_secs_f64()
        ),
    );
}

fn gate_store(d: usize, ws: Tensor, wm: Tensor) -> ParamStore {
    let mut store = ParamStore::new(Precision::Double);
    assert_eq!(ws.numel(), d);
    store.insert("dec.0.gate.ws", ws);
    store.insert("dec.0.gate.wm", wm);
    store
}

fn gate_values(store: &ParamStore, cs: &Tensor, cm: &Tensor) -> (Tensor, Tensor) {
    let mut s = Session::eval(store);
    let a = s.graph.constant(cs.clone()).unwrap();
    let b = s.graph.constant(cm.clone()).unwrap();
    let (c, g) = gate_combine(&mut s, 0, a, b).unwrap();
    (s.graph.value(c).clone(), s.graph.value(g).clone())
}

fn criterion_6(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut in_range, mut half, mut same) = (true, true, 0.0f64);
    for _ in 0..200 {
        let (t, d) = (dim(&mut rng), dim(&mut rng) * 2);
        let store = gate_store(
            d,
            random_tensor(&mut rng, &[d, 1], 3.0),
            random_tensor(&mut rng, &[d, 1], 3.0),
        );
        let cs = random_tensor(&mut rng, &[t, d], 2.0);
        let cm = random_tensor(&mut rng, &[t, d], 2.0);
        let (_, g) = gate_values(&store, &cs, &cm);
        in_range &= g.data().iter().all(|&v| v > 0.0 && v < 1.0);
        let zero = gate_store(d, Tensor::zeros(&[d, 1]), Tensor::zeros(&[d, 1]));
        let (_, g0) = gate_values(&zero, &cs, &cm);
        half &= g0.data().iter().all(|&v| v == 0.5);
        let (c, _) = gate_values(&store, &cs, &cs);
        same = same.max(c.max_abs_diff(&cs));
    }
    r.check(
        6,
        "gate algebra",
        in_range && half && same <= GATE_TOL,
        format!("200 random cases: g in (0,1) {in_range}; zero weights give 0.5 exactly {half}; equal contexts max deviation {same:.1e}"),
    );
}

fn memory_case() -> (ModelConfig, ParamStore, Vec<TokenId>, Vec<TokenId>, RetrievedBatch) {
    let cfg = ModelConfig {
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        enc_layers: 2,
        dec_layers: 2,
        dropout_rate: 0.1,
        vocab_size: 20,
        max_len: 16,
        memory_mode: MemoryMode::Cstm,
    };
    let store = init_params(&cfg, 11, Precision::Double).unwrap();
    let batch = RetrievedBatch {
        pairs: vec![
            RetrievedPair {
                source: vec![5, 6, 7],
                target: vec![8, 9, 10, 11],
                pair_id: 3,
                score: 1.0,
            },
            RetrievedPair {
                source: vec![12, 13],
                target: vec![14, 0, 15],
                pair_id: 7,
                score: 0.5,
            },
            RetrievedPair {
                source: vec![16, 17, 18, 19],
                target: vec![4],
                pair_id: 9,
                score: 0.2,
            },
        ],
    };
    (cfg, store, vec![5, 6, 13, 19, 4], vec![8, 15, 10], batch)
}

fn logits_with(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[TokenId],
    y: &[TokenId],
    batch: Option<&RetrievedBatch>,
    pin: Option<f64>,
) -> Tensor {
    let mut s = Session::eval(store);
    s.pin_gate(pin);
    let enc = encode(&mut s, cfg, x).unwrap();
    let memory = batch.map(|b| build_memory(&mut s, cfg, b, &enc, cfg.memory_mode).unwrap());
    let l = decode_logits(&mut s, cfg, &decoder_input(y), &enc, memory.as_ref()).unwrap();
    s.graph.value(l).clone()
}

fn criterion_7(r: &mut Report) {
    let (cfg, store, x, y, batch) = memory_case();
    let baseline_cfg = ModelConfig {
        memory_mode: MemoryMode::None,
        ..cfg.clone()
    };
    let baseline = logits_with(&store, &baseline_cfg, &x, &y, None, None);
    let empty = logits_with(&store, &cfg, &x, &y, Some(&RetrievedBatch::default()), None);
    let pinned = logits_with(&store, &cfg, &x, &y, Some(&batch), Some(1.0));
    let free = logits_with(&store, &cfg, &x, &y, Some(&batch), None);
    let (de, dp, df) = (
        empty.max_abs_diff(&baseline),
        pinned.max_abs_diff(&baseline),
        free.max_abs_diff(&baseline),
    );
    r.check(
        7,
        "baseline collapse",
        de <= COLLAPSE_TOL && dp <= COLLAPSE_TOL && df > COLLAPSE_TOL,
        format!("empty memory {de:.1e}, pinned gate {dp:.1e} (free gate differs by {df:.1e})"),
    );
}

fn criterion_8(r: &mut Report) {
    let (cfg, store, x, y, batch) = memory_case();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let base = logits_with(&store, &cfg, &x, &y, Some(&batch), None);
    let mut worst: f64 = 0.0;
    for mode in [MemoryMode::Tm, MemoryMode::Ctm, MemoryMode::Cstm] {
        let cfg = ModelConfig {
            memory_mode: mode,
            ..cfg.clone()
        };
        let store = init_params(&cfg, 12, Precision::Double).unwrap();
        let base = logits_with(&store, &cfg, &x, &y, Some(&batch), None);
        for _ in 0..6 {
            let mut p = batch.clone();
            p.pairs.shuffle(&mut rng);
            worst = worst.max(logits_with(&store, &cfg, &x, &y, Some(&p), None).max_abs_diff(&base));
        }
    }
    let _ = base;
    r.check(
        8,
        "neighbor-order invariance",
        worst < ORDER_TOL,
        format!("18 permutations over TM/CTM/CSTM, max logit change {worst:.1e}"),
    );
}

fn train_synthetic(
    data: &SyntheticData,
    mode: MemoryMode,
    seed: u64,
    steps: u64,
    train: &[Example],
    dev: &[Example],
) -> (ModelConfig, ParamStore) {
    let cfg = tiny_config(data.task.vocab.len(), mode);
    let init = init_params(&cfg, seed, Precision::Double).unwrap();
    let out = train_model(&cfg, init, train, dev, &synthetic_train_config(seed, steps), None);
    (cfg, out)
}

fn train_model(
    cfg: &ModelConfig,
    init: ParamStore,
    train_set: &[Example],
    dev: &[Example],
    tc: &TrainConfig,
    dir: Option<&Path>,
) -> ParamStore {
    train(cfg, init, train_set, dev, tc, dir).unwrap().best
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    v.iter()
        .map(|a| format!("{:.1}", a * 100.0))
        .collect::<Vec<_>>()
        .join("/")
}

fn criterion_9(r: &mut Report, data: &SyntheticData) -> (ModelConfig, ParamStore) {
    let t0 = Instant::now();
    let dev = data.dev();
    let shuffled = mismatch_neighbors(&data.dev_groups).concat();
    let (mut acc, mut acc_shuf) = (Vec::new(), Vec::new());
    let mut first = None;
    for seed in SEEDS {
        let (cfg, store) = train_synthetic(data, MemoryMode::Cstm, seed, SYNTH_STEPS, &data.train, &dev);
        acc.push(token_accuracy(&store, &cfg, &dev).unwrap());
        acc_shuf.push(token_accuracy(&store, &cfg, &shuffled).unwrap());
        first.get_or_insert((cfg, store));
    }
    let el = t0.elapsed();
    let (a, s) = (mean(&acc), mean(&acc_shuf));
    r.check(
        9,
        "synthetic end-to-end",
        a >= SYNTH_ACC && a - s >= SYNTH_GAP && el < Duration::from_secs(600),
        format!(
            "{} train pairs, {SYNTH_STEPS} steps; oracle neighbors {:.1}% ({}), mismatched {:.1}% ({}), gap {:.1} points; {:.0}s",
            data.train.len(),
            a * 100.0,
            pct(&acc),
            s * 100.0,
            pct(&acc_shuf),
            (a - s) * 100.0,
            el.as_secs_f64()
        ),
    );
    first.unwrap()
}

fn criterion_10(r: &mut Report, data: &SyntheticData) {
    let t0 = Instant::now();
    let mut means = Vec::new();
    for mode in [MemoryMode::Cstm, MemoryMode::Ctm, MemoryMode::Tm] {
        let mut accs = Vec::new();
        for seed in SEEDS {
            let train_set = add_neighbor_noise(&data.train, &data.pool, ABLATION_NOISE, seed);
            let dev = add_neighbor_noise(&data.dev(), &data.pool, ABLATION_NOISE, seed + 1000);
            let (cfg, store) = train_synthetic(data, mode, seed, ABLATION_STEPS, &train_set, &dev);
            accs.push(token_accuracy(&store, &cfg, &dev).unwrap());
        }
        means.push((mode, mean(&accs), accs));
    }
    let ordered = means[0].1 >= means[1].1 && means[1].1 >= means[2].1;
    let detail = means
        .iter()
        .map(|(m, a, all)| format!("{m} {:.1}% ({})", a * 100.0, pct(all)))
        .collect::<Vec<_>>()
        .join(", ");
    r.line(
        10,
        "ablation trend CSTM >= CTM >= TM",
        if ordered { Verdict::Pass } else { Verdict::Warn },
        format!(
            "noise rate {ABLATION_NOISE}, {ABLATION_STEPS} steps: {detail}; {:.0}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_11(r: &mut Report, data: &SyntheticData, cfg: &ModelConfig, store: &ParamStore) {
    let held = data.task.held_out_domain();
    let in_domain = data.task.sample(&held, 125, spnmt::Split::Train, "train");
    let dev_corpus = data.task.sample(&held, 50, spnmt::Split::Dev, "dev");
    let before = store.checksum();
    // Unadapted: neighbors still come from the original training corpus.
    let original = Retriever::build(data.train_corpus.clone(), retriever_config(), None).unwrap();
    let dev_unadapted = retrieve_examples(&dev_corpus, &original, RetrievalMode::Decode, false).unwrap();
    let acc_unadapted = token_accuracy(store, cfg, &dev_unadapted).unwrap();

    let adapter = adapt_nonparametric(store, cfg, in_domain.clone(), retriever_config(), None).unwrap();
    let dev_adapted = adapter.examples(&dev_corpus).unwrap();
    let acc_adapted = token_accuracy(store, cfg, &dev_adapted).unwrap();
    let unchanged = store.checksum() == before;

    // Parametric path: retrieval stays on the original corpus, only the
    // weights see the new domain.
    let ft_train = retrieve_examples(&in_domain, &original, RetrievalMode::Train, false).unwrap();
    let tc = TrainConfig {
        warmup_steps: 50,
        ..synthetic_train_config(1, FINETUNE_STEPS)
    };
    let tuned = finetune(cfg, store, &ft_train, &dev_unadapted, &tc, None).unwrap().best;
    let acc_tuned = token_accuracy(&tuned, cfg, &dev_unadapted).unwrap();
    let distinct = tuned.checksum() != before;
    r.check(
        11,
        "adaptation contract",
        unchanged && acc_adapted - acc_unadapted >= ADAPT_GAIN && distinct && acc_tuned > acc_unadapted,
        format!(
            "held-out table {:?}: unadapted {:.1}%, non-parametric {:.1}% (checksum unchanged {unchanged}), fine-tuned {FINETUNE_STEPS} steps {:.1}% (distinct checkpoint {distinct})",
            held.choice,
            acc_unadapted * 100.0,
            acc_adapted * 100.0,
            acc_tuned * 100.0
        ),
    );
}

fn criterion_12(r: &mut Report) {
    let words = |s: &str| -> Vec<String> { s.split(' ').map(String::from).collect() };
    let h = vec![words("the cat sat on mat")];
    let refs = vec![words("the cat sat on the mat")];
    let worked = corpus_bleu(&h, &refs).unwrap();
    let sents: Vec<Vec<String>> = [
        "a b c d e",
        "the quick brown fox jumps",
        "x y",
        "one two three four five six",
    ]
    .iter()
    .map(|s| words(s))
    .collect();
    let identity = corpus_bleu(&sents, &sents).unwrap();
    let hyps: Vec<Vec<String>> = ["a b c d f", "the quick red fox jumps", "x", "one two three four six"]
        .iter()
        .map(|s| words(s))
        .collect();
    let base = corpus_bleu(&hyps, &sents).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let mut invariant = true;
    for _ in 0..10 {
        let mut idx: Vec<usize> = (0..hyps.len()).collect();
        idx.shuffle(&mut rng);
        let ph: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let pr: Vec<_> = idx.iter().map(|&i| sents[i].clone()).collect();
        invariant &= corpus_bleu(&ph, &pr).unwrap() == base;
    }
    r.check(
        12,
        "BLEU correctness",
        identity == 100.0 && (worked - 57.89).abs() <= 0.01 && invariant,
        format!("identity {identity}, worked example {worked:.4}, permutation invariant {invariant}"),
    );
}

/// ingest -> retrieve -> train -> evaluate, writing every artifact to `dir`.
fn pipeline(data: &SyntheticData, dir: &Path) {
    let tsv = dir.join("train.tsv");
    let text: String = data
        .train_corpus
        .pairs
        .iter()
        .map(|p| {
            let v = &data.task.vocab;
            format!("{}\t{}\n", v.decode(&p.source).join(" "), v.decode(&p.target).join(" "))
        })
        .collect();
    fs::write(&tsv, text).unwrap();
    let corpus = load_corpus(
        &tsv,
        CorpusFormat::Tsv,
        &TokenizerConfig::default(),
        "synthetic",
        &LoadOptions::default(),
    )
    .unwrap()
    .corpus;
    corpus.save(&dir.join("train.snap")).unwrap();
    let corpus = Corpus::load(&dir.join("train.snap")).unwrap();
    let retriever = Retriever::build(corpus.clone(), retriever_config(), None).unwrap();
    let sets: Vec<_> = corpus
        .pairs
        .iter()
        .map(|p| {
            let mut s = retriever
                .neighbor_set(&p.source, RetrievalMode::Train, Some(p.id))
                .unwrap();
            s.query_id = Some(p.id);
            s
        })
        .collect();
    write_neighbor_sets(&dir.join("neighbors.jsonl"), &sets, false).unwrap();
    let sets = read_neighbor_sets(&dir.join("neighbors.jsonl")).unwrap();
    let examples = examples_with_neighbors(&corpus, Some(&sets), &corpus).unwrap();
    let (train_set, dev) = examples.split_at(450);
    // Dropout on, so its seeding is part of what must reproduce.
    let cfg = ModelConfig {
        dropout_rate: 0.1,
        ..tiny_config(corpus.vocab.len(), MemoryMode::Cstm)
    };
    let init = init_params(&cfg, 5, Precision::Single).unwrap();
    let tc = TrainConfig {
        checkpoint_every: 50,
        ..synthetic_train_config(5, 200)
    };
    let best = train_model(&cfg, init, train_set, dev, &tc, Some(dir));
    let loss = evaluate_loss(&best, &cfg, dev).unwrap();
    let acc = token_accuracy(&best, &cfg, dev).unwrap();
    fs::write(dir.join("eval.txt"), format!("loss {loss:.17e}\naccuracy {acc:.17e}\n")).unwrap();
}

fn criterion_13(r: &mut Report, data: &SyntheticData) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(data, a.path());
    pipeline(data, b.path());
    let mut names: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(a.path().join(n)).ok() != fs::read(b.path().join(n)).ok())
        .collect();
    let has_ckpt = names.iter().any(|n| n.ends_with(".ckpt"));
    let has_metrics = names.iter().any(|n| n == "metrics.jsonl");
    r.check(
        13,
        "determinism",
        differing.is_empty() && has_ckpt && has_metrics,
        format!(
            "{} artifacts compared byte-for-byte ({}), {} differ",
            names.len(),
            names.join(" "),
            differing.len()
        ),
    );
}

fn main() {
    let mut r = Report { failures: 0 };
    let t0 = Instant::now();
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_6(&mut r);
    criterion_7(&mut r);
    criterion_8(&mut r);
    criterion_12(&mut r);
    let data = SyntheticData::build();
    let (cfg, store) = criterion_9(&mut r, &data);
    criterion_11(&mut r, &data, &cfg, &store);
    criterion_10(&mut r, &data);
    criterion_13(&mut r, &data);
    println!(
        "acceptance: {} failing criteria, {:.0}s",
        r.failures,
        t0.elapsed().as_secs_f64()
    );
    if r.failures > 0 {
        std::process::exit(1);
    }
}
