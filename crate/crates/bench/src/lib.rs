//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spnmt::harness::synthetic::{concat_corpora, SyntheticConfig, SyntheticTask};
use spnmt::harness::Example;
use spnmt::memory::RetrievedBatch;
use spnmt::tensor::Tensor;
use spnmt::{Corpus, SentencePair, Split, Vocab};

/// `pairs` sentence pairs of 8..=24 tokens over a Zipf-ish vocabulary of
/// `vocab_words` words; targets reverse their sources.
pub fn zipf_corpus(pairs: usize, vocab_words: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab = Vocab::new();
    let ids: Vec<u32> = (0..vocab_words).map(|i| vocab.insert(&format!("w{i}"))).collect();
    let pairs = (0..pairs)
        .map(|i| {
            let len = rng.gen_range(8..=24);
            // Squaring a uniform draw skews toward frequent (low) ranks.
            let source: Vec<u32> = (0..len)
                .map(|_| ids[(rng.gen::<f64>().powi(2) * vocab_words as f64) as usize % vocab_words])
                .collect();
            SentencePair {
                id: i as u32,
                target: source.iter().rev().copied().collect(),
                source,
                domain: "bench".into(),
            }
        })
        .collect();
    Corpus::new(pairs, Split::Train, vocab)
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// A synthetic example with `neighbors` retrieved pairs of its own domain.
pub fn synthetic_example(neighbors: usize) -> (Corpus, Example) {
    let task = SyntheticTask::new(SyntheticConfig::default());
    let domain = &task.train_domains()[0];
    let corpus = concat_corpora(
        &[task.sample(domain, neighbors + 1, Split::Train, "bench")],
        Split::Train,
    );
    let query = &corpus.pairs[0];
    let pairs = corpus.pairs[1..]
        .iter()
        .map(|p| spnmt::memory::RetrievedPair {
            source: p.source.clone(),
            target: p.target.clone(),
            pair_id: p.id,
            score: 1.0,
        })
        .collect();
    let ex = Example {
        source: query.source.clone(),
        target: query.target.clone(),
        neighbors: RetrievedBatch { pairs },
    };
    (corpus, ex)
}
