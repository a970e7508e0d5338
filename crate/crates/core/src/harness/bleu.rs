use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with one reference per hypothesis, in `[0, 100]`.
///
/// Clipped n-gram matches and n-gram totals are summed over the corpus
/// before taking precisions. No smoothing: any zero precision gives 0.
/// Brevity penalty `exp(1 - r/c)` applies when the total hypothesis length
/// `c` is below the total reference length `r`.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::shape(
            "corpus_bleu",
            format!("{} hypotheses vs {} references", hypotheses.len(), references.len()),
        ));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus("BLEU needs at least one sentence"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let refc = ngram_counts(rf, n);
            for (g, k) in ngram_counts(h, n) {
                matched[n - 1] += k.min(refc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p.exp())
}
