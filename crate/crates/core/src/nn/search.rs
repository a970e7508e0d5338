use crate::corpus::{TokenId, BOS, EOS};
use crate::error::Result;
use crate::memory::{build_memory, CstmMemory, MemoryMode, RetrievedBatch};
use crate::nn::model::{decode_logits, encode, EncoderOutput};
use crate::nn::params::ParamStore;
use crate::nn::session::Session;
use crate::nn::ModelConfig;

/// Incremental access to next-token distributions for one source sentence.
/// The encoder and memory are computed once.
pub struct Decoder<'p> {
    sess: Session<'p>,
    cfg: ModelConfig,
    enc: EncoderOutput,
    memory: Option<CstmMemory>,
    mark: usize,
}

impl<'p> Decoder<'p> {
    /// `batch` is ignored when the model has no memory.
    pub fn new(
        store: &'p ParamStore,
        cfg: &ModelConfig,
        x: &[TokenId],
        batch: Option<&RetrievedBatch>,
    ) -> Result<Self> {
        let mut sess = Session::eval(store);
        let enc = encode(&mut sess, cfg, x)?;
        let memory = match (cfg.memory_mode, batch) {
            (MemoryMode::None, _) | (_, None) => None,
            (mode, Some(b)) => Some(build_memory(&mut sess, cfg, b, &enc, mode)?),
        };
        // Bind every decoder parameter before the rewind mark.
        decode_logits(&mut sess, cfg, &[BOS], &enc, memory.as_ref())?;
        let mark = sess.graph.len();
        Ok(Decoder {
            sess,
            cfg: cfg.clone(),
            enc,
            memory,
            mark,
        })
    }

    /// Log-probabilities of the token following `prefix` (which starts with
    /// BOS).
    pub fn log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.sess.rewind(self.mark);
        let logits = decode_logits(&mut self.sess, &self.cfg, prefix, &self.enc, self.memory.as_ref())?;
        let t = self.sess.graph.value(logits);
        Ok(log_softmax(t.row(t.rows() - 1)))
    }

    /// Longest output the decoder input length allows.
    fn cap(&self, max_out_len: usize) -> usize {
        max_out_len.min(self.cfg.max_len - 1)
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Picks the most probable token at each step until EOS (not included) or
/// `max_out_len` tokens.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[TokenId],
    batch: Option<&RetrievedBatch>,
    max_out_len: usize,
) -> Result<Vec<TokenId>> {
    let mut dec = Decoder::new(store, cfg, x, batch)?;
    let cap = dec.cap(max_out_len);
    let mut prefix = vec![BOS];
    while prefix.len() - 1 < cap {
        let tok = argmax(&dec.log_probs(&prefix)?) as TokenId;
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    prefix.remove(0);
    Ok(prefix)
}

struct Candidate {
    parent: usize,
    token: TokenId,
    step_lp: f64,
    total: f64,
    norm: f64,
}

/// Beam search keeping the `beam` best hypotheses by summed log-probability
/// divided by length (EOS counts toward the length). With `beam == 1` the
/// result equals [`greedy_decode`].
pub fn beam_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    x: &[TokenId],
    batch: Option<&RetrievedBatch>,
    beam: usize,
    max_out_len: usize,
) -> Result<Vec<TokenId>> {
    let beam = beam.max(1);
    let mut dec = Decoder::new(store, cfg, x, batch)?;
    let cap = dec.cap(max_out_len);
    let mut alive: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let mut len = 0;
    while !alive.is_empty() && finished.len() < beam && len < cap {
        let mut cands = Vec::new();
        for (h, (toks, total)) in alive.iter().enumerate() {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(toks);
            for (tok, lp) in dec.log_probs(&prefix)?.into_iter().enumerate() {
                let t = total + lp;
                cands.push(Candidate {
                    parent: h,
                    token: tok as TokenId,
                    step_lp: lp,
                    total: t,
                    norm: t / (len + 1) as f64,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.norm
                .total_cmp(&a.norm)
                .then(b.step_lp.total_cmp(&a.step_lp))
                .then(a.parent.cmp(&b.parent))
                .then(a.token.cmp(&b.token))
        });
        let mut next = Vec::new();
        for c in cands.into_iter().take(beam) {
            let toks = alive[c.parent].0.clone();
            if c.token == EOS {
                finished.push((toks, c.norm));
            } else {
                let mut toks = toks;
                toks.push(c.token);
                next.push((toks, c.total));
            }
        }
        alive = next;
        len += 1;
    }
    let best = |v: Vec<(Vec<TokenId>, f64)>| v.into_iter().min_by(|a, b| b.1.total_cmp(&a.1)).map(|(t, _)| t);
    let denom = len.max(1) as f64;
    Ok(best(finished)
        .or_else(|| best(alive.into_iter().map(|(t, s)| (t, s / denom)).collect()))
        .unwrap_or_default())
}
