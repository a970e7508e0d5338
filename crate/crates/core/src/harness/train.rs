use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::corpus::{Corpus, TokenId, PAD};
use crate::error::{Error, Result};
use crate::harness::optim::{adam_step, lr_schedule, AdamConfig, AdamState};
use crate::hashing::combine;
use crate::memory::{semiparametric_forward, MemoryMode, RetrievedBatch};
use crate::neighbors::NeighborSet;
use crate::nn::{decoder_labels, ModelConfig, ParamStore, Session};
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Upper bound on target tokens (labels, EOS included) per batch; a
    /// batch always holds at least one example.
    pub batch_tokens: usize,
    pub lr_base: f64,
    pub warmup_steps: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub keep_last: usize,
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_tokens: 256,
            lr_base: 2e-3,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            seed: 1,
            checkpoint_every: 200,
            keep_last: 5,
            label_smoothing: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep_last < 1 || self.checkpoint_every < 1 || self.warmup_steps < 1 || self.batch_tokens < 1 {
            return Err(Error::Config(
                "keep_last, checkpoint_every, warmup_steps and batch_tokens must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            steps: kv.take("steps", d.steps)?,
            batch_tokens: kv.take("batch_tokens", d.batch_tokens)?,
            lr_base: kv.take("lr_base", d.lr_base)?,
            warmup_steps: kv.take("warmup_steps", d.warmup_steps)?,
            adam: AdamConfig {
                beta1: kv.take("adam_beta1", d.adam.beta1)?,
                beta2: kv.take("adam_beta2", d.adam.beta2)?,
                eps: kv.take("adam_eps", d.adam.eps)?,
            },
            seed: kv.take("seed", d.seed)?,
            checkpoint_every: kv.take("checkpoint_every", d.checkpoint_every)?,
            keep_last: kv.take("keep_last", d.keep_last)?,
            label_smoothing: kv.take("label_smoothing", d.label_smoothing)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training or evaluation instance with its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub neighbors: RetrievedBatch,
}

impl Example {
    /// Non-PAD labels, EOS included.
    fn label_count(&self) -> usize {
        self.target.iter().filter(|&&t| t != PAD).count() + 1
    }
}

/// Pairs every query with its neighbor set (matched by `query_id`, or by
/// position when ids are absent) resolved against `retrieval`.
pub fn examples_with_neighbors(
    queries: &Corpus,
    sets: Option<&[NeighborSet]>,
    retrieval: &Corpus,
) -> Result<Vec<Example>> {
    let by_id = sets.map(|s| {
        let mut m = std::collections::HashMap::new();
        for (i, set) in s.iter().enumerate() {
            m.insert(set.query_id.unwrap_or(i as u32), set);
        }
        m
    });
    queries
        .pairs
        .iter()
        .map(|p| {
            let neighbors = match &by_id {
                None => RetrievedBatch::default(),
                Some(m) => {
                    let set = m.get(&p.id).ok_or(Error::MissingNeighbors(p.id))?;
                    RetrievedBatch::from_neighbors(set, retrieval)?
                }
            };
            Ok(Example {
                source: p.source.clone(),
                target: p.target.clone(),
                neighbors,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub step: u64,
    pub dev_loss: f64,
    pub path: Option<PathBuf>,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest dev loss among the retained checkpoints.
    pub best: ParamStore,
    pub best_step: u64,
    /// The retained checkpoints, oldest first.
    pub retained: Vec<(u64, f64)>,
    pub metrics: Vec<MetricRow>,
}

/// Mean (label-smoothed) cross-entropy over every label of `batch`.
pub fn batch_loss(s: &mut Session, cfg: &ModelConfig, batch: &[&Example], smoothing: f64) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    for ex in batch {
        logits.push(semiparametric_forward(s, cfg, &ex.source, &ex.target, &ex.neighbors)?);
        labels.extend(decoder_labels(&ex.target));
    }
    let all = if logits.len() == 1 {
        logits[0]
    } else {
        s.graph.concat(&logits, 0)?
    };
    s.graph.cross_entropy(all, &labels, smoothing, PAD)
}

/// Token-mean cross-entropy without smoothing, evaluation mode.
pub fn evaluate_loss(store: &ParamStore, cfg: &ModelConfig, examples: &[Example]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in examples {
        let mut s = Session::eval(store);
        let l = batch_loss(&mut s, cfg, &[ex], 0.0)?;
        let n = ex.label_count();
        sum += s.graph.value(l).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus("no examples to evaluate"));
    }
    Ok(sum / count as f64)
}

/// Fraction of labels (EOS included) whose teacher-forced argmax is right.
pub fn token_accuracy(store: &ParamStore, cfg: &ModelConfig, examples: &[Example]) -> Result<f64> {
    let (mut right, mut count) = (0usize, 0usize);
    for ex in examples {
        let mut s = Session::eval(store);
        let logits = semiparametric_forward(&mut s, cfg, &ex.source, &ex.target, &ex.neighbors)?;
        let t = s.graph.value(logits);
        for (i, &y) in decoder_labels(&ex.target).iter().enumerate() {
            if y == PAD {
                continue;
            }
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            right += usize::from(best == y as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCorpus("no examples to evaluate"));
    }
    Ok(right as f64 / count as f64)
}

/// Deterministic batches: a fresh seeded shuffle each epoch, cut greedily
/// by the token budget. Batches never span two epochs.
struct Batcher<'a> {
    examples: &'a [Example],
    budget: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Batcher<'a> {
    fn new(examples: &'a [Example], budget: usize, seed: u64) -> Self {
        Batcher {
            examples,
            budget,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<&'a Example> {
        let mut out = Vec::new();
        let mut tokens = 0;
        loop {
            if self.pos == self.order.len() {
                if !out.is_empty() {
                    return out;
                }
                self.order = (0..self.examples.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(combine([self.seed, self.epoch]));
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.pos = 0;
            }
            let ex = &self.examples[self.order[self.pos]];
            if !out.is_empty() && tokens + ex.label_count() > self.budget {
                return out;
            }
            tokens += ex.label_count();
            out.push(ex);
            self.pos += 1;
            if tokens >= self.budget {
                return out;
            }
        }
    }
}

/// Teacher-forced training from `init`.
///
/// Every `checkpoint_every` steps (and after the last step) the parameters
/// are checkpointed and scored on `dev`; the last `keep_last` checkpoints
/// are retained and the one with the lowest dev loss is returned. With
/// `out_dir`, checkpoints and `metrics.jsonl` are written there and files
/// of dropped checkpoints are removed.
pub fn train(
    cfg: &ModelConfig,
    init: ParamStore,
    train_set: &[Example],
    dev: &[Example],
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus("no training examples"));
    }
    if cfg.memory_mode != MemoryMode::None && train_set.iter().all(|e| e.neighbors.is_empty()) {
        log::warn!("memory_mode {} but no example has neighbors", cfg.memory_mode);
    }
    let mut metrics_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut store = init;
    let mut adam = AdamState::new();
    let mut batcher = Batcher::new(train_set, tc.batch_tokens, tc.seed);
    let mut metrics = Vec::new();
    let mut kept: VecDeque<CheckpointRecord> = VecDeque::new();
    for step in 1..=tc.steps {
        let lr = lr_schedule(step, tc.lr_base, tc.warmup_steps)?;
        let batch = batcher.next_batch();
        let (loss, grads) = {
            let mut s = Session::train(&store, cfg.dropout_rate, tc.seed, step);
            let l = batch_loss(&mut s, cfg, &batch, tc.label_smoothing)?;
            (s.graph.value(l).item(), s.gradients(l)?)
        };
        adam_step(&mut store, &grads, &mut adam, lr, &tc.adam)?;
        let row = MetricRow { step, loss, lr };
        if let Some((w, p)) = metrics_file.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&*p, e))?;
        }
        metrics.push(row);
        debug!("step {step} loss {loss:.5} lr {lr:.3e}");
        if step % tc.checkpoint_every == 0 || step == tc.steps {
            let dev_loss = if dev.is_empty() {
                f64::NAN
            } else {
                evaluate_loss(&store, cfg, dev)?
            };
            info!("checkpoint at step {step}: dev loss {dev_loss:.5}");
            let path = match out_dir {
                Some(d) => {
                    let p = d.join(format!("step-{step:08}.ckpt"));
                    store.save(&p, &cfg.to_text())?;
                    Some(p)
                }
                None => None,
            };
            kept.push_back(CheckpointRecord {
                step,
                dev_loss,
                path,
                params: store.clone(),
            });
            while kept.len() > tc.keep_last {
                if let Some(old) = kept.pop_front() {
                    if let Some(p) = old.path {
                        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
        }
    }
    if let Some((mut w, p)) = metrics_file {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let retained = kept.iter().map(|c| (c.step, c.dev_loss)).collect::<Vec<_>>();
    let best = select_checkpoint(&retained);
    let (best_step, best_params) = match best {
        Some(i) => (kept[i].step, kept[i].params.clone()),
        None => (0, store),
    };
    if let Some(d) = out_dir {
        best_params.save(&d.join("best.ckpt"), &cfg.to_text())?;
    }
    Ok(TrainOutcome {
        best: best_params,
        best_step,
        retained,
        metrics,
    })
}

/// Index of the lowest dev loss, ties to the later checkpoint. Without any
/// finite dev loss the last checkpoint is chosen.
pub fn select_checkpoint(retained: &[(u64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(_, l)) in retained.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        match best {
            Some(b) if retained[b].1 < l => {}
            _ => best = Some(i),
        }
    }
    best.or(retained.len().checked_sub(1))
}
