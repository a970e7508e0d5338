//! Retrieval memory: retrieved pairs are encoded into a time-concatenated
//! memory of target states, which every decoder cross-attention layer
//! blends with the source context through a scalar sigmoid gate.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::corpus::{Corpus, TokenId};
use crate::error::{Error, Result};
use crate::neighbors::NeighborSet;
use crate::nn::{decode_logits, encode, EncoderOutput};
use crate::nn::{decoder_input, model_internals as mi};
use crate::nn::{Init, Keep, ModelConfig, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// How retrieved targets are conditioned before entering the memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MemoryMode {
    /// No memory; the plain encoder-decoder.
    None,
    /// Targets encoded on their own.
    Tm,
    /// Targets attend to the current source encoding.
    Ctm,
    /// Retrieved sources attend to the current source; targets attend to
    /// their encoded source.
    #[default]
    Cstm,
}

impl FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MemoryMode::None),
            "tm" => Ok(MemoryMode::Tm),
            "ctm" => Ok(MemoryMode::Ctm),
            "cstm" => Ok(MemoryMode::Cstm),
            other => Err(Error::Config(format!("unknown memory_mode {other}"))),
        }
    }
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::None => "none",
            MemoryMode::Tm => "tm",
            MemoryMode::Ctm => "ctm",
            MemoryMode::Cstm => "cstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub pair_id: u32,
    pub score: f64,
}

/// The neighbors of one query. May be empty. PAD tokens inside a pair are
/// masked everywhere.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievedBatch {
    pub pairs: Vec<RetrievedPair>,
}

impl RetrievedBatch {
    pub fn from_neighbors(set: &NeighborSet, corpus: &Corpus) -> Result<Self> {
        let pairs = set
            .neighbors
            .iter()
            .map(|n| {
                let p = corpus.pair(n.pair_id).ok_or(Error::MissingNeighbors(n.pair_id))?;
                Ok(RetrievedPair {
                    source: p.source.clone(),
                    target: p.target.clone(),
                    pair_id: n.pair_id,
                    score: n.score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RetrievedBatch { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Layer-normalized target encodings of every retrieved pair, concatenated
/// along time.
#[derive(Debug, Clone)]
pub struct CstmMemory {
    /// `None` when no pair contributed.
    pub states: Option<Var>,
    /// `false` at PAD rows.
    pub keep: Vec<bool>,
    /// Rows of each contributing pair, in batch order.
    pub segments: Vec<Range<usize>>,
}

impl CstmMemory {
    pub fn empty() -> Self {
        CstmMemory {
            states: None,
            keep: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_none()
    }

    pub fn rows(&self) -> usize {
        self.keep.len()
    }
}

fn check_retrieved(cfg: &ModelConfig, ids: &[TokenId], what: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::shape("memory", format!("empty retrieved {what}")));
    }
    mi::check_ids(cfg, ids)
}

/// One self-attention + cross-attention block over a retrieved source,
/// attending to the current source encoding. Rows = source length.
pub fn encode_retrieved_source(
    s: &mut Session,
    cfg: &ModelConfig,
    x_i: &[TokenId],
    enc: &EncoderOutput,
) -> Result<Var> {
    check_retrieved(cfg, x_i, "source")?;
    let keep = mi::not_pad(x_i);
    let h = mi::embed_tokens(s, cfg, x_i, "mem.src.embed")?;
    let self_keep = mi::key_keep(x_i.len(), &keep);
    let cross_keep = mi::key_keep(x_i.len(), &enc.keep);
    let h = mi::block(s, cfg, h, &self_keep, "mem.src", Some((enc.states, &cross_keep)))?;
    s.layer_norm(h, "mem.src.ln")
}

/// One block over a retrieved target. Cross-attention to `conditioning =
/// (states, keep)` is used in CTM and CSTM modes and ignored in TM mode.
pub fn encode_retrieved_target(
    s: &mut Session,
    cfg: &ModelConfig,
    y_i: &[TokenId],
    conditioning: Option<(Var, &[bool])>,
    mode: MemoryMode,
) -> Result<Var> {
    check_retrieved(cfg, y_i, "target")?;
    let keep = mi::not_pad(y_i);
    let h = mi::embed_tokens(s, cfg, y_i, "mem.tgt.embed")?;
    let self_keep = mi::key_keep(y_i.len(), &keep);
    match (mode, conditioning) {
        (MemoryMode::None, _) => Err(Error::Config("memory_mode none has no retrieved-target encoder".into())),
        (MemoryMode::Tm, _) => mi::block(s, cfg, h, &self_keep, "mem.tgt", None),
        (_, None) => Err(Error::Config(format!("memory_mode {mode} needs a conditioning input"))),
        (_, Some((states, ckeep))) => {
            let cross_keep = mi::key_keep(y_i.len(), ckeep);
            mi::block(s, cfg, h, &self_keep, "mem.tgt", Some((states, &cross_keep)))
        }
    }
}

/// Encodes every pair per `mode` and concatenates the target encodings,
/// then applies the memory layer norm. Pairs whose target (or, in CSTM
/// mode, source) is entirely PAD are skipped.
pub fn build_memory(
    s: &mut Session,
    cfg: &ModelConfig,
    batch: &RetrievedBatch,
    enc: &EncoderOutput,
    mode: MemoryMode,
) -> Result<CstmMemory> {
    if mode == MemoryMode::None {
        return Ok(CstmMemory::empty());
    }
    let mut parts = Vec::new();
    let mut keep = Vec::new();
    let mut segments = Vec::new();
    for p in &batch.pairs {
        let tkeep = mi::not_pad(&p.target);
        let skeep = mi::not_pad(&p.source);
        if !tkeep.contains(&true) || (mode == MemoryMode::Cstm && !skeep.contains(&true)) {
            continue;
        }
        let y = match mode {
            MemoryMode::Cstm => {
                let xs = encode_retrieved_source(s, cfg, &p.source, enc)?;
                encode_retrieved_target(s, cfg, &p.target, Some((xs, &skeep)), mode)?
            }
            MemoryMode::Ctm => encode_retrieved_target(s, cfg, &p.target, Some((enc.states, &enc.keep)), mode)?,
            _ => encode_retrieved_target(s, cfg, &p.target, None, mode)?,
        };
        segments.push(keep.len()..keep.len() + tkeep.len());
        keep.extend(tkeep);
        parts.push(y);
    }
    if parts.is_empty() {
        return Ok(CstmMemory::empty());
    }
    let cat = if parts.len() == 1 {
        parts[0]
    } else {
        s.graph.concat(&parts, 0)?
    };
    let states = s.layer_norm(cat, "mem.ln")?;
    Ok(CstmMemory {
        states: Some(states),
        keep,
        segments,
    })
}

/// `g = sigmoid(cs · w_s + cm · w_m)` per row, `c = g * cs + (1 - g) * cm`.
/// Returns `(c, g)`; `g` is `T × 1`. A pinned gate in the session replaces
/// `g` by a constant.
pub fn gate_combine(s: &mut Session, layer: usize, cs: Var, cm: Var) -> Result<(Var, Var)> {
    let t = s.graph.shape(cs)[0];
    let g = match s.gate_override() {
        Some(v) => s.graph.constant(Tensor::full(&[t, 1], v))?,
        None => {
            let ws = s.param(&format!("dec.{layer}.gate.ws"))?;
            let wm = s.param(&format!("dec.{layer}.gate.wm"))?;
            let a = s.graph.matmul(cs, ws)?;
            let b = s.graph.matmul(cm, wm)?;
            let pre = s.graph.add(a, b)?;
            s.graph.sigmoid(pre)?
        }
    };
    let one_minus = s.graph.affine(g, -1.0, 1.0)?;
    let a = s.graph.mul(cs, g)?;
    let b = s.graph.mul(cm, one_minus)?;
    let c = s.graph.add(a, b)?;
    Ok((c, g))
}

/// Source context from attention over the encoder; with a non-empty memory
/// it is gated against the memory context. Empty memory bypasses the gate.
pub fn gated_cross_attention(
    s: &mut Session,
    cfg: &ModelConfig,
    layer: usize,
    q: Var,
    enc: &EncoderOutput,
    enc_keep: &Keep,
    memory: Option<&CstmMemory>,
) -> Result<Var> {
    let cs = s.attention(&format!("dec.{layer}.cross"), q, enc.states, enc_keep, cfg.num_heads)?;
    let Some((mstates, mem)) = memory.and_then(|m| m.states.map(|st| (st, m))) else {
        return Ok(cs);
    };
    let t = s.graph.shape(q)[0];
    let mkeep = mi::key_keep(t, &mem.keep);
    let cm = s.attention(&format!("dec.{layer}.mem"), q, mstates, &mkeep, cfg.num_heads)?;
    Ok(gate_combine(s, layer, cs, cm)?.0)
}

/// Teacher-forced logits for target `y` (rows = `|y| + 1`, the last row
/// predicting EOS) given source `x` and its neighbors.
pub fn semiparametric_forward(
    s: &mut Session,
    cfg: &ModelConfig,
    x: &[TokenId],
    y: &[TokenId],
    batch: &RetrievedBatch,
) -> Result<Var> {
    let enc = encode(s, cfg, x)?;
    let memory = build_memory(s, cfg, batch, &enc, cfg.memory_mode)?;
    decode_logits(s, cfg, &decoder_input(y), &enc, Some(&memory))
}

/// Memory encoders, memory layer norm, memory attention and gate weights.
pub fn init_memory_params(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mode = cfg.memory_mode;
    if mode == MemoryMode::None {
        return;
    }
    let d = cfg.d_model;
    if mode == MemoryMode::Cstm {
        mi::init_block(store, cfg, "mem.src", true, seed);
        mi::init_norm(store, "mem.src.ln", d, seed);
    }
    mi::init_block(store, cfg, "mem.tgt", mode != MemoryMode::Tm, seed);
    mi::init_norm(store, "mem.ln", d, seed);
    for l in 0..cfg.dec_layers {
        mi::init_attention(store, &format!("dec.{l}.mem"), d, seed);
        store.init(&format!("dec.{l}.gate.ws"), &[d, 1], Init::Xavier, seed);
        store.init(&format!("dec.{l}.gate.wm"), &[d, 1], Init::Xavier, seed);
    }
}
