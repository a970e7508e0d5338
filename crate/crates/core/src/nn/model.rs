use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::memory::{self, CstmMemory};
use crate::nn::params::{Init, ParamStore, Precision};
use crate::nn::session::{causal_keep, key_keep, Keep, Session};
use crate::nn::ModelConfig;
use crate::tensor::{Tensor, Var};

/// Final encoder states, one row per encoder input position.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    /// `false` at PAD positions.
    pub keep: Vec<bool>,
}

impl EncoderOutput {
    pub fn rows(&self) -> usize {
        self.keep.len()
    }
}

/// `sin(pos / 10000^(2i/d))` in even columns, `cos` in odd columns.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![t, d], data).expect("t*d elements")
}

pub(crate) fn check_ids(cfg: &ModelConfig, ids: &[TokenId]) -> Result<()> {
    if ids.len() > cfg.max_len {
        return Err(Error::TooLong {
            len: ids.len(),
            max: cfg.max_len,
        });
    }
    match ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        Some(t) => Err(Error::shape(
            "embed",
            format!("token {t} >= vocab_size {}", cfg.vocab_size),
        )),
        None => Ok(()),
    }
}

/// Shared embedding rows scaled by `sqrt(d_model)` plus sinusoidal
/// positions, followed by dropout.
pub fn embed_tokens(s: &mut Session, cfg: &ModelConfig, ids: &[TokenId], tag: &str) -> Result<Var> {
    check_ids(cfg, ids)?;
    let table = s.param("embed")?;
    let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let e = s.graph.embedding(table, &idx)?;
    let e = s.graph.scale(e, (cfg.d_model as f64).sqrt())?;
    let pe = s.graph.constant(positional_encoding(ids.len(), cfg.d_model))?;
    let h = s.graph.add(e, pe)?;
    s.dropout(h, tag)
}

pub(crate) fn not_pad(ids: &[TokenId]) -> Vec<bool> {
    ids.iter().map(|&t| t != PAD).collect()
}

/// Pre-norm block: self-attention, optional cross-attention over
/// `cross = (states, keep)`, feed-forward; each sublayer is residual.
pub(crate) fn block(
    s: &mut Session,
    cfg: &ModelConfig,
    mut h: Var,
    self_keep: &Keep,
    prefix: &str,
    cross: Option<(Var, &Keep)>,
) -> Result<Var> {
    let a = s.layer_norm(h, &format!("{prefix}.ln1"))?;
    let a = s.attention(&format!("{prefix}.self"), a, a, self_keep, cfg.num_heads)?;
    let a = s.dropout(a, prefix)?;
    h = s.graph.add(h, a)?;
    if let Some((states, keep)) = cross {
        let a = s.layer_norm(h, &format!("{prefix}.ln2"))?;
        let a = s.attention(&format!("{prefix}.cross"), a, states, keep, cfg.num_heads)?;
        let a = s.dropout(a, prefix)?;
        h = s.graph.add(h, a)?;
    }
    let a = s.layer_norm(h, &format!("{prefix}.ln3"))?;
    let a = s.feed_forward(a, prefix)?;
    let a = s.dropout(a, prefix)?;
    s.graph.add(h, a)
}

/// Encodes `x + EOS`.
pub fn encode(s: &mut Session, cfg: &ModelConfig, x: &[TokenId]) -> Result<EncoderOutput> {
    let mut ids = x.to_vec();
    ids.push(EOS);
    let keep_rows = not_pad(&ids);
    let mut h = embed_tokens(s, cfg, &ids, "enc.embed")?;
    let self_keep = key_keep(ids.len(), &keep_rows);
    for l in 0..cfg.enc_layers {
        h = block(s, cfg, h, &self_keep, &format!("enc.{l}"), None)?;
    }
    let states = s.layer_norm(h, "enc.ln")?;
    Ok(EncoderOutput {
        states,
        keep: keep_rows,
    })
}

/// `BOS + y`, the teacher-forced decoder input.
pub fn decoder_input(y: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS).chain(y.iter().copied()).collect()
}

/// `y + EOS`, the labels aligned with [`decoder_input`].
pub fn decoder_labels(y: &[TokenId]) -> Vec<TokenId> {
    y.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// Decoder stack over already embedded inputs; returns `T × vocab` logits.
/// With a non-empty `memory` every cross-attention layer is gated between
/// the encoder and the memory.
pub fn decoder_forward(
    s: &mut Session,
    cfg: &ModelConfig,
    embedded: Var,
    enc: &EncoderOutput,
    memory: Option<&CstmMemory>,
) -> Result<Var> {
    let t = s.graph.shape(embedded)[0];
    let self_keep = causal_keep(t);
    let enc_keep = key_keep(t, &enc.keep);
    let mut h = embedded;
    for l in 0..cfg.dec_layers {
        let prefix = format!("dec.{l}");
        let a = s.layer_norm(h, &format!("{prefix}.ln1"))?;
        let a = s.attention(&format!("{prefix}.self"), a, a, &self_keep, cfg.num_heads)?;
        let a = s.dropout(a, &prefix)?;
        h = s.graph.add(h, a)?;
        let q = s.layer_norm(h, &format!("{prefix}.ln2"))?;
        let c = memory::gated_cross_attention(s, cfg, l, q, enc, &enc_keep, memory)?;
        let c = s.dropout(c, &prefix)?;
        h = s.graph.add(h, c)?;
        let a = s.layer_norm(h, &format!("{prefix}.ln3"))?;
        let a = s.feed_forward(a, &prefix)?;
        let a = s.dropout(a, &prefix)?;
        h = s.graph.add(h, a)?;
    }
    let h = s.layer_norm(h, "dec.ln")?;
    s.linear(h, "out")
}

/// Logits for the decoder input ids `y_in` (already starting with BOS).
pub fn decode_logits(
    s: &mut Session,
    cfg: &ModelConfig,
    y_in: &[TokenId],
    enc: &EncoderOutput,
    memory: Option<&CstmMemory>,
) -> Result<Var> {
    let e = embed_tokens(s, cfg, y_in, "dec.embed")?;
    decoder_forward(s, cfg, e, enc, memory)
}

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, seed: u64) {
    store.init(&format!("{prefix}.w"), &[din, dout], Init::Xavier, seed);
    store.init(&format!("{prefix}.b"), &[1, dout], Init::Zeros, seed);
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) {
    store.init(&format!("{prefix}.g"), &[d], Init::Ones, seed);
    store.init(&format!("{prefix}.b"), &[d], Init::Zeros, seed);
}

pub(crate) fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), d, d, seed);
    }
}

pub(crate) fn init_block(store: &mut ParamStore, cfg: &ModelConfig, prefix: &str, cross: bool, seed: u64) {
    let d = cfg.d_model;
    init_norm(store, &format!("{prefix}.ln1"), d, seed);
    init_attention(store, &format!("{prefix}.self"), d, seed);
    if cross {
        init_norm(store, &format!("{prefix}.ln2"), d, seed);
        init_attention(store, &format!("{prefix}.cross"), d, seed);
    }
    init_norm(store, &format!("{prefix}.ln3"), d, seed);
    init_linear(store, &format!("{prefix}.ff1"), d, cfg.d_ff, seed);
    init_linear(store, &format!("{prefix}.ff2"), cfg.d_ff, d, seed);
}

/// Every parameter of the model `cfg` describes, including the memory
/// encoders and gates when `cfg.memory_mode` is not `none`.
pub fn init_params(cfg: &ModelConfig, seed: u64, precision: Precision) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut store = ParamStore::new(precision);
    store.init(
        "embed",
        &[cfg.vocab_size, d],
        Init::Uniform(1.0 / (d as f64).sqrt()),
        seed,
    );
    for l in 0..cfg.enc_layers {
        init_block(&mut store, cfg, &format!("enc.{l}"), false, seed);
    }
    init_norm(&mut store, "enc.ln", d, seed);
    for l in 0..cfg.dec_layers {
        init_block(&mut store, cfg, &format!("dec.{l}"), true, seed);
    }
    init_norm(&mut store, "dec.ln", d, seed);
    init_linear(&mut store, "out", d, cfg.vocab_size, seed);
    memory::init_memory_params(&mut store, cfg, seed);
    Ok(store)
}
