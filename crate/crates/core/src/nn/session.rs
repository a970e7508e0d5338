use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::hashing::{combine, fnv1a};
use crate::nn::params::ParamStore;
use crate::nn::LN_EPS;
use crate::tensor::{Graph, Tensor, Var};

/// Row-major `queries × keys` attention mask; `false` blocks a key.
pub type Keep = Rc<Vec<bool>>;

/// One forward (and optionally backward) pass over a parameter store.
pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
    dropout: f64,
    seed: u64,
    step: u64,
    dropout_calls: u64,
    gate_override: Option<f64>,
}

impl<'p> Session<'p> {
    /// Parameters are constants and dropout is off.
    pub fn eval(store: &'p ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            track_grads: false,
            dropout: 0.0,
            seed: 0,
            step: 0,
            dropout_calls: 0,
            gate_override: None,
        }
    }

    /// Parameters are differentiable leaves. Dropout masks are a function
    /// of `(seed, layer tag, step, call index)`.
    pub fn train(store: &'p ParamStore, dropout: f64, seed: u64, step: u64) -> Self {
        Session {
            track_grads: true,
            dropout,
            seed,
            step,
            ..Session::eval(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.track_grads && self.dropout > 0.0
    }

    /// Replaces every memory gate value with `g` (testing hook).
    pub fn pin_gate(&mut self, g: Option<f64>) {
        self.gate_override = g;
    }

    pub fn gate_override(&self) -> Option<f64> {
        self.gate_override
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.track_grads {
            self.graph.leaf(t)?
        } else {
            self.graph.constant(t)?
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Drops graph nodes past `mark` together with their parameter bindings.
    pub fn rewind(&mut self, mark: usize) {
        self.graph.truncate(mark);
        self.bound.retain(|_, v| v.index() < mark);
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradient of `loss` for every parameter bound in this session.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let g = self.graph.backward(loss)?;
        Ok(self.bound.iter().map(|(k, &v)| (k.clone(), g.get(v))).collect())
    }

    /// `x · {prefix}.w + {prefix}.b`
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    pub fn dropout(&mut self, x: Var, tag: &str) -> Result<Var> {
        if !self.is_training() {
            return Ok(x);
        }
        self.dropout_calls += 1;
        let seed = combine([self.seed, fnv1a(tag.as_bytes()), self.step, self.dropout_calls]);
        self.graph.dropout(x, self.dropout, seed, true)
    }

    /// `relu(x · w1 + b1) · w2 + b2`
    pub fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = self.graph.relu(h)?;
        self.linear(h, &format!("{prefix}.ff2"))
    }

    /// Multi-head scaled dot-product attention of `queries` over `keys`,
    /// with projections `{prefix}.{q,k,v,o}`.
    pub fn attention(&mut self, prefix: &str, queries: Var, keys: Var, keep: &Keep, heads: usize) -> Result<Var> {
        self.attention_impl(prefix, queries, keys, keep, heads, None)
    }

    /// As [`Session::attention`], also returning each head's weight matrix.
    pub fn attention_weights(
        &mut self,
        prefix: &str,
        queries: Var,
        keys: Var,
        keep: &Keep,
        heads: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let mut probs = Vec::new();
        let out = self.attention_impl(prefix, queries, keys, keep, heads, Some(&mut probs))?;
        Ok((out, probs))
    }

    fn attention_impl(
        &mut self,
        prefix: &str,
        queries: Var,
        keys: Var,
        keep: &Keep,
        heads: usize,
        mut probs: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.graph.shape(queries)[1];
        if !d.is_multiple_of(heads) {
            return Err(Error::shape("attention", format!("{d} features over {heads} heads")));
        }
        let dh = d / heads;
        let q = self.linear(queries, &format!("{prefix}.q"))?;
        let k = self.linear(keys, &format!("{prefix}.k"))?;
        let v = self.linear(keys, &format!("{prefix}.v"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.graph.narrow(q, 1, h * dh, dh)?,
                    self.graph.narrow(k, 1, h * dh, dh)?,
                    self.graph.narrow(v, 1, h * dh, dh)?,
                )
            };
            let kt = self.graph.transpose(kh)?;
            let s = self.graph.matmul(qh, kt)?;
            let s = self.graph.scale(s, scale)?;
            let p = self.graph.masked_softmax(s, keep)?;
            if let Some(out) = probs.as_deref_mut() {
                out.push(p);
            }
            ctx.push(self.graph.matmul(p, vh)?);
        }
        let c = if heads == 1 {
            ctx[0]
        } else {
            self.graph.concat(&ctx, 1)?
        };
        self.linear(c, &format!("{prefix}.o"))
    }
}

/// Every query may see every key whose flag is set.
pub fn key_keep(queries: usize, keys: &[bool]) -> Keep {
    Rc::new((0..queries).flat_map(|_| keys.iter().copied()).collect())
}

/// Query `i` may see keys `0..=i`.
pub fn causal_keep(t: usize) -> Keep {
    Rc::new((0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect())
}
