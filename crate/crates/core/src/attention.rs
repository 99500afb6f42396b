//! Scaled dot-product attention and multi-head attention.

use crate::error::{Error, Result};
use crate::layers::init_weight;
use crate::tensor::{Element, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Additive logit applied to masked keys.
pub const MASK_LOGIT: f64 = -1e9;

/// Which (query, key) pairs may interact.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttnMask {
    /// `true` marks a key that may be attended to; `None` keeps every key.
    pub keys: Option<Vec<bool>>,
    /// Query `i` may only see keys `0..=i`.
    pub causal: bool,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn keys(keep: Vec<bool>) -> Self {
        AttnMask {
            keys: Some(keep),
            causal: false,
        }
    }

    pub fn causal() -> Self {
        AttnMask {
            keys: None,
            causal: true,
        }
    }

    fn is_empty(&self) -> bool {
        self.keys.is_none() && !self.causal
    }

    /// Dense additive mask of shape `[n_q × n_k]`.
    fn additive<T: Element>(&self, n_q: usize, n_k: usize) -> Result<Tensor<T>> {
        if let Some(keys) = &self.keys {
            if keys.len() != n_k {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![n_k],
                    rhs: vec![keys.len()],
                });
            }
        }
        let mut data = vec![T::zero(); n_q * n_k];
        for q in 0..n_q {
            let mut visible = 0;
            for k in 0..n_k {
                let key_ok = self.keys.as_ref().is_none_or(|m| m[k]);
                let causal_ok = !self.causal || k <= q;
                if key_ok && causal_ok {
                    visible += 1;
                } else {
                    data[q * n_k + k] = T::lit(MASK_LOGIT);
                }
            }
            if visible == 0 {
                return Err(Error::contract(format!(
                    "attention query {q} has every key masked"
                )));
            }
        }
        Tensor::new(vec![n_q, n_k], data)
    }
}

/// `softmax(Q·Kᵀ / sqrt(d_k)) · V` for rank-2 `q [n_q × d_k]`,
/// `k [n_k × d_k]`, `v [n_k × d_v]`. Returns the output and the
/// row-stochastic weight matrix `[n_q × n_k]`.
pub fn scaled_dot_product<T: Element>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttnMask,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::Shape {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let d_k = sq[1];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    if !mask.is_empty() {
        let m = g.constant(mask.additive(sq[0], sk[0])?)?;
        logits = g.add(logits, m)?;
    }
    let weights = g.softmax(logits, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Per-head query/key/value projections plus the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

pub struct MhaOutput {
    pub output: Var,
    /// One `[n_q × n_k]` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MhaParams {
    /// `d_query` and `d_kv` are the widths of the query and key/value inputs;
    /// the heads split `d_model` evenly.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        d_query: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{name}: d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let mut proj = |kind: &str, fan_in: usize| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| store.add(format!("{name}.{kind}.{h}"), init_weight(rng, fan_in, d_k)))
                .collect()
        };
        let wq = proj("wq", d_query)?;
        let wk = proj("wk", d_kv)?;
        let wv = proj("wv", d_kv)?;
        let wo = store.add(format!("{name}.wo"), init_weight(rng, heads * d_k, d_model))?;
        Ok(MhaParams {
            heads,
            d_k,
            d_model,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self
            .wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .copied()
            .collect();
        ids.push(self.wo);
        ids
    }

    /// `Concat(head_1..head_h) · W_o` with
    /// `head_i = attention(query·W_qi, kv·W_ki, kv·W_vi)`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        kv: Var,
        mask: &AttnMask,
    ) -> Result<MhaOutput> {
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = g.param(self.wq[h])?;
            let wk = g.param(self.wk[h])?;
            let wv = g.param(self.wv[h])?;
            let q = g.matmul(query, wq)?;
            let k = g.matmul(kv, wk)?;
            let v = g.matmul(kv, wv)?;
            let (out, w) = scaled_dot_product(g, q, k, v, mask)?;
            heads.push(out);
            weights.push(w);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        let wo = g.param(self.wo)?;
        let output = g.matmul(cat, wo)?;
        Ok(MhaOutput { output, weights })
    }
}
