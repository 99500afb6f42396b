//! Parameter bundles shared by several blocks.

use crate::error::Result;
use crate::tensor::{Element, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Scaled Gaussian init, std = 1/sqrt(fan_in).
pub fn init_weight<T: Element>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    rng.gaussian(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// `x · W (+ b)` over the rows of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_weight(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Gain and bias of a layer norm over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
            eps,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain)?, g.param(self.bias)?);
        let axis = g.shape(x).len() - 1;
        g.layer_norm(x, gain, bias, axis, self.eps)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_model, d_ff, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), d_ff, d_model, true)?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, h)
    }
}

/// Overwrites every element of the named parameters with `value`.
pub fn fill<T: Element>(store: &mut ParamStore<T>, ids: &[ParamId], value: f64) {
    for &id in ids {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = T::lit(value));
    }
}
