//! Vision-language fusion: flattened visual tokens query the keyword
//! embeddings, then a residual feed-forward block refines the result.
//!
//! ```text
//! Q  = flatten(F_gca) · W_vis + b_vis
//! Z  = MHA(Q, KE_final, KE_final)
//! A  = LN_1(Q + Z)
//! F' = LN_2(W_r · ReLU(W_h · A) + A)
//! ```

use crate::attention::{AttnMask, MhaParams};
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::tensor::{Element, Graph, ParamStore, Rng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer {
    pub cross: MhaParams,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_out: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransFusionParams {
    /// Projects visual channels `C` to `d_model`.
    pub visual_proj: Linear,
    pub layers: Vec<FusionLayer>,
}

impl TransFusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        channels: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        depth: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("fusion depth must be >= 1"));
        }
        if d_ff < d_model {
            return Err(Error::config(format!(
                "fusion d_ff {d_ff} must be >= d_model {d_model}"
            )));
        }
        let visual_proj = Linear::new(store, rng, "fusion.visual_proj", channels, d_model, true)?;
        let layers = (0..depth)
            .map(|i| {
                let name = format!("fusion.{i}");
                Ok(FusionLayer {
                    cross: MhaParams::new(
                        store,
                        rng,
                        &format!("{name}.cross"),
                        d_model,
                        d_model,
                        d_model,
                        heads,
                    )?,
                    ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d_model, ln_eps)?,
                    ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, d_ff)?,
                    ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d_model, ln_eps)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TransFusionParams {
            visual_proj,
            layers,
        })
    }
}

pub struct CrossAttention {
    /// Projected visual queries `[HW × d_model]`.
    pub queries: Var,
    /// `[HW × d_model]`
    pub z: Var,
    /// Head-averaged weights `[HW × n]`.
    pub alignment: Var,
}

pub struct FusedFeatures {
    /// `F' [HW × d_model]`
    pub f_prime: Var,
    /// Alignment of the last fusion layer, `[HW × n]`.
    pub alignment: Var,
}

fn head_average<T: Element>(g: &mut Graph<'_, T>, weights: &[Var]) -> Result<Var> {
    let mut acc = weights[0];
    for &w in &weights[1..] {
        acc = g.add(acc, w)?;
    }
    g.scale(acc, 1.0 / weights.len() as f64)
}

/// Flattens `[H × W × C]` visual features and projects them to `d_model`.
pub fn visual_queries<T: Element>(
    g: &mut Graph<'_, T>,
    f_gca: Var,
    params: &TransFusionParams,
) -> Result<Var> {
    let s = g.shape(f_gca).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "visual features must be [H, W, C]".into(),
        });
    }
    let flat = g.reshape(f_gca, &[s[0] * s[1], s[2]])?;
    params.visual_proj.forward(g, flat)
}

/// Cross-attention of `queries` into keyword embeddings.
pub fn cross_attend<T: Element>(
    g: &mut Graph<'_, T>,
    layer: &FusionLayer,
    queries: Var,
    ke_final: Var,
    keyword_mask: &AttnMask,
) -> Result<CrossAttention> {
    let out = layer.cross.forward(g, queries, ke_final, keyword_mask)?;
    let alignment = head_average(g, &out.weights)?;
    Ok(CrossAttention {
        queries,
        z: out.output,
        alignment,
    })
}

/// `Z = MHA(F_gca, KE_final, KE_final)` through the first fusion layer.
pub fn vla_cross_attention<T: Element>(
    g: &mut Graph<'_, T>,
    f_gca: Var,
    ke_final: Var,
    keyword_mask: &AttnMask,
    params: &TransFusionParams,
) -> Result<CrossAttention> {
    let q = visual_queries(g, f_gca, params)?;
    cross_attend(g, &params.layers[0], q, ke_final, keyword_mask)
}

/// Residual feed-forward refinement of one fusion layer.
pub fn refine<T: Element>(
    g: &mut Graph<'_, T>,
    layer: &FusionLayer,
    queries: Var,
    z: Var,
) -> Result<Var> {
    let a = g.add(queries, z)?;
    let a = layer.ln_attn.forward(g, a)?;
    let h = layer.ffn.forward(g, a)?;
    let h = g.add(h, a)?;
    layer.ln_out.forward(g, h)
}

pub fn transfusion_forward<T: Element>(
    g: &mut Graph<'_, T>,
    f_gca: Var,
    ke_final: Var,
    keyword_mask: &AttnMask,
    params: &TransFusionParams,
) -> Result<FusedFeatures> {
    let mut x = visual_queries(g, f_gca, params)?;
    let mut alignment = None;
    for layer in &params.layers {
        let ca = cross_attend(g, layer, x, ke_final, keyword_mask)?;
        x = refine(g, layer, ca.queries, ca.z)?;
        alignment = Some(ca.alignment);
    }
    Ok(FusedFeatures {
        f_prime: x,
        alignment: alignment.expect("depth >= 1"),
    })
}
