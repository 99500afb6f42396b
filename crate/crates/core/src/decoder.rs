//! Autoregressive caption decoder: pre-LN transformer blocks with causal
//! self-attention, cross-attention to a fixed memory, and a feed-forward
//! sublayer. Also teacher-forced loss and greedy / beam generation.

use std::cmp::Ordering;

use crate::attention::{AttnMask, MhaParams};
use crate::error::{Error, Result};
use crate::language::{BOS, EOS, PAD};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Rng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MhaParams,
    pub ln_cross: LayerNorm,
    pub cross_attn: MhaParams,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub token_embedding: ParamId,
    /// Learned positions `[max_caption_len + 1 × d_model]`.
    pub positions: ParamId,
    /// Projects visual channels into memory tokens.
    pub memory_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub ln_final: LayerNorm,
    pub out: Linear,
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_caption_len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub vocab_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_caption_len: usize,
    pub ln_eps: f64,
}

impl DecoderParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        dims: DecoderDims,
    ) -> Result<Self> {
        let DecoderDims {
            vocab_size,
            channels,
            d_model,
            heads,
            d_ff,
            layers,
            max_caption_len,
            ln_eps,
        } = dims;
        if layers == 0 {
            return Err(Error::config("decoder needs at least one layer"));
        }
        if max_caption_len == 0 {
            return Err(Error::config("max caption length must be >= 1"));
        }
        if vocab_size <= EOS as usize {
            return Err(Error::config(format!(
                "vocabulary of {vocab_size} lacks reserved tokens"
            )));
        }
        let token_embedding = store.add(
            "decoder.embedding",
            rng.gaussian(&[vocab_size, d_model], 1.0),
        )?;
        let positions = store.add(
            "decoder.positions",
            rng.gaussian(&[max_caption_len + 1, d_model], 0.5),
        )?;
        let memory_proj = Linear::new(store, rng, "decoder.memory_proj", channels, d_model, true)?;
        let layers = (0..layers)
            .map(|i| {
                let n = format!("decoder.{i}");
                Ok(DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d_model, ln_eps)?,
                    self_attn: MhaParams::new(
                        store,
                        rng,
                        &format!("{n}.self_attn"),
                        d_model,
                        d_model,
                        d_model,
                        heads,
                    )?,
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d_model, ln_eps)?,
                    cross_attn: MhaParams::new(
                        store,
                        rng,
                        &format!("{n}.cross_attn"),
                        d_model,
                        d_model,
                        d_model,
                        heads,
                    )?,
                    ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), d_model, ln_eps)?,
                    ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d_model, d_ff)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderParams {
            token_embedding,
            positions,
            memory_proj,
            layers,
            ln_final: LayerNorm::new(store, "decoder.ln_final", d_model, ln_eps)?,
            out: Linear::new(store, rng, "decoder.out", d_model, vocab_size, true)?,
            vocab_size,
            d_model,
            max_caption_len,
        })
    }

    /// Longest accepted decoder input: BOS plus a full caption.
    pub fn max_positions(&self) -> usize {
        self.max_caption_len + 1
    }
}

/// `[proj(flatten(F_gca)); F']`, `[2·H·W × d_model]`.
pub fn build_memory<T: Element>(
    g: &mut Graph<'_, T>,
    f_gca: Var,
    f_prime: Var,
    params: &DecoderParams,
) -> Result<Var> {
    let s = g.shape(f_gca).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "visual features must be [H, W, C]".into(),
        });
    }
    let flat = g.reshape(f_gca, &[s[0] * s[1], s[2]])?;
    let vis = params.memory_proj.forward(g, flat)?;
    g.concat(&[vis, f_prime], 0)
}

impl DecoderLayer {
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let h = self.self_attn.forward(g, h, h, &AttnMask::causal())?.output;
        let x = g.add(x, h)?;
        let h = self.ln_cross.forward(g, x)?;
        let h = self
            .cross_attn
            .forward(g, h, memory, &AttnMask::none())?
            .output;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }
}

/// Logits `[t × V]` for every position of a BOS-led prefix.
pub fn decode_step_logits<T: Element>(
    g: &mut Graph<'_, T>,
    prefix: &[u32],
    memory: Var,
    params: &DecoderParams,
) -> Result<Var> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::contract("decoder prefix must start with BOS"));
    }
    if prefix.len() > params.max_positions() {
        return Err(Error::Length {
            len: prefix.len(),
            max: params.max_positions(),
        });
    }
    let idx: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
    let table = g.param(params.token_embedding)?;
    let tok = g.embedding(table, &idx)?;
    let pos_table = g.param(params.positions)?;
    let pos = g.narrow(pos_table, 0, 0, prefix.len())?;
    let mut x = g.add(tok, pos)?;
    for layer in &params.layers {
        x = layer.forward(g, x, memory)?;
    }
    let x = params.ln_final.forward(g, x)?;
    params.out.forward(g, x)
}

/// Mean next-token cross-entropy of `caption` (no BOS/EOS) given `memory`.
pub fn caption_loss<T: Element>(
    g: &mut Graph<'_, T>,
    caption: &[u32],
    memory: Var,
    params: &DecoderParams,
) -> Result<Var> {
    if caption.is_empty() {
        return Err(Error::contract("empty caption"));
    }
    if caption.len() > params.max_caption_len {
        return Err(Error::Length {
            len: caption.len(),
            max: params.max_caption_len,
        });
    }
    let mut input = Vec::with_capacity(caption.len() + 1);
    input.push(BOS);
    input.extend_from_slice(caption);
    let targets: Vec<usize> = caption.iter().chain([&EOS]).map(|&t| t as usize).collect();
    let logits = decode_step_logits(g, &input, memory, params)?;
    g.cross_entropy(logits, &targets, Some(PAD as usize))
}

/// Numerically stable `log softmax` of a logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
    logits.iter().map(|&x| x - lse).collect()
}

/// Decoding controls shared by greedy and beam search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub max_len: usize,
    pub eos: u32,
    /// Tokens that may never be emitted.
    pub banned: Vec<u32>,
}

impl SearchConfig {
    /// Caption decoding: PAD and BOS banned, EOS stops.
    pub fn captions(max_len: usize) -> Self {
        SearchConfig {
            max_len,
            eos: EOS,
            banned: vec![PAD, BOS],
        }
    }
}

/// Argmax decoding; ties go to the lower token id. `scorer` maps the tokens
/// emitted so far to next-token log-probabilities (or logits).
pub fn greedy_search<F>(mut scorer: F, cfg: &SearchConfig) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let scores = scorer(&out)?;
        let mut best: Option<(u32, f64)> = None;
        for (t, &s) in scores.iter().enumerate() {
            let t = t as u32;
            if cfg.banned.contains(&t) {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((t, s));
            }
        }
        let (t, _) = best.ok_or_else(|| Error::contract("every token is banned"))?;
        if t == cfg.eos {
            break;
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<u32>,
    logp: f64,
}

impl Hyp {
    /// Cumulative log-prob divided by the number of emitted tokens (EOS included).
    fn normalized(&self) -> f64 {
        self.logp / self.tokens.len() as f64
    }
}

/// Higher normalized score first, then lexicographically lower tokens.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.normalized()
        .partial_cmp(&a.normalized())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search. Each step keeps the best `width`
/// extensions; those ending in EOS (or reaching `max_len`) are retired but
/// still use up a slot, so the live beam shrinks as hypotheses finish and
/// `width = 1` coincides with [`greedy_search`]. `scorer` must return
/// log-probabilities. The result excludes EOS.
pub fn beam_search<F>(mut scorer: F, width: usize, cfg: &SearchConfig) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if width == 0 {
        return Err(Error::config("beam width must be >= 1"));
    }
    if cfg.max_len == 0 {
        return Ok(Vec::new());
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    while !live.is_empty() {
        let mut cands = Vec::new();
        for h in &live {
            let lp = scorer(&h.tokens)?;
            for (t, &s) in lp.iter().enumerate() {
                let t = t as u32;
                if cfg.banned.contains(&t) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                cands.push(Hyp {
                    tokens,
                    logp: h.logp + s,
                });
            }
        }
        if cands.is_empty() {
            return Err(Error::contract("every token is banned"));
        }
        cands.sort_by(rank);
        cands.truncate(width);
        live.clear();
        for c in cands {
            if *c.tokens.last().expect("non-empty") == cfg.eos || c.tokens.len() == cfg.max_len {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.sort_by(rank);
    let mut best = finished.swap_remove(0).tokens;
    if best.last() == Some(&cfg.eos) {
        best.pop();
    }
    Ok(best)
}

/// Next-token log-probabilities for the decoder at the end of `generated`.
pub fn next_token_log_probs<T: Element>(
    store: &ParamStore<T>,
    params: &DecoderParams,
    memory: &crate::tensor::Tensor<T>,
    generated: &[u32],
) -> Result<Vec<f64>> {
    let mut g = Graph::inference(store);
    let mem = g.constant(memory.clone())?;
    let mut prefix = Vec::with_capacity(generated.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(generated);
    let logits = decode_step_logits(&mut g, &prefix, mem, params)?;
    let v = params.vocab_size;
    let row = &g.value(logits).data()[(prefix.len() - 1) * v..];
    Ok(log_softmax(
        &row.iter().map(|x| x.as_f64()).collect::<Vec<_>>(),
    ))
}

/// Greedy (`beam <= 1`) or beam decoding of a caption from a fixed memory.
pub fn generate<T: Element>(
    store: &ParamStore<T>,
    params: &DecoderParams,
    memory: &crate::tensor::Tensor<T>,
    beam: usize,
) -> Result<Vec<u32>> {
    let cfg = SearchConfig::captions(params.max_caption_len);
    let scorer = |gen: &[u32]| next_token_log_probs(store, params, memory, gen);
    if beam <= 1 {
        greedy_search(scorer, &cfg)
    } else {
        beam_search(scorer, beam, &cfg)
    }
}
