//! Finite-difference gradient checks of each block on small seeded inputs:
//! a 4×4×8 feature map, 3 keywords and `d_model = 16`, all in f64.

use serde::Serialize;

use crate::attention::{AttnMask, MhaParams};
use crate::decoder::{caption_loss, DecoderDims, DecoderParams};
use crate::error::{Error, Result};
use crate::fusion::{transfusion_forward, TransFusionParams};
use crate::language::LanguageEncoder;
use crate::tensor::{
    check_param_gradients, GradReport, Graph, ParamId, ParamStore, Rng, Tensor, Var,
};
use crate::vision::{gca_forward, GcaParams, QkvWiring};

pub const FD_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

const SIDE: usize = 4;
const CHANNELS: usize = 8;
const D_MODEL: usize = 16;
const HEADS: usize = 2;
const VOCAB: usize = 10;
const KEYWORDS: [u32; 3] = [4, 7, 5];
/// With 8 channels, `r = 4` leaves a two-unit LN bottleneck whose
/// gradients sit near 1e-7 and defeat a relative-error test; `r = 2` does not.
const REDUCTION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Gca,
    Mha,
    Keywords,
    Transfusion,
    Decoder,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Gca,
        Block::Mha,
        Block::Keywords,
        Block::Transfusion,
        Block::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Gca => "gca",
            Block::Mha => "mha",
            Block::Keywords => "keywords",
            Block::Transfusion => "transfusion",
            Block::Decoder => "decoder",
        }
    }

    /// Blocks selected by a CLI name; `all` selects every block.
    pub fn parse_selection(name: &str) -> Result<Vec<Block>> {
        if name == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .map(|b| vec![b])
            .ok_or_else(|| Error::config(format!("unknown block {name:?}")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub block: &'static str,
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<'_, f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn run(block: Block, seed: u64) -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = Rng::new(seed);
    let map = |store: &mut ParamStore<f64>, rng: &mut Rng| -> Result<ParamId> {
        store.add(
            "input.feature_map",
            rng.gaussian(&[SIDE, SIDE, CHANNELS], 1.0),
        )
    };
    match block {
        Block::Gca => {
            let x = map(&mut store, &mut rng)?;
            let p = GcaParams::new(
                &mut store,
                &mut rng,
                CHANNELS,
                REDUCTION,
                CHANNELS / 2,
                QkvWiring::RefinedQuery,
                1e-5,
            )?;
            let w = rng.gaussian(&[SIDE, SIDE, CHANNELS], 1.0);
            check_param_gradients(
                &store,
                |g| {
                    let x = g.param(x)?;
                    let out = gca_forward(g, x, &p)?;
                    weighted_sum(g, out.f_gca, &w)
                },
                FD_EPS,
            )
        }
        Block::Mha => {
            let kw = store.add(
                "input.keywords",
                rng.gaussian(&[KEYWORDS.len(), D_MODEL], 1.0),
            )?;
            let p = MhaParams::new(
                &mut store, &mut rng, "mha", D_MODEL, D_MODEL, D_MODEL, HEADS,
            )?;
            let w = rng.gaussian(&[KEYWORDS.len(), D_MODEL], 1.0);
            check_param_gradients(
                &store,
                |g| {
                    let k = g.param(kw)?;
                    let out = p.forward(g, k, k, &AttnMask::none())?;
                    weighted_sum(g, out.output, &w)
                },
                FD_EPS,
            )
        }
        Block::Keywords => {
            let enc = LanguageEncoder::new(&mut store, &mut rng, VOCAB, D_MODEL, HEADS, 1e-5)?;
            let w = rng.gaussian(&[KEYWORDS.len(), D_MODEL], 1.0);
            check_param_gradients(
                &store,
                |g| {
                    let out = enc.encode(g, &KEYWORDS)?;
                    weighted_sum(g, out.output, &w)
                },
                FD_EPS,
            )
        }
        Block::Transfusion => {
            let x = map(&mut store, &mut rng)?;
            let kw = store.add(
                "input.keywords",
                rng.gaussian(&[KEYWORDS.len(), D_MODEL], 1.0),
            )?;
            let p = TransFusionParams::new(
                &mut store,
                &mut rng,
                CHANNELS,
                D_MODEL,
                HEADS,
                2 * D_MODEL,
                1,
                1e-5,
            )?;
            let w = rng.gaussian(&[SIDE * SIDE, D_MODEL], 1.0);
            check_param_gradients(
                &store,
                |g| {
                    let (x, k) = (g.param(x)?, g.param(kw)?);
                    let out = transfusion_forward(g, x, k, &AttnMask::none(), &p)?;
                    weighted_sum(g, out.f_prime, &w)
                },
                FD_EPS,
            )
        }
        Block::Decoder => {
            let mem = store.add(
                "input.memory",
                rng.gaussian(&[2 * SIDE * SIDE, D_MODEL], 1.0),
            )?;
            let p = DecoderParams::new(
                &mut store,
                &mut rng,
                DecoderDims {
                    vocab_size: VOCAB,
                    channels: CHANNELS,
                    d_model: D_MODEL,
                    heads: HEADS,
                    d_ff: 2 * D_MODEL,
                    layers: 1,
                    max_caption_len: 6,
                    ln_eps: 1e-5,
                },
            )?;
            check_param_gradients(
                &store,
                |g| {
                    let m = g.param(mem)?;
                    caption_loss(g, &[6, 4, 9, 4], m, &p)
                },
                FD_EPS,
            )
        }
    }
}

/// Checks each block with inputs drawn from `seed`.
pub fn check_blocks(blocks: &[Block], seed: u64) -> Result<Vec<BlockReport>> {
    blocks
        .iter()
        .map(|&b| {
            let r = run(b, seed)?;
            Ok(BlockReport {
                block: b.name(),
                max_rel_err: r.max_rel_err,
                worst: r.worst,
                checked: r.checked,
            })
        })
        .collect()
}
