//! Keyword-guided retinal image captioning.
//!
//! The model turns an image (or a precomputed feature map) and a list of
//! diagnostic keywords into a caption:
//!
//! * [`vision`]: a small strided conv stem followed by guided context
//!   attention, which pools a global context vector, injects it back through a
//!   channel bottleneck, and gates every spatial position with a sigmoid.
//! * [`language`]: keyword embeddings refined by multi-head self-attention and
//!   a residual layer norm.
//! * [`fusion`]: visual tokens cross-attend to keyword embeddings, followed by
//!   a residual feed-forward refinement.
//! * [`decoder`]: a pre-LN transformer decoder that cross-attends to visual and
//!   fused tokens; greedy and beam search generation.
//! * [`metrics`]: corpus BLEU@1-4, ROUGE-L and CIDEr.
//! * [`pipeline`]: preprocessing, datasets, synthetic data, training,
//!   checkpoints and evaluation.
//!
//! Everything runs on the reverse-mode autodiff in [`tensor`].

pub mod attention;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod language;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
