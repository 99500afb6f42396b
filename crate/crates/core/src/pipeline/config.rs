//! Flat key-value configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;
use crate::vision::{stem_output_size, QkvWiring};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualInput {
    /// `[S × S × 3]` images through the conv stem.
    #[default]
    Image,
    /// Precomputed `[H × W × C]` feature maps.
    Features,
}

/// What the decoder cross-attends to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Projected visual tokens followed by the fused tokens.
    #[default]
    Fused,
    /// Encoded keywords only; the visual branch is not built.
    KeywordsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub visual_input: VisualInput,
    pub image_size: usize,
    pub stem_layers: usize,
    /// Feature map side for `features` input; derived from the stem otherwise.
    pub feature_size: Option<usize>,
    /// Visual channels `C`.
    pub channels: usize,
    /// GCA bottleneck reduction `r`.
    pub reduction: usize,
    /// GCA attention width; defaults to `C / 2`.
    pub c_att: Option<usize>,
    pub qkv_wiring: QkvWiring,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub conditioning: Conditioning,
    pub ln_eps: f64,
    /// Captions longer than this are truncated.
    pub max_caption_len: usize,
    /// Vocabulary cap including the four reserved tokens.
    pub vocab_size: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops training after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many epochs; the final one is always written.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual_input: VisualInput::Image,
            image_size: 32,
            stem_layers: 3,
            feature_size: None,
            channels: 32,
            reduction: 4,
            c_att: None,
            qkv_wiring: QkvWiring::RefinedQuery,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            fusion_layers: 1,
            decoder_layers: 2,
            conditioning: Conditioning::Fused,
            ln_eps: 1e-5,
            max_caption_len: 50,
            vocab_size: 200,
            min_keywords: 5,
            max_keywords: 50,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 100,
            max_steps: None,
            checkpoint_every: 1,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// Sizes for real-data runs with a 1280-channel backbone.
    pub fn full_scale() -> Self {
        ModelConfig {
            image_size: 356,
            stem_layers: 5,
            channels: 1280,
            d_model: 1024,
            heads: 8,
            d_ff: 4096,
            vocab_size: 5000,
            batch_size: 64,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn c_att(&self) -> usize {
        self.c_att.unwrap_or(self.channels / 2)
    }

    /// `(H, W)` of the map entering GCA.
    pub fn feature_hw(&self) -> usize {
        match self.visual_input {
            VisualInput::Image => stem_output_size(self.image_size, self.stem_layers),
            VisualInput::Features => self.feature_size.unwrap_or(0),
        }
    }

    /// Shape of one visual input tensor.
    pub fn visual_shape(&self) -> Vec<usize> {
        match self.visual_input {
            VisualInput::Image => vec![self.image_size, self.image_size, 3],
            VisualInput::Features => {
                let s = self.feature_hw();
                vec![s, s, self.channels]
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        let positive = [
            ("channels", self.channels),
            ("reduction", self.reduction),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("fusion_layers", self.fusion_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_caption_len", self.max_caption_len),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("max_keywords", self.max_keywords),
        ];
        for (k, v) in positive {
            if v == 0 {
                return fail(format!("{k} must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.channels / self.reduction == 0 {
            return fail(format!(
                "reduction {} leaves no bottleneck for {} channels",
                self.reduction, self.channels
            ));
        }
        if self.c_att() == 0 {
            return fail("c_att must be >= 1".into());
        }
        if self.vocab_size <= crate::language::RESERVED.len() {
            return fail(format!(
                "vocab_size {} leaves no room for words",
                self.vocab_size
            ));
        }
        if self.min_keywords > self.max_keywords {
            return fail(format!(
                "min_keywords {} exceeds max_keywords {}",
                self.min_keywords, self.max_keywords
            ));
        }
        match self.visual_input {
            VisualInput::Image => {
                if self.stem_layers == 0 || self.image_size < 3 {
                    return fail("image input needs stem_layers >= 1 and image_size >= 3".into());
                }
                if let Some(f) = self.feature_size {
                    if f != self.feature_hw() {
                        return fail(format!(
                            "feature_size {f} disagrees with the stem output {}",
                            self.feature_hw()
                        ));
                    }
                }
            }
            VisualInput::Features => {
                if self.feature_size.unwrap_or(0) == 0 {
                    return fail("features input needs feature_size >= 1".into());
                }
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.ln_eps > 0.0 && self.adam_eps > 0.0) {
            return fail("ln_eps and adam_eps must be > 0".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale_and_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.feature_hw(), 4);
        assert_eq!(c.c_att(), 16);
        assert_eq!(c.visual_shape(), vec![32, 32, 3]);
    }

    #[test]
    fn full_scale_shapes() {
        let c = ModelConfig::full_scale();
        c.validate().unwrap();
        assert_eq!(c.feature_hw(), 12);
        assert_eq!(
            (c.channels, c.d_model, c.vocab_size, c.batch_size),
            (1280, 1024, 5000, 64)
        );
        assert_eq!(c.lr, 1e-4);
    }

    #[test]
    fn json_roundtrip_and_partial_files() {
        let c = ModelConfig {
            conditioning: Conditioning::KeywordsOnly,
            visual_input: VisualInput::Features,
            feature_size: Some(4),
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let p = ModelConfig::from_json(r#"{"d_model": 32, "qkv_wiring": "all_refined"}"#).unwrap();
        assert_eq!(p.d_model, 32);
        assert_eq!(p.qkv_wiring, QkvWiring::AllRefined);
        assert_eq!(p.heads, 4);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        for bad in [
            r#"{"d_model": 30}"#,
            r#"{"min_keywords": 9, "max_keywords": 3}"#,
            r#"{"visual_input": "features"}"#,
            r#"{"feature_size": 7}"#,
            r#"{"reduction": 64}"#,
            r#"{"unknown_key": 1}"#,
            r#"{"vocab_size": 4}"#,
        ] {
            assert!(
                matches!(ModelConfig::from_json(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
