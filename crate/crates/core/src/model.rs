//! The full captioner: vision encoder, keyword encoder, fusion and decoder.

use crate::decoder::{self, build_memory, caption_loss, DecoderDims, DecoderParams};
use crate::error::{Error, Result};
use crate::fusion::{transfusion_forward, TransFusionParams};
use crate::language::LanguageEncoder;
use crate::pipeline::config::{Conditioning, ModelConfig, VisualInput};
use crate::tensor::{Element, Graph, ParamStore, Rng, Tensor, Var};
use crate::vision::{ConvStemParams, GcaParams, VisionEncoder};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    /// Absent when the decoder is conditioned on keywords only.
    pub vision: Option<VisionEncoder>,
    pub language: LanguageEncoder,
    pub fusion: Option<TransFusionParams>,
    pub decoder: DecoderParams,
}

/// Intermediate results of one forward pass.
pub struct Encoded {
    /// Decoder memory `[tokens × d_model]`.
    pub memory: Var,
    /// GCA gate `[H × W]`.
    pub gate: Option<Var>,
    /// Fusion alignment `[HW × n]`.
    pub alignment: Option<Var>,
}

impl Model {
    /// Builds the parameter store in a fixed order from `config.seed`.
    pub fn new<T: Element>(
        config: &ModelConfig,
        vocab_size: usize,
    ) -> Result<(ParamStore<T>, Model)> {
        config.validate()?;
        if vocab_size > config.vocab_size {
            return Err(Error::config(format!(
                "vocabulary of {vocab_size} exceeds vocab_size {}",
                config.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.seed);
        let c = config;
        let fused = c.conditioning == Conditioning::Fused;
        let vision = if fused {
            let stem = match c.visual_input {
                VisualInput::Image => Some(ConvStemParams::new(
                    &mut store,
                    &mut rng,
                    c.image_size,
                    c.stem_layers,
                    c.channels,
                )?),
                VisualInput::Features => None,
            };
            let gca = GcaParams::new(
                &mut store,
                &mut rng,
                c.channels,
                c.reduction,
                c.c_att(),
                c.qkv_wiring,
                c.ln_eps,
            )?;
            Some(VisionEncoder { stem, gca })
        } else {
            None
        };
        let language = LanguageEncoder::new(
            &mut store, &mut rng, vocab_size, c.d_model, c.heads, c.ln_eps,
        )?;
        let fusion = if fused {
            Some(TransFusionParams::new(
                &mut store,
                &mut rng,
                c.channels,
                c.d_model,
                c.heads,
                c.d_ff,
                c.fusion_layers,
                c.ln_eps,
            )?)
        } else {
            None
        };
        let decoder = DecoderParams::new(
            &mut store,
            &mut rng,
            DecoderDims {
                vocab_size,
                channels: c.channels,
                d_model: c.d_model,
                heads: c.heads,
                d_ff: c.d_ff,
                layers: c.decoder_layers,
                max_caption_len: c.max_caption_len,
                ln_eps: c.ln_eps,
            },
        )?;
        Ok((
            store,
            Model {
                config: config.clone(),
                vocab_size,
                vision,
                language,
                fusion,
                decoder,
            },
        ))
    }

    fn check_visual<T: Element>(&self, visual: &Tensor<T>) -> Result<()> {
        let want = self.config.visual_shape();
        if visual.shape() != want.as_slice() {
            return Err(Error::Shape {
                op: "visual input",
                lhs: want,
                rhs: visual.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Vision, keyword and fusion encoders up to the decoder memory.
    pub fn encode<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        visual: &Tensor<T>,
        keywords: &[u32],
    ) -> Result<Encoded> {
        if keywords.is_empty() {
            return Err(Error::contract("no keywords"));
        }
        let kw = self.language.encode(g, keywords)?;
        let (Some(vision), Some(fusion)) = (&self.vision, &self.fusion) else {
            return Ok(Encoded {
                memory: kw.output,
                gate: None,
                alignment: None,
            });
        };
        self.check_visual(visual)?;
        let v = g.constant(visual.clone())?;
        let gca = vision.forward(g, v)?;
        let fused =
            transfusion_forward(g, gca.f_gca, kw.output, &kw.embeddings.attn_mask(), fusion)?;
        let memory = build_memory(g, gca.f_gca, fused.f_prime, &self.decoder)?;
        Ok(Encoded {
            memory,
            gate: Some(gca.gate),
            alignment: Some(fused.alignment),
        })
    }

    /// Teacher-forced mean token cross-entropy for one sample.
    pub fn loss<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        visual: &Tensor<T>,
        keywords: &[u32],
        caption: &[u32],
    ) -> Result<Var> {
        let enc = self.encode(g, visual, keywords)?;
        caption_loss(g, caption, enc.memory, &self.decoder)
    }

    /// Decoder memory as a detached tensor, for generation.
    pub fn memory<T: Element>(
        &self,
        store: &ParamStore<T>,
        visual: &Tensor<T>,
        keywords: &[u32],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let enc = self.encode(&mut g, visual, keywords)?;
        Ok(g.value(enc.memory).clone())
    }

    /// Greedy (`beam <= 1`) or beam caption ids, without BOS/EOS.
    pub fn generate<T: Element>(
        &self,
        store: &ParamStore<T>,
        visual: &Tensor<T>,
        keywords: &[u32],
        beam: usize,
    ) -> Result<Vec<u32>> {
        let memory = self.memory(store, visual, keywords)?;
        decoder::generate(store, &self.decoder, &memory, beam)
    }

    /// GCA gate `[H × W]`; fails for keywords-only models.
    pub fn gate<T: Element>(
        &self,
        store: &ParamStore<T>,
        visual: &Tensor<T>,
        keywords: &[u32],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let enc = self.encode(&mut g, visual, keywords)?;
        let gate = enc
            .gate
            .ok_or_else(|| Error::config("keywords-only model has no visual gate"))?;
        Ok(g.value(gate).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{BOS, EOS};

    fn small(conditioning: Conditioning) -> ModelConfig {
        ModelConfig {
            image_size: 16,
            stem_layers: 2,
            channels: 8,
            reduction: 2,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            decoder_layers: 1,
            max_caption_len: 5,
            vocab_size: 20,
            conditioning,
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes_and_generation() {
        let cfg = small(Conditioning::Fused);
        let (store, m) = Model::new::<f32>(&cfg, 12).unwrap();
        let img = Rng::new(1).uniform_tensor(&[16, 16, 3], 0.0, 1.0);
        let kw = [4, 5, 6];
        let mut g = Graph::with_params(&store);
        let enc = m.encode(&mut g, &img, &kw).unwrap();
        assert_eq!(g.shape(enc.memory), &[32, 16]);
        assert_eq!(g.shape(enc.gate.unwrap()), &[4, 4]);
        assert_eq!(g.shape(enc.alignment.unwrap()), &[16, 3]);
        let l = m.loss(&mut g, &img, &kw, &[7, 8]).unwrap();
        assert!(g.value(l).item().unwrap() > 0.0);
        let cap = m.generate(&store, &img, &kw, 1).unwrap();
        assert!(cap.len() <= 5 && !cap.contains(&BOS) && !cap.contains(&EOS));
        let wrong = Tensor::<f32>::zeros(vec![8, 8, 3]);
        assert!(m.memory(&store, &wrong, &kw).is_err());
    }

    #[test]
    fn keywords_only_ignores_vision() {
        let cfg = small(Conditioning::KeywordsOnly);
        let (store, m) = Model::new::<f64>(&cfg, 12).unwrap();
        assert!(m.vision.is_none() && m.fusion.is_none());
        assert!(store
            .iter()
            .all(|(_, p)| !p.name.starts_with("gca") && !p.name.starts_with("stem")));
        let a = Rng::new(2).uniform_tensor(&[16, 16, 3], 0.0, 1.0);
        let b = Rng::new(3).uniform_tensor(&[16, 16, 3], 0.0, 1.0);
        let kw = [4, 5];
        assert_eq!(
            m.memory(&store, &a, &kw).unwrap(),
            m.memory(&store, &b, &kw).unwrap()
        );
        assert!(m.gate(&store, &a, &kw).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small(Conditioning::Fused);
        let (a, _) = Model::new::<f32>(&cfg, 12).unwrap();
        let (b, _) = Model::new::<f32>(&cfg, 12).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
    }
}
