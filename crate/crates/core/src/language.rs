//! Keyword vocabulary and the keyword (language) encoder:
//! `KE_final = LN(KE + MHA(KE))` with no positional signal, so the encoder is
//! permutation-equivariant over keywords.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::attention::{AttnMask, MhaParams};
use crate::error::{Error, Result};
use crate::layers::LayerNorm;
use crate::tensor::{Element, Graph, ParamId, ParamStore, Rng, Var};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/id bijection with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>()).expect("reserved tokens are distinct")
    }
}

impl Vocab {
    /// Vocabulary holding the reserved tokens followed by `tokens` in order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
        {
            if v.index.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
            v.index.insert(t.clone(), v.tokens.len() as u32);
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Keeps the `max_size − 4` most frequent tokens; ties break
    /// alphabetically so the result does not depend on input order.
    pub fn build<'a>(
        sequences: impl IntoIterator<Item = &'a [String]>,
        max_size: usize,
    ) -> Result<Self> {
        if max_size < RESERVED.len() {
            return Err(Error::config(format!(
                "vocabulary size {max_size} below reserved count"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for t in seq {
                if !RESERVED.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Words for `ids`, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    /// One token per line; line `i` (0-based) holds id `i`, starting with the
    /// reserved tokens.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..4] != RESERVED {
            return Err(Error::Format(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        Self::from_tokens(lines[4..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Embedded keywords and their padding mask.
pub struct KeywordEmbeddings {
    /// `[n × d_model]`
    pub ke: Var,
    /// `true` at PAD positions.
    pub pad: Vec<bool>,
}

impl KeywordEmbeddings {
    pub fn attn_mask(&self) -> AttnMask {
        AttnMask::keys(self.pad.iter().map(|p| !p).collect())
    }
}

pub fn embed_keywords<T: Element>(
    g: &mut Graph<'_, T>,
    ids: &[u32],
    table: ParamId,
) -> Result<KeywordEmbeddings> {
    let t = g.param(table)?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let ke = g.embedding(t, &idx)?;
    Ok(KeywordEmbeddings {
        ke,
        pad: ids.iter().map(|&i| i == PAD).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageEncoder {
    pub table: ParamId,
    pub mha: MhaParams,
    pub ln: LayerNorm,
    pub d_model: usize,
}

pub struct EncodedKeywords {
    /// `KE_final [n × d_model]`
    pub output: Var,
    pub embeddings: KeywordEmbeddings,
    /// Self-attention weights per head.
    pub weights: Vec<Var>,
}

impl LanguageEncoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        vocab_size: usize,
        d_model: usize,
        heads: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        let table = store.add(
            "keywords.embedding",
            rng.gaussian(&[vocab_size, d_model], 1.0),
        )?;
        Ok(LanguageEncoder {
            table,
            mha: MhaParams::new(store, rng, "keywords.mha", d_model, d_model, d_model, heads)?,
            ln: LayerNorm::new(store, "keywords.ln", d_model, ln_eps)?,
            d_model,
        })
    }

    /// Multi-head self-attention over embedded keywords.
    pub fn mha<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        kw: &KeywordEmbeddings,
    ) -> Result<(Var, Vec<Var>)> {
        let out = self.mha.forward(g, kw.ke, kw.ke, &kw.attn_mask())?;
        Ok((out.output, out.weights))
    }

    /// `LN(KE + MHA(KE))`, row-wise.
    pub fn encode<T: Element>(&self, g: &mut Graph<'_, T>, ids: &[u32]) -> Result<EncodedKeywords> {
        let embeddings = embed_keywords(g, ids, self.table)?;
        let (ctx, weights) = self.mha(g, &embeddings)?;
        let sum = g.add(embeddings.ke, ctx)?;
        let output = self.ln.forward(g, sum)?;
        Ok(EncodedKeywords {
            output,
            embeddings,
            weights,
        })
    }
}
