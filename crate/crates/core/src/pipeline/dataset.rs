//! JSON-lines manifests, hash-based splits and encoded samples.
//!
//! Each manifest line is `{"id", "image", "keywords", "caption"}` where
//! `image` is a GTEN path relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::text::{normalize, normalize_caption};
use crate::error::{Error, Result};
use crate::language::Vocab;
use crate::tensor::{gten, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub id: String,
    pub image: String,
    pub keywords: String,
    pub caption: String,
}

/// A validated, tokenized manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub image: PathBuf,
    pub visual: Tensor<f32>,
    pub keywords: Vec<String>,
    pub caption: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejected {
    pub id: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
    pub rejected: Vec<Rejected>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads and validates a manifest. Records with too few keywords are
/// rejected (and listed); longer keyword lists are truncated to
/// `max_keywords`, captions to `max_caption_len`.
pub fn load_manifest(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let want = cfg.visual_shape();
    let mut out = Manifest::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(raw).map_err(|e| parse_err(path, line, e.to_string()))?;
        if !seen.insert(m.id.clone()) {
            return Err(parse_err(path, line, format!("duplicate id {:?}", m.id)));
        }
        let mut keywords = normalize(&m.keywords);
        if keywords.len() < cfg.min_keywords {
            let reason = format!(
                "{} keywords, minimum is {}",
                keywords.len(),
                cfg.min_keywords
            );
            log::warn!("{}:{line}: rejecting {}: {reason}", path.display(), m.id);
            out.rejected.push(Rejected {
                id: m.id,
                line,
                reason,
            });
            continue;
        }
        if keywords.len() > cfg.max_keywords {
            log::warn!(
                "{}:{line}: {} has {} keywords, keeping the first {}",
                path.display(),
                m.id,
                keywords.len(),
                cfg.max_keywords
            );
            keywords.truncate(cfg.max_keywords);
        }
        let caption = normalize_caption(&m.caption, cfg.max_caption_len);
        if caption.is_empty() {
            return Err(parse_err(path, line, format!("{}: empty caption", m.id)));
        }
        let image = base.join(&m.image);
        let visual = gten::read(&image)
            .map_err(|e| parse_err(path, line, format!("{}: {e}", m.id)))?
            .into_tensor::<f32>();
        if visual.shape() != want.as_slice() {
            return Err(parse_err(
                path,
                line,
                format!(
                    "{}: visual shape {:?}, expected {want:?}",
                    m.id,
                    visual.shape()
                ),
            ));
        }
        out.records.push(Record {
            id: m.id,
            image,
            visual,
            keywords,
            caption,
        });
    }
    if out.records.is_empty() && out.rejected.is_empty() {
        log::warn!("{}: empty manifest", path.display());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

/// Record indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// 60/20/20 split by SHA-256 of the id: records are ordered by digest, the
/// first `round(0.6 n)` train, the next `round(0.2 n)` validate.
pub fn split_by_id<S: AsRef<str>>(ids: &[S]) -> Split {
    let mut order: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (Sha256::digest(id.as_ref().as_bytes()).to_vec(), i))
        .collect();
    order.sort();
    let n = ids.len();
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let idx: Vec<usize> = order.into_iter().map(|(_, i)| i).collect();
    let mut s = Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    };
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    s
}

/// Model-ready sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub visual: Tensor<f32>,
    pub keywords: Vec<u32>,
    pub caption: Vec<u32>,
    /// Normalized reference words, for scoring.
    pub reference: Vec<String>,
}

/// Vocabulary over the keywords and captions of the given records.
pub fn build_vocab(records: &[Record], indices: &[usize], max_size: usize) -> Result<Vocab> {
    let seqs = indices.iter().flat_map(|&i| {
        [
            records[i].keywords.as_slice(),
            records[i].caption.as_slice(),
        ]
    });
    Vocab::build(seqs, max_size)
}

pub fn encode_samples(records: &[Record], indices: &[usize], vocab: &Vocab) -> Vec<Sample> {
    indices
        .iter()
        .map(|&i| {
            let r = &records[i];
            Sample {
                id: r.id.clone(),
                visual: r.visual.clone(),
                keywords: vocab.encode(&r.keywords),
                caption: vocab.encode(&r.caption),
                reference: r.caption.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::VisualInput;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            visual_input: VisualInput::Features,
            feature_size: Some(2),
            channels: 3,
            reduction: 1,
            ..Default::default()
        }
    }

    fn write_manifest(dir: &Path, lines: &[String]) -> PathBuf {
        gten::write(dir.join("ok.gten"), &Tensor::<f32>::zeros(vec![2, 2, 3])).unwrap();
        gten::write(dir.join("bad.gten"), &Tensor::<f32>::zeros(vec![3, 2, 3])).unwrap();
        let p = dir.join("m.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    fn line(id: &str, image: &str, kw: &str, cap: &str) -> String {
        serde_json::to_string(&ManifestLine {
            id: id.into(),
            image: image.into(),
            keywords: kw.into(),
            caption: cap.into(),
        })
        .unwrap()
    }

    #[test]
    fn loads_validates_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            &[
                line("a", "ok.gten", "One two three four five six", "A caption."),
                line("b", "ok.gten", "too few words", "x"),
            ],
        );
        let m = load_manifest(&p, &cfg()).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].keywords[0], "one");
        assert_eq!(m.records[0].caption, ["a", "caption"]);
        assert_eq!(m.rejected.len(), 1);
        assert_eq!((m.rejected[0].id.as_str(), m.rejected[0].line), ("b", 2));

        let c = ModelConfig {
            max_keywords: 5,
            ..cfg()
        };
        assert_eq!(load_manifest(&p, &c).unwrap().records[0].keywords.len(), 5);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let kw = "k1 k2 k3 k4 k5";
        for (lines, bad_line) in [
            (vec![line("a", "ok.gten", kw, "c"), "{not json".into()], 2),
            (vec![line("a", "bad.gten", kw, "c")], 1),
            (
                vec![
                    line("a", "ok.gten", kw, "c"),
                    line("b", "missing.gten", kw, "c"),
                ],
                2,
            ),
            (
                vec![line("a", "ok.gten", kw, "c"), line("a", "ok.gten", kw, "c")],
                2,
            ),
        ] {
            let p = write_manifest(dir.path(), &lines);
            match load_manifest(&p, &cfg()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, bad_line),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
        assert!(matches!(
            load_manifest(dir.path().join("nope"), &cfg()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn empty_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[]);
        let m = load_manifest(&p, &cfg()).unwrap();
        assert!(m.records.is_empty() && m.rejected.is_empty());
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let s = split_by_id(&ids);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let ids: Vec<String> = (0..32).map(|i| format!("s{i}")).collect();
        let s = split_by_id(&ids);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (19, 6, 7));
    }

    proptest! {
        #[test]
        fn split_is_an_order_independent_partition(n in 0usize..60, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("id-{i}")).collect();
            let s = split_by_id(&ids);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let nf = n as f64;
            prop_assert!((s.train.len() as f64 - 0.6 * nf).abs() <= 1.0);
            prop_assert!((s.val.len() as f64 - 0.2 * nf).abs() <= 1.0);
            prop_assert!((s.test.len() as f64 - 0.2 * nf).abs() <= 1.0);

            let mut perm: Vec<usize> = (0..n).collect();
            crate::tensor::Rng::new(seed).shuffle(&mut perm);
            let shuffled: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
            let s2 = split_by_id(&shuffled);
            let names = |idx: &[usize], v: &[String]| {
                let mut x: Vec<String> = idx.iter().map(|&i| v[i].clone()).collect();
                x.sort();
                x
            };
            prop_assert_eq!(names(&s.test, &ids), names(&s2.test, &shuffled));
        }
    }
}
