//! Caption metrics over whitespace tokens: corpus BLEU@1-4 (clipped
//! precision, brevity penalty, no smoothing), ROUGE-L F (β = 1.2) and plain
//! CIDEr (TF-IDF cosine over 1..4-grams, ×10, single reference).
//!
//! Per-sample scores are summed in sorted order so corpus values do not
//! depend on sample order down to the last bit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut m = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

fn check_pairs(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::contract("no hypotheses to score"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Corpus BLEU@1..=4.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<[f64; MAX_N]> {
    check_pairs(hyps, refs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_N {
            let rc = ngrams(rf, n);
            for (g, k) in ngrams(h, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 {
        return Ok([0.0; MAX_N]);
    }
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    let mut out = [0.0; MAX_N];
    let mut log_sum = 0.0;
    for k in 0..MAX_N {
        if matched[k] == 0 {
            break;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
        out[k] = bp * (log_sum / (k + 1) as f64).exp();
    }
    Ok(out)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of a single pair.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-sample ROUGE-L.
pub fn rouge_l(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    Ok(sorted_mean(
        hyps.iter()
            .zip(refs)
            .map(|(h, r)| rouge_l_pair(h, r))
            .collect(),
    ))
}

fn tf_idf<'a>(c: &Counts<'a>, idf: &dyn Fn(&[String]) -> f64) -> BTreeMap<&'a [String], f64> {
    let total: usize = c.values().sum();
    c.iter()
        .map(|(g, &k)| (*g, k as f64 / total as f64 * idf(g)))
        .collect()
}

/// Per-sample CIDEr (already ×10).
pub fn cider_per_sample(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<Vec<f64>> {
    check_pairs(hyps, refs)?;
    if refs.len() < 2 {
        return Err(Error::contract(
            "CIDEr needs a corpus of at least 2 samples",
        ));
    }
    let log_n = (refs.len() as f64).ln();
    let mut scores = vec![0.0; hyps.len()];
    for n in 1..=MAX_N {
        let ref_counts: Vec<Counts<'_>> = refs.iter().map(|r| ngrams(r, n)).collect();
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(g).or_default() += 1;
            }
        }
        let idf = |g: &[String]| log_n - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, (h, rc)) in hyps.iter().zip(&ref_counts).enumerate() {
            let (vh, vr) = (tf_idf(&ngrams(h, n), &idf), tf_idf(rc, &idf));
            let dot: f64 = vh
                .iter()
                .filter_map(|(g, a)| vr.get(g).map(|b| a * b))
                .sum();
            let nh = vh.values().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                scores[i] += dot / (nh * nr);
            }
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| CIDER_SCALE * s / MAX_N as f64)
        .collect())
}

pub fn cider(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    Ok(sorted_mean(cider_per_sample(hyps, refs)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    /// `None` when the corpus is too small for document frequencies.
    pub cider: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    /// Metric variants, so the numbers can be interpreted later.
    pub settings: String,
    pub samples: Vec<SampleScore>,
}

impl MetricReport {
    /// Scores `(id, hypothesis, reference)` triples.
    pub fn compute(ids: &[String], hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<Self> {
        check_pairs(hyps, refs)?;
        if ids.len() != hyps.len() {
            return Err(Error::contract("sample ids do not match hypotheses"));
        }
        let b = bleu(hyps, refs)?;
        let ciders = if refs.len() >= 2 {
            Some(cider_per_sample(hyps, refs)?)
        } else {
            log::warn!("CIDEr undefined on a single-sample corpus; reporting 0");
            None
        };
        let samples: Vec<SampleScore> = (0..hyps.len())
            .map(|i| SampleScore {
                id: ids[i].clone(),
                hypothesis: hyps[i].join(" "),
                reference: refs[i].join(" "),
                rouge_l: rouge_l_pair(&hyps[i], &refs[i]),
                cider: ciders.as_ref().map(|c| c[i]),
            })
            .collect();
        Ok(MetricReport {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            cider: ciders.map(sorted_mean).unwrap_or(0.0),
            rouge_l: sorted_mean(samples.iter().map(|s| s.rouge_l).collect()),
            settings: "bleu: corpus, clipped, brevity penalty, no smoothing; \
                       rougeL: LCS F-measure, beta 1.2, sample mean; \
                       cider: plain TF-IDF cosine, n=1..4, x10, single reference"
                .into(),
            samples,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8}", "metric", "score")?;
        for (k, v) in [
            ("BLEU@1", self.bleu1),
            ("BLEU@2", self.bleu2),
            ("BLEU@3", self.bleu3),
            ("BLEU@4", self.bleu4),
            ("CIDEr", self.cider),
            ("ROUGE-L", self.rouge_l),
        ] {
            writeln!(f, "{k:<8} {v:>8.4}")?;
        }
        writeln!(f)?;
        writeln!(f, "id\trougeL\tcider\thypothesis\treference")?;
        for s in &self.samples {
            let c = s.cider.map_or("-".into(), |c| format!("{c:.4}"));
            writeln!(
                f,
                "{}\t{:.4}\t{}\t{}\t{}",
                s.id, s.rouge_l, c, s.hypothesis, s.reference
            )?;
        }
        Ok(())
    }
}
