//! Caption generation over a split and metric reports.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::dataset::{encode_samples, load_manifest, split_by_id, Sample, SplitName};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Generated caption words for every sample, in input order.
pub fn generate_all(
    ckpt: &Checkpoint,
    samples: &[Sample],
    beam: usize,
) -> Result<Vec<Vec<String>>> {
    samples
        .par_iter()
        .map(|s| {
            let ids = ckpt
                .model
                .generate(&ckpt.store, &s.visual, &s.keywords, beam)?;
            Ok(ckpt.vocab.decode(&ids))
        })
        .collect()
}

pub fn evaluate(
    ckpt: &Checkpoint,
    samples: &[Sample],
    beam: usize,
) -> Result<(MetricReport, Vec<Vec<String>>)> {
    let hyps = generate_all(ckpt, samples, beam)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let refs: Vec<Vec<String>> = samples.iter().map(|s| s.reference.clone()).collect();
    Ok((MetricReport::compute(&ids, &hyps, &refs)?, hyps))
}

/// Samples of one split, encoded with the checkpoint's vocabulary.
pub fn load_split(ckpt: &Checkpoint, manifest: &Path, split: SplitName) -> Result<Vec<Sample>> {
    let m = load_manifest(manifest, &ckpt.config)?;
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    let s = split_by_id(&ids);
    Ok(encode_samples(&m.records, s.get(split), &ckpt.vocab))
}

/// `<report>.captions.txt`: one `id<TAB>caption` line per sample.
pub fn captions_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".captions.txt");
    PathBuf::from(s)
}

/// Scores a split and writes the JSON report plus generated captions.
pub fn evaluate_split(
    checkpoint: &Path,
    manifest: &Path,
    split: SplitName,
    out: &Path,
    beam: usize,
) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let samples = load_split(&ckpt, manifest, split)?;
    if samples.is_empty() {
        return Err(Error::config(format!(
            "split {split:?} of {} is empty",
            manifest.display()
        )));
    }
    let (report, hyps) = evaluate(&ckpt, &samples, beam)?;
    fs::write(out, report.to_json()?).map_err(|e| Error::io(out, e))?;
    let caps: String = samples
        .iter()
        .zip(&hyps)
        .map(|(s, h)| format!("{}\t{}\n", s.id, h.join(" ")))
        .collect();
    let cp = captions_path(out);
    fs::write(&cp, caps).map_err(|e| Error::io(&cp, e))?;
    Ok(report)
}
