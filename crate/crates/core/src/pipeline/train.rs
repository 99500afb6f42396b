//! Mini-batch teacher-forced training with Adam.
//!
//! Per-sample graphs run in parallel; their gradients are reduced in sample
//! order, so results do not depend on the thread count. Each epoch draws
//! one permutation from a seeded RNG whose state is checkpointed.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{epoch_path, Checkpoint, Progress};
use super::config::ModelConfig;
use super::dataset::{build_vocab, encode_samples, load_manifest, split_by_id, Sample};
use crate::error::{Error, Result};
use crate::language::Vocab;
use crate::model::Model;
use crate::tensor::{AdamState, Graph, ParamGrads, ParamStore, Rng};

pub const LOG_HEADER: [&str; 4] = ["epoch", "step", "split", "loss"];

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    s: &Sample,
) -> Result<(f64, ParamGrads<f32>)> {
    let mut g = Graph::with_params(store);
    let l = model.loss(&mut g, &s.visual, &s.keywords, &s.caption)?;
    let loss = g.value(l).item()? as f64;
    g.backward(l)?;
    Ok((loss, g.into_param_grads()))
}

/// Mean teacher-forced loss over `samples`, summed in sample order.
pub fn mean_loss(model: &Model, store: &ParamStore<f32>, samples: &[Sample]) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::inference(store);
            let l = model.loss(&mut g, &s.visual, &s.keywords, &s.caption)?;
            Ok(g.value(l).item()? as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Training state that survives checkpoints.
pub struct Trainer {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub progress: Progress,
    /// Shuffle RNG at the start of the current epoch.
    pub epoch_rng: Rng,
    /// Most recent checkpoint written or resumed from; reported on divergence.
    pub last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        let (store, model) = Model::new::<f32>(&config, vocab.len())?;
        let adam = AdamState::new(config.adam(), &store);
        let epoch_rng = Rng::new(config.seed);
        Ok(Trainer {
            config,
            vocab,
            model,
            store,
            adam,
            progress: Progress::default(),
            epoch_rng,
            last_checkpoint: None,
        })
    }

    /// Continues from `ckpt`; training-length settings come from `overrides`.
    pub fn resume(ckpt: Checkpoint, overrides: &ModelConfig) -> Result<Self> {
        let mut config = ckpt.config.clone();
        config.epochs = overrides.epochs;
        config.max_steps = overrides.max_steps;
        config.checkpoint_every = overrides.checkpoint_every;
        Ok(Trainer {
            config,
            vocab: ckpt.vocab,
            model: ckpt.model,
            store: ckpt.store,
            adam: ckpt.adam,
            progress: ckpt.progress,
            epoch_rng: Rng::from_state(&ckpt.rng)?,
            last_checkpoint: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            progress: self.progress,
            rng: self.epoch_rng.state(),
            model: self.model.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// One Adam step on `batch`; returns the mean sample loss.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<f64> {
        let results: Vec<_> = batch
            .par_iter()
            .map(|s| sample_gradients(&self.model, &self.store, s))
            .collect();
        self.store.zero_grads();
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            self.store.accumulate_all(&grads, scale)?;
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        self.adam.step(&mut self.store)?;
        self.progress.step += 1;
        Ok(loss)
    }

    fn done(&self) -> bool {
        self.progress.epoch >= self.config.epochs
            || self
                .config
                .max_steps
                .is_some_and(|m| self.progress.step >= m as u64)
    }

    /// Runs until `epochs` or `max_steps`, logging every step's loss and
    /// each epoch's validation loss to `log`.
    pub fn run(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        out: &Path,
        log: &mut csv::Writer<File>,
    ) -> Result<PathBuf> {
        if train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let bs = self.config.batch_size;
        while !self.done() {
            let mut rng = self.epoch_rng.clone();
            let mut order: Vec<usize> = (0..train.len()).collect();
            rng.shuffle(&mut order);
            let batches: Vec<&[usize]> = order.chunks(bs).collect();
            while self.progress.batch < batches.len() && !self.done() {
                let batch: Vec<&Sample> = batches[self.progress.batch]
                    .iter()
                    .map(|&i| &train[i])
                    .collect();
                let epoch = self.progress.epoch + 1;
                let loss = self.step(&batch).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch,
                        step: self.progress.step as usize + 1,
                        last_good: self.last_checkpoint.clone(),
                    },
                    e => e,
                })?;
                self.progress.batch += 1;
                write_row(log, epoch, self.progress.step, "train", loss)?;
                log::debug!("epoch {epoch} step {} loss {loss:.6}", self.progress.step);
            }
            if self.progress.batch < batches.len() {
                break;
            }
            self.progress.epoch += 1;
            self.progress.batch = 0;
            self.epoch_rng = rng;
            if !val.is_empty() {
                let v = mean_loss(&self.model, &self.store, val)?;
                write_row(log, self.progress.epoch, self.progress.step, "val", v)?;
                log::info!(
                    "epoch {} step {} val loss {v:.6}",
                    self.progress.epoch,
                    self.progress.step
                );
            }
            log.flush()
                .map_err(|e| Error::io(out.join("loss.csv"), e))?;
            if self
                .progress
                .epoch
                .is_multiple_of(self.config.checkpoint_every)
            {
                let p = epoch_path(out, self.progress.epoch);
                self.checkpoint().save(&p)?;
                self.last_checkpoint = Some(p);
            }
        }
        log.flush()
            .map_err(|e| Error::io(out.join("loss.csv"), e))?;
        let fin = out.join("final.ckpt");
        self.checkpoint().save(&fin)?;
        self.last_checkpoint = Some(fin.clone());
        Ok(fin)
    }
}

fn write_row(
    log: &mut csv::Writer<File>,
    epoch: usize,
    step: u64,
    split: &str,
    loss: f64,
) -> Result<()> {
    log.write_record([
        epoch.to_string(),
        step.to_string(),
        split.to_string(),
        loss.to_string(),
    ])
    .map_err(|e| Error::Format(format!("loss log: {e}")))
}

pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
}

/// Loads the manifest, trains on its train split (validating on val) and
/// writes `loss.csv`, `vocab.txt`, `config.json`, per-epoch checkpoints and
/// `final.ckpt` under `out`.
pub fn train(
    config: &ModelConfig,
    manifest: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let data_cfg = ckpt.as_ref().map_or(config, |c| &c.config).clone();
    let m = load_manifest(manifest, &data_cfg)?;
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    let split = split_by_id(&ids);
    let mut trainer = match ckpt {
        Some(c) => Trainer {
            last_checkpoint: resume.map(Path::to_path_buf),
            ..Trainer::resume(c, config)?
        },
        None => Trainer::new(
            config.clone(),
            build_vocab(&m.records, &split.train, config.vocab_size)?,
        )?,
    };
    let train = encode_samples(&m.records, &split.train, &trainer.vocab);
    let val = encode_samples(&m.records, &split.val, &trainer.vocab);
    log::info!(
        "{} train / {} val samples, vocabulary {}, {} parameters",
        train.len(),
        val.len(),
        trainer.vocab.len(),
        trainer.store.num_elements()
    );
    trainer.vocab.save(out.join("vocab.txt"))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, trainer.config.to_json()?).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out.join("loss.csv");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::Writer::from_writer(file);
    log.write_record(LOG_HEADER)
        .map_err(|e| Error::Format(format!("loss log: {e}")))?;
    let final_checkpoint = trainer.run(&train, &val, out, &mut log)?;
    Ok(TrainSummary {
        final_checkpoint,
        log: log_path,
        steps: trainer.progress.step,
    })
}
