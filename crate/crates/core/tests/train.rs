use std::fs;
use std::path::Path;

use retcap::pipeline::checkpoint::{epoch_path, Checkpoint};
use retcap::pipeline::config::ModelConfig;
use retcap::pipeline::dataset::{build_vocab, encode_samples, load_manifest, split_by_id};
use retcap::pipeline::synth::generate_synthetic;
use retcap::pipeline::train::{train, Trainer};
use retcap::Error;

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        stem_layers: 2,
        channels: 8,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        decoder_layers: 1,
        max_caption_len: 16,
        batch_size: 4,
        epochs: 1,
        ..Default::default()
    }
}

fn data(dir: &Path, cfg: &ModelConfig) -> std::path::PathBuf {
    generate_synthetic(cfg, 12, 3, dir.join("data"))
        .unwrap()
        .manifest
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { lr: 0.0, ..small() };
    let m = data(dir.path(), &cfg);
    let s = train(&cfg, &m, &dir.path().join("run"), None).unwrap();
    assert!(s.steps > 0);
    let trained = Checkpoint::load(&s.final_checkpoint).unwrap();
    let (fresh, _) = retcap::model::Model::new::<f32>(&cfg, trained.vocab.len()).unwrap();
    assert_eq!(trained.store.len(), fresh.len());
    for ((_, a), (_, b)) in trained.store.iter().zip(fresh.iter()) {
        let bits = |t: &retcap::tensor::Tensor<f32>| {
            t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn loss_log_has_header_and_rows_per_step_and_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        epochs: 2,
        ..small()
    };
    let m = data(dir.path(), &cfg);
    let s = train(&cfg, &m, &dir.path().join("run"), None).unwrap();
    let log = fs::read_to_string(&s.log).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,step,split,loss"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let train_rows = rows.iter().filter(|r| r[2] == "train").count();
    let val_rows = rows.iter().filter(|r| r[2] == "val").count();
    assert_eq!(train_rows as u64, s.steps);
    assert_eq!(val_rows, 2);
    assert!(rows
        .iter()
        .all(|r| r[3].parse::<f64>().unwrap().is_finite()));
    assert!(epoch_path(&dir.path().join("run"), 1).exists());
    assert!(epoch_path(&dir.path().join("run"), 2).exists());
}

#[test]
fn divergence_reports_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        epochs: 2,
        ..small()
    };
    let m = data(dir.path(), &cfg);
    let out = dir.path().join("run");
    let manifest = load_manifest(&m, &cfg).unwrap();
    let ids: Vec<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
    let split = split_by_id(&ids);
    let vocab = build_vocab(&manifest.records, &split.train, cfg.vocab_size).unwrap();
    let mut samples = encode_samples(&manifest.records, &split.train, &vocab);
    let mut trainer = Trainer::new(cfg, vocab).unwrap();
    let file = fs::File::create(dir.path().join("loss.csv")).unwrap();
    let mut log = csv::Writer::from_writer(file);
    trainer.run(&samples, &[], &out, &mut log).unwrap();

    for s in &mut samples {
        s.visual.data_mut()[0] = f32::NAN;
    }
    trainer.config.epochs = 3;
    match trainer.run(&samples, &[], &out, &mut log) {
        Err(Error::Diverged {
            epoch,
            step,
            last_good,
        }) => {
            assert_eq!(epoch, 3);
            assert_eq!(step as u64, trainer.progress.step + 1);
            let p = last_good.unwrap();
            assert_eq!(p, out.join("final.ckpt"));
            assert_eq!(Checkpoint::load(&p).unwrap().progress.epoch, 2);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn divergence_in_first_epoch_has_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        lr: 1e30,
        epochs: 5,
        ..small()
    };
    let m = data(dir.path(), &cfg);
    match train(&cfg, &m, &dir.path().join("run"), None) {
        Err(Error::Diverged {
            epoch: 1,
            last_good: None,
            ..
        }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|s| s.steps)),
    }
}
