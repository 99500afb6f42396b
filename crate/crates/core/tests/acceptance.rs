//! One pass/fail line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) and exits nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use retcap::attention::{AttnMask, MhaParams};
use retcap::fusion::{transfusion_forward, vla_cross_attention, TransFusionParams};
use retcap::language::{embed_keywords, LanguageEncoder};
use retcap::layers::{fill, LayerNorm};
use retcap::metrics::{bleu, cider, rouge_l};
use retcap::pipeline::checkpoint::Checkpoint;
use retcap::pipeline::config::{Conditioning, ModelConfig};
use retcap::pipeline::dataset::SplitName;
use retcap::pipeline::eval::{evaluate, load_split};
use retcap::pipeline::synth::generate_synthetic;
use retcap::pipeline::train::{mean_loss, train};
use retcap::tensor::{gten, Graph, ParamStore, Rng, Tensor};
use retcap::vision::{
    channel_context, gca_forward, read_pgm, spatial_context, GcaParams, QkvWiring,
};

const TRIALS: usize = 10_000;
const ROW_TOL: f64 = 1e-6;
const LN_MEAN_TOL: f64 = 1e-6;
const LN_VAR_TOL: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const OVERFIT_CE: f64 = 0.1;
const EXACT_FRACTION: f64 = 0.9;
const OVERFIT_BLEU4: f64 = 0.9;
const ABLATION_GAP: f64 = 0.2;
const METRIC_TOL: f64 = 1e-6;
const LN_EPS: f64 = 1e-12;
const FUSION_LN_EPS: f64 = 1e-9;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retcap"))
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = cli()
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn retcap");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn desk(steps: usize) -> ModelConfig {
    ModelConfig {
        max_steps: Some(steps),
        epochs: 100_000,
        checkpoint_every: 100_000,
        seed: 42,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t = Instant::now();
    let out = cli()
        .args(["check-grad", "--block", "all"])
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("spawn retcap");
    let elapsed = t.elapsed();
    let text = String::from_utf8_lossy(&out.stdout);
    let worst = text
        .lines()
        .filter_map(|l| l.split_whitespace().nth(2)?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    let blocks = text.lines().filter(|l| l.contains("max_rel_err")).count();
    outcome(
        out.status.success() && blocks == 5 && worst <= 1e-4 && elapsed < GRAD_BUDGET,
        format!(
            "{blocks} blocks, max rel err {worst:.2e} (<= 1e-4), {:.1}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

#[derive(Default)]
struct RowStats {
    rows: usize,
    worst: f64,
}

impl RowStats {
    fn check(&mut self, data: &[f64], width: usize) {
        for row in data.chunks(width) {
            self.rows += 1;
            self.worst = self.worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (
        m,
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64,
    )
}

fn normalization() -> Outcome {
    let mut softmax = RowStats::default();
    let mut attention = RowStats::default();
    let (mut gates, mut gate_bad) = (0usize, 0usize);
    let (mut ln_slices, mut ln_mean, mut ln_var, mut ln_exact) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    let mut ln_flat = 0usize;
    let mut errors = 0usize;

    for trial in 0..TRIALS {
        let mut rng = Rng::new(1_000_003 * trial as u64 + 17);
        let r = (|| -> retcap::Result<()> {
            // softmax along a random axis of a random rank-2/3 tensor
            let shape: Vec<usize> = (0..2 + rng.below(2)).map(|_| 1 + rng.below(6)).collect();
            let axis = rng.below(shape.len());
            let scale = 10f64.powf(rng.uniform() * 4.0 - 2.0);
            let mut g = Graph::<f64>::new();
            let x = g.constant(rng.gaussian(&shape, scale))?;
            let y = g.softmax(x, axis)?;
            let v = g.value(y).data().to_vec();
            // gather slices along `axis`
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let mut slices = Vec::with_capacity(outer * inner * len);
            for o in 0..outer {
                for i in 0..inner {
                    for k in 0..len {
                        slices.push(v[(o * len + k) * inner + i]);
                    }
                }
            }
            softmax.check(&slices, len);

            // masked multi-head attention, self or causal
            let mut store = ParamStore::<f64>::new();
            let heads = 1 + rng.below(3);
            let d = heads * (1 + rng.below(4));
            let n = 1 + rng.below(6);
            let mha = MhaParams::new(&mut store, &mut rng, "mha", d, d, d, heads)?;
            let mut keep: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.7).collect();
            let causal = rng.below(2) == 0;
            if causal {
                keep[0] = true;
            } else if !keep.iter().any(|&k| k) {
                keep[rng.below(n)] = true;
            }
            let mask = AttnMask {
                keys: Some(keep.clone()),
                causal,
            };
            let mut g = Graph::inference(&store);
            let kv = g.constant(rng.gaussian(&[n, d], scale))?;
            let out = mha.forward(&mut g, kv, kv, &mask)?;
            for w in &out.weights {
                attention.check(g.value(*w).data(), n);
            }

            // GCA pooling weights and gate, fusion alignment, final LN rows
            let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
            let c = 2 * (1 + rng.below(4));
            let kw = 1 + rng.below(5);
            let dm = 2 * (1 + rng.below(4));
            let mut store = ParamStore::<f64>::new();
            let gca = GcaParams::new(
                &mut store,
                &mut rng,
                c,
                2,
                c / 2,
                QkvWiring::RefinedQuery,
                1e-5,
            )?;
            let fusion =
                TransFusionParams::new(&mut store, &mut rng, c, dm, 2, 2 * dm, 1, FUSION_LN_EPS)?;
            let mut kw_keep: Vec<bool> = (0..kw).map(|_| rng.uniform() < 0.8).collect();
            kw_keep[rng.below(kw)] = true;
            let mut g = Graph::inference(&store);
            let f_r = g.constant(rng.gaussian(&[h, w, c], 1.0))?;
            let out = gca_forward(&mut g, f_r, &gca)?;
            let alpha = g.value(out.alpha).data().to_vec();
            attention.check(&alpha, alpha.len());
            for &v in g.value(out.gate).data() {
                gates += 1;
                if !(v > 0.0 && v < 1.0) {
                    gate_bad += 1;
                }
            }
            let ke = g.constant(rng.gaussian(&[kw, dm], 1.0))?;
            let mask = AttnMask::keys(kw_keep);
            let fused = transfusion_forward(&mut g, out.f_gca, ke, &mask, &fusion)?;
            attention.check(g.value(fused.alignment).data(), kw);
            // input of the final LN, rebuilt from the public pieces
            let layer = &fusion.layers[0];
            let ca = vla_cross_attention(&mut g, out.f_gca, ke, &mask, &fusion)?;
            let a = g.add(ca.queries, ca.z)?;
            let a = layer.ln_attn.forward(&mut g, a)?;
            let ffn = layer.ffn.forward(&mut g, a)?;
            let pre = g.add(ffn, a)?;
            let mut slices: Vec<(Vec<f64>, Vec<f64>, f64)> = g
                .value(pre)
                .data()
                .chunks(dm)
                .zip(g.value(fused.f_prime).data().chunks(dm))
                .map(|(x, y)| (x.to_vec(), y.to_vec(), FUSION_LN_EPS))
                .collect();

            // standalone LN on random slices
            let width = 2 + rng.below(30);
            let mut ln_store = ParamStore::<f64>::new();
            let ln = LayerNorm::new(&mut ln_store, "ln", width, LN_EPS)?;
            let mut g = Graph::inference(&ln_store);
            let rows = 1 + rng.below(4);
            let shift = rng.normal() * 10.0;
            let x = rng
                .gaussian::<f64>(&[rows, width], scale)
                .map(|v| v + shift);
            let xv = g.constant(x.clone())?;
            let y = ln.forward(&mut g, xv)?;
            slices.extend(
                x.data()
                    .chunks(width)
                    .zip(g.value(y).data().chunks(width))
                    .map(|(x, y)| (x.to_vec(), y.to_vec(), LN_EPS)),
            );
            for (input, output, eps) in &slices {
                let (_, in_var) = moments(input);
                let (m, var) = moments(output);
                ln_slices += 1;
                ln_mean = ln_mean.max(m.abs());
                // the eps guard yields exactly σ²/(σ²+ε)
                ln_exact = ln_exact.max((var - in_var / (in_var + eps)).abs());
                if in_var >= eps / LN_VAR_TOL {
                    ln_var = ln_var.max((var - 1.0).abs());
                } else {
                    ln_flat += 1;
                }
            }
            Ok(())
        })();
        if let Err(e) = r {
            errors += 1;
            eprintln!("trial {trial}: {e}");
        }
    }
    let passed = errors == 0
        && softmax.worst <= ROW_TOL
        && attention.worst <= ROW_TOL
        && gate_bad == 0
        && ln_mean <= LN_MEAN_TOL
        && ln_var <= LN_VAR_TOL
        && ln_exact <= 1e-9;
    outcome(
        passed,
        format!(
            "{TRIALS} trials: softmax {} rows |sum-1| <= {:.1e}; attention {} rows <= {:.1e}; \
             gate {gates} values, {gate_bad} outside (0,1); LN {ln_slices} slices |mean| <= {ln_mean:.1e}, \
             |var-1| <= {ln_var:.1e} \
             ({ln_flat} near-constant slices with input variance < eps/1e-5 held to var = s2/(s2+eps) instead, \
             max dev {ln_exact:.1e}); {errors} errors",
            softmax.rows, softmax.worst, attention.rows, attention.worst
        ),
    )
}

// ---------------------------------------------------------------- 3

fn residual_identities() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, pass: bool| {
        ok &= pass;
        notes.push(format!("{name} {}", if pass { "ok" } else { "FAIL" }));
    };

    // vision: zeroed bottleneck leaves F_c == F_R bitwise
    let (h, w, c) = (4, 4, 8);
    let mut store = ParamStore::<f64>::new();
    let gca = GcaParams::new(
        &mut store,
        &mut Rng::new(1),
        c,
        2,
        c / 2,
        QkvWiring::RefinedQuery,
        1e-5,
    )
    .unwrap();
    let f = Rng::new(2).gaussian::<f64>(&[h * w, c], 1.0);
    fill(&mut store, &[gca.w1.weight, gca.w2.weight], 0.0);
    {
        let mut g = Graph::inference(&store);
        let x = g.constant(f.clone()).unwrap();
        let (f_s, _) = spatial_context(&mut g, x, gca.w_r).unwrap();
        let f_c = channel_context(&mut g, x, f_s, &gca).unwrap();
        record("F_c == F_R", g.value(f_c).data() == f.data());
    }

    // vision: W_r = 0 gives uniform pooling and the spatial mean
    fill(&mut store, &[gca.w_r], 0.0);
    {
        let mut g = Graph::inference(&store);
        let x = g.constant(f.clone()).unwrap();
        let (f_s, alpha) = spatial_context(&mut g, x, gca.w_r).unwrap();
        let n = (h * w) as f64;
        let uniform = g
            .value(alpha)
            .data()
            .iter()
            .all(|&a| (a - 1.0 / n).abs() <= 1e-15);
        let mean_ok = (0..c).all(|j| {
            let m = (0..h * w).map(|i| f.data()[i * c + j]).sum::<f64>() / n;
            (g.value(f_s).data()[j] - m).abs() <= 1e-12
        });
        record("W_r=0 uniform mean", uniform && mean_ok);
    }

    // vision: zero W_1, W_psi, b_psi gives F_gca == 0.5 F_R exactly
    let mut store = ParamStore::<f64>::new();
    let gca = GcaParams::new(
        &mut store,
        &mut Rng::new(3),
        c,
        2,
        c / 2,
        QkvWiring::RefinedQuery,
        1e-5,
    )
    .unwrap();
    fill(&mut store, &[gca.w1.weight, gca.w_psi, gca.b_psi], 0.0);
    {
        let f = Rng::new(4).gaussian::<f64>(&[h, w, c], 1.0);
        let mut g = Graph::inference(&store);
        let x = g.constant(f.clone()).unwrap();
        let out = gca_forward(&mut g, x, &gca).unwrap();
        let half: Vec<f64> = f.data().iter().map(|v| 0.5 * v).collect();
        record("F_gca == F_R/2", g.value(out.f_gca).data() == &half[..]);
    }

    // language: W_o = 0 gives KE_final == LN(KE) exactly
    let mut store = ParamStore::<f64>::new();
    let enc = LanguageEncoder::new(&mut store, &mut Rng::new(5), 12, 16, 2, 1e-5).unwrap();
    fill(&mut store, &[enc.mha.wo], 0.0);
    {
        let mut g = Graph::inference(&store);
        let out = enc.encode(&mut g, &[4, 7, 5]).unwrap();
        let kw = embed_keywords(&mut g, &[4, 7, 5], enc.table).unwrap();
        let ln = enc.ln.forward(&mut g, kw.ke).unwrap();
        record(
            "KE_final == LN(KE)",
            g.value(out.output).data() == g.value(ln).data(),
        );
    }

    // fusion: zero FFN gives F' == LN(Q + Z) within 1e-5
    let mut store = ParamStore::<f64>::new();
    let fusion =
        TransFusionParams::new(&mut store, &mut Rng::new(6), c, 16, 2, 32, 1, 1e-7).unwrap();
    let ffn = &fusion.layers[0].ffn;
    fill(
        &mut store,
        &[
            ffn.hidden.weight,
            ffn.hidden.bias.unwrap(),
            ffn.out.weight,
            ffn.out.bias.unwrap(),
        ],
        0.0,
    );
    {
        let mut rng = Rng::new(7);
        let mut g = Graph::inference(&store);
        let v = g.constant(rng.gaussian(&[h, w, c], 1.0)).unwrap();
        let kw = g.constant(rng.gaussian(&[3, 16], 1.0)).unwrap();
        let fused = transfusion_forward(&mut g, v, kw, &AttnMask::none(), &fusion).unwrap();
        let ca = vla_cross_attention(&mut g, v, kw, &AttnMask::none(), &fusion).unwrap();
        let qz = g.add(ca.queries, ca.z).unwrap();
        let a = fusion.layers[0].ln_attn.forward(&mut g, qz).unwrap();
        let worst = g
            .value(fused.f_prime)
            .data()
            .iter()
            .zip(g.value(a).data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        record(&format!("F' == LN(Q+Z) ({worst:.1e})"), worst <= 1e-5);
    }
    outcome(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 4 and 5

struct Overfit {
    elapsed: Duration,
    train_ce: f64,
    exact: usize,
    total: usize,
    bleu4: f64,
}

fn overfit(data: &Path, out: &Path, conditioning: Conditioning) -> Overfit {
    let cfg = ModelConfig {
        conditioning,
        ..desk(OVERFIT_STEPS)
    };
    let t = Instant::now();
    let summary = train(&cfg, data, out, None).expect("training");
    let elapsed = t.elapsed();
    let ckpt = Checkpoint::load(&summary.final_checkpoint).unwrap();
    let samples = load_split(&ckpt, data, SplitName::Train).unwrap();
    let train_ce = mean_loss(&ckpt.model, &ckpt.store, &samples).unwrap();
    let (report, hyps) = evaluate(&ckpt, &samples, 1).unwrap();
    let exact = samples
        .iter()
        .zip(&hyps)
        .filter(|(s, h)| &s.reference == *h)
        .count();
    Overfit {
        elapsed,
        train_ce,
        exact,
        total: samples.len(),
        bleu4: report.bleu4,
    }
}

// ---------------------------------------------------------------- 6

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

struct MetricCase {
    name: &'static str,
    pairs: &'static [(&'static str, &'static str)],
    bleu: [f64; 4],
    rouge: f64,
    cider: Option<f64>,
}

/// ROUGE-L F with β = 1.2 from precision and recall.
fn f_beta(p: f64, r: f64) -> f64 {
    let b2 = 1.44;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn metric_cases() -> Vec<MetricCase> {
    let s2 = 2f64.sqrt();
    let bp_7_6 = (1.0 - 7.0 / 6.0f64).exp();
    vec![
        // clipped unigram: "the" counts once; no bigram matches
        MetricCase {
            name: "clipping",
            pairs: &[("the the the", "the cat")],
            bleu: [1.0 / 3.0, 0.0, 0.0, 0.0],
            rouge: f_beta(1.0 / 3.0, 1.0 / 2.0),
            cider: None,
        },
        // p1 3/4, p2 1/3 (c d), no trigram; LCS "a c d"
        MetricCase {
            name: "lcs",
            pairs: &[("a b c d", "a c d")],
            bleu: [0.75, 0.5, 0.0, 0.0],
            rouge: f_beta(0.75, 1.0),
            cider: None,
        },
        MetricCase {
            name: "identical",
            pairs: &[(
                "a small drusen near the macula",
                "a small drusen near the macula",
            )],
            bleu: [1.0; 4],
            rouge: 1.0,
            cider: None,
        },
        MetricCase {
            name: "disjoint",
            pairs: &[("x y z", "a b c")],
            bleu: [0.0; 4],
            rouge: 0.0,
            cider: None,
        },
        // c = 4 < r = 6: BP = e^(1 - 6/4), every precision 1
        MetricCase {
            name: "brevity",
            pairs: &[("the cat sat on", "the cat sat on the mat")],
            bleu: [(-0.5f64).exp(); 4],
            rouge: f_beta(1.0, 4.0 / 6.0),
            cider: None,
        },
        // p = 5/6, 2/5, 1/4, 0/3; BP = e^(1 - 7/6); LCS "cat on the mat"
        MetricCase {
            name: "mixed",
            pairs: &[("the cat is on the mat", "there is a cat on the mat")],
            bleu: [
                bp_7_6 * 5.0 / 6.0,
                bp_7_6 * (5.0 / 6.0 * 2.0 / 5.0f64).sqrt(),
                bp_7_6 * (5.0 / 6.0 * 2.0 / 5.0 * 1.0 / 4.0f64).cbrt(),
                0.0,
            ],
            rouge: f_beta(4.0 / 6.0, 4.0 / 7.0),
            cider: None,
        },
        // p = 4/4, 2/3, 2/2, 0/1; LCS 3 either way
        MetricCase {
            name: "repeats",
            pairs: &[("a b a b", "b a b a")],
            bleu: [1.0, (2.0 / 3.0f64).sqrt(), (2.0 / 3.0f64).cbrt(), 0.0],
            rouge: 0.75,
            cider: None,
        },
        // Corpus counts: c = 6, r = 7, all precisions 1.
        // CIDEr sample 1: n=1 cos 1 (idf(c) = 0), n=2 cos 1/sqrt 2, n>2 none.
        // Sample 2 matches its reference at every n.
        MetricCase {
            name: "corpus",
            pairs: &[("a b", "a b c"), ("c d e f", "c d e f")],
            bleu: [bp_7_6; 4],
            rouge: (f_beta(1.0, 2.0 / 3.0) + 1.0) / 2.0,
            cider: Some((10.0 * (1.0 + 1.0 / s2) / 4.0 + 10.0) / 2.0),
        },
        // BLEU: "a" and "f" match, no bigram does. CIDEr: idf(a) = 0, everything else ln 2. Sample 1 shares only "a": cos 0.
        // Sample 2 shares "f": (1/4) / ((1/sqrt 2)(1/2)) = 1/sqrt 2.
        MetricCase {
            name: "shared unigram",
            pairs: &[("a b", "a c"), ("d f", "a f")],
            bleu: [0.5, 0.0, 0.0, 0.0],
            rouge: (f_beta(0.5, 0.5) + f_beta(0.5, 0.5)) / 2.0,
            cider: Some((0.0 + 10.0 / s2 / 4.0) / 2.0),
        },
        // distinct sentences scored against themselves
        MetricCase {
            name: "self corpus",
            pairs: &[("a b c d", "a b c d"), ("e f g h i", "e f g h i")],
            bleu: [1.0; 4],
            rouge: 1.0,
            cider: Some(10.0),
        },
    ]
}

fn metric_oracles() -> Outcome {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let cases = metric_cases();
    for case in &cases {
        let h: Vec<Vec<String>> = case.pairs.iter().map(|p| words(p.0)).collect();
        let r: Vec<Vec<String>> = case.pairs.iter().map(|p| words(p.1)).collect();
        let b = bleu(&h, &r).unwrap();
        let mut errs: Vec<f64> = b
            .iter()
            .zip(case.bleu)
            .map(|(x, y)| (x - y).abs())
            .collect();
        errs.push((rouge_l(&h, &r).unwrap() - case.rouge).abs());
        if let Some(want) = case.cider {
            errs.push((cider(&h, &r).unwrap() - want).abs());
        }
        let e = errs.into_iter().fold(0.0, f64::max);
        worst = worst.max(e);
        if e > METRIC_TOL {
            failed.push(case.name);
        }
    }
    outcome(
        failed.is_empty(),
        format!(
            "{} corpora, max abs err {worst:.1e} (<= 1e-6); failed: {failed:?}",
            cases.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn write_config(dir: &Path, cfg: &ModelConfig) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}

fn cli_train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> bool {
    let mut args = vec![
        "train".to_string(),
        "--config".into(),
        config.display().to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        out.display().to_string(),
        "--seed".into(),
        "42".into(),
    ];
    if let Some(r) = resume {
        args.extend(["--resume".into(), r.display().to_string()]);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    run_cli(&args).status.success()
}

fn train_rows(log: &Path) -> Vec<String> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

fn determinism(data: &Path, root: &Path) -> Outcome {
    // 19 train samples in batches of 8: 3 steps per epoch, so step 7 is mid-epoch.
    let (total, cut) = (12, 7);
    let cfg_dir = root.join("cfg");
    fs::create_dir_all(&cfg_dir).unwrap();
    let full_cfg = write_config(
        &cfg_dir,
        &ModelConfig {
            checkpoint_every: 1,
            ..desk(total)
        },
    );
    let (a, b) = (root.join("a"), root.join("b"));
    if !(cli_train(&full_cfg, data, &a, None) && cli_train(&full_cfg, data, &b, None)) {
        return outcome(false, "train failed");
    }
    let same_log = fs::read(a.join("loss.csv")).unwrap() == fs::read(b.join("loss.csv")).unwrap();
    let mut ckpts = vec![PathBuf::from("final.ckpt")];
    for e in fs::read_dir(a.join("checkpoints")).unwrap() {
        ckpts.push(Path::new("checkpoints").join(e.unwrap().file_name()));
    }
    let same_ckpt = ckpts
        .iter()
        .all(|p| fs::read(a.join(p)).unwrap() == fs::read(b.join(p)).unwrap());

    let part_dir = root.join("cfg-part");
    fs::create_dir_all(&part_dir).unwrap();
    let part_cfg = write_config(
        &part_dir,
        &ModelConfig {
            checkpoint_every: 1,
            ..desk(cut)
        },
    );
    let (p, r) = (root.join("part"), root.join("resumed"));
    if !(cli_train(&part_cfg, data, &p, None)
        && cli_train(&full_cfg, data, &r, Some(&p.join("final.ckpt"))))
    {
        return outcome(false, "resume failed");
    }
    let want: Vec<String> = train_rows(&a.join("loss.csv"))
        .into_iter()
        .filter(|l| {
            l.split(',')
                .nth(1)
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s > cut)
        })
        .collect();
    let got = train_rows(&r.join("loss.csv"));
    let next5 = |rows: &[String]| -> Vec<String> {
        rows.iter()
            .filter(|l| l.contains(",train,"))
            .take(5)
            .cloned()
            .collect()
    };
    let resumed_ok = next5(&got).len() == 5 && next5(&got) == next5(&want);
    let same_final =
        fs::read(a.join("final.ckpt")).unwrap() == fs::read(r.join("final.ckpt")).unwrap();
    outcome(
        same_log && same_ckpt && resumed_ok && same_final,
        format!(
            "loss logs identical: {same_log}; {} checkpoints identical: {same_ckpt}; \
             resume at step {cut} matches next 5 losses: {resumed_ok}; resumed final checkpoint identical: {same_final}",
            ckpts.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn gate_export(ckpt_path: &Path, data: &Path, root: &Path) -> Outcome {
    let ckpt = Checkpoint::load(ckpt_path).unwrap();
    let sample = &load_split(&ckpt, data, SplitName::Train).unwrap()[0];
    let image = root.join(format!("{}.gten", sample.id));
    gten::write(&image, &sample.visual).unwrap();
    let keywords = ckpt.vocab.decode(&sample.keywords).join(" ");
    let pgm = root.join("gate.pgm");
    let ok = run_cli(&[
        "export-attn",
        "--checkpoint",
        &ckpt_path.display().to_string(),
        "--image",
        &image.display().to_string(),
        "--keywords",
        &keywords,
        "--out",
        &pgm.display().to_string(),
    ])
    .status
    .success();
    if !ok {
        return outcome(false, "export-attn failed");
    }
    let gate: Tensor<f32> = ckpt
        .model
        .gate(&ckpt.store, &sample.visual, &sample.keywords)
        .unwrap();
    let want: Vec<u8> = gate
        .data()
        .iter()
        .map(|&g| (255.0 * g as f64).round() as u8)
        .collect();
    let (w, h, pixels) = read_pgm(&pgm).unwrap();
    let s = gate.shape();
    let exact = (h, w) == (s[0], s[1]) && pixels == want;
    outcome(
        exact,
        format!(
            "{}x{} PGM for {} equals round(255*g) exactly: {exact}. Not reproduced: DeepEyeNet scores \
             B@1 0.430, B@4 0.231, CIDEr 0.559, ROUGE 0.497 (need the dataset and a pretrained backbone)",
            s[0], s[1], sample.id
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    // `cargo test -- --list` and filtered runs must not spend ten minutes training.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args
        .iter()
        .any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str()))
    {
        return;
    }

    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("synth");
    let data = generate_synthetic(&desk(OVERFIT_STEPS), 32, 42, &data_dir)
        .unwrap()
        .manifest;

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!(
            "[{}] {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((name, o));
    };

    report("1 gradient check", gradients());
    report("2 normalization invariants", normalization());
    report("3 residual identities", residual_identities());

    let full = overfit(&data, &root.path().join("full"), Conditioning::Fused);
    let exact_frac = full.exact as f64 / full.total as f64;
    report(
        "4 end-to-end overfit",
        outcome(
            full.train_ce <= OVERFIT_CE
                && exact_frac >= EXACT_FRACTION
                && full.bleu4 >= OVERFIT_BLEU4
                && full.elapsed < OVERFIT_BUDGET,
            format!(
                "{OVERFIT_STEPS} steps in {:.0}s (< 600s); train CE {:.5} (<= 0.1); exact captions {}/{} (>= 90%); \
                 train BLEU@4 {:.4} (>= 0.9)",
                full.elapsed.as_secs_f64(),
                full.train_ce,
                full.exact,
                full.total,
                full.bleu4
            ),
        ),
    );

    let ablated = overfit(
        &data,
        &root.path().join("keywords-only"),
        Conditioning::KeywordsOnly,
    );
    let gap = full.bleu4 - ablated.bleu4;
    report(
        "5 fusion necessity",
        outcome(
            gap >= ABLATION_GAP,
            format!(
                "train BLEU@4 full {:.4} vs keywords-only {:.4}: gap {gap:.4} (>= 0.2); keywords-only exact {}/{}",
                full.bleu4, ablated.bleu4, ablated.exact, ablated.total
            ),
        ),
    );

    report("6 metric oracles", metric_oracles());
    report(
        "7 determinism and resume",
        determinism(&data, &root.path().join("det")),
    );
    report(
        "8 gate export / full-scale scores",
        gate_export(&root.path().join("full/final.ckpt"), &data, root.path()),
    );

    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, o)| !o.passed)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
