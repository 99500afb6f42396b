use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use retcap::language::Vocab;
use retcap::pipeline::check::{check_blocks, Block, TOLERANCE};
use retcap::pipeline::checkpoint::{checkpoint_id, Checkpoint};
use retcap::pipeline::config::ModelConfig;
use retcap::pipeline::dataset::SplitName;
use retcap::pipeline::eval::evaluate_split;
use retcap::pipeline::synth::generate_synthetic;
use retcap::pipeline::text::normalize;
use retcap::pipeline::train::train;
use retcap::tensor::{gten, Tensor};
use retcap::vision::{export_gate_map, GateMap};
use retcap::Result;

#[derive(Parser)]
#[command(
    name = "retcap",
    version,
    about = "Keyword-guided retinal image captioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockArg {
    Gca,
    Mha,
    Keywords,
    Transfusion,
    Decoder,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train split of a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate captions for a split and score them.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Caption one image or feature tensor.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        keywords: String,
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Write the GCA gate of one input as an 8-bit PGM.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        keywords: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    CheckGrad {
        #[arg(long, value_enum, default_value = "all")]
        block: BlockArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn keyword_ids(vocab: &Vocab, text: &str) -> Vec<u32> {
    vocab.encode(&normalize(text))
}

fn load_input(path: &Path) -> Result<Tensor<f32>> {
    Ok(gten::read(path)?.into_tensor())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let mut cfg = ModelConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let s = train(&cfg, &data, &out, resume.as_deref())?;
            println!(
                "{} steps; final checkpoint {}",
                s.steps,
                s.final_checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            beam,
        } => {
            let split = match split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Val => SplitName::Val,
                SplitArg::Test => SplitName::Test,
            };
            let report = evaluate_split(&checkpoint, &data, split, &out, beam)?;
            print!("{report}");
        }
        Command::Generate {
            checkpoint,
            image,
            keywords,
            beam,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let visual = load_input(&image)?;
            let ids = ckpt.model.generate(
                &ckpt.store,
                &visual,
                &keyword_ids(&ckpt.vocab, &keywords),
                beam,
            )?;
            let id = image
                .file_stem()
                .map(|s| s.to_string_lossy())
                .unwrap_or_default();
            println!("{id}\t{}", ckpt.vocab.decode(&ids).join(" "));
        }
        Command::ExportAttn {
            checkpoint,
            image,
            keywords,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let visual = load_input(&image)?;
            let gate =
                ckpt.model
                    .gate(&ckpt.store, &visual, &keyword_ids(&ckpt.vocab, &keywords))?;
            let sample = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let map = GateMap::from_tensor(&gate, &sample, &checkpoint_id(&checkpoint)?)?;
            export_gate_map(&map, &out)?;
            println!("{}", out.display());
        }
        Command::Synth {
            config,
            n,
            seed,
            out,
        } => {
            let cfg = match config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::default(),
            };
            let s = generate_synthetic(&cfg, n, seed, &out)?;
            println!("{}", s.manifest.display());
        }
        Command::CheckGrad { block, seed } => {
            let name = match block {
                BlockArg::Gca => "gca",
                BlockArg::Mha => "mha",
                BlockArg::Keywords => "keywords",
                BlockArg::Transfusion => "transfusion",
                BlockArg::Decoder => "decoder",
                BlockArg::All => "all",
            };
            let reports = check_blocks(&Block::parse_selection(name)?, seed)?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!(
                    "{:<12} max_rel_err {:.3e}  worst {}  ({} coords)  {}",
                    r.block,
                    r.max_rel_err,
                    r.worst,
                    r.checked,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "tolerance {TOLERANCE:e}: {}",
                if ok { "pass" } else { "fail" }
            );
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
