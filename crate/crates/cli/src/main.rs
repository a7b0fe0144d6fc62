use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use oad_core::dataset::{gen_synthetic, load_dataset_with, save_dataset, Split, SyntheticConfig};
use oad_core::evaluation::evaluate_with;
use oad_core::exemplars::{build_bank_with, ExemplarBank, KMeansParams};
use oad_core::io::write_atomic;
use oad_core::model::{ModelHyper, ModelParams};
use oad_core::numeric::Rng;
use oad_core::streaming::{detect_dataset, read_predictions, write_predictions};
use oad_core::training::{train_with, TrainConfig};
use oad_core::Exec;

#[derive(Parser)]
#[command(name = "oad", version, about = "Online action detection over per-frame features")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus feature files).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 10.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Cluster each class of a training set into an exemplar bank.
    Exemplars {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both branches and write a checkpoint and a loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// JSON run configuration; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path (default: checkpoint path with `.loss.json`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Stream every video through a trained model.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Static-branch weight (default: the checkpoint's β).
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction dump against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Training and architecture settings read from `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    #[serde(flatten)]
    train: TrainConfig,
    #[serde(flatten)]
    model: ModelHyper,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|cause| cause.downcast_ref::<oad_core::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn run(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Synth {
            out,
            classes,
            dim,
            videos,
            frames,
            separation,
            seed,
            split,
        } => {
            let config = SyntheticConfig {
                num_classes: classes,
                dim,
                videos,
                frames_per_video: frames,
                separation,
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let dataset = gen_synthetic(&config, split, &mut Rng::new(seed))?;
            let manifest = save_dataset(&dataset, &out)?;
            println!(
                "wrote {} videos, {} frames to {}",
                dataset.sequences.len(),
                dataset.total_frames(),
                manifest.display()
            );
        }
        Command::Exemplars { data, m, seed, out } => {
            let dataset = load_dataset_with(&data, exec)?;
            let bank = build_bank_with(&dataset, m, &mut Rng::new(seed), KMeansParams::default(), exec)?;
            bank.save(&out)?;
            println!(
                "wrote {} exemplars ({} categories x {m}) to {}",
                bank.exemplars.rows(),
                bank.num_categories(),
                out.display()
            );
        }
        Command::Train {
            data,
            bank,
            config,
            out,
            log,
            epochs,
            seed,
            lr,
            lambda,
            window,
            hidden,
        } => {
            let mut run = match &config {
                Some(path) => read_config(path)?,
                None => RunConfig::default(),
            };
            if let Some(v) = epochs {
                run.train.epochs = v;
            }
            if let Some(v) = seed {
                run.train.seed = v;
            }
            if let Some(v) = lr {
                run.train.lr = v;
            }
            if let Some(v) = lambda {
                run.model.lambda = v;
            }
            if let Some(v) = window {
                run.model.window = v;
            }
            if let Some(v) = hidden {
                run.model.hidden = v;
            }
            let dataset = load_dataset_with(&data, exec)?;
            let bank = ExemplarBank::load(&bank)?;
            let outcome = train_with(&dataset, &bank, run.model, &run.train, exec)?;
            outcome.params.save(&out)?;
            let log = log.unwrap_or_else(|| out.with_extension("loss.json"));
            let mut text = serde_json::to_string_pretty(&outcome.curve)?;
            text.push('\n');
            write_atomic(&log, text.as_bytes())?;
            match (outcome.curve.first(), outcome.curve.last()) {
                (Some(first), Some(last)) => println!(
                    "trained {} epochs, total loss {:.6} -> {:.6}",
                    outcome.curve.len(),
                    first.total,
                    last.total
                ),
                _ => println!("no epochs run; checkpoint holds the initialization"),
            }
            println!("checkpoint {}, loss log {}", out.display(), log.display());
        }
        Command::Detect {
            data,
            bank,
            ckpt,
            beta,
            out,
        } => {
            let dataset = load_dataset_with(&data, exec)?;
            let bank = ExemplarBank::load(&bank)?;
            let model = ModelParams::load(&ckpt)?;
            let beta = beta.unwrap_or(model.hyper.beta);
            let records = detect_dataset(&dataset, &model, &bank, beta, exec)?;
            write_predictions(&out, &records)?;
            println!("wrote {} frame predictions (beta = {beta}) to {}", records.len(), out.display());
        }
        Command::Eval { pred, data, out } => {
            let dataset = load_dataset_with(&data, exec)?;
            let records = read_predictions(&pred)?;
            let report = evaluate_with(&records, &dataset, exec)?;
            write_atomic(&out, report.to_json().as_bytes())?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| oad_core::Error::Format(format!("{}: {e}", path.display())))?;
    Ok(config)
}
