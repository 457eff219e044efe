use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use point2vec::{strict_mode, Result};
use point2vec_cli::run::load_checkpoint;
use point2vec_cli::{analysis, exit_code, finetune, pretrain, Run, RunConfig};

#[derive(Parser)]
#[command(
    name = "point2vec",
    version,
    about = "Self-supervised point-cloud pretraining and fine-tuning"
)]
struct Cli {
    /// JSON run configuration (`//` comments allowed); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from or fine-tune from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequential, bit-reproducible arithmetic.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Cls,
    Partseg,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the encoder on the training split, or resume from --checkpoint.
    Pretrain,
    /// Fine-tune a downstream model, from --checkpoint or from scratch.
    Finetune {
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Few-shot episodes; reports mean and std of query accuracy.
    Fewshot {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
    },
    /// Confusion matrix of a saved classifier on the test split.
    Eval,
    /// Point coverage of masked and visible patches.
    AnalyzeMask,
    /// Token centers colored by the principal components of their features.
    ExportPca {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Write the configured synthetic dataset with its manifest.
    GenData,
}

fn execute(cli: Cli) -> Result<()> {
    let _strict = cli.strict.then(strict_mode);
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Command::Fewshot { runs, way, shot } = &cli.command {
        let f = &mut config.fewshot;
        f.runs = runs.unwrap_or(f.runs);
        f.way = way.unwrap_or(f.way);
        f.shot = shot.unwrap_or(f.shot);
        config.validate()?;
    }
    let run = Run::new(config, cli.seed, &cli.out)?;
    let ckpt = load_checkpoint(cli.checkpoint.as_deref())?;
    let ckpt = ckpt.as_ref();
    match cli.command {
        Command::Pretrain => {
            let s = pretrain::pretrain(&run, ckpt, |epoch, loss| {
                eprintln!("epoch {epoch}\tloss {loss:.6}")
            })?;
            println!(
                "{} pretraining finished after {} epochs, {} steps",
                s.mode, s.epochs, s.steps
            );
        }
        Command::Finetune { task: Task::Cls } => {
            let m =
                finetune::finetune_classification(&run, ckpt, finetune::Stop::default(), |e| {
                    eprintln!(
                        "epoch {}\tloss {:.4}\tacc {:.4}",
                        e.epoch, e.train_loss, e.test_accuracy
                    )
                })?;
            println!(
                "test accuracy {:.4} (best {:.4} at epoch {})",
                m.final_accuracy, m.best_accuracy, m.best_epoch
            );
        }
        Command::Finetune {
            task: Task::Partseg,
        } => {
            let m = finetune::finetune_partseg(&run, ckpt, |e| {
                eprintln!(
                    "epoch {}\tloss {:.4}\tpoint acc {:.4}",
                    e.epoch, e.train_loss, e.test_accuracy
                )
            })?;
            let f = &m.final_metrics;
            println!(
                "point accuracy {:.4}, mIoU_C {:.4}, mIoU_I {:.4}",
                f.point_accuracy, f.iou.miou_c, f.iou.miou_i
            );
        }
        Command::Fewshot { .. } => println!("{}", finetune::fewshot(&run, ckpt)?),
        Command::Eval => {
            let r = finetune::evaluate(&run, finetune::require_checkpoint(ckpt, "eval")?)?;
            print!("{}", r.table());
            println!("accuracy {:.4}", r.accuracy);
        }
        Command::AnalyzeMask => {
            println!("{}", analysis::MASK_HEADER);
            for row in analysis::analyze_mask(&run)? {
                println!("{}", row.tsv());
            }
        }
        Command::ExportPca { count } => {
            let files = analysis::export_pca(&run, ckpt, count)?;
            println!("wrote {} files to {}", files.len(), run.out.display());
        }
        Command::GenData => {
            let manifest = analysis::gen_data(&run, cli.seed)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
