use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use advtrain::attack::{AttackConfig, InnerLoss};
use advtrain::config::TrainConfig;
use advtrain::data::{load_checkpoint, save_checkpoint, Checkpoint};
use advtrain::diagnostics::quadrant_decomposition;
use advtrain::harness::{
    diagnostics_csv, evaluate, load_dataset, metrics_csv, sweep_epsilon, train,
};
use advtrain::theorycheck::run_verification_suite;

#[derive(Parser)]
#[command(name = "advtrain", about = "Adversarial training toolkit for small dense networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write checkpoints + metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint's clean and robust accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
    },
    /// Write a per-example diagnostics CSV for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical theory checks; prints one JSON object per check.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Robust-accuracy sweep over evaluation radii; prints CSV.
    SweepEpsilon {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated list of radii, e.g. 0.05,0.1,0.2
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
    },
}

fn checkpoint_context(ckpt: &Checkpoint) -> advtrain::Result<(TrainConfig, advtrain::data::Dataset)> {
    let cfg = TrainConfig::from_json(ckpt.config.to_string().as_bytes())?;
    let data = load_dataset(&cfg.dataset)?;
    Ok((cfg, data))
}

fn run(cli: Cli) -> advtrain::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let data = load_dataset(&cfg.dataset)?;
            let outcome = train(&cfg, &data)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
            save_checkpoint(out.join("checkpoint.json"), &outcome.final_checkpoint)?;
            save_checkpoint(out.join("best_checkpoint.json"), &outcome.best_checkpoint)?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "trained {} epochs: clean_acc={} robust_acc={}",
                    cfg.epochs, last.clean_acc, last.robust_acc
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { checkpoint, epsilon, steps, restarts } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (_, data) = checkpoint_context(&ckpt)?;
            let net = ckpt.to_net()?;
            let attack = AttackConfig {
                epsilon,
                steps,
                step_size: if steps > 0 { (2.5 * epsilon / steps as f64).max(f64::MIN_POSITIVE) } else { 1.0 },
                restarts,
                random_start: true,
                inner_loss: InnerLoss::CrossEntropy,
            };
            let eval = evaluate(&net, &data, &attack, ckpt.seed)?;
            let d = quadrant_decomposition(&eval.records)?;
            println!(
                "clean_acc={} robust_acc={} r_nat={} r_bdy={} r_rob={}",
                eval.clean_acc, eval.robust_acc, d.r_nat, d.r_bdy, d.r_rob
            );
        }
        Command::Diagnose { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (cfg, data) = checkpoint_context(&ckpt)?;
            let net = ckpt.to_net()?;
            let eval = evaluate(&net, &data, &cfg.eval_attack, ckpt.seed)?;
            std::fs::write(&out, diagnostics_csv(&eval.records))?;
            println!("wrote {} records to {}", eval.records.len(), out.display());
        }
        Command::Verify { trials, seed } => {
            let outcomes = run_verification_suite(trials, seed)?;
            let mut all_passed = true;
            for o in &outcomes {
                println!("{}", serde_json::to_string(o).expect("report serializes"));
                all_passed &= o.passed;
            }
            if !all_passed {
                return Err(advtrain::Error::InvalidInput(
                    "one or more verification checks failed".into(),
                ));
            }
        }
        Command::SweepEpsilon { config, epsilons } => {
            let cfg = TrainConfig::load(&config)?;
            let data = load_dataset(&cfg.dataset)?;
            let outcome = train(&cfg, &data)?;
            let net = outcome.best_checkpoint.to_net()?;
            let csv = sweep_epsilon(&net, &data, &cfg.eval_attack, &epsilons, cfg.seed)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
