use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use specret_cli::commands::{self, TrainOptions};
use specret_cli::selftest::{gradcheck, run_selftest, GRADCHECK_TOLERANCE};
use specret_cli::{exit_code, load_config, Overrides};
use specret_core::{Error, Result};
use specret_model::train::Precision;

#[derive(Parser)]
#[command(
    name = "specret",
    version,
    about = "Emissivity retrieval from LWIR radiance: synthesize, train, infer, match"
)]
struct Cli {
    /// JSON run configuration; missing keys take defaults, unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; re-derives every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory shared by all commands.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Total EpsNet training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic cubes, sidecars and the library; print the manifest.
    Synth,
    /// Train the atmosphere and background estimators.
    TrainAux,
    /// Train the EpsNet (or the unconditioned ablation).
    Train {
        #[arg(long)]
        unconditioned: bool,
        /// Stop after this many epochs; the schedule still spans --epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Continue from the saved model, optimizer state and report.
        #[arg(long)]
        resume: bool,
    },
    /// Sample posteriors for every target pixel of the held-out cubes.
    Infer {
        #[arg(long)]
        unconditioned: bool,
    },
    /// Score the library against each inferred posterior.
    Match {
        #[arg(long)]
        unconditioned: bool,
    },
    /// Hit-rate curves from the stored scorecards.
    Hitrate,
    /// Finite-difference check of the composite-loss gradients on a tiny model.
    Gradcheck {
        /// Offset added to every analytic gradient (test hook).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Run the built-in checks.
    Selftest,
}

fn check_threads() -> Result<()> {
    match std::env::var("SPECRET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(Error::Domain(format!(
                "SPECRET_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    check_threads()?;
    let ov = Overrides {
        seed: cli.seed,
        epochs: cli.epochs,
        precision: cli.precision.map(|p| match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }),
    };
    let cfg = load_config(cli.config.as_deref(), &ov)?;
    let dir = cli.out.as_path();
    match cli.command {
        Command::Synth => {
            cfg.synth.validate()?;
            let m = commands::synth(&cfg, dir)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::TrainAux => {
            let rep = commands::train_aux(&cfg, dir)?;
            if let Some(last) = rep.last() {
                println!(
                    "epochs {} propnet {:.6e} bgnet {:.6e}",
                    rep.len(),
                    last.propnet_loss,
                    last.bgnet_loss
                );
            }
        }
        Command::Train {
            unconditioned,
            stop_after,
            resume,
        } => {
            let rep = commands::train(
                &cfg,
                dir,
                TrainOptions {
                    unconditioned,
                    stop_after,
                    resume,
                },
            )?;
            for r in &rep.records {
                println!(
                    "epoch {:>4} lr {:.3e} composite {:.6e} shape {:.4e}",
                    r.epoch, r.lr, r.train.composite, r.train.shape
                );
            }
        }
        Command::Infer { unconditioned } => {
            let q = commands::infer(&cfg, dir, unconditioned)?;
            println!("{} queries, {} samples each", q.len(), cfg.n_samples);
        }
        Command::Match { unconditioned } => {
            let cards = commands::match_library(&cfg, dir, unconditioned)?;
            println!("{} scorecards", cards.len());
        }
        Command::Hitrate => {
            let curves = commands::hitrate(&cfg, dir)?;
            for c in &curves {
                println!(
                    "{:<20} α≥{:<5} n={:<5} {:?}",
                    c.matcher.label(),
                    c.alpha_min,
                    c.n_trials,
                    c.hit_rate
                );
            }
        }
        Command::Gradcheck { inject_fault } => {
            let rep = gradcheck(inject_fault)?;
            let ok = rep.passed(GRADCHECK_TOLERANCE);
            println!(
                "{} max rel err {:.3e} over {} probes ({})",
                if ok { "PASS" } else { "FAIL" },
                rep.max_rel_err,
                rep.n_checked,
                rep.worst
            );
            return Ok(ok);
        }
        Command::Selftest => {
            let mut ok = true;
            for (name, res) in run_selftest() {
                match res {
                    Ok(d) => println!("PASS {name}: {d}"),
                    Err(d) => {
                        ok = false;
                        println!("FAIL {name}: {d}");
                    }
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
