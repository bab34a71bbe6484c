//! `auxlat` — train, evaluate, and check the latent-construction stack.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/fixture error,
//! 4 checkpoint error, 5 internal error, 6 reward-check mismatches.
//! Failures print one machine-parsable line to stderr:
//! `error code=<CODE> msg="..."`.

use auxlat_core::config::RunConfig;
use auxlat_core::error::Error;
use auxlat_core::run;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "auxlat", version, about = "Latent auxiliary-construction training stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the supervised curriculum and the RL phase per config toggles.
    Train {
        /// Flat `key = value` config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory for checkpoints, metrics and the echoed config.
        #[arg(long)]
        out: PathBuf,
        /// Dataset JSONL (overrides the config key).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Held-out dataset for the RL phase (overrides the config key).
        #[arg(long)]
        rl_dataset: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute reward breakdowns for a fixture and diff expectations.
    RewardCheck {
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write computed breakdowns as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset (optionally split train/eval).
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Keep this fraction in `out` and write the rest to `--eval-out`.
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn run_cli(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            dataset,
            rl_dataset,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = dataset {
                cfg.dataset = d.display().to_string();
            }
            if let Some(d) = rl_dataset {
                cfg.rl_dataset = d.display().to_string();
            }
            let outputs = run::cmd_train(&cfg, &out)?;
            println!("run dir: {}", outputs.run_dir.display());
            println!("final checkpoint: {}", outputs.final_checkpoint.display());
            if let Some(s1) = &outputs.stage1 {
                let last = s1.epoch_means.len() - 1;
                println!("stage1 align: {:.6} -> {:.6}", s1.mean(0, "align"), s1.mean(last, "align"));
            }
            if let Some(s3) = &outputs.stage3 {
                let last = s3.epoch_means.len() - 1;
                println!("stage3 ce: {:.6} -> {:.6}", s3.mean(0, "ce"), s3.mean(last, "ce"));
            }
            if let Some(rl) = &outputs.rl {
                println!(
                    "rl updates: {} (skipped {}), one-segment rate {:.4}, final bias {:.4}",
                    rl.updates_done, rl.skipped_updates, rl.one_segment_rate, rl.final_bias
                );
            }
            Ok(0)
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let report = run::cmd_eval(&checkpoint, &dataset, &cfg)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(&path, &json)?;
            }
            println!("{json}");
            Ok(0)
        }
        Cmd::RewardCheck { fixture, config, out } => {
            let cfg = load_config(&config)?;
            let report = run::cmd_reward_check(&fixture, &cfg.reward_config())?;
            for case in &report.cases {
                if case.pass {
                    println!("case {:>3} PASS", case.line);
                } else {
                    println!("case {:>3} FAIL {}", case.line, case.diffs.join("; "));
                }
            }
            println!("passed {} / {}", report.passed, report.cases.len());
            if let Some(path) = out {
                let mut f = std::fs::File::create(path)?;
                run::write_reward_check(&mut f, &report)?;
            }
            Ok(if report.failed == 0 { 0 } else { 6 })
        }
        Cmd::GenData {
            count,
            seed,
            out,
            train_fraction,
            eval_out,
        } => {
            let split = match (train_fraction, eval_out.as_deref()) {
                (Some(f), Some(path)) => Some((f, path)),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "--train-fraction and --eval-out must be given together".into(),
                    ))
                }
            };
            let written = run::cmd_gen_data(count, seed, &out, split)?;
            println!("wrote {written} instances to {}", out.display());
            if let Some(path) = eval_out {
                println!("held-out split: {}", path.display());
            }
            Ok(0)
        }
    }
}

fn error_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (2, "CONFIG"),
        Error::Data(_) | Error::Json(_) => (3, "DATA"),
        Error::Checkpoint(_) => (4, "CHECKPOINT"),
        _ => (5, "INTERNAL"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (code, label) = error_code(&e);
            eprintln!("error code={label} msg={:?}", e.to_string());
            ExitCode::from(code)
        }
    }
}
