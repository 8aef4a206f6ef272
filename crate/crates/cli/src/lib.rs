//! Command-line front end for two-tower training experiments.

pub mod commands;
pub mod config;
pub mod table;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use twotower_core::error::{Error, ErrorClass, Result};

pub use config::Settings;

#[derive(Debug, Parser)]
#[command(name = "twotower", version, about = "Two-tower retrieval training with cross-batch negatives")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cluster dataset into <out>/interactions.tsv
    Synth(RunArgs),
    /// Train one configuration and evaluate its best checkpoint
    Train(RunArgs),
    /// Evaluate a checkpoint on the validation or test users
    Eval(RunArgs),
    /// Compare sampling strategies across seeds
    SweepStrategies(RunArgs),
    /// Compare memory bank sizes across seeds
    SweepBank(RunArgs),
    /// Record the item-encoder drift curve
    Drift(RunArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub bank_size: Option<String>,
    #[arg(long)]
    pub warmup: Option<String>,
    #[arg(long)]
    pub max_iters: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub l2: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
    /// Run sweep cells concurrently (timing columns become NA)
    #[arg(long)]
    pub parallel: bool,
    /// Any other setting, as key=value; may be repeated
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    /// Flag values as ordered `(key, value)` overrides.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for raw in &self.set {
            let (k, v) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {raw:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("data", &self.data),
            ("out", &self.out),
            ("seed", &self.seed),
            ("strategy", &self.strategy),
            ("bank_size", &self.bank_size),
            ("warmup", &self.warmup),
            ("max_iters", &self.max_iters),
            ("batch_size", &self.batch_size),
            ("dim", &self.dim),
            ("lr", &self.lr),
            ("l2", &self.l2),
            ("patience", &self.patience),
            ("eval_every", &self.eval_every),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.parallel {
            out.push(("parallel".into(), "true".into()));
        }
        Ok(out)
    }

    pub fn settings(&self) -> Result<Settings> {
        Settings::layered(self.config.as_deref(), &self.overrides()?)
    }
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 1,
    }
}

/// Caps the global worker pool at `TWOTOWER_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TWOTOWER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("TWOTOWER_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool that is already built (e.g. by an earlier call) is left as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command, printing the paths of what it wrote.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => {
            let path = commands::synth(&a.settings()?)?;
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            let out = commands::train_command(&a.settings()?)?;
            let s = out.report.summary();
            println!(
                "{}: {} iterations, best {:?}, test recall@50 {:.4}, {:.3} s per 1k batches",
                out.report.strategy,
                out.report.timing.iterations,
                out.report.best_iteration,
                out.test.recall(50).unwrap_or(f64::NAN),
                s.avg_seconds_per_1k
            );
            println!("wrote {}", out.report_path.display());
        }
        Command::Eval(a) => {
            let s = a.settings()?;
            commands::eval_command(&s)?;
            println!("wrote {}", s.out.join("eval.tsv").display());
        }
        Command::SweepStrategies(a) => {
            let s = a.settings()?;
            let ds = commands::load_dataset(&s)?;
            let out = commands::sweep_strategies(&s, &ds)?;
            println!("wrote {}", out.path.display());
        }
        Command::SweepBank(a) => {
            let s = a.settings()?;
            let ds = commands::load_dataset(&s)?;
            let out = commands::sweep_bank(&s, &ds)?;
            println!("wrote {}", out.path.display());
        }
        Command::Drift(a) => {
            let s = a.settings()?;
            let ds = commands::load_dataset(&s)?;
            commands::drift_command(&s, &ds)?;
            println!("wrote {}", s.out.join("drift.tsv").display());
        }
    }
    Ok(())
}
