//! `groklab` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Overrides};

pub const VERSION: &str = env!("GROKLAB_VERSION");

#[derive(Parser, Debug)]
#[command(name = "groklab", version = VERSION, about = "Grokking and representation-learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat JSON config with dotted keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (required here or in the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "groklab-out")]
    out: PathBuf,
    /// Extra config assignment, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    /// addition, modular_addition or s3
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    p: Option<usize>,
    /// Training fraction, `k/n` or a float
    #[arg(long)]
    fraction: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// regression or classification
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    repr_lr: Option<f64>,
    #[arg(long)]
    dec_lr: Option<f64>,
    #[arg(long)]
    repr_wd: Option<f64>,
    #[arg(long)]
    dec_wd: Option<f64>,
    /// `full` or a positive integer
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    /// Step budget
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the effective-theory gradient flow, or with --fractions
    /// estimate the critical-fraction curve
    Efftheory {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        /// `lo:hi:n` or a comma list; switches to the Monte-Carlo curve
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Monte-Carlo probability that a random split pins the linear representation
    McCritical {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Train one encoder-decoder model and classify its phase
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Phase-diagram sweep over a hyperparameter grid
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Named grid (see `sweep.preset`)
        #[arg(long)]
        preset: Option<String>,
        /// Reuse runs already stored in the output directory
        #[arg(long)]
        resume: bool,
        /// Comma-separated run seeds
        #[arg(long)]
        seeds: Option<String>,
        /// Use the 10^5-step budget
        #[arg(long)]
        paper_scale: bool,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Accuracy/RQI tables and PCA over stored training runs
    Analyze {
        /// Run directories (searched recursively for record.json)
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        pca: bool,
        #[arg(long, default_value = "groklab-out")]
        out: PathBuf,
    },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<groklab::Error> for Failure {
    fn from(e: groklab::Error) -> Self {
        use groklab::Error::*;
        match e {
            InvalidTask(_) | IndexOutOfRange { .. } | InvalidFraction(_) | EmptyTrainSet(_) | Config(_)
            | DegenerateTask | Unsupported(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn overrides(common: &Common) -> Result<Overrides, ConfigError> {
    let mut o = match &common.config {
        Some(path) => Overrides::from_file(path)?,
        None => Overrides::default(),
    };
    o.flag("seed", common.seed);
    for s in &common.set {
        o.assignment(s)?;
    }
    Ok(o)
}

fn task_flags(o: &mut Overrides, t: &TaskArgs) {
    o.flag("task.kind", t.task.as_ref());
    o.flag("task.p", t.p);
    o.flag("split.fraction", t.fraction.as_ref());
}

fn optim_flags(o: &mut Overrides, a: &OptimArgs) {
    o.flag("model.mode", a.mode.as_ref());
    o.flag("optim.repr_lr", a.repr_lr);
    o.flag("optim.dec_lr", a.dec_lr);
    o.flag("optim.repr_wd", a.repr_wd);
    o.flag("optim.dec_wd", a.dec_wd);
    o.flag("optim.batch_size", a.batch_size.as_ref());
    o.flag("model.init_scale", a.init_scale);
    o.flag("optim.max_steps", a.steps);
    o.flag("optim.stride", a.stride);
}

fn run(cli: Cli) -> Result<(), Failure> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Efftheory { common, task, steps, dt, fractions, trials } => {
            let mut o = overrides(&common)?;
            task_flags(&mut o, &task);
            o.flag("flow.steps", steps);
            o.flag("flow.dt", dt);
            o.flag("mc.trials", trials);
            if let Some(f) = &fractions {
                o.flag("mc.fractions", Some(f));
                return commands::mc_critical(&o, &common.out, &argv);
            }
            commands::efftheory(&o, &common.out, &argv)
        }
        Command::McCritical { common, p, fractions, trials } => {
            let mut o = overrides(&common)?;
            o.flag("task.p", p);
            o.flag("mc.fractions", fractions.as_ref());
            o.flag("mc.trials", trials);
            commands::mc_critical(&o, &common.out, &argv)
        }
        Command::Train { common, task, optim } => {
            let mut o = overrides(&common)?;
            task_flags(&mut o, &task);
            optim_flags(&mut o, &optim);
            commands::train(&o, &common.out, &argv)
        }
        Command::Sweep { common, preset, resume, seeds, paper_scale, optim } => {
            let mut o = overrides(&common)?;
            o.flag("sweep.preset", preset.as_ref());
            o.flag("sweep.seeds", seeds.as_ref());
            if paper_scale {
                o.flag("sweep.paper_scale", Some(true));
            }
            optim_flags(&mut o, &optim);
            commands::sweep(&o, &common.out, resume, &argv)
        }
        Command::Analyze { inputs, pca, out } => commands::analyze(&inputs, pca, &out, &argv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
