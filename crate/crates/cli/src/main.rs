use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use adnarrate_core::Error;

mod commands;
mod config;
mod manifest;

use config::{ConfigError, RunConfig};
use manifest::RunDir;

/// Audio-description narration with contextual EM attention.
#[derive(Debug, Parser)]
#[command(name = "adnarrate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// DADF corpus.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scene-structured synthetic corpus.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Feature noise level.
        #[arg(long, allow_hyphen_values = true)]
        noise: Option<String>,
    },
    /// Stage I: adapt the vision projection to the frozen text side.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        gamma: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
    },
    /// Stage II: train the window encoder and decoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Adapter checkpoint from `adapt`.
        #[arg(long, value_name = "PATH")]
        adapter: Option<PathBuf>,
        /// Character bank, one name per line.
        #[arg(long, value_name = "PATH")]
        names: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<String>,
        /// Drop both EM branches (alpha = beta = 0).
        #[arg(long)]
        no_ema: bool,
        /// Drop the cross-attention branch (beta = 0).
        #[arg(long)]
        no_xattn: bool,
        /// Train without the distinctive-word loss.
        #[arg(long)]
        no_dist: bool,
        /// Sample window members at random within a movie.
        #[arg(long)]
        nonconsecutive: bool,
    },
    /// Generate (or read) ADs and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Output directory of `train`.
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
        /// Existing generations (JSON lines).
        #[arg(long, value_name = "PATH")]
        generations: Option<PathBuf>,
    },
    /// Redundancy statistics and branch vectors of one window.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per objective.
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
}

fn path_str(p: &std::path::Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Defaults, then `--config`, then `--set`, then dedicated flags.
fn build_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.set("threads", &t.to_string())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn flag(on: bool, value: &str) -> Option<String> {
    on.then(|| value.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let (name, common, flags): (&str, &Common, Vec<(&str, Option<String>)>) = match &cli.command {
        Command::GenSynthetic { common, noise } => ("gen-synthetic", common, vec![("synthetic.noise", noise.clone())]),
        Command::Adapt { common, data, gamma, epochs } => (
            "adapt",
            common,
            vec![
                ("data", data.data.as_deref().map(path_str)),
                ("adapt.gamma", gamma.clone()),
                ("adapt.epochs", epochs.clone()),
            ],
        ),
        Command::Train {
            common,
            data,
            adapter,
            names,
            epochs,
            no_ema,
            no_xattn,
            no_dist,
            nonconsecutive,
        } => (
            "train",
            common,
            vec![
                ("data", data.data.as_deref().map(path_str)),
                ("adapter", adapter.as_deref().map(path_str)),
                ("names", names.as_deref().map(path_str)),
                ("train.epochs", epochs.clone()),
                ("ema.alpha", flag(*no_ema, "0")),
                ("ema.beta", flag(*no_ema || *no_xattn, "0")),
                ("train.distinctive", flag(*no_dist, "false")),
                ("train.consecutive", flag(*nonconsecutive, "false")),
            ],
        ),
        Command::Eval {
            common,
            data,
            model,
            generations,
        } => (
            "eval",
            common,
            vec![
                ("data", data.data.as_deref().map(path_str)),
                ("model", model.as_deref().map(path_str)),
                ("generations", generations.as_deref().map(path_str)),
            ],
        ),
        Command::Analyze { common, data, model } => (
            "analyze",
            common,
            vec![
                ("data", data.data.as_deref().map(path_str)),
                ("model", model.as_deref().map(path_str)),
            ],
        ),
        Command::Gradcheck { common, .. } => ("gradcheck", common, vec![]),
    };
    let cfg = build_config(common, &flags)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.usize("threads"))
        .build_global()?;
    let mut out = RunDir::start(&common.out, name, &cfg)?;
    match &cli.command {
        Command::GenSynthetic { .. } => commands::gen_synthetic_cmd(&cfg, &mut out)?,
        Command::Adapt { .. } => commands::adapt_cmd(&cfg, &mut out)?,
        Command::Train { .. } => commands::train_cmd(&cfg, &mut out)?,
        Command::Eval { .. } => commands::eval_cmd(&cfg, &mut out)?,
        Command::Analyze { .. } => commands::analyze_cmd(&cfg, &mut out)?,
        Command::Gradcheck { instances, .. } => commands::gradcheck_cmd(&cfg, &mut out, *instances)?,
    }
    out.finish()?;
    Ok(())
}

/// 2 config, 3 numerical, 4 I/O or format, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<commands::GradcheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::Shape(_) | Error::ContextOverflow { .. } => 2,
                Error::Numerical { .. } => 3,
                Error::Format { .. } | Error::Io { .. } => 4,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
