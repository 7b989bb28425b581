use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wsol::pipeline::{self, MapSource, RunConfig};
use wsol::synth::{self, SynthSpec};
use wsol::{Error, ErrorCategory};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid configuration or arguments
  3  missing input file
  4  computation or I/O error";

/// Weakly-supervised object localization toolkit.
#[derive(Parser, Debug)]
#[command(name = "wsol", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (images, attention stacks, ground truth, run config).
    #[command(after_help = EXIT_CODES)]
    Synth(Common),
    /// Train the tiny reference classifier on the dataset images.
    #[command(after_help = EXIT_CODES)]
    TrainScorer(Common),
    /// Mine discriminative proposal pools from the attention stacks.
    #[command(after_help = EXIT_CODES)]
    Harvest(Common),
    /// Optimize one localization map per image from its proposal pool.
    #[command(after_help = EXIT_CODES)]
    Optimize(Common),
    /// Score localization maps against the ground truth.
    #[command(after_help = EXIT_CODES)]
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Maps to score; overrides the config.
        #[arg(long, value_enum)]
        map_source: Option<SourceArg>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config: a synthesis spec for `synth`, a run config otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Optimized,
    Attention,
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
}

fn run_config(c: &Common) -> wsol::Result<RunConfig> {
    let path = c
        .config
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output = absolute(out);
    }
    Ok(cfg)
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn run(command: &Command) -> wsol::Result<Value> {
    match command {
        Command::Synth(c) => {
            let mut spec = match &c.config {
                Some(p) => wsol::imaging::io::read_json::<SynthSpec>(p)
                    .map_err(|e| match e {
                        Error::Parse { msg, .. } => Error::InvalidConfig(msg),
                        other => other,
                    })?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = c.seed {
                spec.seed = seed;
            }
            let out = absolute(c.out.as_deref().unwrap_or(Path::new("data")));
            let manifest = synth::synth_generate(&spec, &out)?;
            Ok(json!({"dataset": out.join("manifest.json"), "num_images": manifest.images.len()}))
        }
        Command::TrainScorer(c) => Ok(to_value(&pipeline::train_scorer(&run_config(c)?)?)),
        Command::Harvest(c) => Ok(to_value(&pipeline::harvest(&run_config(c)?)?)),
        Command::Optimize(c) => Ok(to_value(&pipeline::optimize(&run_config(c)?)?)),
        Command::Evaluate { common, map_source } => {
            let mut cfg = run_config(common)?;
            match map_source {
                Some(SourceArg::Optimized) => cfg.map_source = MapSource::Optimized,
                Some(SourceArg::Attention) => cfg.map_source = MapSource::Attention,
                None => {}
            }
            Ok(to_value(&pipeline::evaluate(&cfg)?))
        }
    }
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::Synth(_) => "synth",
        Command::TrainScorer(_) => "train-scorer",
        Command::Harvest(_) => "harvest",
        Command::Optimize(_) => "optimize",
        Command::Evaluate { .. } => "evaluate",
    }
}

fn jobs(command: &Command) -> usize {
    match command {
        Command::Synth(c) | Command::TrainScorer(c) | Command::Harvest(c) | Command::Optimize(c) => c.jobs,
        Command::Evaluate { common, .. } => common.jobs,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = name(&cli.command);
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs(&cli.command))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
        .and_then(|pool| pool.install(|| run(&cli.command)));
    match result {
        Ok(summary) => {
            println!("{}", json!({"command": command, "status": "ok", "summary": summary}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e.category();
            log::error!("{command}: {e}");
            let label = match category {
                ErrorCategory::Config => "config",
                ErrorCategory::MissingInput => "missing_input",
                ErrorCategory::Computation => "computation",
            };
            println!("{}", json!({"command": command, "status": "error", "category": label, "message": e.to_string()}));
            ExitCode::from(category.exit_code())
        }
    }
}
