use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use repsgg_core::CoreError;
use repsgg_harness::config::RunConfig;
use repsgg_harness::dataset::{generate_dataset, DatasetSpec, Split};
use repsgg_harness::evaluate::{evaluate, write_metrics, EvalOptions};
use repsgg_harness::inspect::{filter_trace, sample_points, write_points, PointOptions};
use repsgg_harness::train::{train, PGLA_TRACE_FILE};
use repsgg_harness::HarnessError;

#[derive(Parser)]
#[command(name = "repsgg", version, about = "Relationship decoder with rep-point sampling and logit adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train.json, test.json).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.bin, train_log.csv and pgla_trace.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        k: Vec<usize>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Keep only the best predicate of each pair before ranking.
        #[arg(long)]
        graph_constraint: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print (a filtered view of) the PGLA trace of a training run.
    TracePgla {
        /// Training output directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        predicate: Option<usize>,
        /// Keep every n-th logged iteration.
        #[arg(long, default_value_t = 1)]
        every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the rep-points sampled for one scene as CSV.
    SamplePoints {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Draw this many training-mode points per group instead of the grid.
        #[arg(long)]
        train_draws: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split '{s}' (expected train or test)"))
}

enum Failure {
    Usage(String),
    Runtime(HarnessError),
}

/// Malformed or invalid configs count as usage errors; I/O, data and
/// numerical failures are runtime errors.
impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_)
            | HarnessError::Generation(_)
            | HarnessError::Json { .. }
            | HarnessError::Core(CoreError::Config(_)) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, HarnessError> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).map_err(|e| HarnessError::io(p, e))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| HarnessError::io(&spec, e))?;
            let spec: DatasetSpec = serde_json::from_str(&text).map_err(|e| HarnessError::json(&spec, e))?;
            let data = generate_dataset(&spec)?;
            data.write(&out)?;
            info!(
                "wrote {} train and {} test scenes to {}",
                data.train.scenes.len(),
                data.test.scenes.len(),
                out.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let res = train(&cfg, &out)?;
            info!("final loss {:.6}; checkpoint {}", res.final_loss.total, res.checkpoint.display());
        }
        Command::Eval { checkpoint, data, k, split, graph_constraint, out } => {
            if k.is_empty() || k.contains(&0) {
                return Err(Failure::Usage("--k values must be positive integers".into()));
            }
            let rows = evaluate(&checkpoint, &data, &EvalOptions { split, ks: k, graph_constraint })?;
            write_metrics(&rows, output(out.as_deref())?)?;
        }
        Command::TracePgla { run, predicate, every, out } => {
            if every == 0 {
                return Err(Failure::Usage("--every must be >= 1".into()));
            }
            let path = run.join(PGLA_TRACE_FILE);
            let f = File::open(&path).map_err(|e| HarnessError::io(&path, e))?;
            filter_trace(f, output(out.as_deref())?, predicate, every)?;
        }
        Command::SamplePoints { checkpoint, data, split, scene, train_draws, seed, out } => {
            if train_draws == Some(0) {
                return Err(Failure::Usage("--train-draws must be >= 1".into()));
            }
            let rows = sample_points(&checkpoint, &data, &PointOptions { split, scene, train_draws, seed })?;
            write_points(&rows, output(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
