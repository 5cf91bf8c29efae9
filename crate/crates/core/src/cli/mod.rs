//! Command-line front end: experiment configs, task dispatch and every
//! artifact a run writes (JSONL corpora, CSV tables, JSON manifests).

mod config;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{
    BenchConfig, BtTaskConfig, DataConfig, ExperimentConfig, LatticeCaps, ModelSizes, PathsConfig,
    RegularizerConfig, ScheduleConfig, Task, VrsTaskConfig,
};
pub use run::{
    align, align_files, categorical_estimators, eval, format_alignment, gaussian_estimators, run, split_seed,
    synth_splits, AlignReport, AlignedExample, RunOutcome, SPLITS,
};

use crate::Error;

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status when a task fails or one of its checks does not hold.
pub const EXIT_TASK: i32 = 1;
/// Exit status for unusable configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "latentseq", version = crate::VERSION, about = "Latent-variable sequence models at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON on standard output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/dev/test JSONL corpora.
    SynthData,
    /// Run the config's task.
    Train {
        /// Task to run when no config is given.
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
    },
    /// Score a segmental checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimator bench on the shipped toys.
    Bench,
    /// Brute-force equivalence suites for the lattices.
    LatticeCheck,
    /// Decode inputs and print per-segment, per-token alignments.
    Align {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL corpus whose records are decoded.
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown task {s:?}"))
}

fn resolve(global: &GlobalArgs, task: Option<Task>) -> crate::Result<ExperimentConfig> {
    let mut cfg = match (&global.config, task, global.seed) {
        (Some(p), _, _) => ExperimentConfig::load(p)?,
        (None, Some(t), Some(seed)) => ExperimentConfig::new(t, seed),
        (None, None, _) => return Err(Error::Config("train needs --config or --task".into())),
        (None, Some(_), None) => return Err(Error::Config("the seed is mandatory: pass --seed or a config".into())),
    };
    if let Some(t) = task {
        cfg.task = t;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{name}-seed{}", cfg.seed)))
}

/// Short machine-readable name of an error variant.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::NonFinite(_) => "non-finite",
        Error::MissingOracle(_) => "missing-oracle",
        Error::UndefinedPosterior(_) => "undefined-posterior",
        Error::DecodeFailure(_) => "decode-failure",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn exit_code(e: &Error) -> i32 {
    if matches!(e, Error::Config(_)) {
        EXIT_CONFIG
    } else {
        EXIT_TASK
    }
}

fn report(outcome: &RunOutcome, as_json: bool) {
    if as_json {
        println!("{}", json!({ "task": outcome.task, "passed": outcome.passed, "files": outcome.files, "summary": outcome.summary }));
    } else {
        println!("{} {}", outcome.task, if outcome.passed { "ok" } else { "FAILED" });
        if let Some(rows) = outcome.summary.as_array() {
            for r in rows {
                println!("  {r}");
            }
        } else {
            println!("  {}", outcome.summary);
        }
    }
}

fn dispatch(cli: Cli) -> crate::Result<i32> {
    let g = &cli.global;
    let outcome = match cli.command {
        Command::SynthData => {
            let cfg = resolve(g, Some(Task::Segmodel))?;
            synth_splits(&cfg, &out_dir(g, &cfg, "synth-data"))?
        }
        Command::Train { task } => {
            let cfg = resolve(g, task)?;
            run(&cfg, &out_dir(g, &cfg, cfg.task.name()))?
        }
        Command::Bench => {
            let cfg = resolve(g, Some(Task::EstimatorBench))?;
            run(&cfg, &out_dir(g, &cfg, "estimator-bench"))?
        }
        Command::LatticeCheck => {
            let cfg = resolve(g, Some(Task::LatticeCheck))?;
            run(&cfg, &out_dir(g, &cfg, "lattice-check"))?
        }
        Command::Eval { checkpoint } => {
            let cfg = resolve(g, Some(Task::Segmodel))?;
            eval(&cfg, checkpoint.as_deref(), &out_dir(g, &cfg, "eval"))?
        }
        Command::Align { checkpoint, input } => {
            let cfg = align_config(g)?;
            let rep = align_files(&cfg, checkpoint.as_deref(), &input, g.out.as_deref())?;
            if g.json {
                println!("{}", serde_json::to_string(&rep)?);
            } else {
                print!("{}", format_alignment(&rep, cfg.lattice.top_k));
            }
            return Ok(EXIT_OK);
        }
    };
    report(&outcome, g.json);
    Ok(if outcome.passed { EXIT_OK } else { EXIT_TASK })
}

/// Align only decodes, so it runs without a seed when no config is given.
fn align_config(g: &GlobalArgs) -> crate::Result<ExperimentConfig> {
    match &g.config {
        Some(_) => resolve(g, Some(Task::Segmodel)),
        None => Ok(ExperimentConfig::new(Task::Segmodel, g.seed.unwrap_or(0))),
    }
}

/// Parses `args`, runs the command and returns the process exit status.
/// Errors are printed to standard error as one JSON object.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("{}", json!({ "error": "config", "message": "--threads must be positive" }));
            return EXIT_CONFIG;
        }
        // fails only if a pool was already installed in this process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": e.to_string() }));
            exit_code(&e)
        }
    }
}
