use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use gncprior::experiments::{init_threads_from_env, run, ExperimentSpec, THREADS_ENV};

/// Graduated non-convexity over smoothed energies: mixture analysis, prior
/// training, and image restoration. Every subcommand writes its artifacts to
/// `--out` and a `run.json` summary; the exit status is nonzero on any error
/// or flagged failure.
#[derive(Parser)]
#[command(name = "gncprior", version, after_help = "Worker threads: set GNCPRIOR_THREADS to a positive integer.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file with the experiment parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the parameters.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Convexity bound, numeric threshold, and energy curves of a mixture.
    GmmSweep(Common),
    /// Global-minimum attainment rate over a (t0, I) grid.
    GncRate(Common),
    /// Train a prior on a PGM corpus.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of training PGMs.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// 1D score recovery on a Gaussian mixture.
    ScoreRecovery(Common),
    /// Restore one image.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// JSON task: {"kind": "denoising", "sigma": ..} or {"kind": "inpainting", "missing": ..}.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// scheduled, joint or vn.
        #[arg(long)]
        method: Option<String>,
    },
    /// Learn a per-step schedule and compare it with the fixed and joint solvers.
    VnTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
    },
    /// Write every kernel as PGM and every activation as CSV.
    ExportParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run a complete experiment spec: {"name", "parameters", "output_dir"}.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn build(name: &str, common: Common, overrides: Vec<(&str, Option<Value>)>) -> anyhow::Result<ExperimentSpec> {
    let mut params = match &common.config {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    let Some(obj) = params.as_object_mut() else {
        bail!("the config must be a JSON object");
    };
    for (key, value) in overrides {
        if let Some(v) = value {
            obj.insert(key.to_string(), v);
        }
    }
    let mut spec = ExperimentSpec::new(name, params, common.out);
    spec.seed = common.seed;
    Ok(spec)
}

fn path_value(p: Option<PathBuf>) -> Option<Value> {
    p.map(|p| Value::String(p.to_string_lossy().into_owned()))
}

fn task_value(p: Option<PathBuf>) -> anyhow::Result<Option<Value>> {
    p.map(|p| read_json(&p)).transpose()
}

fn spec_of(command: Command) -> anyhow::Result<ExperimentSpec> {
    Ok(match command {
        Command::GmmSweep(c) => build("gmm-sweep", c, vec![])?,
        Command::GncRate(c) => build("gnc-rate", c, vec![])?,
        Command::Train { common, corpus } => build("train", common, vec![("corpus", path_value(corpus))])?,
        Command::ScoreRecovery(c) => build("score-recovery", c, vec![])?,
        Command::Solve { common, model, task, input, method } => build(
            "solve",
            common,
            vec![
                ("model", path_value(model)),
                ("task", task_value(task)?),
                ("input", path_value(input)),
                ("method", method.map(Value::String)),
            ],
        )?,
        Command::VnTrain { common, model, task } => {
            build("vn-train", common, vec![("model", path_value(model)), ("task", task_value(task)?)])?
        }
        Command::ExportParams { common, model } => build("export-params", common, vec![("model", path_value(model))])?,
        Command::Run { spec, out, seed } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut s = ExperimentSpec::from_json(&text).with_context(|| format!("parsing {}", spec.display()))?;
            if let Some(o) = out {
                s.output_dir = o;
            }
            if seed.is_some() {
                s.seed = seed;
            }
            s
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> anyhow::Result<bool> {
        init_threads_from_env().with_context(|| format!("reading {THREADS_ENV}"))?;
        let spec = spec_of(cli.command)?;
        let report = run(&spec).with_context(|| format!("experiment `{}` failed", spec.name))?;
        println!("{}", serde_json::to_string_pretty(&report.summary)?);
        for flag in &report.flags {
            eprintln!("flagged: {flag}");
        }
        Ok(report.is_clean())
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
