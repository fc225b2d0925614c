//! `qpsde`: batch front-end. Every run writes `verdict.json`,
//! `manifest.json` and `effective_config.toml` into the output directory.
//! Exit status: 0 when every check passes, 1 when some check fails, 2 when
//! the run could not be carried out.

mod config;
mod output;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use serde_json::Value;

use config::ExperimentConfig;
use output::{sha256_hex, Artifacts, Manifest, Verdict, Versions, VERDICT_SCHEMA_VERSION};
use tasks::{TaskContext, TaskRegistry};

const BUNDLED_CONFIG: &str = include_str!("../configs/ou_default.toml");

#[derive(Parser, Debug)]
#[command(name = "qpsde", version, about = "Quasi-periodic SDE experiments")]
struct Cli {
    /// validate | simulate | pullback | measure | lift | fokker-planck | oracle | acceptance
    task: String,
    /// Experiment config (TOML); the bundled O-U experiment when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set run.seed=7`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Acceptance criteria to run, e.g. `--only 1,9`.
    #[arg(long, value_delimiter = ',')]
    only: Vec<u32>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let registry = TaskRegistry::standard();
    let Some(task) = registry.get(&cli.task) else {
        let names: Vec<_> = registry.iter().map(|t| format!("  {:<14} {}", t.name(), t.about())).collect();
        eprintln!("unknown task `{}`; available:\n{}", cli.task, names.join("\n"));
        return ExitCode::from(2);
    };

    let loaded = load(&cli);
    let out_dir = match (&cli.out, &loaded) {
        (Some(o), _) => o.clone(),
        (None, Ok((cfg, _))) => cfg.run.output_dir.clone(),
        (None, Err(_)) => config::RunConfig::default().output_dir,
    };
    let mut artifacts = match Artifacts::create(&out_dir) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let outcome = loaded.and_then(|(cfg, text)| execute(task.as_ref(), &cfg, &text, &mut artifacts).map(|o| (o, cfg)));
    let verdict = match &outcome {
        Ok((o, _)) => Verdict::new(task.name(), o.checks.clone(), o.details.clone(), None),
        Err(e) => Verdict::new(task.name(), Vec::new(), Value::Null, Some(format!("{e:#}"))),
    };
    if let Err(e) = artifacts.json("verdict.json", &verdict) {
        eprintln!("error: could not write verdict: {e:#}");
        return ExitCode::from(2);
    }
    for c in &verdict.checks {
        println!("{} {} = {:.6e} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.value, c.bound);
    }
    match (&outcome, verdict.passed) {
        (Err(e), _) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        (Ok(_), true) => {
            println!("PASS {} ({} checks)", task.name(), verdict.checks.len());
            ExitCode::SUCCESS
        }
        (Ok(_), false) => {
            println!("FAIL {}", task.name());
            ExitCode::from(1)
        }
    }
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, String)> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => BUNDLED_CONFIG.to_string(),
    };
    let mut cfg = ExperimentConfig::load(&text, &cli.overrides)?;
    if !cli.only.is_empty() {
        cfg.acceptance.criteria = cli.only.clone();
    }
    if !(cfg.run.dt > 0.0 && cfg.run.dt.is_finite()) {
        return Err(anyhow!("config error at `run.dt`: must be positive, got {}", cfg.run.dt));
    }
    Ok((cfg, text))
}

fn execute(task: &dyn tasks::Task, cfg: &ExperimentConfig, text: &str, artifacts: &mut Artifacts) -> Result<tasks::TaskOutcome> {
    let threads = if cfg.run.threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.run.threads
    };
    // the global pool can only be built once per process; later calls keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();

    let coefficients = cfg.coefficients(text)?;
    let effective = cfg.effective_toml();
    artifacts.text("effective_config.toml", &effective)?;
    let outcome = task.run(&mut TaskContext {
        config: cfg,
        coefficients: &coefficients,
        out: artifacts,
    })?;
    artifacts.record("verdict.json");
    artifacts.record("manifest.json");
    let manifest = Manifest {
        schema_version: VERDICT_SCHEMA_VERSION,
        task: task.name().to_string(),
        config_sha256: sha256_hex(effective.as_bytes()),
        seed_range: outcome.seed_range,
        threads,
        versions: Versions::current(),
        files: artifacts.files().to_vec(),
    };
    artifacts.json("manifest.json", &manifest)?;
    Ok(outcome)
}
