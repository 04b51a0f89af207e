//! `mcoem`: fit, evaluate and inspect mixtures of deformable templates.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use mcoem_core::io::{Checkpoint, RunConfig};
use mcoem_core::{Error, Result};

use commands::Context;
use manifest::{artifact_hashes, hash_tree, now_unix, write_pretty, ErrorRecord, Manifest, ERROR_FILE, MANIFEST_FILE};

#[derive(Parser)]
#[command(name = "mcoem", version, about = "Mixtures of deformable templates by Monte Carlo online EM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Online fit with checkpoints.
    Fit(Common),
    /// Batch SAEM baseline.
    FitBatch(Common),
    /// Synthetic data from a known model.
    Generate(Common),
    /// Test-set error rate along a parameter trajectory.
    Classify(Common),
    /// Templates of a checkpoint as CSV or graymaps.
    Render(Common),
    /// Sampler diagnostics on training observations.
    Diag(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::FitBatch(_) => "fit-batch",
            Command::Generate(_) => "generate",
            Command::Classify(_) => "classify",
            Command::Render(_) => "render",
            Command::Diag(_) => "diag",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit(c)
            | Command::FitBatch(c)
            | Command::Generate(c)
            | Command::Classify(c)
            | Command::Render(c)
            | Command::Diag(c) => c,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the one stored in --resume.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from (classify also takes a trajectory.jsonl).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Wall-clock budget for fit and fit-batch.
    #[arg(long = "budget-seconds")]
    budget_seconds: Option<f64>,
    /// Post-burn-in samples per (observation, component) when classifying.
    #[arg(long = "mc-budget")]
    mc_budget: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, default_value = "warn")]
    log_level: LevelFilter,
}

fn resolve(common: &Common) -> Result<(Context, Option<PathBuf>)> {
    let mut inputs = Vec::new();
    let mut config = match (&common.config, &common.resume) {
        (Some(p), _) => {
            inputs.push(p.clone());
            RunConfig::load(p)?
        }
        (None, Some(r)) if r.extension().is_none_or(|e| e != "jsonl") => Checkpoint::load(r)?.config,
        _ => {
            return Err(Error::Config {
                path: String::new(),
                message: "--config is required".into(),
            })
        }
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    config.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::Config {
            path: "output_dir".into(),
            message: "no output directory: pass --out or set output_dir".into(),
        })?;
    let budget = match common.budget_seconds {
        Some(b) if !(b.is_finite() && b >= 0.0) => {
            return Err(Error::InvalidParameter("--budget-seconds must be a nonnegative number".into()))
        }
        Some(b) => Some(Duration::from_secs_f64(b)),
        None => None,
    };
    if common.mc_budget == Some(0) {
        return Err(Error::InvalidParameter("--mc-budget must be at least 1".into()));
    }
    let config_path = common.config.clone();
    Ok((
        Context {
            config,
            out,
            resume: common.resume.clone(),
            budget,
            mc_budget: common.mc_budget,
            inputs,
            artifacts: Vec::new(),
        },
        config_path,
    ))
}

fn execute(command: &Command, ctx: &mut Context) -> Result<()> {
    let started = now_unix();
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::Io {
        path: ctx.out.clone(),
        source: e,
    })?;
    let _ = std::fs::remove_file(ctx.out.join(ERROR_FILE));
    let resolved = ctx.out.join("config.toml");
    std::fs::write(&resolved, ctx.config.to_toml_string()?).map_err(|e| Error::Io {
        path: resolved.clone(),
        source: e,
    })?;
    ctx.artifacts.push(resolved);
    match command {
        Command::Fit(_) => commands::fit(ctx)?,
        Command::FitBatch(_) => commands::fit_batch(ctx)?,
        Command::Generate(_) => commands::generate(ctx)?,
        Command::Classify(_) => commands::classify_cmd(ctx)?,
        Command::Render(_) => commands::render(ctx)?,
        Command::Diag(_) => commands::diag(ctx)?,
    }
    let mut inputs = Vec::new();
    for p in &ctx.inputs {
        inputs.extend(hash_tree(p)?);
    }
    let manifest = Manifest {
        tool: "mcoem",
        version: env!("CARGO_PKG_VERSION"),
        command: command.name().to_string(),
        seed: ctx.config.seed,
        started_unix_secs: started,
        finished_unix_secs: now_unix(),
        inputs,
        artifacts: artifact_hashes(&ctx.out, &ctx.artifacts)?,
    };
    write_pretty(&ctx.out.join(MANIFEST_FILE), &manifest)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn fail(command: &str, out: Option<&PathBuf>, e: &Error) -> ExitCode {
    let record = ErrorRecord::from_error(command, e);
    if let Ok(line) = serde_json::to_string(&record) {
        eprintln!("{line}");
    }
    if let Some(out) = out {
        if std::fs::create_dir_all(out).is_ok() {
            let _ = write_pretty(&out.join(ERROR_FILE), &record);
        }
    }
    ExitCode::from(exit_code(e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "command": "",
                "kind": "usage",
                "message": e.to_string().trim(),
            });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    let common = cli.command.common().clone();
    env_logger::Builder::new()
        .filter_level(common.log_level)
        .format_timestamp(None)
        .init();
    let name = cli.command.name();
    let (mut ctx, _) = match resolve(&common) {
        Ok(c) => c,
        Err(e) => return fail(name, common.out.as_ref(), &e),
    };
    match execute(&cli.command, &mut ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(name, Some(&ctx.out), &e),
    }
}
