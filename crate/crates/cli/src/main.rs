//! `xmutest`: run the explainable hate-speech pipeline phase by phase.
//!
//! Each subcommand reads a flat TOML config (`--config`), applies flag and
//! `--set key=value` overrides, and writes its artifacts plus a
//! `<command>.manifest.json` into `output_dir`. A failed run leaves a
//! `<command>.FAILED` marker there instead.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, ExplainArgs, FuseArgs, IngestArgs, OutArgs, SweepArgs};
use config::{parse_override, RunConfig};
use failure::Failure;
use manifest::{failed_marker, Run};

#[derive(Debug, Parser)]
#[command(name = "xmutest", version, about = "Explainable hate-speech detection pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    language: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override any config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    set: Vec<(String, String)>,
    /// Worker threads for per-sample parallelism (default: all cores).
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus (or generate a synthetic one) and write it canonically.
    Ingest(IngestArgs),
    /// Token-level inter-annotator agreement.
    Agree(OutArgs),
    /// Two-stage training; writes a checkpoint and the loss trace.
    Train(OutArgs),
    /// N-gram explanation scores for each sample of a split.
    Explain(ExplainArgs),
    /// Union of n-gram and LLM explanations.
    Fuse(FuseArgs),
    /// Classification, plausibility and faithfulness metrics.
    Eval(EvalArgs),
    /// Re-run stage 2 from one stage-1 model for each alpha.
    AlphaSweep(SweepArgs),
    /// Train with each combination of supervised stages.
    Ablate(OutArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Agree(_) => "agree",
            Command::Train(_) => "train",
            Command::Explain(_) => "explain",
            Command::Fuse(_) => "fuse",
            Command::Eval(_) => "eval",
            Command::AlphaSweep(_) => "alpha-sweep",
            Command::Ablate(_) => "ablate",
        }
    }
}

fn overrides(common: &Common) -> Vec<(String, String)> {
    let quote = |s: &str| toml::Value::String(s.to_string()).to_string();
    let mut out = Vec::new();
    if let Some(p) = &common.corpus {
        out.push(("corpus".into(), quote(&p.to_string_lossy())));
    }
    if let Some(l) = &common.language {
        out.push(("language".into(), quote(l)));
    }
    if let Some(s) = common.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(p) = &common.output_dir {
        out.push(("output_dir".into(), quote(&p.to_string_lossy())));
    }
    out.extend(common.set.iter().cloned());
    out
}

fn dispatch(run: &mut Run, command: &Command) -> Result<(), Failure> {
    match command {
        Command::Ingest(a) => commands::ingest(run, a),
        Command::Agree(a) => commands::agree(run, a),
        Command::Train(a) => commands::train(run, a),
        Command::Explain(a) => commands::explain(run, a),
        Command::Fuse(a) => commands::fuse(run, a),
        Command::Eval(a) => commands::eval(run, a),
        Command::AlphaSweep(a) => commands::sweep(run, a),
        Command::Ablate(a) => commands::ablation(run, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    if let Some(jobs) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }

    // Flags are applied after the file and `--set` after named flags, so the
    // most specific setting wins.
    let cfg = match RunConfig::load(cli.common.config.as_deref(), &overrides(&cli.common)) {
        Ok(cfg) => cfg,
        Err(f) => return report(f, None, cli.command.name()),
    };
    let output_dir = cfg.output_dir.clone();
    let mut run = Run::new(cli.command.name(), cfg);
    match dispatch(&mut run, &cli.command).and_then(|()| run.finish()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f, Some(&output_dir), cli.command.name()),
    }
}

fn report(f: Failure, output_dir: Option<&std::path::Path>, command: &str) -> ExitCode {
    eprintln!("error: {f}");
    if let Some(dir) = output_dir {
        let marker = failed_marker(dir, command);
        let written = std::fs::create_dir_all(dir).and_then(|()| std::fs::write(&marker, format!("{f}\n")));
        if let Err(e) = written {
            eprintln!("could not write {}: {e}", marker.display());
        }
    }
    ExitCode::from(f.kind.exit_code())
}
