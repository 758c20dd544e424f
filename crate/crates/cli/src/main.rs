use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcl::config::{parse_set, RunConfig};
use dcl::par;
use dcl::pipeline::{run, Command};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "dcl",
    version,
    about = "GAN features + multi-head information-maximizing clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the generator/discriminator pair and save a checkpoint.
    TrainGan(Common),
    /// Extract discriminator features (plain and with dropout).
    Extract(Common),
    /// Train the cluster bank on stored features.
    Cluster(Common),
    /// Score stored assignments against stored labels.
    Evaluate(Common),
    /// Run every phase end to end.
    Pipeline(Common),
    /// Write a synthetic dataset.
    SynthData(Common),
    /// Finite-difference check of every gradient.
    GradCheck(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
}

fn error_record(kind: &str, message: &str) {
    let line = json!({ "error": { "kind": kind, "message": message.replace('\n', " ") } });
    eprintln!("{line}");
}

fn execute(cmd: Command, common: Common) -> dcl::Result<serde_json::Value> {
    let mut cli = common
        .set
        .iter()
        .map(|s| parse_set(s))
        .collect::<dcl::Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        cli.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = common.out {
        cli.push(("out".into(), out.display().to_string()));
    }
    let cfg = RunConfig::load(common.config.as_deref(), &cli)?;
    run(cmd, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            error_record("usage", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let threads = match par::threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            error_record(e.kind(), &e.to_string());
            return ExitCode::from(2);
        }
    };
    let (cmd, common) = match cli.command {
        Cmd::TrainGan(c) => (Command::TrainGan, c),
        Cmd::Extract(c) => (Command::Extract, c),
        Cmd::Cluster(c) => (Command::Cluster, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::Pipeline(c) => (Command::Pipeline, c),
        Cmd::SynthData(c) => (Command::SynthData, c),
        Cmd::GradCheck(c) => (Command::GradCheck, c),
    };
    log::debug!(
        "{} with {threads} thread(s), parallel build: {}",
        cmd.name(),
        par::is_parallel()
    );
    match par::with_threads(threads, || execute(cmd, common)) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            error_record(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}
