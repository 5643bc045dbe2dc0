use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pssf_core::cli_io::{Pipeline, RunConfig, Stage};
use pssf_core::par;

#[derive(Parser)]
#[command(name = "pssf", version, about = "Synthetic knee radiographs, radiomic features and protocol-robustness analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the cohort manifest and render its radiographs.
    Simulate(Common),
    /// Extract the radiomic feature matrix.
    Extract(Common),
    /// Split subjects and train models for every task and family.
    Train(Common),
    /// Evaluate the trained models on every scenario.
    Evaluate(Common),
    /// Render repeat acquisitions and compute feature ICCs.
    Stability(Common),
    /// Run every stage in order, skipping completed ones.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "full"])]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, env = "PSSF_OUT")]
    out: Option<PathBuf>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn pipeline(c: &Common) -> Result<Pipeline, String> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(p) = &c.profile {
        cfg.profile = p.clone();
    }
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    if c.jobs == Some(0) {
        return Err("--jobs must be at least 1".into());
    }
    let out = cfg.output_dir.clone().ok_or("no output directory: pass --out, set PSSF_OUT or output_dir in the config")?;
    let resolved = cfg.resolve().map_err(|e| e.to_string())?;
    Ok(Pipeline::new(resolved, out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, stages): (&Common, &[Stage]) = match &cli.command {
        Command::Simulate(c) => (c, &[Stage::Simulate]),
        Command::Extract(c) => (c, &[Stage::Extract]),
        Command::Train(c) => (c, &[Stage::Train]),
        Command::Evaluate(c) => (c, &[Stage::Evaluate]),
        Command::Stability(c) => (c, &[Stage::Stability]),
        Command::Pipeline(c) => (c, &Stage::ALL),
    };
    let p = match pipeline(common) {
        Ok(p) => p,
        Err(e) => {
            log::error!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    par::with_jobs(common.jobs, || {
        for &s in stages {
            match p.run(s) {
                Ok(o) if o.skipped => log::info!("{}: skipped", s.as_str()),
                Ok(_) => log::info!("{}: done", s.as_str()),
                Err(e) => {
                    log::error!("{e}");
                    for r in &e.records {
                        log::error!("  {r}");
                    }
                    return ExitCode::from(EXIT_STAGE);
                }
            }
        }
        ExitCode::SUCCESS
    })
}
