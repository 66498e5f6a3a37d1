use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use pathfield_cli::{output_dir, run, Experiment, RunConfig};

/// Functional Itô calculus and master-equation experiments.
#[derive(Parser, Debug)]
#[command(name = "pathfield", version)]
struct Cli {
    /// Experiment to run; overrides `experiment` in the config.
    #[arg(value_enum)]
    experiment: Experiment,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; falls back to `output.dir`, then PATHFIELD_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `mc.threads`.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match try_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn try_main() -> Result<bool> {
    let cli = Cli::parse();
    let text = std::fs::read_to_string(&cli.config).with_context(|| format!("reading {}", cli.config.display()))?;
    let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", cli.config.display()))?;
    cfg.experiment = cli.experiment;
    if let Some(s) = cli.seed {
        cfg.mc.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.mc.threads = t;
    }
    let out = output_dir(cli.out, &cfg, std::env::var("PATHFIELD_OUT").ok());
    let manifest = run(&cfg, &out)?;
    for s in &manifest.suites {
        println!("{} {}", if s.pass { "PASS" } else { "FAIL" }, s.name);
    }
    println!("wrote {} to {}", manifest.csv.join(", "), out.display());
    Ok(manifest.pass)
}
