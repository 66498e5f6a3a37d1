//! Batch runner: parses a TOML run configuration, dispatches one experiment on
//! a fixed thread budget and writes long-format CSVs plus a JSON manifest.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

pub use config::{Experiment, RunConfig};
pub use output::{Report, RunManifest};

/// Runs the configured experiment and writes its artifacts into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.mc.threads).build()?;
    let start = Instant::now();
    log::info!("running {} with {} thread(s)", cfg.experiment.name(), cfg.mc.threads);
    let mut report = pool.install(|| experiments::run(cfg))?;
    let wall = start.elapsed().as_secs_f64();
    for s in &mut report.suites {
        s.wall_time_secs = wall;
    }
    let csv = report.tables.iter().map(|t| t.write(out)).collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        toolkit: "pathfield".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment.name().into(),
        pass: report.pass(),
        suites: report.suites,
        csv,
        wall_time_secs: wall,
        config: cfg.clone(),
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// `--out`, then `output.dir`, then `$PATHFIELD_OUT`, then `./out`.
pub fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig, env: Option<String>) -> PathBuf {
    flag.or_else(|| cfg.output.dir.clone().map(PathBuf::from)).or_else(|| env.map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}
