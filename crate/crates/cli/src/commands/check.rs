use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;
use facecap_core::gradcheck::{run_gradcheck, GradcheckConfig};

use crate::config::{pick, write_json, CommonArgs, RunConfig};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random instances per gradient site.
    #[arg(long)]
    instances: Option<usize>,
    /// Override every site's tolerance on the relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let config = RunConfig::load(a.common.config.as_deref())?;
    let defaults = GradcheckConfig::default();
    let check = GradcheckConfig {
        seed: pick(a.common.seed, config.seed, defaults.seed),
        instances_per_site: pick(a.instances, config.instances, defaults.instances_per_site),
        tolerance: a.tolerance.or(config.tolerance),
        ..defaults
    };
    let report = run_gradcheck(&check)?;
    match &a.out {
        Some(path) => write_json(&report, path)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    for s in report.sites.iter().filter(|s| !s.passed) {
        eprintln!("FAIL {}: max relative error {:.3e} (tolerance {:.1e})", s.site, s.max_rel_error, s.tolerance);
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
