use std::path::PathBuf;

use clap::Args;
use larmoe_core::phaseworld::{generate_dataset, labels::sidecar_path, write_dataset_files};
use serde_json::json;

use crate::common::{ensure_dir, CliError};

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Number of demonstrations.
    #[arg(long, default_value_t = 120, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file; the phase-label sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: GenArgs) -> Result<serde_json::Value, CliError> {
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let (data, labels) = generate_dataset(args.count as usize, args.seed)?;
    write_dataset_files(&args.out, &data, &labels)?;
    eprintln!(
        "gen: {} demonstrations, {} steps -> {}",
        data.len(),
        data.total_steps(),
        args.out.display()
    );
    Ok(json!({
        "command": "gen",
        "episodes": data.len(),
        "steps": data.total_steps(),
        "mean_length": data.mean_length(),
        "dataset": args.out,
        "labels": sidecar_path(&args.out),
    }))
}
