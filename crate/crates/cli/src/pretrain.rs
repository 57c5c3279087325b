use std::path::PathBuf;

use clap::Args;
use larmoe_core::phaseworld::Dataset;
use larmoe_core::pretrain::{pretrain_loop, write_pretrain_csv};
use larmoe_core::trainer::TrainConfig;
use serde_json::json;

use crate::common::{ensure_dir, require_file, write, CliError, ConfigArgs};

pub const CHECKPOINT_FILE: &str = "pretrain.ckpt.json";

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: PretrainArgs) -> Result<serde_json::Value, CliError> {
    let cfg = args.config.resolve(TrainConfig::default())?;
    require_file(&args.data)?;
    let data = Dataset::load(&args.data)?;
    ensure_dir(&args.out)?;
    eprintln!(
        "pretrain: {} demonstrations, {} epochs, seed {}",
        data.len(),
        cfg.pretrain_epochs,
        cfg.seed
    );
    let outcome = pretrain_loop(&cfg, &data)?;
    for row in &outcome.log {
        eprintln!(
            "  epoch {:>3}  L_s {:.6}  L_t {:.6}",
            row.epoch, row.student_loss, row.teacher_loss
        );
    }
    let ckpt = args.out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt)?;
    write_pretrain_csv(&args.out.join("pretrain_log.csv"), &outcome.log)?;
    write(&args.out.join("config.json"), cfg.to_json())?;
    let last = outcome.log.last();
    Ok(json!({
        "command": "pretrain",
        "checkpoint": ckpt,
        "epochs": outcome.log.len(),
        "student_loss": last.map(|r| r.student_loss),
        "teacher_loss": last.map(|r| r.teacher_loss),
        "config_hash": cfg.config_hash(),
    }))
}
