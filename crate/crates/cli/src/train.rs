use std::path::PathBuf;

use clap::Args;
use larmoe_core::phaseworld::Dataset;
use larmoe_core::trainer::{write_posttrain_csv, Checkpoint, PosttrainTrainer, Stage};
use serde_json::json;

use crate::common::{ensure_dir, require_file, write, CliError, ConfigArgs};

pub const CHECKPOINT_FILE: &str = "posttrain.ckpt.json";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Without `--config`, stage 2 reuses the configuration stored in the
    /// pretrain checkpoint; `--set` applies on top either way.
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: TrainArgs) -> Result<serde_json::Value, CliError> {
    require_file(&args.from)?;
    let pretrained = Checkpoint::load(&args.from)?;
    pretrained.require_stage(Stage::Pretrain)?;
    let cfg = args.config.resolve(pretrained.config.clone())?;
    require_file(&args.data)?;
    let data = Dataset::load(&args.data)?;
    ensure_dir(&args.out)?;
    eprintln!(
        "train: N={} F={} R={} seed {}, {} epochs",
        cfg.num_experts,
        sign(cfg.freeze_student),
        sign(cfg.regularize),
        cfg.seed,
        cfg.posttrain_epochs
    );
    let mut trainer = PosttrainTrainer::from_pretrain(&cfg, &pretrained)?;
    for _ in 0..cfg.posttrain_epochs {
        let log = trainer.run_epochs(&data, 1)?;
        let r = log.last().expect("one epoch logged");
        eprintln!(
            "  epoch {:>3}  total {:.6}  mse {:.6}  dc {:.6}  H {:.4}  T {:.3}",
            r.epoch, r.total, r.mse, r.distance_consistency, r.mean_entropy, r.temperature
        );
    }
    let ckpt = args.out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ckpt)?;
    write_posttrain_csv(&args.out.join("posttrain_log.csv"), trainer.log())?;
    write(&args.out.join("config.json"), cfg.to_json())?;
    let last = trainer.log().last();
    Ok(json!({
        "command": "train",
        "checkpoint": ckpt,
        "epochs": trainer.epochs_completed(),
        "total": last.map(|r| r.total),
        "mse": last.map(|r| r.mse),
        "distance_consistency": last.map(|r| r.distance_consistency),
        "entropy": last.map(|r| r.entropy),
        "group_sparse": last.map(|r| r.group_sparse),
        "temperature": last.map(|r| r.temperature),
        "config_hash": cfg.config_hash(),
    }))
}

fn sign(b: bool) -> char {
    if b {
        '+'
    } else {
        '-'
    }
}
