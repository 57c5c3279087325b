use std::path::PathBuf;

use clap::Args;
use larmoe_core::eval::{
    demo_alignment, evaluate, spatial_assignment_grid, EvalProtocol, RolloutConfig,
    DEFAULT_EVAL_SEED,
};
use larmoe_core::phaseworld::labels::{read_phase_labels, sidecar_path};
use larmoe_core::phaseworld::Dataset;
use larmoe_core::trainer::Checkpoint;
use serde_json::json;

use crate::common::{ensure_dir, require_file, write, CliError};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out tasks scored for success.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub tasks: u64,
    /// Seed of the held-out task stream.
    #[arg(long, alias = "seeds", default_value_t = DEFAULT_EVAL_SEED)]
    pub seed: u64,
    /// Leading rollouts compared with annotated phases.
    #[arg(long, default_value_t = 20)]
    pub alignment: usize,
    /// Leading rollouts aggregated into the spatial expert grid.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub grid_rollouts: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub grid_resolution: u64,
    /// Actions executed per predicted chunk.
    #[arg(long, default_value_t = 1)]
    pub execute: usize,
    /// Optional dataset; with its sidecar, also scores routing on the demonstrations.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: EvalArgs) -> Result<serde_json::Value, CliError> {
    require_file(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let policy = ckpt.policy()?;
    let protocol = EvalProtocol {
        eval_seed: args.seed,
        success_tasks: args.tasks as usize,
        alignment_rollouts: args.alignment,
        rollout: RolloutConfig {
            execute: args.execute,
            ..RolloutConfig::default()
        },
    };
    let episodes = args.out.join("episodes");
    let heatmaps = args.out.join("heatmaps");
    ensure_dir(&episodes)?;
    ensure_dir(&heatmaps)?;

    eprintln!(
        "eval: {} tasks from stream {}",
        protocol.success_tasks, protocol.eval_seed
    );
    let (logs, summary) = evaluate(policy, &protocol)?;
    for (i, log) in logs.iter().enumerate() {
        write(
            &episodes.join(format!("episode_{i:03}.json")),
            log.to_json(),
        )?;
        if i < protocol.alignment_rollouts {
            write(
                &heatmaps.join(format!("episode_{i:03}.csv")),
                log.heatmap_csv(),
            )?;
        }
    }
    let grid_logs = &logs[..(args.grid_rollouts as usize).min(logs.len())];
    let grid = spatial_assignment_grid(grid_logs, args.grid_resolution as usize)?;
    write(&args.out.join("grid.csv"), grid.to_csv())?;

    let mut demo_nmi = None;
    if let Some(data_path) = &args.data {
        require_file(data_path)?;
        let data = Dataset::load(data_path)?;
        let labels = read_phase_labels(&sidecar_path(data_path))?;
        let reports = demo_alignment(policy, &data, &labels)?;
        let mean = reports.iter().map(|r| r.nmi).sum::<f64>() / reports.len().max(1) as f64;
        write(
            &args.out.join("demo_alignment.json"),
            serde_json::to_vec_pretty(&reports).expect("reports serialize"),
        )?;
        demo_nmi = Some(mean);
    }
    write(
        &args.out.join("summary.json"),
        serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    eprintln!(
        "  success {}/{} ({:.3}, 95% CI {:.3}..{:.3})  NMI {:.3}  purity {:.3}",
        summary.success.successes,
        summary.success.total,
        summary.success.rate,
        summary.success.lower,
        summary.success.upper,
        summary.mean_nmi,
        summary.mean_purity
    );
    Ok(json!({
        "command": "eval",
        "success_rate": summary.success.rate,
        "successes": summary.success.successes,
        "total": summary.success.total,
        "ci_lower": summary.success.lower,
        "ci_upper": summary.success.upper,
        "mean_nmi": summary.mean_nmi,
        "mean_purity": summary.mean_purity,
        "mean_entropy": summary.mean_entropy,
        "demo_nmi": demo_nmi,
        "episodes": logs.len(),
    }))
}
