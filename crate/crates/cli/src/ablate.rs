use std::path::PathBuf;

use clap::{Args, ValueEnum};
use larmoe_core::eval::{ablation_csv, ablation_run, AblationGrid};
use larmoe_core::phaseworld::Dataset;
use larmoe_core::trainer::TrainConfig;
use serde_json::json;

use crate::common::{ensure_dir, require_file, write, CliError, ConfigArgs};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// `{-F,+F} x {-R,+R}` at the configured expert count.
    FreezeRegularize,
    /// `+F+R` at N = 1, 2, 4, 8, 16.
    ExpertSweep,
}

pub const SWEEP_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Grid description (JSON); `--set` then edits its base config.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub grid: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seeds for a preset grid, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn build_grid(args: &AblateArgs) -> Result<AblationGrid, CliError> {
    let mut grid = match (&args.grid, args.preset) {
        (Some(path), _) => {
            require_file(path)?;
            AblationGrid::load(path)?
        }
        (None, Some(Preset::FreezeRegularize)) => {
            AblationGrid::freeze_regularize(TrainConfig::default(), args.seeds.clone())
        }
        (None, Some(Preset::ExpertSweep)) => {
            AblationGrid::expert_sweep(TrainConfig::default(), &SWEEP_COUNTS, args.seeds.clone())
        }
        (None, None) => return Err(CliError::usage("one of --grid or --preset is required")),
    };
    grid.base = args.config.resolve(grid.base.clone())?;
    if let Some(Preset::FreezeRegularize) = args.preset {
        for c in &mut grid.cells {
            c.num_experts = grid.base.num_experts;
        }
    }
    grid.validate()?;
    Ok(grid)
}

pub fn run(args: AblateArgs) -> Result<serde_json::Value, CliError> {
    let grid = build_grid(&args)?;
    require_file(&args.data)?;
    let data = Dataset::load(&args.data)?;
    ensure_dir(&args.out)?;
    eprintln!(
        "ablate: {} cells x {} seeds on {} demonstrations",
        grid.cells.len(),
        grid.seeds.len(),
        data.len()
    );
    let rows = ablation_run(&grid, &data)?;
    for r in &rows {
        eprintln!(
            "  F{} R{} N={:<2} seed {}  success {:.3}  NMI {:.3}",
            if r.freeze_student { '+' } else { '-' },
            if r.regularize { '+' } else { '-' },
            r.num_experts,
            r.seed,
            r.success_rate,
            r.nmi
        );
    }
    let csv = args.out.join("ablation.csv");
    write(&csv, ablation_csv(&rows))?;
    write(
        &args.out.join("grid.json"),
        serde_json::to_vec_pretty(&grid).expect("grid serializes"),
    )?;
    Ok(json!({
        "command": "ablate",
        "rows": rows.len(),
        "table": csv,
        "mean_success": rows.iter().map(|r| r.success_rate).sum::<f64>() / rows.len() as f64,
        "mean_nmi": rows.iter().map(|r| r.nmi).sum::<f64>() / rows.len() as f64,
    }))
}
