use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalProtocol};
use crate::error::{Error, Result};
use crate::phaseworld::Dataset;
use crate::pretrain::pretrain_loop;
use crate::trainer::{posttrain_loop, Checkpoint, TrainConfig};

/// One point of the ablation grid, applied on top of the base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub freeze_student: bool,
    pub regularize: bool,
    pub num_experts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub base: TrainConfig,
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub protocol: EvalProtocol,
}

impl AblationGrid {
    /// `{-F, +F} x {-R, +R}` at the base expert count.
    pub fn freeze_regularize(base: TrainConfig, seeds: Vec<u64>) -> Self {
        let n = base.num_experts;
        let cells = [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(freeze_student, regularize)| AblationCell {
                freeze_student,
                regularize,
                num_experts: n,
            })
            .collect();
        Self {
            base,
            cells,
            seeds,
            protocol: EvalProtocol::default(),
        }
    }

    /// Full `+F+R` at each expert count.
    pub fn expert_sweep(base: TrainConfig, counts: &[usize], seeds: Vec<u64>) -> Self {
        let cells = counts
            .iter()
            .map(|&num_experts| AblationCell {
                freeze_student: true,
                regularize: true,
                num_experts,
            })
            .collect();
        Self {
            base,
            cells,
            seeds,
            protocol: EvalProtocol::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let grid: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Empty("ablation cells"));
        }
        if self.seeds.is_empty() {
            return Err(Error::Empty("ablation seeds"));
        }
        for c in self.configs() {
            c.validate()?;
        }
        Ok(())
    }

    /// Cell-major, seed-minor list of full configs.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.cells.len() * self.seeds.len());
        for cell in &self.cells {
            for &seed in &self.seeds {
                out.push(TrainConfig {
                    seed,
                    freeze_student: cell.freeze_student,
                    regularize: cell.regularize,
                    num_experts: cell.num_experts,
                    ..self.base.clone()
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_hash: String,
    pub freeze_student: bool,
    pub regularize: bool,
    pub num_experts: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub nmi: f64,
    pub mean_entropy: f64,
}

/// Stage-1 results keyed by [`TrainConfig::pretrain_key`].
pub type PretrainCache = BTreeMap<String, Checkpoint>;

/// Trains and evaluates every grid cell for every seed. Stage 1 runs once
/// per distinct pretrain configuration and is reused through `cache`.
pub fn ablation_run_cached(
    grid: &AblationGrid,
    data: &Dataset,
    cache: &mut PretrainCache,
) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let configs = grid.configs();
    let mut missing: BTreeMap<String, TrainConfig> = BTreeMap::new();
    for c in &configs {
        let key = c.pretrain_key();
        if !cache.contains_key(&key) {
            missing.entry(key).or_insert_with(|| c.clone());
        }
    }
    let fresh = missing
        .into_par_iter()
        .map(|(key, cfg)| Ok((key, pretrain_loop(&cfg, data)?.checkpoint)))
        .collect::<Result<Vec<_>>>()?;
    cache.extend(fresh);
    let cache = &*cache;
    configs
        .par_iter()
        .map(|cfg| {
            let pretrained = &cache[&cfg.pretrain_key()];
            let trained = posttrain_loop(cfg, data, pretrained)?;
            let (_, summary) = evaluate(&trained.policy, &grid.protocol)?;
            Ok(AblationRow {
                config_hash: cfg.config_hash(),
                freeze_student: cfg.freeze_student,
                regularize: cfg.regularize,
                num_experts: cfg.num_experts,
                seed: cfg.seed,
                success_rate: summary.success.rate,
                nmi: summary.mean_nmi,
                mean_entropy: summary.mean_entropy,
            })
        })
        .collect()
}

pub fn ablation_run(grid: &AblationGrid, data: &Dataset) -> Result<Vec<AblationRow>> {
    ablation_run_cached(grid, data, &mut PretrainCache::new())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config-hash,F,R,N,seed,success_rate,nmi,mean_entropy\n");
    let sign = |b: bool| if b { "+" } else { "-" };
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.config_hash,
            sign(r.freeze_student),
            sign(r.regularize),
            r.num_experts,
            r.seed,
            r.success_rate,
            r.nmi,
            r.mean_entropy
        ));
    }
    out
}
