//! Closed-loop evaluation: rollouts, success rates, routing/phase
//! alignment, spatial expert maps and the ablation harness.
//!
//! This is the only module that reads phase labels. Rollouts are labelled
//! with [`crate::phaseworld::labels::annotate_phases`]; demonstrations can be
//! scored against their recorded sidecar.

mod ablation;
mod metrics;
mod rollout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablation::{
    ablation_csv, ablation_run, ablation_run_cached, AblationCell, AblationGrid, AblationRow,
    PretrainCache,
};
pub use metrics::{
    argmax, dominant_expert_sequence, entropy, normalized_mutual_information, phase_alignment,
    spatial_assignment_grid, spatial_cell, success_counts, success_rate, wilson_interval,
    AlignmentReport, SpatialGrid, SuccessRate,
};
pub use rollout::{
    rollout, EpisodeLog, RolloutConfig, StepRecord, MAX_ROLLOUT_STEPS, SUCCESS_HOLD,
};

use crate::error::{Error, Result};
use crate::phaseworld::labels::{annotate_phases, PhaseLabels};
use crate::phaseworld::{sample_task, Dataset, TaskSpec};
use crate::policy::PolicyBundle;

/// Seed of the held-out evaluation task stream.
pub const DEFAULT_EVAL_SEED: u64 = 1_000_003;

/// `count` tasks from the held-out stream `seed`.
pub fn eval_tasks(seed: u64, count: usize) -> Vec<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_task(&mut rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub eval_seed: u64,
    /// Rollouts scored for success.
    pub success_tasks: usize,
    /// Leading rollouts whose routing is compared with phase labels.
    pub alignment_rollouts: usize,
    pub rollout: RolloutConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            eval_seed: DEFAULT_EVAL_SEED,
            success_tasks: 50,
            alignment_rollouts: 20,
            rollout: RolloutConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success: SuccessRate,
    pub mean_nmi: f64,
    pub mean_purity: f64,
    pub mean_switches: f64,
    /// Mean per-step routing entropy over every rollout.
    pub mean_entropy: f64,
    pub alignments: Vec<AlignmentReport>,
}

/// Rolls out each task with its own seeded rng (`task.seed`), in parallel.
pub fn rollouts(
    bundle: &PolicyBundle,
    tasks: &[TaskSpec],
    cfg: &RolloutConfig,
) -> Result<Vec<EpisodeLog>> {
    tasks
        .par_iter()
        .map(|t| rollout(bundle, t, &mut ChaCha8Rng::seed_from_u64(t.seed), cfg))
        .collect()
}

/// Alignment of one rollout's dominant experts with its annotated phases.
pub fn rollout_alignment(log: &EpisodeLog) -> Result<AlignmentReport> {
    let phases = annotate_phases(&log.observations());
    phase_alignment(&dominant_expert_sequence(log), &phases)
}

/// Success over the first `success_tasks` logs, alignment over the first
/// `alignment_rollouts`, entropy over all of them.
pub fn summarize(
    logs: &[EpisodeLog],
    success_tasks: usize,
    alignment_rollouts: usize,
) -> Result<EvalSummary> {
    let success = success_rate(&logs[..success_tasks.min(logs.len())])?;
    let alignments = logs
        .iter()
        .take(alignment_rollouts)
        .map(rollout_alignment)
        .collect::<Result<Vec<_>>>()?;
    let k = alignments.len().max(1) as f64;
    let steps: usize = logs.iter().map(|l| l.records.len()).sum();
    let entropy_sum: f64 = logs
        .iter()
        .flat_map(|l| &l.records)
        .map(|r| entropy(&r.routing))
        .sum();
    Ok(EvalSummary {
        success,
        mean_nmi: alignments.iter().map(|a| a.nmi).sum::<f64>() / k,
        mean_purity: alignments.iter().map(|a| a.purity).sum::<f64>() / k,
        mean_switches: alignments.iter().map(|a| a.switches as f64).sum::<f64>() / k,
        mean_entropy: entropy_sum / steps.max(1) as f64,
        alignments,
    })
}

/// Runs the evaluation protocol; returns the logs and their summary.
pub fn evaluate(
    bundle: &PolicyBundle,
    protocol: &EvalProtocol,
) -> Result<(Vec<EpisodeLog>, EvalSummary)> {
    if protocol.success_tasks == 0 {
        return Err(Error::Empty("evaluation tasks"));
    }
    let tasks = eval_tasks(
        protocol.eval_seed,
        protocol.success_tasks.max(protocol.alignment_rollouts),
    );
    let logs = rollouts(bundle, &tasks, &protocol.rollout)?;
    let summary = summarize(&logs, protocol.success_tasks, protocol.alignment_rollouts)?;
    Ok((logs, summary))
}

/// Teacher-forced alignment on the demonstrations themselves: the policy
/// routes every recorded observation, compared with the recorded sidecar.
pub fn demo_alignment(
    bundle: &PolicyBundle,
    data: &Dataset,
    labels: &PhaseLabels,
) -> Result<Vec<AlignmentReport>> {
    if labels.episodes.len() != data.episodes.len() {
        return Err(Error::ShapeMismatch {
            op: "demo_alignment",
            lhs: vec![data.episodes.len()],
            rhs: vec![labels.episodes.len()],
        });
    }
    data.episodes
        .par_iter()
        .zip(&labels.episodes)
        .map(|(demo, phases)| {
            let experts = demo
                .steps
                .iter()
                .map(|s| Ok(argmax(bundle.route(&s.obs)?.1.data())))
                .collect::<Result<Vec<_>>>()?;
            phase_alignment(&experts, phases)
        })
        .collect()
}
