use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phaseworld::{step_env, Action, TaskSpec, WorldState, ACTION_DIM, OBS_DIM};
use crate::policy::PolicyBundle;

/// Rollout step cap.
pub const MAX_ROLLOUT_STEPS: usize = 150;
/// Consecutive delivered steps that count as success.
pub const SUCCESS_HOLD: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_steps: usize,
    /// Actions executed from each predicted chunk before replanning.
    pub execute: usize,
    pub success_hold: usize,
    /// Std-dev of Gaussian noise added to executed translations.
    pub action_noise: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_steps: MAX_ROLLOUT_STEPS,
            execute: 1,
            success_hold: SUCCESS_HOLD,
            action_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
    /// Routing of the chunk this action came from.
    pub routing: Vec<f64>,
    pub latent: Vec<f64>,
    pub agent: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub task: TaskSpec,
    pub records: Vec<StepRecord>,
    pub success: bool,
    pub length: usize,
}

impl EpisodeLog {
    pub fn observations(&self) -> Vec<[f64; OBS_DIM]> {
        self.records.iter().map(|r| r.obs).collect()
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("episode log serializes")
    }

    /// `t,e0,e1,...` rows of routing weights.
    pub fn heatmap_csv(&self) -> String {
        let n = self.records.first().map_or(0, |r| r.routing.len());
        let mut out = String::from("t");
        for e in 0..n {
            out.push_str(&format!(",e{e}"));
        }
        out.push('\n');
        for (t, r) in self.records.iter().enumerate() {
            out.push_str(&t.to_string());
            for p in &r.routing {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Closed-loop execution of `bundle` on `task`: predict a chunk, execute its
/// first `execute` actions, repeat. Stops once the object has been delivered
/// for `success_hold` consecutive steps or after `max_steps`.
pub fn rollout(
    bundle: &PolicyBundle,
    task: &TaskSpec,
    rng: &mut impl Rng,
    cfg: &RolloutConfig,
) -> Result<EpisodeLog> {
    if cfg.execute == 0 || cfg.execute > bundle.horizon {
        return Err(Error::invalid(format!(
            "execute must be in 1..={}, got {}",
            bundle.horizon, cfg.execute
        )));
    }
    let noise = if cfg.action_noise > 0.0 {
        Some(Normal::new(0.0, cfg.action_noise).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut state = WorldState::initial(task);
    let mut records = Vec::new();
    let mut held = 0;
    let mut plan = None;
    let mut success = false;
    for t in 0..cfg.max_steps {
        if t % cfg.execute == 0 {
            plan = Some(bundle.policy_forward(&state.observation(), task.variant)?);
        }
        let out = plan.as_ref().expect("planned on step 0");
        let row = out.chunk.row(t % cfg.execute);
        let mut action = Action::from_slice(row);
        if let Some(n) = &noise {
            action.dx += n.sample(rng);
            action.dy += n.sample(rng);
        }
        let action = action.clamped();
        records.push(StepRecord {
            obs: state.observation(),
            action: action.to_array(),
            routing: out.routing.clone(),
            latent: out.latent.clone(),
            agent: state.agent,
        });
        state = step_env(&state, action)?;
        held = if state.delivered() { held + 1 } else { 0 };
        if held >= cfg.success_hold {
            success = true;
            break;
        }
    }
    Ok(EpisodeLog {
        task: *task,
        length: records.len(),
        records,
        success,
    })
}
