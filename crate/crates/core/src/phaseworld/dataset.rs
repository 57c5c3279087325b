use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{sample_task, step_env, TaskSpec, WorldState, ACTION_DIM, ACTION_SCALE, OBS_DIM};
use super::labels::PhaseLabels;
use super::scripted::ScriptedDemonstrator;
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MAX_EPISODE_STEPS: usize = 120;
/// Consecutive delivered steps that end a demonstration.
pub const RELEASE_HOLD: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: [f64; OBS_DIM],
    pub act: [f64; ACTION_DIM],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: TaskSpec,
    pub steps: Vec<Step>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Observation at `t` and the `horizon` actions starting there. Past the
/// end of the episode the final action is repeated.
pub fn chunk_view(demo: &Demonstration, t: usize, horizon: usize) -> ([f64; OBS_DIM], Array) {
    assert!(
        t < demo.len(),
        "t = {t} outside episode of length {}",
        demo.len()
    );
    let last = demo.len() - 1;
    let mut data = Vec::with_capacity(horizon * ACTION_DIM);
    for k in 0..horizon {
        data.extend_from_slice(&demo.steps[(t + k).min(last)].act);
    }
    let chunk = Array::new(vec![horizon, ACTION_DIM], data).expect("chunk shape");
    (demo.steps[t].obs, chunk)
}

/// One training pair: observation, task variant and flattened action chunk
/// in normalized units (each component divided by [`ACTION_SCALE`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub obs: [f64; OBS_DIM],
    pub task: usize,
    pub chunk: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u32,
    episodes: Vec<Demonstration>,
}

/// Demonstrations as seen by training: observations, actions and task
/// specs. Phase annotations live in a separate sidecar (see
/// [`super::labels`]) and are never part of this type.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Demonstration>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Demonstration::len).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.total_steps() as f64 / self.len().max(1) as f64
    }

    /// Every `(episode, t)` chunk view, in episode order, chunks normalized.
    pub fn samples(&self, horizon: usize) -> Vec<Sample> {
        let mut out = Vec::with_capacity(self.total_steps());
        for demo in &self.episodes {
            for t in 0..demo.len() {
                let (obs, chunk) = chunk_view(demo, t, horizon);
                out.push(Sample {
                    obs,
                    task: demo.task.variant,
                    chunk: chunk
                        .into_data()
                        .chunks(ACTION_DIM)
                        .flat_map(|a| (0..ACTION_DIM).map(move |d| a[d] / ACTION_SCALE[d]))
                        .collect(),
                });
            }
        }
        out
    }

    pub fn to_json(&self) -> Vec<u8> {
        let file = DatasetFile {
            format_version: FORMAT_VERSION,
            episodes: self.episodes.clone(),
        };
        serde_json::to_vec(&file).expect("dataset serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: file.format_version,
            });
        }
        Ok(Self {
            episodes: file.episodes,
        })
    }
}

/// Rolls the scripted demonstrator until the object has stayed delivered
/// for `RELEASE_HOLD` consecutive steps or the step budget runs out.
/// Returns the episode, its phase labels, and whether it succeeded.
pub fn record_episode(task: &TaskSpec, rng: &mut impl Rng) -> (Demonstration, Vec<u8>, bool) {
    let mut state = WorldState::initial(task);
    let mut demo = ScriptedDemonstrator::new();
    let mut steps = Vec::new();
    let mut phases = Vec::new();
    let mut held = 0;
    for _ in 0..MAX_EPISODE_STEPS {
        let (action, phase) = demo.act(&state, rng);
        steps.push(Step {
            obs: state.observation(),
            act: action.to_array(),
        });
        phases.push(phase.id());
        state = step_env(&state, action).expect("scripted actions are finite");
        held = if state.delivered() { held + 1 } else { 0 };
        if held == RELEASE_HOLD {
            break;
        }
    }
    let success = held == RELEASE_HOLD;
    (Demonstration { task: *task, steps }, phases, success)
}

/// `count` successful scripted episodes; failures are discarded and
/// resampled. Deterministic in `seed`.
pub fn generate_dataset(count: usize, seed: u64) -> Result<(Dataset, PhaseLabels)> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    while episodes.len() < count {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let task = sample_task(&mut rng);
        let (demo, phases, success) = record_episode(&task, &mut rng);
        if success {
            episodes.push(demo);
            labels.push(phases);
        }
    }
    Ok((Dataset { episodes }, PhaseLabels { episodes: labels }))
}
