use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis bound on an action's translation, meters.
pub const MAX_STEP: f64 = 0.05;
/// Maximum gripper change per step.
pub const GRIPPER_SLEW: f64 = 0.25;
/// Agent-object distance below which a closed gripper picks the object up.
pub const GRASP_RADIUS: f64 = 0.03;
pub const GRIPPER_CLOSED: f64 = 0.9;
pub const GRIPPER_OPEN: f64 = 0.1;
/// Object-goal distance that counts as delivered.
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const MIN_OBJECT_GOAL_SEPARATION: f64 = 0.3;
pub const AGENT_START: [f64; 2] = [0.5, 0.5];
/// Objects never spawn this close to the agent's start.
pub const MIN_OBJECT_START_SEPARATION: f64 = 0.1;
pub const DEFAULT_VARIANTS: usize = 4;

pub const OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 3;
/// Per-component action units. Learners work in `action / ACTION_SCALE`,
/// so translation and gripper targets share one order of magnitude.
pub const ACTION_SCALE: [f64; ACTION_DIM] = [MAX_STEP, MAX_STEP, 1.0];

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Kinematic state of the planar world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: [f64; 2],
    pub object: [f64; 2],
    pub goal: [f64; 2],
    /// 0 open, 1 closed.
    pub gripper: f64,
    pub carrying: bool,
}

impl WorldState {
    pub fn initial(task: &TaskSpec) -> Self {
        Self {
            agent: AGENT_START,
            object: task.object,
            goal: task.goal,
            gripper: 0.0,
            carrying: false,
        }
    }

    pub fn from_observation(obs: &[f64; OBS_DIM]) -> Self {
        Self {
            agent: [obs[0], obs[1]],
            object: [obs[2], obs[3]],
            goal: [obs[4], obs[5]],
            gripper: obs[6],
            carrying: obs[7] > 0.5,
        }
    }

    /// `[agent(2), object(2), goal(2), gripper, carrying]`
    pub fn observation(&self) -> [f64; OBS_DIM] {
        [
            self.agent[0],
            self.agent[1],
            self.object[0],
            self.object[1],
            self.goal[0],
            self.goal[1],
            self.gripper,
            if self.carrying { 1.0 } else { 0.0 },
        ]
    }

    pub fn delivered(&self) -> bool {
        distance(self.object, self.goal) < SUCCESS_RADIUS && self.gripper < GRIPPER_OPEN
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    /// Gripper command in [0, 1].
    pub g: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, g: f64) -> Self {
        Self { dx, dy, g }
    }

    /// Translation clamped to ±`MAX_STEP`, gripper command to [0, 1].
    pub fn clamped(self) -> Self {
        Self {
            dx: self.dx.clamp(-MAX_STEP, MAX_STEP),
            dy: self.dy.clamp(-MAX_STEP, MAX_STEP),
            g: self.g.clamp(0.0, 1.0),
        }
    }

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.dx, self.dy, self.g]
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Advances the world by one control step.
pub fn step_env(state: &WorldState, action: Action) -> Result<WorldState> {
    if !(action.dx.is_finite() && action.dy.is_finite() && action.g.is_finite()) {
        return Err(Error::invalid(format!("non-finite action {action:?}")));
    }
    let a = action.clamped();
    let mut next = *state;
    next.agent = [
        (state.agent[0] + a.dx).clamp(0.0, 1.0),
        (state.agent[1] + a.dy).clamp(0.0, 1.0),
    ];
    next.gripper = state.gripper + (a.g - state.gripper).clamp(-GRIPPER_SLEW, GRIPPER_SLEW);
    if next.carrying && next.gripper < GRIPPER_OPEN {
        next.carrying = false;
    } else if !next.carrying
        && next.gripper > GRIPPER_CLOSED
        && distance(next.agent, next.object) < GRASP_RADIUS
    {
        next.carrying = true;
    }
    if next.carrying {
        next.object = next.agent;
    }
    Ok(next)
}

/// One sampled task instance. The variant selects the goal quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub variant: usize,
    pub object: [f64; 2],
    pub goal: [f64; 2],
    pub seed: u64,
}

/// Samples a task with `variants` goal regions (quadrants, cycling when
/// `variants > 4`).
pub fn sample_task_with(rng: &mut impl Rng, variants: usize) -> TaskSpec {
    let variant = rng.random_range(0..variants.max(1));
    let quadrant = variant % 4;
    let (qx, qy) = ((quadrant % 2) as f64 * 0.5, (quadrant / 2) as f64 * 0.5);
    let goal = [
        qx + rng.random::<f64>() * 0.5,
        qy + rng.random::<f64>() * 0.5,
    ];
    let object = loop {
        let candidate = [rng.random::<f64>(), rng.random::<f64>()];
        if distance(candidate, goal) >= MIN_OBJECT_GOAL_SEPARATION
            && distance(candidate, AGENT_START) >= MIN_OBJECT_START_SEPARATION
        {
            break candidate;
        }
    };
    TaskSpec {
        variant,
        object,
        goal,
        seed: rng.random(),
    }
}

pub fn sample_task(rng: &mut impl Rng) -> TaskSpec {
    sample_task_with(rng, DEFAULT_VARIANTS)
}
