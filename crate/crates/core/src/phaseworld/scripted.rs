use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::{distance, Action, WorldState, MAX_STEP};

/// Gain of the demonstrator's proportional position controller.
pub const GAIN: f64 = 0.5;
/// Std-dev of the per-step translation jitter, meters.
pub const JITTER_STD: f64 = 0.005;
/// Agent-object distance that ends the reach phase.
pub const REACH_TOLERANCE: f64 = 0.02;
/// Agent-goal distance that ends the transport phase.
pub const PLACE_TOLERANCE: f64 = 0.025;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Phase {
    Reach = 0,
    Grasp = 1,
    Transport = 2,
    Release = 3,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Reach, Phase::Grasp, Phase::Transport, Phase::Release];

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// Applies every transition whose condition holds in `state`. Phases only
/// ever advance.
pub fn next_phase(mut phase: Phase, state: &WorldState) -> Phase {
    loop {
        let next = match phase {
            Phase::Reach
                if state.carrying || distance(state.agent, state.object) < REACH_TOLERANCE =>
            {
                Phase::Grasp
            }
            Phase::Grasp if state.carrying => Phase::Transport,
            Phase::Transport
                if state.carrying && distance(state.agent, state.goal) < PLACE_TOLERANCE =>
            {
                Phase::Release
            }
            _ => return phase,
        };
        phase = next;
    }
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        (GAIN * (to[0] - from[0])).clamp(-MAX_STEP, MAX_STEP),
        (GAIN * (to[1] - from[1])).clamp(-MAX_STEP, MAX_STEP),
    ]
}

/// Four-phase pick-transport-release demonstrator.
#[derive(Clone, Debug)]
pub struct ScriptedDemonstrator {
    phase: Phase,
    jitter: Normal<f64>,
}

impl Default for ScriptedDemonstrator {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedDemonstrator {
    pub fn new() -> Self {
        Self::with_jitter(JITTER_STD)
    }

    pub fn with_jitter(std: f64) -> Self {
        Self {
            phase: Phase::Reach,
            jitter: Normal::new(0.0, std).expect("finite jitter"),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    /// Chooses the (clamped) action for `state` and the phase it belongs to.
    pub fn act(&mut self, state: &WorldState, rng: &mut impl Rng) -> (Action, Phase) {
        self.phase = next_phase(self.phase, state);
        let (target, g) = match self.phase {
            Phase::Reach => (state.object, 0.0),
            Phase::Grasp => (state.object, 1.0),
            Phase::Transport => (state.goal, 1.0),
            Phase::Release => (state.goal, 0.0),
        };
        let [dx, dy] = toward(state.agent, target);
        let action = Action::new(
            dx + self.jitter.sample(rng),
            dy + self.jitter.sample(rng),
            g,
        )
        .clamped();
        (action, self.phase)
    }
}
