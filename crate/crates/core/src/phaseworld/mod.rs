//! Synthetic planar pick-transport-release world and its scripted
//! demonstrator.

mod dataset;
mod env;
pub mod labels;
mod scripted;

use std::path::Path;

pub use dataset::{
    chunk_view, generate_dataset, record_episode, Dataset, Demonstration, Sample, Step,
    FORMAT_VERSION, MAX_EPISODE_STEPS, RELEASE_HOLD,
};
pub use env::*;
pub use scripted::{
    next_phase, Phase, ScriptedDemonstrator, GAIN, JITTER_STD, PLACE_TOLERANCE, REACH_TOLERANCE,
};

use crate::error::Result;
use labels::PhaseLabels;

/// Writes the dataset to `path` and its phase sidecar next to it.
pub fn write_dataset_files(path: &Path, data: &Dataset, labels: &PhaseLabels) -> Result<()> {
    data.save(path)?;
    labels::write_phase_labels(&labels::sidecar_path(path), labels)
}
