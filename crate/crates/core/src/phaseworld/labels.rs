//! Phase annotations. Evaluation-only: nothing on the training path reads
//! this module.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::FORMAT_VERSION;
use super::env::{WorldState, OBS_DIM};
use super::scripted::{next_phase, Phase};
use crate::error::{Error, Result};

/// Per-episode phase ids (0 reach, 1 grasp, 2 transport, 3 release).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLabels {
    pub episodes: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct SidecarFile {
    format_version: u32,
    phases: Vec<Vec<u8>>,
}

/// `demos.json` -> `demos.phases.json`
pub fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("phases.json")
}

pub fn write_phase_labels(path: &Path, labels: &PhaseLabels) -> Result<()> {
    let file = SidecarFile {
        format_version: FORMAT_VERSION,
        phases: labels.episodes.clone(),
    };
    let bytes = serde_json::to_vec(&file).expect("labels serialize");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_phase_labels(path: &Path) -> Result<PhaseLabels> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: SidecarFile = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: file.format_version,
        });
    }
    Ok(PhaseLabels {
        episodes: file.phases,
    })
}

/// Labels an observation sequence with the demonstrator's phase machine,
/// the ground truth for rollouts that have no recorded sidecar.
pub fn annotate_phases(observations: &[[f64; OBS_DIM]]) -> Vec<u8> {
    let mut phase = Phase::Reach;
    observations
        .iter()
        .map(|obs| {
            phase = next_phase(phase, &WorldState::from_observation(obs));
            phase.id()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phaseworld::generate_dataset;

    #[test]
    fn annotator_reproduces_recorded_labels() {
        let (data, labels) = generate_dataset(10, 3).unwrap();
        for (demo, phases) in data.episodes.iter().zip(&labels.episodes) {
            let obs: Vec<_> = demo.steps.iter().map(|s| s.obs).collect();
            assert_eq!(&annotate_phases(&obs), phases);
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let labels = PhaseLabels {
            episodes: vec![vec![0, 0, 1, 2, 3], vec![0, 1, 1, 2, 2, 3]],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = sidecar_path(&dir.path().join("demos.json"));
        assert!(path.ends_with("demos.phases.json"));
        write_phase_labels(&path, &labels).unwrap();
        assert_eq!(read_phase_labels(&path).unwrap(), labels);
    }
}
