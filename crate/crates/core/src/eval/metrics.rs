use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::rollout::EpisodeLog;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub successes: usize,
    pub total: usize,
    pub rate: f64,
    /// Wilson 95% interval.
    pub lower: f64,
    pub upper: f64,
}

/// Wilson score interval for `k` successes in `n` trials at normal quantile `z`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // The bounds touch 0 and 1 exactly at the extremes; rounding would not.
    let lower = if k == 0.0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let upper = if k == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lower, upper)
}

pub fn success_counts(successes: usize, total: usize) -> Result<SuccessRate> {
    if total == 0 {
        return Err(Error::Empty("episode logs"));
    }
    let (lower, upper) = wilson_interval(successes, total, 1.959963984540054);
    Ok(SuccessRate {
        successes,
        total,
        rate: successes as f64 / total as f64,
        lower,
        upper,
    })
}

pub fn success_rate(logs: &[EpisodeLog]) -> Result<SuccessRate> {
    success_counts(logs.iter().filter(|l| l.success).count(), logs.len())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Argmax expert per logged step.
pub fn dominant_expert_sequence(log: &EpisodeLog) -> Vec<usize> {
    log.records.iter().map(|r| argmax(&r.routing)).collect()
}

/// Natural-log Shannon entropy of a distribution (`0 ln 0 = 0`).
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub nmi: f64,
    pub purity: f64,
    pub switches: usize,
}

fn label_entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    -counts
        .map(|c| c as f64 / n)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `I(a; b) / sqrt(H(a) H(b))` over the joint histogram. When both
/// sequences are constant the labelings are identical and the score is 1;
/// when exactly one is constant it is 0.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "normalized_mutual_information",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("label sequences"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let (ha, hb) = (
        label_entropy(ca.values().copied(), n),
        label_entropy(cb.values().copied(), n),
    );
    if ca.len() == 1 && cb.len() == 1 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Agreement between an expert sequence and phase labels.
pub fn phase_alignment(experts: &[usize], phases: &[u8]) -> Result<AlignmentReport> {
    let phases_usize: Vec<usize> = phases.iter().map(|&p| p as usize).collect();
    let nmi = normalized_mutual_information(experts, &phases_usize)?;
    let mut per_phase: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&e, &p) in experts.iter().zip(&phases_usize) {
        *per_phase.entry(p).or_default().entry(e).or_default() += 1;
    }
    let captured: usize = per_phase
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    let switches = experts.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(AlignmentReport {
        nmi,
        purity: captured as f64 / experts.len() as f64,
        switches,
    })
}

/// Dominant expert per cell of a `resolution x resolution` binning of the
/// unit workspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub resolution: usize,
    /// Row-major by `(y bin, x bin)`; `None` for cells never visited.
    pub dominant: Vec<Option<usize>>,
    /// Logged steps per cell.
    pub counts: Vec<usize>,
    /// Summed routing weight per cell and expert.
    pub activation: Vec<Vec<f64>>,
}

pub fn spatial_cell(pos: [f64; 2], resolution: usize) -> (usize, usize) {
    let bin = |v: f64| ((v.clamp(0.0, 1.0) * resolution as f64) as usize).min(resolution - 1);
    (bin(pos[1]), bin(pos[0]))
}

pub fn spatial_assignment_grid(logs: &[EpisodeLog], resolution: usize) -> Result<SpatialGrid> {
    if resolution < 2 {
        return Err(Error::invalid(format!(
            "grid resolution must be >= 2, got {resolution}"
        )));
    }
    let experts = logs
        .iter()
        .flat_map(|l| l.records.first())
        .map(|r| r.routing.len())
        .max()
        .unwrap_or(0);
    let cells = resolution * resolution;
    let mut counts = vec![0; cells];
    let mut activation = vec![vec![0.0; experts]; cells];
    for r in logs.iter().flat_map(|l| &l.records) {
        let (y, x) = spatial_cell(r.agent, resolution);
        let c = y * resolution + x;
        counts[c] += 1;
        for (acc, p) in activation[c].iter_mut().zip(&r.routing) {
            *acc += p;
        }
    }
    let dominant = counts
        .iter()
        .zip(&activation)
        .map(|(&n, a)| (n > 0).then(|| argmax(a)))
        .collect();
    Ok(SpatialGrid {
        resolution,
        dominant,
        counts,
        activation,
    })
}

impl SpatialGrid {
    pub fn populated(&self) -> usize {
        self.dominant.iter().flatten().count()
    }

    /// `x,y,expert` for every visited cell, at cell centers in workspace units.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,expert\n");
        let w = 1.0 / self.resolution as f64;
        for (c, d) in self.dominant.iter().enumerate() {
            if let Some(e) = d {
                let (row, col) = (c / self.resolution, c % self.resolution);
                out.push_str(&format!(
                    "{},{},{e}\n",
                    (col as f64 + 0.5) * w,
                    (row as f64 + 0.5) * w
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::rollout::StepRecord;
    use crate::phaseworld::TaskSpec;

    fn log(routings: Vec<Vec<f64>>, agents: Vec<[f64; 2]>) -> EpisodeLog {
        let records: Vec<StepRecord> = routings
            .into_iter()
            .zip(agents)
            .map(|(routing, agent)| StepRecord {
                obs: [0.0; 8],
                action: [0.0; 3],
                routing,
                latent: vec![],
                agent,
            })
            .collect();
        EpisodeLog {
            task: TaskSpec {
                variant: 0,
                object: [0.0; 2],
                goal: [1.0; 2],
                seed: 0,
            },
            length: records.len(),
            records,
            success: false,
        }
    }

    #[test]
    fn success_fixtures() {
        let r = success_counts(20, 20).unwrap();
        assert_eq!(r.rate, 1.0);
        assert_eq!(success_counts(17, 20).unwrap().rate, 0.85);
        assert_eq!(success_counts(9, 20).unwrap().rate, 0.45);
        assert!(success_counts(0, 0).is_err());
        assert!(success_rate(&[]).is_err());
        // Wilson bounds for 9/20 at 95%
        let r = success_counts(9, 20).unwrap();
        assert!(
            (r.lower - 0.2582).abs() < 1e-4 && (r.upper - 0.6579).abs() < 1e-4,
            "{r:?}"
        );
        let all = success_counts(20, 20).unwrap();
        assert_eq!(all.upper, 1.0);
        assert!(all.lower > 0.8);
        let none = success_counts(0, 50).unwrap();
        assert_eq!((none.lower, none.rate), (0.0, 0.0));
        assert!((none.upper - 0.0713).abs() < 1e-4);
    }

    #[test]
    fn dominant_expert_rules() {
        let l = log(
            vec![
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
                vec![0.5, 0.5],
            ],
            vec![[0.5; 2]; 4],
        );
        assert_eq!(dominant_expert_sequence(&l), vec![0, 1, 0, 0]);
        let c = log(vec![vec![0.2, 0.7, 0.1]; 3], vec![[0.5; 2]; 3]);
        assert_eq!(dominant_expert_sequence(&c), vec![1, 1, 1]);
    }

    #[test]
    fn nmi_fixtures() {
        let phases = [0u8, 0, 1, 1, 1, 2, 2, 3, 3, 3];
        let same: Vec<usize> = phases.iter().map(|&p| p as usize).collect();
        let r = phase_alignment(&same, &phases).unwrap();
        assert!((r.nmi - 1.0).abs() < 1e-12);
        assert_eq!(r.purity, 1.0);
        assert_eq!(r.switches, 3);
        let constant = vec![4; 10];
        let r = phase_alignment(&constant, &phases).unwrap();
        assert_eq!(r.nmi, 0.0);
        assert_eq!(r.switches, 0);
        assert!((r.purity - 1.0).abs() < 1e-12);
        let permuted: Vec<usize> = same.iter().map(|&p| [7, 2, 0, 5][p]).collect();
        assert!((phase_alignment(&permuted, &phases).unwrap().nmi - 1.0).abs() < 1e-12);
        assert!(phase_alignment(&[0, 1], &phases).is_err());
        assert!(phase_alignment(&[], &[]).is_err());
    }

    #[test]
    fn purity_hand_case() {
        // phase 0: experts {1,1,2} -> 2/3 captured; phase 1: {0} -> 1
        let r = phase_alignment(&[1, 1, 2, 0], &[0, 0, 0, 1]).unwrap();
        assert!((r.purity - 0.75).abs() < 1e-15);
        assert!(r.nmi > 0.0 && r.nmi < 1.0);
    }

    #[test]
    fn grid_single_cell_and_disjoint_regions() {
        let one = log(vec![vec![0.3, 0.7]; 5], vec![[0.11, 0.12]; 5]);
        let g = spatial_assignment_grid(&[one], 4).unwrap();
        assert_eq!(g.populated(), 1);
        assert_eq!(g.dominant[0], Some(1));
        let a = log(vec![vec![0.9, 0.1]; 3], vec![[0.1, 0.1]; 3]);
        let b = log(vec![vec![0.1, 0.9]; 3], vec![[0.9, 0.9]; 3]);
        let g = spatial_assignment_grid(&[a, b], 2).unwrap();
        assert_eq!(g.dominant, vec![Some(0), None, None, Some(1)]);
        assert_eq!(g.counts.iter().sum::<usize>(), 6);
        assert!(spatial_assignment_grid(&[], 1).is_err());
        assert_eq!(g.to_csv(), "x,y,expert\n0.25,0.25,0\n0.75,0.75,1\n");
    }
}
