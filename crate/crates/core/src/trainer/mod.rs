//! AdamW, configuration, checkpoints and the stage-2 training loop.

mod checkpoint;
mod config;
mod optim;
mod posttrain;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, RngState, Stage, CHECKPOINT_VERSION};
pub use config::{PretrainSchedule, TrainConfig};
pub use optim::{clip_global_norm, AdamWConfig, AdamWState};
pub use posttrain::{
    posttrain_csv, posttrain_loop, posttrain_step, write_posttrain_csv, PosttrainLogRow,
    PosttrainOutcome, PosttrainTrainer, StepReport,
};

use crate::diffcore::Array;

/// Independent ChaCha8 streams derived from one seed.
pub const STREAM_ROUTER_INIT: u64 = 0;
pub const STREAM_PRETRAIN_SHUFFLE: u64 = 1;
pub const STREAM_POLICY_INIT: u64 = 2;
pub const STREAM_POSTTRAIN_SHUFFLE: u64 = 3;

pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffled index batches of at most `batch_size`. A trailing singleton is
/// folded into the previous batch so every batch of a multi-batch epoch has
/// at least two rows.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

/// SHA-256 over parameter shapes and little-endian values.
pub fn param_hash(params: &[&Array]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for &d in p.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatches_cover_everything_once() {
        let mut rng = stage_rng(0, 0);
        for (n, b) in [(10, 3), (10, 5), (9, 4), (1, 4), (65, 64)] {
            let batches = minibatches(n, b, &mut rng);
            let mut all: Vec<usize> = batches.concat();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            if batches.len() > 1 {
                assert!(batches.iter().all(|x| x.len() >= 2));
            }
        }
        assert_eq!(minibatches(10, 3, &mut rng).len(), 3);
        assert_eq!(minibatches(11, 3, &mut rng).len(), 4);
        assert_eq!(minibatches(10, 10, &mut rng).len(), 1);
    }

    #[test]
    fn param_hash_sees_shape_and_value() {
        let a = Array::vector(vec![1.0, 2.0]);
        let b = Array::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert_ne!(param_hash(&[&a]), param_hash(&[&b]));
        assert_eq!(param_hash(&[&a]), param_hash(&[&a.clone()]));
    }
}
