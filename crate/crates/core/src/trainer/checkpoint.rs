use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamWState;
use super::posttrain::PosttrainLogRow;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyBundle;
use crate::pretrain::{PretrainLogRow, RouterBundle};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Posttrain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
        })
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte key.
    pub key: String,
    pub stream: u64,
    /// Decimal, since it can exceed 64 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            key: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::invalid(format!("corrupt rng state: {what}"));
        let key: [u8; 32] = hex::decode(&self.key)
            .map_err(|_| bad("key"))?
            .try_into()
            .map_err(|_| bad("key length"))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

/// Everything needed to resume or consume a training stage.
///
/// Stored as JSON: `{"format_version", "stage", "config", "router" |
/// "policy", "optimizer", "rng", "epochs_completed", "pretrain_log",
/// "posttrain_log"}`. Floats are written in shortest round-trip form so a
/// load/save cycle reproduces the bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router: Option<RouterBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyBundle>,
    /// Moments of the registered (trainable) parameters only.
    pub optimizer: AdamWState,
    pub rng: RngState,
    pub epochs_completed: usize,
    pub pretrain_log: Vec<PretrainLogRow>,
    pub posttrain_log: Vec<PosttrainLogRow>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Checkpoint {
    pub fn pretrain(
        config: TrainConfig,
        router: RouterBundle,
        optimizer: AdamWState,
        rng: RngState,
        log: Vec<PretrainLogRow>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            stage: Stage::Pretrain,
            config,
            router: Some(router),
            policy: None,
            optimizer,
            rng,
            epochs_completed: log.len(),
            pretrain_log: log,
            posttrain_log: vec![],
        }
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch {
                expected: stage.to_string(),
                found: self.stage.to_string(),
            });
        }
        Ok(())
    }

    pub fn router(&self) -> Result<&RouterBundle> {
        self.require_stage(Stage::Pretrain)?;
        self.router
            .as_ref()
            .ok_or_else(|| Error::invalid("pretrain checkpoint without router"))
    }

    pub fn policy(&self) -> Result<&PolicyBundle> {
        self.require_stage(Stage::Posttrain)?;
        self.policy
            .as_ref()
            .ok_or_else(|| Error::invalid("posttrain checkpoint without policy"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_slice(bytes).map_err(|e| Error::format(path, e))?;
        if probe.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: probe.format_version,
            });
        }
        let ckpt: Self = serde_json::from_slice(bytes).map_err(|e| Error::format(path, e))?;
        let consistent = match ckpt.stage {
            Stage::Pretrain => ckpt.router.is_some(),
            Stage::Posttrain => ckpt.policy.is_some(),
        };
        if !consistent {
            return Err(Error::format(
                path,
                format!("{} checkpoint is missing its model", ckpt.stage),
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
