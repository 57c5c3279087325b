use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::ExpertArch;

/// How the two stage-1 losses share optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainSchedule {
    /// `L_s + L_t` every step.
    #[default]
    Joint,
    /// Even steps use `L_t`, odd steps `L_s`.
    Alternate,
}

/// Every knob of both training stages. Serialized as a flat JSON object;
/// absent keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub horizon: usize,
    pub latent_dim: usize,
    pub router_hidden: usize,
    pub batch_size: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_schedule: PretrainSchedule,
    /// Stop-gradient on the teacher latent inside `L_s`.
    pub detach_teacher_latent: bool,

    pub num_experts: usize,
    pub expert_arch: ExpertArch,
    pub expert_hidden: usize,
    pub gate_hidden: usize,
    pub encoder_hidden: usize,
    pub encoder_width: usize,
    pub task_dim: usize,
    pub task_variants: usize,

    pub posttrain_epochs: usize,
    pub posttrain_lr: f64,
    pub weight_decay: f64,
    pub clip_grad: bool,
    pub max_grad_norm: f64,
    /// `+F`: keep the pretrained student fixed in stage 2.
    pub freeze_student: bool,
    /// `+R`: apply the routing regularizers (otherwise all lambdas are 0).
    pub regularize: bool,
    pub lambda_dc: f64,
    pub lambda_h: f64,
    pub lambda_g: f64,
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 0,
            horizon: 10,
            latent_dim: 16,
            router_hidden: 64,
            batch_size: 64,
            pretrain_epochs: 50,
            pretrain_lr: 1e-3,
            pretrain_weight_decay: 0.0,
            pretrain_schedule: PretrainSchedule::Joint,
            detach_teacher_latent: true,
            num_experts: 8,
            expert_arch: ExpertArch::Mlp,
            expert_hidden: 64,
            gate_hidden: 32,
            encoder_hidden: 64,
            encoder_width: 32,
            task_dim: 8,
            task_variants: 4,
            posttrain_epochs: 20,
            posttrain_lr: 1e-3,
            weight_decay: 1e-4,
            clip_grad: true,
            max_grad_norm: 10.0,
            freeze_student: true,
            regularize: true,
            lambda_dc: w.lambda_dc,
            lambda_h: w.lambda_h,
            lambda_g: w.lambda_g,
            sigma: w.sigma,
        }
    }
}

/// The fields that determine a stage-1 result.
#[derive(Serialize)]
struct PretrainKey<'a> {
    seed: u64,
    horizon: usize,
    latent_dim: usize,
    router_hidden: usize,
    batch_size: usize,
    pretrain_epochs: usize,
    pretrain_lr: f64,
    pretrain_weight_decay: f64,
    pretrain_schedule: &'a PretrainSchedule,
    detach_teacher_latent: bool,
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..6])
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("latent_dim", self.latent_dim),
            ("router_hidden", self.router_hidden),
            ("batch_size", self.batch_size),
            ("num_experts", self.num_experts),
            ("expert_hidden", self.expert_hidden),
            ("gate_hidden", self.gate_hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_width", self.encoder_width),
            ("task_dim", self.task_dim),
            ("task_variants", self.task_variants),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.expert_arch == ExpertArch::Decoder && self.expert_hidden < 2 {
            return Err(Error::invalid("decoder experts need expert_hidden >= 2"));
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("posttrain_lr", self.posttrain_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::invalid(format!("{name} must be > 0, got {lr}")));
            }
        }
        for (name, wd) in [
            ("pretrain_weight_decay", self.pretrain_weight_decay),
            ("weight_decay", self.weight_decay),
        ] {
            if !(wd.is_finite() && wd >= 0.0) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {wd}")));
            }
        }
        if self.clip_grad && !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(Error::invalid("max_grad_norm must be > 0"));
        }
        self.weights().validate()
    }

    /// Loss weights as configured, ignoring the `regularize` switch.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dc: self.lambda_dc,
            lambda_h: self.lambda_h,
            lambda_g: self.lambda_g,
            sigma: self.sigma,
        }
    }

    /// Weights actually applied in stage 2: zero multipliers when `regularize` is off.
    pub fn effective_weights(&self) -> LossWeights {
        if self.regularize {
            self.weights()
        } else {
            LossWeights {
                sigma: self.sigma,
                ..LossWeights::ZERO
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a `key=value` override. `key` may be a dotted path; `value`
    /// is parsed as JSON, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override '{assignment}' is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.trim().split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::invalid(format!("unknown config key '{key}'")))?;
        }
        *slot = value;
        let next: Self = serde_json::from_value(tree)
            .map_err(|e| Error::invalid(format!("bad value for '{key}': {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    /// Identifies the stage-1 result this config produces.
    pub fn pretrain_key(&self) -> String {
        let key = PretrainKey {
            seed: self.seed,
            horizon: self.horizon,
            latent_dim: self.latent_dim,
            router_hidden: self.router_hidden,
            batch_size: self.batch_size,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_lr: self.pretrain_lr,
            pretrain_weight_decay: self.pretrain_weight_decay,
            pretrain_schedule: &self.pretrain_schedule,
            detach_teacher_latent: self.detach_teacher_latent,
        };
        short_hash(&serde_json::to_vec(&key).expect("key serializes"))
    }

    /// Short digest of the full configuration.
    pub fn config_hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back: TrainConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"num_experts": 4}"#).unwrap();
        assert_eq!(partial.num_experts, 4);
        assert_eq!(partial.horizon, 10);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = TrainConfig::default();
        for o in [
            "lambda_dc=0",
            "lambda_h=0",
            "lambda_g=0",
            "freeze_student=false",
            "expert_arch=decoder",
        ] {
            cfg.apply_override(o).unwrap();
        }
        assert_eq!(
            cfg.weights(),
            LossWeights {
                sigma: 1.0,
                ..LossWeights::ZERO
            }
        );
        assert!(!cfg.freeze_student);
        assert_eq!(cfg.expert_arch, ExpertArch::Decoder);
        assert!(cfg.apply_override("nope=1").is_err());
        assert!(cfg.apply_override("num_experts=0").is_err());
        assert!(cfg.apply_override("num_experts").is_err());
        assert_eq!(cfg.num_experts, 8);
    }

    #[test]
    fn regularize_off_zeroes_weights() {
        let cfg = TrainConfig {
            regularize: false,
            ..TrainConfig::default()
        };
        let w = cfg.effective_weights();
        assert_eq!((w.lambda_dc, w.lambda_h, w.lambda_g), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pretrain_key_ignores_stage_two() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            num_experts: 2,
            freeze_student: false,
            regularize: false,
            ..a.clone()
        };
        assert_eq!(a.pretrain_key(), b.pretrain_key());
        assert_ne!(a.config_hash(), b.config_hash());
        let c = TrainConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.pretrain_key(), c.pretrain_key());
    }
}
