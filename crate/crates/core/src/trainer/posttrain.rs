use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState, Stage, CHECKPOINT_VERSION};
use super::optim::{clip_global_norm, AdamWConfig, AdamWState};
use super::{minibatches, stage_rng, TrainConfig, STREAM_POLICY_INIT, STREAM_POSTTRAIN_SHUFFLE};
use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::phaseworld::{Dataset, Sample};
use crate::policy::{check_routing, PolicyBundle};
use crate::pretrain::{batch_arrays, PretrainLogRow};

/// Per-epoch means of the stage-2 objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosttrainLogRow {
    pub epoch: usize,
    pub mse: f64,
    pub distance_consistency: f64,
    pub entropy: f64,
    pub group_sparse: f64,
    pub total: f64,
    /// Per-sample routing entropy averaged over every sample of the epoch.
    pub mean_entropy: f64,
    /// Gate temperature at the end of the epoch.
    pub temperature: f64,
}

pub fn posttrain_csv(rows: &[PosttrainLogRow]) -> String {
    let mut out = String::from("epoch,L_MSE,L_DC,L_H,L_G,total,mean_entropy,T_value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.mse,
            r.distance_consistency,
            r.entropy,
            r.group_sparse,
            r.total,
            r.mean_entropy,
            r.temperature
        ));
    }
    out
}

pub fn write_posttrain_csv(path: &Path, rows: &[PosttrainLogRow]) -> Result<()> {
    std::fs::write(path, posttrain_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, loss, backward and one AdamW update on a minibatch.
pub fn posttrain_step(
    policy: &mut PolicyBundle,
    batch: &[&Sample],
    weights: &LossWeights,
    optimizer: &mut AdamWState,
    max_grad_norm: Option<f64>,
) -> Result<StepReport> {
    let (obs, chunks) = batch_arrays(batch)?;
    let tasks: Vec<usize> = batch.iter().map(|s| s.task).collect();
    let mut g = Graph::new();
    let (bound, vars) = policy.bind(&mut g, true);
    let o = g.constant(obs);
    let target = g.constant(chunks);
    let out = bound.forward(&mut g, o, &tasks)?;
    check_routing(g.value(out.routing))?;
    let terms = total_loss(&mut g, out.chunk, target, out.latent, out.routing, weights)?;
    g.backward(terms.total)?;
    let mut grads: Vec<_> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    let grad_norm = match max_grad_norm {
        Some(m) => clip_global_norm(&mut grads, m),
        None => grads.iter().map(|a| a.sq_norm()).sum::<f64>().sqrt(),
    };
    optimizer.step(&mut policy.trainable_params_mut(), &grads)?;
    Ok(StepReport {
        losses: terms.values(&g),
        grad_norm,
    })
}

/// Resumable stage-2 training state.
#[derive(Clone, Debug)]
pub struct PosttrainTrainer {
    config: TrainConfig,
    policy: PolicyBundle,
    optimizer: AdamWState,
    rng: ChaCha8Rng,
    epochs_completed: usize,
    log: Vec<PosttrainLogRow>,
    pretrain_log: Vec<PretrainLogRow>,
    routing_checks: usize,
}

impl PosttrainTrainer {
    /// Starts stage 2 from a `stage = pretrain` checkpoint. Stage-2 settings
    /// come from `config`.
    pub fn from_pretrain(config: &TrainConfig, pretrained: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let router = pretrained.router()?;
        if router.horizon != config.horizon {
            return Err(Error::invalid(format!(
                "pretrained horizon {} != configured {}",
                router.horizon, config.horizon
            )));
        }
        let policy = PolicyBundle::init(
            router.student.clone(),
            config,
            &mut stage_rng(config.seed, STREAM_POLICY_INIT),
        )?;
        let optimizer = AdamWState::new(
            AdamWConfig::new(config.posttrain_lr, config.weight_decay),
            &policy.trainable_params(),
        );
        Ok(Self {
            config: config.clone(),
            policy,
            optimizer,
            rng: stage_rng(config.seed, STREAM_POSTTRAIN_SHUFFLE),
            epochs_completed: 0,
            log: vec![],
            pretrain_log: pretrained.pretrain_log.clone(),
            routing_checks: 0,
        })
    }

    /// Resumes from a `stage = posttrain` checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let policy = ckpt.policy()?.clone();
        if ckpt.optimizer.num_registered() != policy.trainable_params().len() {
            return Err(Error::invalid(
                "optimizer state does not match the trainable set",
            ));
        }
        Ok(Self {
            rng: ckpt.rng.restore()?,
            config: ckpt.config,
            policy,
            optimizer: ckpt.optimizer,
            epochs_completed: ckpt.epochs_completed,
            log: ckpt.posttrain_log,
            pretrain_log: ckpt.pretrain_log,
            routing_checks: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &PolicyBundle {
        &self.policy
    }

    pub fn log(&self) -> &[PosttrainLogRow] {
        &self.log
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    /// Number of minibatch forwards whose routing was checked against the
    /// simplex since this trainer was created.
    pub fn routing_checks(&self) -> usize {
        self.routing_checks
    }

    pub fn optimizer(&self) -> &AdamWState {
        &self.optimizer
    }

    pub fn run_epochs(&mut self, dataset: &Dataset, epochs: usize) -> Result<&[PosttrainLogRow]> {
        self.run_epochs_with(dataset, epochs, |_, _| {})
    }

    /// Like [`Self::run_epochs`]; `after_step` sees the policy after every update.
    pub fn run_epochs_with(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        mut after_step: impl FnMut(&PolicyBundle, &StepReport),
    ) -> Result<&[PosttrainLogRow]> {
        let samples = dataset.samples(self.config.horizon);
        if samples.len() < 2 {
            return Err(Error::Empty("dataset (stage 2 needs at least two samples)"));
        }
        let weights = self.config.effective_weights();
        let clip = self.config.clip_grad.then_some(self.config.max_grad_norm);
        let start = self.log.len();
        for _ in 0..epochs {
            let batches = minibatches(samples.len(), self.config.batch_size, &mut self.rng);
            let mut sums = LossBreakdown::default();
            let mut entropy_weighted = 0.0;
            for idx in &batches {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
                let report = posttrain_step(
                    &mut self.policy,
                    &batch,
                    &weights,
                    &mut self.optimizer,
                    clip,
                )?;
                self.routing_checks += 1;
                let l = report.losses;
                sums.mse += l.mse;
                sums.distance_consistency += l.distance_consistency;
                sums.entropy += l.entropy;
                sums.group_sparse += l.group_sparse;
                sums.total += l.total;
                entropy_weighted += l.entropy * batch.len() as f64;
                after_step(&self.policy, &report);
            }
            let n = batches.len() as f64;
            self.log.push(PosttrainLogRow {
                epoch: self.epochs_completed,
                mse: sums.mse / n,
                distance_consistency: sums.distance_consistency / n,
                entropy: sums.entropy / n,
                group_sparse: sums.group_sparse / n,
                total: sums.total / n,
                mean_entropy: entropy_weighted / samples.len() as f64,
                temperature: self.policy.temperature(),
            });
            self.epochs_completed += 1;
        }
        Ok(&self.log[start..])
    }

    /// Trains until `config.posttrain_epochs` epochs are complete.
    pub fn run(&mut self, dataset: &Dataset) -> Result<&[PosttrainLogRow]> {
        let remaining = self
            .config
            .posttrain_epochs
            .saturating_sub(self.epochs_completed);
        self.run_epochs(dataset, remaining)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: Stage::Posttrain,
            config: self.config.clone(),
            router: None,
            policy: Some(self.policy.clone()),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            epochs_completed: self.epochs_completed,
            pretrain_log: self.pretrain_log.clone(),
            posttrain_log: self.log.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PosttrainOutcome {
    pub policy: PolicyBundle,
    pub log: Vec<PosttrainLogRow>,
    pub checkpoint: Checkpoint,
}

/// Full stage 2 from a pretrain checkpoint.
pub fn posttrain_loop(
    config: &TrainConfig,
    dataset: &Dataset,
    pretrained: &Checkpoint,
) -> Result<PosttrainOutcome> {
    let mut trainer = PosttrainTrainer::from_pretrain(config, pretrained)?;
    trainer.run(dataset)?;
    Ok(PosttrainOutcome {
        policy: trainer.policy.clone(),
        log: trainer.log.clone(),
        checkpoint: trainer.checkpoint(),
    })
}
