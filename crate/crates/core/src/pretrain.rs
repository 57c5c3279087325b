//! Stage 1: label-free student/teacher co-training.
//!
//! The teacher sees the observation and the upcoming action chunk and must
//! produce a latent from which the decoder reconstructs that chunk (`L_t`).
//! The student sees only the observation and regresses onto the teacher's
//! latent (`L_s`). Only the student survives into stage 2.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Activation, BoundMlp, Mlp, MlpSpec, Module};
use crate::phaseworld::{Dataset, Sample, ACTION_DIM, OBS_DIM};
use crate::trainer::{
    minibatches, stage_rng, AdamWConfig, AdamWState, Checkpoint, PretrainSchedule, RngState,
    TrainConfig, STREAM_PRETRAIN_SHUFFLE, STREAM_ROUTER_INIT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterBundle {
    /// `obs -> z`
    pub student: Mlp,
    /// `concat(obs, flatten(chunk)) -> z`
    pub teacher: Mlp,
    /// `z -> flatten(chunk)`
    pub decoder: Mlp,
    pub horizon: usize,
}

impl RouterBundle {
    /// Student, teacher and decoder each with two hidden layers of `hidden`.
    pub fn init(
        horizon: usize,
        latent_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let chunk = horizon * ACTION_DIM;
        let mlp =
            |widths: &[usize], rng: &mut _| Mlp::init(&MlpSpec::new(widths, Activation::Tanh), rng);
        Ok(Self {
            student: mlp(&[OBS_DIM, hidden, hidden, latent_dim], rng)?,
            teacher: mlp(&[OBS_DIM + chunk, hidden, hidden, latent_dim], rng)?,
            decoder: mlp(&[latent_dim, hidden, hidden, chunk], rng)?,
            horizon,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::init(
            cfg.horizon,
            cfg.latent_dim,
            cfg.router_hidden,
            &mut stage_rng(cfg.seed, STREAM_ROUTER_INIT),
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.student.out_width()
    }

    /// `z = teacher(concat(obs, flatten(chunk)))`, `chunk` is `[H, A]`.
    pub fn teacher_encode(&self, obs: &[f64], chunk: &Array) -> Result<Array> {
        if chunk.shape() != [self.horizon, ACTION_DIM] || obs.len() != OBS_DIM {
            return Err(Error::ShapeMismatch {
                op: "teacher_encode",
                lhs: vec![obs.len(), chunk.len()],
                rhs: vec![OBS_DIM, self.horizon * ACTION_DIM],
            });
        }
        let mut input = obs.to_vec();
        input.extend_from_slice(chunk.data());
        self.teacher.forward(&Array::vector(input))
    }

    /// `z_hat = student(obs)`
    pub fn student_encode(&self, obs: &[f64]) -> Result<Array> {
        self.student.forward(&Array::vector(obs.to_vec()))
    }
}

impl Module for RouterBundle {
    type Bound = BoundRouter;

    fn params(&self) -> Vec<&Array> {
        let mut p = self.student.params();
        p.extend(self.teacher.params());
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.student.params_mut();
        p.extend(self.teacher.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundRouter {
        BoundRouter {
            student: self.student.attach(vars),
            teacher: self.teacher.attach(vars),
            decoder: self.decoder.attach(vars),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundRouter {
    pub student: BoundMlp,
    pub teacher: BoundMlp,
    pub decoder: BoundMlp,
}

/// Graph handles of both stage-1 losses.
#[derive(Clone, Copy, Debug)]
pub struct PretrainVars {
    pub student_loss: Var,
    pub teacher_loss: Var,
    pub latent: Var,
    pub student_latent: Var,
}

impl BoundRouter {
    /// `obs` is `[B, 8]`, `chunks` is `[B, H*A]`.
    pub fn losses(
        &self,
        g: &mut Graph,
        obs: Var,
        chunks: Var,
        detach: bool,
    ) -> Result<PretrainVars> {
        let input = g.concat(&[obs, chunks], 1)?;
        let latent = self.teacher.forward(g, input)?;
        let recon = self.decoder.forward(g, latent)?;
        let teacher_loss = crate::losses::mse(g, recon, chunks)?;
        let student_latent = self.student.forward(g, obs)?;
        let target = if detach { g.detach(latent) } else { latent };
        let student_loss = crate::losses::mse(g, student_latent, target)?;
        Ok(PretrainVars {
            student_loss,
            teacher_loss,
            latent,
            student_latent,
        })
    }
}

/// Which loss drives an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainObjective {
    Both,
    StudentOnly,
    TeacherOnly,
}

/// `([B, 8], [B, H*A])` for a set of samples.
pub fn batch_arrays(batch: &[&Sample]) -> Result<(Array, Array)> {
    let first = batch.first().ok_or(Error::Empty("batch"))?;
    let width = first.chunk.len();
    let mut obs = Vec::with_capacity(batch.len() * OBS_DIM);
    let mut chunks = Vec::with_capacity(batch.len() * width);
    for s in batch {
        if s.chunk.len() != width {
            return Err(Error::ShapeMismatch {
                op: "batch_arrays",
                lhs: vec![width],
                rhs: vec![s.chunk.len()],
            });
        }
        obs.extend_from_slice(&s.obs);
        chunks.extend_from_slice(&s.chunk);
    }
    Ok((
        Array::new(vec![batch.len(), OBS_DIM], obs)?,
        Array::new(vec![batch.len(), width], chunks)?,
    ))
}

/// Losses and gradients (in `params()` order) without updating anything.
pub fn pretrain_gradients(
    bundle: &RouterBundle,
    batch: &[&Sample],
    detach: bool,
    objective: PretrainObjective,
) -> Result<(f64, f64, Vec<Array>)> {
    let (obs, chunks) = batch_arrays(batch)?;
    let mut g = Graph::new();
    let (bound, vars) = bundle.bind(&mut g, true);
    let o = g.constant(obs);
    let c = g.constant(chunks);
    let l = bound.losses(&mut g, o, c, detach)?;
    let root = match objective {
        PretrainObjective::Both => g.add(l.student_loss, l.teacher_loss)?,
        PretrainObjective::StudentOnly => l.student_loss,
        PretrainObjective::TeacherOnly => l.teacher_loss,
    };
    g.backward(root)?;
    let grads = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    Ok((
        g.value(l.student_loss).item(),
        g.value(l.teacher_loss).item(),
        grads,
    ))
}

/// One optimizer update; returns the batch-mean `(L_s, L_t)` before it.
pub fn pretrain_step(
    bundle: &mut RouterBundle,
    batch: &[&Sample],
    optimizer: &mut AdamWState,
    detach: bool,
    objective: PretrainObjective,
) -> Result<(f64, f64)> {
    let (ls, lt, grads) = pretrain_gradients(bundle, batch, detach, objective)?;
    optimizer.step(&mut bundle.params_mut(), &grads)?;
    Ok((ls, lt))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogRow {
    pub epoch: usize,
    pub student_loss: f64,
    pub teacher_loss: f64,
    pub steps: usize,
}

pub fn pretrain_csv(rows: &[PretrainLogRow]) -> String {
    let mut out = String::from("epoch,L_s,L_t\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.epoch, r.student_loss, r.teacher_loss
        ));
    }
    out
}

pub fn write_pretrain_csv(path: &Path, rows: &[PretrainLogRow]) -> Result<()> {
    std::fs::write(path, pretrain_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub bundle: RouterBundle,
    pub log: Vec<PretrainLogRow>,
    pub checkpoint: Checkpoint,
}

/// Runs stage 1 for `config.pretrain_epochs` epochs of shuffled minibatches.
pub fn pretrain_loop(config: &TrainConfig, dataset: &Dataset) -> Result<PretrainOutcome> {
    config.validate()?;
    let samples = dataset.samples(config.horizon);
    if samples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut bundle = RouterBundle::from_config(config)?;
    let mut optimizer = AdamWState::new(
        AdamWConfig::new(config.pretrain_lr, config.pretrain_weight_decay),
        &bundle.params(),
    );
    let mut rng = stage_rng(config.seed, STREAM_PRETRAIN_SHUFFLE);
    let mut log = Vec::with_capacity(config.pretrain_epochs);
    let mut step = 0usize;
    for epoch in 0..config.pretrain_epochs {
        let (mut ls_sum, mut lt_sum) = (0.0, 0.0);
        let batches = minibatches(samples.len(), config.batch_size, &mut rng);
        for idx in &batches {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let objective = match config.pretrain_schedule {
                PretrainSchedule::Joint => PretrainObjective::Both,
                PretrainSchedule::Alternate if step.is_multiple_of(2) => PretrainObjective::TeacherOnly,
                PretrainSchedule::Alternate => PretrainObjective::StudentOnly,
            };
            let (ls, lt) = pretrain_step(
                &mut bundle,
                &batch,
                &mut optimizer,
                config.detach_teacher_latent,
                objective,
            )?;
            ls_sum += ls;
            lt_sum += lt;
            step += 1;
        }
        log.push(PretrainLogRow {
            epoch,
            student_loss: ls_sum / batches.len() as f64,
            teacher_loss: lt_sum / batches.len() as f64,
            steps: batches.len(),
        });
    }
    let checkpoint = Checkpoint::pretrain(
        config.clone(),
        bundle.clone(),
        optimizer,
        RngState::capture(&rng),
        log.clone(),
    );
    Ok(PretrainOutcome {
        bundle,
        log,
        checkpoint,
    })
}
