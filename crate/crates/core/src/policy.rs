//! Stage-2 policy: the frozen student routes, a soft gate weights `N`
//! experts, and the experts' action chunks are averaged under that weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{
    Activation, BoundExpert, BoundGate, BoundMlp, BoundTaskTable, Expert, GateParams, Mlp, MlpSpec,
    Module, TaskEmbeddingTable,
};
use crate::phaseworld::{ACTION_DIM, ACTION_SCALE, MAX_STEP, OBS_DIM};
use crate::trainer::TrainConfig;

/// Tolerance on `sum(p) = 1` for routing rows.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub student: Mlp,
    /// When set, the student is bound as constants and never optimized.
    pub student_frozen: bool,
    pub encoder: Mlp,
    pub tasks: TaskEmbeddingTable,
    pub gate: GateParams,
    pub experts: Vec<Expert>,
    pub horizon: usize,
    pub action_dim: usize,
}

/// Value-level output of [`PolicyBundle::policy_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// `[horizon, action_dim]`, in environment units.
    pub chunk: Array,
    pub routing: Vec<f64>,
    pub latent: Vec<f64>,
}

/// Checks every row of `p` is a distribution to [`SIMPLEX_TOL`].
pub fn check_routing(p: &Array) -> Result<()> {
    for row in p.data().chunks(p.last_dim()) {
        if let Some(&v) = row.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Domain {
                op: "routing",
                value: v,
            });
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("routing row sums to {s}")));
        }
    }
    Ok(())
}

/// Convex combination `sum_n p_n chunks[n]`.
pub fn mix_actions(chunks: &[Array], p: &[f64]) -> Result<Array> {
    let first = chunks.first().ok_or(Error::Empty("expert chunks"))?;
    if chunks.len() != p.len() {
        return Err(Error::ShapeMismatch {
            op: "mix_actions",
            lhs: vec![chunks.len()],
            rhs: vec![p.len()],
        });
    }
    check_routing(&Array::vector(p.to_vec()))?;
    let mut out = Array::zeros(first.shape());
    for (c, &w) in chunks.iter().zip(p) {
        if c.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "mix_actions",
                lhs: first.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        for (o, v) in out.data_mut().iter_mut().zip(c.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Width of [`state_features`].
pub const FEATURE_DIM: usize = OBS_DIM + 6;

/// Encoder input per observation row: the raw observation, then
/// object-minus-agent and goal-minus-agent in units of `MAX_STEP`, then
/// those two distances.
pub fn state_features(obs: &Array) -> Result<Array> {
    if obs.shape().len() != 2 || obs.shape()[1] != OBS_DIM {
        return Err(Error::ShapeMismatch {
            op: "state_features",
            lhs: obs.shape().to_vec(),
            rhs: vec![0, OBS_DIM],
        });
    }
    let mut out = Vec::with_capacity(obs.shape()[0] * FEATURE_DIM);
    for r in obs.data().chunks(OBS_DIM) {
        let to_object = [(r[2] - r[0]) / MAX_STEP, (r[3] - r[1]) / MAX_STEP];
        let to_goal = [(r[4] - r[0]) / MAX_STEP, (r[5] - r[1]) / MAX_STEP];
        out.extend_from_slice(r);
        out.extend_from_slice(&to_object);
        out.extend_from_slice(&to_goal);
        out.push(to_object[0].hypot(to_object[1]));
        out.push(to_goal[0].hypot(to_goal[1]));
    }
    Array::new(vec![obs.shape()[0], FEATURE_DIM], out)
}

/// Normalized chunk (any shape, action-minor) to environment units.
pub fn denormalize_chunk(chunk: &mut Array) {
    for row in chunk.data_mut().chunks_mut(ACTION_DIM) {
        for (a, s) in row.iter_mut().zip(ACTION_SCALE) {
            *a *= s;
        }
    }
}

fn obs_row(obs: &[f64]) -> Result<Array> {
    if obs.len() != OBS_DIM {
        return Err(Error::ShapeMismatch {
            op: "policy_input",
            lhs: vec![obs.len()],
            rhs: vec![OBS_DIM],
        });
    }
    Array::new(vec![1, OBS_DIM], obs.to_vec())
}

impl PolicyBundle {
    /// Fresh stage-2 modules around a pretrained `student`.
    pub fn init(student: Mlp, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        if student.in_width() != OBS_DIM {
            return Err(Error::invalid(format!(
                "student input width {} != {OBS_DIM}",
                student.in_width()
            )));
        }
        let encoder = Mlp::init(
            &MlpSpec::new(
                &[FEATURE_DIM, cfg.encoder_hidden, cfg.encoder_width],
                Activation::Tanh,
            ),
            rng,
        )?;
        let tasks = TaskEmbeddingTable::init(cfg.task_variants, cfg.task_dim, rng)?;
        let gate = GateParams::init(
            &MlpSpec::new(
                &[student.out_width(), cfg.gate_hidden, cfg.num_experts],
                Activation::Tanh,
            ),
            rng,
        )?;
        let context = cfg.encoder_width + cfg.task_dim;
        let experts = (0..cfg.num_experts)
            .map(|_| {
                Expert::init(
                    cfg.expert_arch,
                    context,
                    cfg.expert_hidden,
                    cfg.horizon,
                    ACTION_DIM,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            student,
            student_frozen: cfg.freeze_student,
            encoder,
            tasks,
            gate,
            experts,
            horizon: cfg.horizon,
            action_dim: ACTION_DIM,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn context_width(&self) -> usize {
        self.encoder.out_width() + self.tasks.width()
    }

    pub fn temperature(&self) -> f64 {
        self.gate.temperature()
    }

    /// Parameters the optimizer owns, in registration order. The student is
    /// included only when not frozen.
    pub fn trainable_params(&self) -> Vec<&Array> {
        let mut out = if self.student_frozen {
            vec![]
        } else {
            self.student.params()
        };
        out.extend(self.encoder.params());
        out.extend(self.tasks.params());
        out.extend(self.gate.params());
        for e in &self.experts {
            out.extend(e.params());
        }
        out
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = if self.student_frozen {
            vec![]
        } else {
            self.student.params_mut()
        };
        out.extend(self.encoder.params_mut());
        out.extend(self.tasks.params_mut());
        out.extend(self.gate.params_mut());
        for e in &mut self.experts {
            out.extend(e.params_mut());
        }
        out
    }

    /// Binds every module into `g`; returns the leaves of
    /// [`Self::trainable_params`] in the same order.
    pub fn bind(&self, g: &mut Graph, train: bool) -> (BoundPolicy, Vec<Var>) {
        let (student, sv) = self.student.bind(g, train && !self.student_frozen);
        let (encoder, ev) = self.encoder.bind(g, train);
        let (tasks, tv) = self.tasks.bind(g, train);
        let (gate, gv) = self.gate.bind(g, train);
        let mut vars = if self.student_frozen { vec![] } else { sv };
        vars.extend(ev);
        vars.extend(tv);
        vars.extend(gv);
        let experts = self
            .experts
            .iter()
            .map(|e| {
                let (b, v) = e.bind(g, train);
                vars.extend(v);
                b
            })
            .collect();
        (
            BoundPolicy {
                student,
                encoder,
                tasks,
                gate,
                experts,
            },
            vars,
        )
    }

    /// `(z, p)` for one observation: student latent and gate distribution.
    pub fn route(&self, obs: &[f64]) -> Result<(Array, Array)> {
        let mut g = Graph::new();
        let (b, _) = self.bind(&mut g, false);
        let o = g.constant(obs_row(obs)?);
        let (z, p) = b.route(&mut g, o)?;
        let z = g.value(z).clone().reshaped(&[self.student.out_width()])?;
        let p = g.value(p).clone().reshaped(&[self.num_experts()])?;
        Ok((z, p))
    }

    /// `concat(encoder(state_features(obs)), task_embedding[task])`
    pub fn build_context(&self, obs: &[f64], task: usize) -> Result<Array> {
        self.tasks.lookup(task)?;
        let mut g = Graph::new();
        let (b, _) = self.bind(&mut g, false);
        let o = g.constant(obs_row(obs)?);
        let c = b.context(&mut g, o, &[task])?;
        g.value(c).clone().reshaped(&[self.context_width()])
    }

    pub fn policy_forward(&self, obs: &[f64], task: usize) -> Result<PolicyOutput> {
        self.tasks.lookup(task)?;
        let mut g = Graph::new();
        let (b, _) = self.bind(&mut g, false);
        let o = g.constant(obs_row(obs)?);
        let out = b.forward(&mut g, o, &[task])?;
        let mut chunk = g
            .value(out.chunk)
            .clone()
            .reshaped(&[self.horizon, self.action_dim])?;
        denormalize_chunk(&mut chunk);
        Ok(PolicyOutput {
            chunk,
            routing: g.value(out.routing).data().to_vec(),
            latent: g.value(out.latent).data().to_vec(),
        })
    }
}

/// Graph handles of one batched policy evaluation.
#[derive(Clone, Debug)]
pub struct PolicyVars {
    /// `[B, horizon * action_dim]`, normalized units.
    pub chunk: Var,
    /// `[B, N]`
    pub routing: Var,
    /// `[B, d_z]`
    pub latent: Var,
    pub expert_chunks: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub student: BoundMlp,
    pub encoder: BoundMlp,
    pub tasks: BoundTaskTable,
    pub gate: BoundGate,
    pub experts: Vec<BoundExpert>,
}

impl BoundPolicy {
    pub fn route(&self, g: &mut Graph, obs: Var) -> Result<(Var, Var)> {
        let z = self.student.forward(g, obs)?;
        let p = self.gate.route(g, z)?;
        debug_assert!(check_routing(g.value(p)).is_ok(), "routing off the simplex");
        Ok((z, p))
    }

    pub fn context(&self, g: &mut Graph, obs: Var, tasks: &[usize]) -> Result<Var> {
        let features = g.constant(state_features(g.value(obs))?);
        let e = self.encoder.forward(g, features)?;
        let t = self.tasks.lookup(g, tasks)?;
        g.concat(&[e, t], 1)
    }

    /// `obs` is `[B, 8]`, one task id per row.
    pub fn forward(&self, g: &mut Graph, obs: Var, tasks: &[usize]) -> Result<PolicyVars> {
        if g.shape(obs).len() != 2 || g.shape(obs)[0] != tasks.len() {
            return Err(Error::ShapeMismatch {
                op: "policy_forward",
                lhs: g.shape(obs).to_vec(),
                rhs: vec![tasks.len(), OBS_DIM],
            });
        }
        let (latent, routing) = self.route(g, obs)?;
        let context = self.context(g, obs, tasks)?;
        let expert_chunks = self
            .experts
            .iter()
            .map(|e| e.forward(g, context))
            .collect::<Result<Vec<_>>>()?;
        let chunk = mix_chunks(g, &expert_chunks, routing)?;
        Ok(PolicyVars {
            chunk,
            routing,
            latent,
            expert_chunks,
        })
    }
}

/// Graph form of [`mix_actions`] over a batch: `sum_n p[:, n] * chunks[n]`.
pub fn mix_chunks(g: &mut Graph, chunks: &[Var], p: Var) -> Result<Var> {
    if chunks.is_empty() || g.shape(p).last() != Some(&chunks.len()) {
        return Err(Error::ShapeMismatch {
            op: "mix_chunks",
            lhs: vec![chunks.len()],
            rhs: g.shape(p).to_vec(),
        });
    }
    let mut acc: Option<Var> = None;
    for (n, &c) in chunks.iter().enumerate() {
        let w = g.slice(p, 1, n, n + 1)?;
        let term = g.mul(w, c)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}
