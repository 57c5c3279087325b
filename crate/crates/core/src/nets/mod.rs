//! Parameterized function approximators built on [`crate::diffcore`].
//!
//! Every network implements [`Module`]: a fixed ordering of its parameter
//! arrays plus a way to attach itself to graph leaves holding those
//! parameters. Gradients, optimizer moments and frozen-ness all key off that
//! ordering.

mod attention;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{BoundDecoder, DecoderExpert};
pub use mlp::{glorot, Activation, BoundLinear, BoundMlp, Linear, Mlp, MlpSpec};

use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Initial value of the gate's learnable temperature.
pub const INITIAL_TEMPERATURE: f64 = 100.0;

pub trait Module {
    type Bound;

    fn params(&self) -> Vec<&Array>;
    fn params_mut(&mut self) -> Vec<&mut Array>;

    /// Builds the graph-side view from leaves given in `params()` order.
    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> Self::Bound;

    /// Creates one leaf per parameter and attaches to them. Frozen modules
    /// (`trainable == false`) become constants.
    fn bind(&self, g: &mut Graph, trainable: bool) -> (Self::Bound, Vec<Var>) {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .map(|a| {
                if trainable {
                    g.param(a.clone())
                } else {
                    g.constant(a.clone())
                }
            })
            .collect();
        (self.attach(&mut vars.iter().copied()), vars)
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|a| a.len()).sum()
    }
}

/// Gate MLP plus learnable temperature: `p = softmax(T * mlp(z))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mlp: Mlp,
    /// Shape `[1]`; stored unconstrained.
    pub temperature: Array,
}

impl GateParams {
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::init(spec, rng)?,
            temperature: Array::scalar(INITIAL_TEMPERATURE),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.item()
    }

    pub fn num_experts(&self) -> usize {
        self.mlp.out_width()
    }
}

impl Module for GateParams {
    type Bound = BoundGate;

    fn params(&self) -> Vec<&Array> {
        let mut p = self.mlp.params();
        p.push(&self.temperature);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut p = self.mlp.params_mut();
        p.push(&mut self.temperature);
        p
    }

    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundGate {
        BoundGate {
            mlp: self.mlp.attach(vars),
            temperature: vars.next().expect("temperature var"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundGate {
    pub mlp: BoundMlp,
    pub temperature: Var,
}

impl BoundGate {
    /// Raw gate logits, before temperature scaling.
    pub fn logits(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        self.mlp.forward(g, latent)
    }

    pub fn route(&self, g: &mut Graph, latent: Var) -> Result<Var> {
        let logits = self.logits(g, latent)?;
        let scaled = g.mul(logits, self.temperature)?;
        g.softmax(scaled)
    }
}

/// One learned vector per task variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbeddingTable {
    /// `[variants, width]`
    pub table: Array,
}

impl TaskEmbeddingTable {
    pub fn init(variants: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if variants == 0 || width == 0 {
            return Err(Error::invalid("task table dimensions must be positive"));
        }
        Ok(Self {
            table: glorot(variants, width, rng),
        })
    }

    pub fn variants(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn lookup(&self, task: usize) -> Result<&[f64]> {
        if task >= self.variants() {
            return Err(Error::UnknownTask(task));
        }
        Ok(self.table.row(task))
    }
}

impl Module for TaskEmbeddingTable {
    type Bound = BoundTaskTable;

    fn params(&self) -> Vec<&Array> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.table]
    }

    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundTaskTable {
        BoundTaskTable {
            table: vars.next().expect("table var"),
            variants: self.variants(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundTaskTable {
    pub table: Var,
    variants: usize,
}

impl BoundTaskTable {
    /// `[ids.len(), width]` rows selected through a one-hot product.
    pub fn lookup(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let mut onehot = Array::zeros(&[ids.len().max(1), self.variants]);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.variants {
                return Err(Error::UnknownTask(id));
            }
            onehot.data_mut()[r * self.variants + id] = 1.0;
        }
        let onehot = g.constant(onehot);
        g.matmul(onehot, self.table)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExpertArch {
    #[default]
    Mlp,
    Decoder,
}

/// An action expert mapping a context `[batch, c]` to flattened chunks
/// `[batch, horizon * action_dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum Expert {
    Mlp(Mlp),
    Decoder(DecoderExpert),
}

impl Expert {
    pub fn init(
        arch: ExpertArch,
        context_width: usize,
        hidden: usize,
        horizon: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match arch {
            ExpertArch::Mlp => Expert::Mlp(Mlp::init(
                &MlpSpec::new(
                    &[context_width, hidden, horizon * action_dim],
                    Activation::Relu,
                ),
                rng,
            )?),
            ExpertArch::Decoder => Expert::Decoder(DecoderExpert::init(
                context_width,
                hidden / 2,
                hidden,
                horizon,
                action_dim,
                rng,
            )?),
        })
    }
}

impl Module for Expert {
    type Bound = BoundExpert;

    fn params(&self) -> Vec<&Array> {
        match self {
            Expert::Mlp(m) => m.params(),
            Expert::Decoder(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        match self {
            Expert::Mlp(m) => m.params_mut(),
            Expert::Decoder(d) => d.params_mut(),
        }
    }

    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundExpert {
        match self {
            Expert::Mlp(m) => BoundExpert::Mlp(m.attach(vars)),
            Expert::Decoder(d) => BoundExpert::Decoder(d.attach(vars)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum BoundExpert {
    Mlp(BoundMlp),
    Decoder(BoundDecoder),
}

impl BoundExpert {
    pub fn forward(&self, g: &mut Graph, context: Var) -> Result<Var> {
        match self {
            BoundExpert::Mlp(m) => m.forward(g, context),
            BoundExpert::Decoder(d) => d.forward(g, context),
        }
    }
}
