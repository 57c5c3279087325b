use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Module;
use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Layer widths from input to output, e.g. `[8, 64, 64, 16]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], activation: Activation) -> Self {
        Self {
            widths: widths.to_vec(),
            activation,
        }
    }
}

/// Glorot-uniform matrix: entries in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Array::new(vec![rows, cols], data).expect("positive extents")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Array,
    /// `[out]`
    pub bias: Array,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(fan_in, fan_out, rng),
            bias: Array::zeros(&[fan_out]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundLinear {
        BoundLinear {
            weight: vars.next().expect("weight var"),
            bias: vars.next().expect("bias var"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add(h, self.bias)
    }
}

/// Multi-layer perceptron: affine + activation on every layer but the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "mlp widths {:?} need at least two positive entries",
                spec.widths
            )));
        }
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Self {
            layers,
            activation: spec.activation,
        })
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().expect("nonempty").out_width()
    }

    pub fn spec(&self) -> MlpSpec {
        let mut widths = vec![self.in_width()];
        widths.extend(self.layers.iter().map(Linear::out_width));
        MlpSpec {
            widths,
            activation: self.activation,
        }
    }

    /// Evaluates on `x` (`[batch, in]` or `[in]`) without recording gradients.
    pub fn forward(&self, x: &Array) -> Result<Array> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = bound.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

impl Module for Mlp {
    type Bound = BoundMlp;

    fn params(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.attach(vars)).collect(),
            activation: self.activation,
            in_width: self.in_width(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    activation: Activation,
    in_width: usize,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = *g.shape(x).last().expect("rank >= 1");
        if width != self.in_width {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.in_width],
            });
        }
        // A lone vector is treated as a batch of one.
        let rank1 = g.shape(x).len() == 1;
        let mut h = if rank1 { g.reshape(x, &[1, width])? } else { x };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        if rank1 {
            let out = g.shape(h)[1];
            h = g.reshape(h, &[out])?;
        }
        Ok(h)
    }
}
