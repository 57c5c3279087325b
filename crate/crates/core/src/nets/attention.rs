use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{glorot, BoundLinear, Linear};
use super::Module;
use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Single-block cross-attention decoder: `horizon` learned query tokens
/// attend to the context vector (a one-token memory), pass through a
/// residual feed-forward sublayer, and are projected to one action each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderExpert {
    /// `[horizon, width]`
    pub queries: Array,
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub out_proj: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub head: Linear,
}

impl DecoderExpert {
    pub fn init(
        context_width: usize,
        width: usize,
        ff_width: usize,
        horizon: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if [context_width, width, ff_width, horizon, action_dim].contains(&0) {
            return Err(Error::invalid("decoder expert dimensions must be positive"));
        }
        Ok(Self {
            queries: glorot(horizon, width, rng),
            query_proj: Linear::init(width, width, rng),
            key_proj: Linear::init(context_width, width, rng),
            value_proj: Linear::init(context_width, width, rng),
            out_proj: Linear::init(width, width, rng),
            ff_in: Linear::init(width, ff_width, rng),
            ff_out: Linear::init(ff_width, width, rng),
            head: Linear::init(width, action_dim, rng),
        })
    }

    pub fn horizon(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn action_dim(&self) -> usize {
        self.head.out_width()
    }

    pub fn context_width(&self) -> usize {
        self.key_proj.in_width()
    }

    fn linears(&self) -> [&Linear; 7] {
        [
            &self.query_proj,
            &self.key_proj,
            &self.value_proj,
            &self.out_proj,
            &self.ff_in,
            &self.ff_out,
            &self.head,
        ]
    }

    /// Chunk `[horizon, action_dim]` for one context vector.
    pub fn forward(&self, context: &Array) -> Result<Array> {
        Ok(self.forward_with_attention(context)?.0)
    }

    /// Also returns the attention weights, `[horizon, memory_len]`.
    pub fn forward_with_attention(&self, context: &Array) -> Result<(Array, Array)> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g, false);
        let c = g.constant(context.clone());
        let (y, attn) = bound.forward_with_attention(&mut g, c)?;
        let chunk = g
            .value(y)
            .clone()
            .reshaped(&[self.horizon(), self.action_dim()])?;
        let attn = g.value(attn).clone().reshaped(&[self.horizon(), 1])?;
        Ok((chunk, attn))
    }
}

impl Module for DecoderExpert {
    type Bound = BoundDecoder;

    fn params(&self) -> Vec<&Array> {
        let mut out = vec![&self.queries];
        out.extend(
            self.linears()
                .into_iter()
                .flat_map(|l| [&l.weight, &l.bias]),
        );
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = vec![&mut self.queries];
        for l in [
            &mut self.query_proj,
            &mut self.key_proj,
            &mut self.value_proj,
            &mut self.out_proj,
            &mut self.ff_in,
            &mut self.ff_out,
            &mut self.head,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    fn attach(&self, vars: &mut dyn Iterator<Item = Var>) -> BoundDecoder {
        let queries = vars.next().expect("query var");
        let l = self.linears().map(|l| l.attach(vars));
        BoundDecoder {
            queries,
            query_proj: l[0],
            key_proj: l[1],
            value_proj: l[2],
            out_proj: l[3],
            ff_in: l[4],
            ff_out: l[5],
            head: l[6],
            horizon: self.horizon(),
            width: self.width(),
            action_dim: self.action_dim(),
            context_width: self.context_width(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundDecoder {
    queries: Var,
    query_proj: BoundLinear,
    key_proj: BoundLinear,
    value_proj: BoundLinear,
    out_proj: BoundLinear,
    ff_in: BoundLinear,
    ff_out: BoundLinear,
    head: BoundLinear,
    horizon: usize,
    width: usize,
    action_dim: usize,
    context_width: usize,
}

impl BoundDecoder {
    pub fn forward(&self, g: &mut Graph, context: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, context)?.0)
    }

    /// `context` is `[batch, context_width]` (or a single vector); output is
    /// `[batch, horizon * action_dim]` plus the `[batch * horizon, 1]`
    /// attention weights.
    pub fn forward_with_attention(&self, g: &mut Graph, context: Var) -> Result<(Var, Var)> {
        let shape = g.shape(context).to_vec();
        if *shape.last().unwrap() != self.context_width || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "decoder_expert_forward",
                lhs: shape,
                rhs: vec![self.context_width],
            });
        }
        let batch = if shape.len() == 2 { shape[0] } else { 1 };
        let context = g.reshape(context, &[batch, self.context_width])?;
        let (h, w) = (self.horizon, self.width);

        let q = self.query_proj.forward(g, self.queries)?; // [H, w]
        let k = self.key_proj.forward(g, context)?; // [B, w]
        let v = self.value_proj.forward(g, context)?; // [B, w]

        // Each query sees only its own sample's single memory token.
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?; // [H, B]
        let scores = g.scale(scores, 1.0 / (w as f64).sqrt())?;
        let scores = g.transpose(scores)?;
        let scores = g.reshape(scores, &[batch * h, 1])?;
        let attn = g.softmax(scores)?;

        let mut spread_memory = Array::zeros(&[batch * h, batch]);
        let mut spread_queries = Array::zeros(&[batch * h, h]);
        for b in 0..batch {
            for t in 0..h {
                spread_memory.data_mut()[(b * h + t) * batch + b] = 1.0;
                spread_queries.data_mut()[(b * h + t) * h + t] = 1.0;
            }
        }
        let spread_memory = g.constant(spread_memory);
        let spread_queries = g.constant(spread_queries);
        let v_rep = g.matmul(spread_memory, v)?; // [B*H, w]
        let mixed = g.mul(attn, v_rep)?;
        let attended = self.out_proj.forward(g, mixed)?;
        let q_rep = g.matmul(spread_queries, self.queries)?;
        let x = g.add(q_rep, attended)?;

        let f = self.ff_in.forward(g, x)?;
        let f = g.relu(f)?;
        let f = self.ff_out.forward(g, f)?;
        let x = g.add(x, f)?;

        let y = self.head.forward(g, x)?; // [B*H, A]
        let y = g.reshape(y, &[batch, h * self.action_dim])?;
        Ok((y, attn))
    }
}
