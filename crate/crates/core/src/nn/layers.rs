use rand::Rng;

use super::graph::{Graph, SeqLayout, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let bias = Some(store.add_const(format!("{name}.b"), &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Like [`Linear::new`] but with an all-zero weight.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add_const(format!("{name}.w"), &[in_dim, out_dim], 0.0);
        let bias = Some(store.add_const(format!("{name}.b"), &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head attention with learned input and output projections. No
/// positional information is ever added, so the layer is equivariant to
/// row permutations within each sequence.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var, layout: &SeqLayout) -> Result<Var> {
        let q = self.query.forward(g, store, q_in)?;
        let k = self.key.forward(g, store, kv_in)?;
        let v = self.value.forward(g, store, kv_in)?;
        let attended = g.attention(q, k, v, self.heads, layout)?;
        self.output.forward(g, store, attended)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SeqLayout) -> Result<Var> {
        let h = self.attn_norm.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, h, layout)?;
        let x = g.add(x, h)?;
        let h = self.ff_norm.forward(g, store, x)?;
        let h = self.ff.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// Stack of pre-norm blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.{i}"), dim, heads, ff_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.ln_f"), dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SeqLayout) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h, layout)?;
        }
        self.final_norm.forward(g, store, h)
    }
}
