//! Layers shared by the encoder, the query transformers, the fusion block and the decoder.

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self::with_std(init, name, fan_in, fan_out, bias, std)
    }

    /// Zero weights; used for residual output projections when an identity start is wanted.
    pub fn zeros<T: Scalar>(init: &mut Init<'_, T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self::with_std(init, name, fan_in, fan_out, bias, 0.0)
    }

    pub fn with_std<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let mut sub = init.sub(name);
        let w = sub.normal("w", fan_in, fan_out, std, true);
        let b = bias.then(|| sub.constant("b", 1, fan_out, 0.0, false));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Self {
        let mut sub = init.sub(name);
        let gamma = sub.constant("gamma", 1, dim, 1.0, false);
        let beta = sub.constant("beta", 1, dim, 0.0, false);
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize, zero_out: bool) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let mut sub = init.sub(name);
        let wq = Linear::new(&mut sub, "q", dim, dim, true);
        let wk = Linear::new(&mut sub, "k", dim, dim, true);
        let wv = Linear::new(&mut sub, "v", dim, dim, true);
        let wo = if zero_out {
            Linear::zeros(&mut sub, "o", dim, dim, true)
        } else {
            Linear::new(&mut sub, "o", dim, dim, true)
        };
        Self { wq, wk, wv, wo, heads }
    }

    /// Returns `(output, attention node)`; the attention node exposes cached probabilities.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xq: Var, xkv: Var, causal: bool) -> (Var, Var) {
        let q = self.wq.forward(g, xq);
        let k = self.wk.forward(g, xkv);
        let v = self.wv.forward(g, xkv);
        let a = g.attention_masked(q, k, v, self.heads, causal);
        (self.wo.forward(g, a), a)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, hidden: usize, zero_out: bool) -> Self {
        let mut sub = init.sub(name);
        let up = Linear::new(&mut sub, "up", dim, hidden, true);
        let down = if zero_out {
            Linear::zeros(&mut sub, "down", hidden, dim, true)
        } else {
            Linear::new(&mut sub, "down", hidden, dim, true)
        };
        Self { up, down }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block: `x + MSA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Self {
        let mut sub = init.sub(name);
        Self {
            ln1: LayerNorm::new(&mut sub, "ln1", dim),
            attn: Attention::new(&mut sub, "attn", dim, heads, false),
            ln2: LayerNorm::new(&mut sub, "ln2", dim),
            ffn: FeedForward::new(&mut sub, "ffn", dim, dim * ffn_mult, false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(g, x);
        let (a, _) = self.attn.forward(g, h, h, causal);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}
