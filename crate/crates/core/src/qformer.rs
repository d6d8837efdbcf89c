//! Instruction-conditioned query transformer used by the content and style branches.

use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::params::{Init, ParamId};
use crate::scalar::Scalar;
use crate::textproto::embed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QFormerConfig {
    pub depth: usize,
    pub heads: usize,
    /// Number of learnable queries.
    pub num_queries: usize,
    pub ffn_mult: usize,
    /// Zero the residual output projections so a fresh block is the identity.
    pub zero_init_residual: bool,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self { depth: 2, heads: 4, num_queries: 4, ffn_mult: 2, zero_init_residual: false }
    }
}

impl QFormerConfig {
    pub fn validate(&self, width: usize) -> Result<()> {
        if self.depth == 0 {
            return reject("qformer depth must be at least 1");
        }
        if self.num_queries < 2 {
            return reject("qformer needs at least 2 queries");
        }
        if self.heads == 0 || width % self.heads != 0 {
            return reject(format!("width {width} not divisible by qformer heads {}", self.heads));
        }
        if self.ffn_mult == 0 {
            return reject("ffn_mult must be positive");
        }
        Ok(())
    }
}

/// Pre-norm self-attention with residual: `h + MSA(LN h)`.
#[derive(Clone, Debug)]
pub struct Msa {
    pub ln: LayerNorm,
    pub attn: Attention,
}

impl Msa {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize, zero_out: bool) -> Self {
        let mut sub = init.sub(name);
        Self { ln: LayerNorm::new(&mut sub, "ln", d), attn: Attention::new(&mut sub, "attn", d, heads, zero_out) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var) -> (Var, Var) {
        let x = self.ln.forward(g, h);
        let (a, node) = self.attn.forward(g, x, x, false);
        (g.add(h, a), node)
    }
}

/// Pre-norm cross-attention with residual: `h + MCA(LN h, LN f)`.
#[derive(Clone, Debug)]
pub struct Mca {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
}

impl Mca {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize, zero_out: bool) -> Self {
        let mut sub = init.sub(name);
        Self {
            ln_q: LayerNorm::new(&mut sub, "ln_q", d),
            ln_kv: LayerNorm::new(&mut sub, "ln_kv", d),
            attn: Attention::new(&mut sub, "attn", d, heads, zero_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, f: Var) -> Result<(Var, Var)> {
        if g.shape(h).1 != g.shape(f).1 {
            return reject(format!("cross-attention width mismatch: {} vs {}", g.shape(h).1, g.shape(f).1));
        }
        let q = self.ln_q.forward(g, h);
        let kv = self.ln_kv.forward(g, f);
        let (a, node) = self.attn.forward(g, q, kv, false);
        Ok((g.add(h, a), node))
    }
}

/// MSA, then MCA against a feature map, then a residual feed-forward.
#[derive(Clone, Debug)]
pub struct QBlock {
    pub msa: Msa,
    pub mca: Mca,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl QBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, d: usize, heads: usize, ffn_mult: usize, zero_out: bool) -> Self {
        let mut sub = init.sub(name);
        Self {
            msa: Msa::new(&mut sub, "msa", d, heads, zero_out),
            mca: Mca::new(&mut sub, "mca", d, heads, zero_out),
            ln_ffn: LayerNorm::new(&mut sub, "ln_ffn", d),
            ffn: FeedForward::new(&mut sub, "ffn", d, d * ffn_mult, zero_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, f: Var) -> Result<Var> {
        let (h, _) = self.msa.forward(g, h);
        let (h, _) = self.mca.forward(g, h, f)?;
        let x = self.ln_ffn.forward(g, h);
        let x = self.ffn.forward(g, x);
        Ok(g.add(h, x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    Content,
    Style,
}

impl BranchId {
    pub fn name(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Style => "style",
        }
    }
}

/// One branch: its queries, instruction embedding table, blocks and soft-prompt projection.
#[derive(Clone, Debug)]
pub struct Branch {
    pub id: BranchId,
    pub queries: ParamId,
    pub token_embed: ParamId,
    pub blocks: Vec<QBlock>,
    pub project: Linear,
    pub num_queries: usize,
}

pub struct BranchOutput {
    /// First `k` rows of the final hidden state.
    pub processed_queries: Var,
    pub hidden: Var,
}

impl Branch {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        id: BranchId,
        cfg: &QFormerConfig,
        width: usize,
        vocab_size: usize,
        lm_width: usize,
    ) -> Result<Self> {
        cfg.validate(width)?;
        let mut sub = init.sub(&format!("{}_branch", id.name()));
        let queries = sub.normal("queries", cfg.num_queries, width, 0.5, false);
        let token_embed = sub.normal("token_embed", vocab_size, width, 0.5, false);
        let blocks = (0..cfg.depth)
            .map(|i| QBlock::new(&mut sub, &format!("block{i}"), width, cfg.heads, cfg.ffn_mult, cfg.zero_init_residual))
            .collect();
        let project = Linear::new(&mut sub, "project", width, lm_width, true);
        Ok(Self { id, queries, token_embed, blocks, project, num_queries: cfg.num_queries })
    }

    /// Instruction representation `T` (`j×d`) from the branch's own embedding table.
    pub fn instruction<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: &[u32]) -> Result<Var> {
        embed(g, self.token_embed, tokens)
    }

    /// `h0 = Q ⊕ T`, then the blocks against feature map `f`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, instruction: Var, f: Var) -> Result<BranchOutput> {
        let q = g.param(self.queries);
        if g.shape(instruction).1 != g.shape(q).1 {
            return reject("instruction width does not match the query width");
        }
        let mut h = g.concat_rows(&[q, instruction]);
        for block in &self.blocks {
            h = block.forward(g, h, f)?;
        }
        let processed_queries = g.slice_rows(h, 0, self.num_queries);
        Ok(BranchOutput { processed_queries, hidden: h })
    }

    /// Projected queries followed by the language model's own embedding of the question.
    pub fn soft_prompt<T: Scalar>(&self, g: &mut Graph<'_, T>, processed: Var, lm_question: Var) -> Var {
        let p = self.project.forward(g, processed);
        g.concat_rows(&[p, lm_question])
    }
}
