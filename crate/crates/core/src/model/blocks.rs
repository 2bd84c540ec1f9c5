//! The four attention layer kinds. Each sublayer output passes through
//! dropout, is added to its input, and is layer-normalized.

use rand_chacha::ChaCha8Rng;

use crate::attention::{subspace_switch, Msa};
use crate::layers::{FeedForward, Norm};
use crate::tensor::{Bound, Graph, Mode, ParamStore, Result, Tensor, Var};

fn residual(g: &mut Graph, p: &Bound, norm: &Norm, x: Var, sub: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let sub = g.dropout(sub, rate, mode);
    let sum = g.add(x, sub)?;
    norm.forward(g, p, sum)
}

/// Self-attention over the whole map followed by a feed-forward sublayer.
#[derive(Debug, Clone, Copy)]
pub struct EncGLayer {
    pub attn: Msa,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

impl EncGLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: Msa::new(store, &format!("{name}.attn"), d, heads, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
        }
    }

    pub fn num_params(d: usize, d_ff: usize) -> usize {
        Msa::num_params(d) + FeedForward::num_params(d, d_ff) + 2 * Norm::num_params(d)
    }

    /// `h × N × d → h × N × d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        mask: &Tensor,
        rate: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, p, h, h, h, Some(mask))?;
        let pre = residual(g, p, &self.norm1, h, a, rate, mode)?;
        let f = self.ffn.forward(g, p, pre)?;
        residual(g, p, &self.norm2, pre, f, rate, mode)
    }
}

/// Self-attention, cross-attention into a memory, then a feed-forward sublayer.
#[derive(Debug, Clone, Copy)]
pub struct CrossLayer {
    pub self_attn: Msa,
    pub norm1: Norm,
    pub cross_attn: Msa,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

impl CrossLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            self_attn: Msa::new(store, &format!("{name}.self"), d, heads, rng),
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            cross_attn: Msa::new(store, &format!("{name}.cross"), d, heads, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff, rng),
            norm3: Norm::new(store, &format!("{name}.norm3"), d),
        }
    }

    pub fn num_params(d: usize, d_ff: usize) -> usize {
        2 * Msa::num_params(d) + FeedForward::num_params(d, d_ff) + 3 * Norm::num_params(d)
    }

    /// Local-block layer: `h × N_D × d` self-attends under `self_mask`, then
    /// queries the final global representation `memory: h × N × d`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        memory: Var,
        self_mask: Option<&Tensor>,
        cross_mask: Option<&Tensor>,
        rate: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, p, h, h, h, self_mask)?;
        let pre = residual(g, p, &self.norm1, h, a, rate, mode)?;
        let c = self.cross_attn.forward(g, p, pre, memory, memory, cross_mask)?;
        let mid = residual(g, p, &self.norm2, pre, c, rate, mode)?;
        let f = self.ffn.forward(g, p, mid)?;
        residual(g, p, &self.norm3, mid, f, rate, mode)
    }

    /// Fusion layer over `h_t: 1 × f × d`. After causal self-attention the
    /// sequence is switched to `f × 1 × d` so each future step attends across
    /// the subspaces of `switched: f × h × d`, then switched back.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_switched(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_t: Var,
        switched: Var,
        mask: &Tensor,
        rate: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, p, h_t, h_t, h_t, Some(mask))?;
        let pre = residual(g, p, &self.norm1, h_t, a, rate, mode)?;
        let q = subspace_switch(g, pre)?;
        let c = self.cross_attn.forward(g, p, q, switched, switched, None)?;
        let c = subspace_switch(g, c)?;
        let mid = residual(g, p, &self.norm2, pre, c, rate, mode)?;
        let f = self.ffn.forward(g, p, mid)?;
        residual(g, p, &self.norm3, mid, f, rate, mode)
    }
}
