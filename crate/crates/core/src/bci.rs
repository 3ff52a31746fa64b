//! Bi-directional cross interaction between a visible and an infrared
//! feature map, plus the aggregation contrastive objective over pair outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Bound, FeedForwardBlock, LayerNormParams, ParameterSet};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 1.0 / 16.0;
const POOL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BciConfig {
    pub dim: usize,
    /// Number of stacked blocks after the initial interaction.
    pub depth: usize,
    pub heads: usize,
    pub tau: f64,
}

impl Default for BciConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            depth: 3,
            heads: 1,
            tau: DEFAULT_TAU,
        }
    }
}

impl BciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("bci width must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} heads do not divide bci width {}",
                self.heads, self.dim
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        Ok(())
    }
}

/// One stream's half of a block.
#[derive(Clone, Debug)]
pub struct StreamParams {
    pub ln1: LayerNormParams,
    pub attn: Attention,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardBlock,
}

impl StreamParams {
    fn new(
        params: &mut ParameterSet,
        name: &str,
        cfg: &BciConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormParams::new(params, &format!("{name}.ln1"), cfg.dim)?,
            attn: Attention::new(params, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ln2: LayerNormParams::new(params, &format!("{name}.ln2"), cfg.dim)?,
            ffn: FeedForwardBlock::new(params, &format!("{name}.ffn"), cfg.dim, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BciBlock {
    pub visible: StreamParams,
    pub infrared: StreamParams,
}

/// Initial interaction (one attention per direction) followed by `depth`
/// blocks, each with its own parameters.
#[derive(Clone, Debug)]
pub struct BciStack {
    pub config: BciConfig,
    pub init_visible: Attention,
    pub init_infrared: Attention,
    pub blocks: Vec<BciBlock>,
}

impl BciStack {
    /// Registers all parameters under `prefix` in `params`.
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        config: BciConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let init_visible = Attention::new(
            params,
            &format!("{prefix}.init_vis"),
            config.dim,
            config.heads,
            rng,
        )?;
        let init_infrared = Attention::new(
            params,
            &format!("{prefix}.init_ir"),
            config.dim,
            config.heads,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for t in 0..config.depth {
            blocks.push(BciBlock {
                visible: StreamParams::new(
                    params,
                    &format!("{prefix}.block{t}.vis"),
                    &config,
                    rng,
                )?,
                infrared: StreamParams::new(
                    params,
                    &format!("{prefix}.block{t}.ir"),
                    &config,
                    rng,
                )?,
            });
        }
        Ok(Self {
            config,
            init_visible,
            init_infrared,
            blocks,
        })
    }

    /// Runs the initial interaction and every block; returns the refined
    /// `(visible, infrared)` features.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_v: Var, f_i: Var) -> Result<(Var, Var)> {
        self.forward_grouped(tape, p, f_v, f_i, 1)
    }

    /// As [`BciStack::forward`] for `groups` pairs stacked as `(G·N)×C`.
    pub fn forward_grouped(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f_v: Var,
        f_i: Var,
        groups: usize,
    ) -> Result<(Var, Var)> {
        let (mut v, mut i) = bci_init(tape, self, p, f_v, f_i, groups)?;
        for block in &self.blocks {
            (v, i) = bci_block_forward(tape, block, p, v, i, groups)?;
        }
        Ok((v, i))
    }
}

/// `softmax((Q W_q)(KV W_k)ᵀ / √C) · KV W_v`, separately for each of
/// `groups` stacked pairs.
pub fn cross_attention(
    tape: &mut Tape,
    attn: &Attention,
    p: &Bound,
    q_in: Var,
    kv_in: Var,
    groups: usize,
) -> Result<Var> {
    attn.forward_grouped(tape, p, q_in, kv_in, groups)
}

/// Each stream attends to the other's raw features.
pub fn bci_init(
    tape: &mut Tape,
    stack: &BciStack,
    p: &Bound,
    f_v: Var,
    f_i: Var,
    groups: usize,
) -> Result<(Var, Var)> {
    let v = cross_attention(tape, &stack.init_visible, p, f_v, f_i, groups)?;
    let i = cross_attention(tape, &stack.init_infrared, p, f_i, f_v, groups)?;
    Ok((v, i))
}

/// Pre-norm residual block. Both streams read the stage-`t` features of the
/// other stream, so the update is parallel rather than sequential.
pub fn bci_block_forward(
    tape: &mut Tape,
    block: &BciBlock,
    p: &Bound,
    f_v: Var,
    f_i: Var,
    groups: usize,
) -> Result<(Var, Var)> {
    let x_v = block.visible.ln1.forward(tape, p, f_v)?;
    let x_i = block.infrared.ln1.forward(tape, p, f_i)?;
    let v = stream_update(tape, &block.visible, p, f_v, x_v, x_i, groups)?;
    let i = stream_update(tape, &block.infrared, p, f_i, x_i, x_v, groups)?;
    Ok((v, i))
}

fn stream_update(
    tape: &mut Tape,
    s: &StreamParams,
    p: &Bound,
    f: Var,
    x_self: Var,
    x_other: Var,
    groups: usize,
) -> Result<Var> {
    let a = cross_attention(tape, &s.attn, p, x_self, x_other, groups)?;
    let h = tape.add(f, a)?;
    let n = s.ln2.forward(tape, p, h)?;
    let m = s.ffn.forward(tape, p, n)?;
    tape.add(h, m)
}

/// Mean over patches followed by L2 normalization, `N×C → [C]`.
pub fn pool_normalize(tape: &mut Tape, f: Var) -> Result<Var> {
    let pooled = tape.mean_pool_rows(f)?;
    tape.l2_normalize(pooled, POOL_EPS)
}

/// [`pool_normalize`] for each of `groups` stacked maps: `(G·N)×C → G×C`.
pub fn pool_normalize_groups(tape: &mut Tape, f: Var, groups: usize) -> Result<Var> {
    let pooled = tape.mean_pool_groups(f, groups)?;
    tape.l2_normalize(pooled, POOL_EPS)
}

/// Supervised contrastive loss over L2-normalized rows `[M × C]` with
/// similarities `f_i·f_j / τ`. Anchors without a positive are skipped.
pub fn aggregation_contrastive_loss(
    tape: &mut Tape,
    pooled: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::usage("tau must be positive"));
    }
    let m = tape.value(pooled).dims2()?.0;
    if m < 2 {
        return Err(Error::usage("contrastive loss needs at least two vectors"));
    }
    let t = tape.transpose(pooled)?;
    let sims = tape.matmul(pooled, t)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    tape.contrastive(logits, labels)
}

/// All visible × infrared pairs of a batch, visible-index-major: pair
/// `p = vis·B + ir`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// `[B² × N × C]`
    pub f_v0: Tensor,
    /// `[B² × N × C]`
    pub f_i0: Tensor,
    pub labels: Vec<bool>,
    pub sources: Vec<(usize, usize)>,
    pub vis_identities: Vec<usize>,
    pub ir_identities: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The `(visible, infrared)` feature maps of pair `p`.
    pub fn pair(&self, p: usize) -> Result<(Tensor, Tensor)> {
        Ok((self.f_v0.index_first(p)?, self.f_i0.index_first(p)?))
    }
}

/// Expands `[B × N × C]` visible and infrared features into `B²` pairs.
pub fn expand_pairs(
    f_v: &Tensor,
    f_i: &Tensor,
    vis_identities: &[usize],
    ir_identities: &[usize],
) -> Result<PairBatch> {
    if f_v.rank() != 3 || f_v.shape() != f_i.shape() {
        return Err(Error::dim("expand_pairs", f_v.shape(), f_i.shape()));
    }
    let b = f_v.shape()[0];
    if vis_identities.len() != b || ir_identities.len() != b {
        return Err(Error::dim(
            "expand_pairs",
            &[vis_identities.len(), ir_identities.len()],
            &[b, b],
        ));
    }
    let vis: Vec<Tensor> = (0..b).map(|i| f_v.index_first(i)).collect::<Result<_>>()?;
    let ir: Vec<Tensor> = (0..b).map(|i| f_i.index_first(i)).collect::<Result<_>>()?;
    let mut v_rows = Vec::with_capacity(b * b);
    let mut i_rows = Vec::with_capacity(b * b);
    let mut labels = Vec::with_capacity(b * b);
    let mut sources = Vec::with_capacity(b * b);
    for (vi, v) in vis.iter().enumerate() {
        for (ii, r) in ir.iter().enumerate() {
            v_rows.push(v.clone());
            i_rows.push(r.clone());
            labels.push(vis_identities[vi] == ir_identities[ii]);
            sources.push((vi, ii));
        }
    }
    Ok(PairBatch {
        f_v0: Tensor::stack(&v_rows)?,
        f_i0: Tensor::stack(&i_rows)?,
        labels,
        sources,
        vis_identities: vis_identities.to_vec(),
        ir_identities: ir_identities.to_vec(),
    })
}
