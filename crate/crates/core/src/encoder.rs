//! Shared patch encoder and its stage-1 objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherEntry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    derive_seed, seeded_rng, Attention, Bound, FeedForwardBlock, LayerNormParams, LinearLayer,
    OptimizerConfig, ParamId, ParameterSet,
};
use crate::synthdata::{PkBatch, SynthSample};
use crate::tensor::Tensor;

/// Added under the square root of euclidean distances so the gradient stays
/// finite for coincident points.
pub const DIST_EPS: f64 = 1e-12;
pub const TRIPLET_MARGIN: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub raw_dim: usize,
    pub patches: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_train_identities: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            raw_dim: 16,
            patches: 8,
            dim: 32,
            depth: 2,
            heads: 1,
            num_train_identities: 40,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 || self.patches == 0 || self.dim == 0 || self.num_train_identities == 0
        {
            return Err(Error::config("encoder extents must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "{} heads do not divide encoder width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNormParams,
    attn: Attention,
    ln2: LayerNormParams,
    ffn: FeedForwardBlock,
}

/// Patch projection, learned positions, a pre-norm self-attention stack and
/// an identity classifier over mean-pooled features. One parameter set serves
/// both modalities.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParameterSet,
    proj: LinearLayer,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    classifier: LinearLayer,
}

/// Component values of one stage-1 objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(derive_seed(seed, 0xE1C0));
        let mut params = ParameterSet::new();
        let c = config.dim;
        let proj = LinearLayer::new(&mut params, "enc.proj", config.raw_dim, c, true, &mut rng)?;
        let pos = params.add(
            "enc.pos",
            Tensor::normal(&[config.patches, c], 0.02, &mut rng),
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let name = format!("enc.block{b}");
            blocks.push(EncoderBlock {
                ln1: LayerNormParams::new(&mut params, &format!("{name}.ln1"), c)?,
                attn: Attention::new(
                    &mut params,
                    &format!("{name}.attn"),
                    c,
                    config.heads,
                    &mut rng,
                )?,
                ln2: LayerNormParams::new(&mut params, &format!("{name}.ln2"), c)?,
                ffn: FeedForwardBlock::new(&mut params, &format!("{name}.ffn"), c, &mut rng)?,
            });
        }
        let classifier = LinearLayer::new(
            &mut params,
            "enc.classifier",
            c,
            config.num_train_identities,
            true,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            proj,
            pos,
            blocks,
            classifier,
        })
    }

    /// Taped forward of one `N × d_raw` patch matrix to `N × C`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape != [self.config.patches, self.config.raw_dim] {
            return Err(Error::dim(
                "encode",
                &shape,
                &[self.config.patches, self.config.raw_dim],
            ));
        }
        let mut h = self.proj.forward(tape, p, x)?;
        h = tape.add(h, p[self.pos])?;
        for block in &self.blocks {
            let n1 = block.ln1.forward(tape, p, h)?;
            let a = block.attn.forward(tape, p, n1, n1)?;
            h = tape.add(h, a)?;
            let n2 = block.ln2.forward(tape, p, h)?;
            let f = block.ffn.forward(tape, p, n2)?;
            h = tape.add(h, f)?;
        }
        Ok(h)
    }

    /// Patch embeddings of a sample, without gradient tracking.
    pub fn encode(&self, sample: &SynthSample) -> Result<Tensor> {
        self.encode_patches(&sample.patches)
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(patches.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound::from_vars(
            self.params
                .iter()
                .map(|(_, t)| tape.constant(t.clone()))
                .collect(),
        )
    }

    /// Mean-pooled embedding of a sample, `[C]`.
    pub fn pooled(&self, sample: &SynthSample) -> Result<Tensor> {
        let f = self.encode(sample)?;
        let (n, c) = f.dims2()?;
        let mut out = vec![0.0; c];
        for r in 0..n {
            out.iter_mut().zip(f.row(r)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Tensor::new(&[c], out)
    }

    /// Identity logits `[B × num_train_identities]` for pooled rows `[B × C]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
        self.classifier.forward(tape, p, pooled)
    }

    /// Stage-1 objective `id_loss + triplet_loss` for a batch, on `tape`.
    pub fn stage1_objective(
        &self,
        tape: &mut Tape,
        p: &Bound,
        samples: &[&SynthSample],
    ) -> Result<(Var, Var, Var)> {
        let labels: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let x = tape.constant(s.patches.clone());
            let f = self.forward(tape, p, x)?;
            rows.push(tape.mean_pool_rows(f)?);
        }
        let pooled = tape.stack_rows(&rows)?;
        let logits = self.logits(tape, p, pooled)?;
        let id = id_loss(tape, logits, &labels)?;
        let tri = triplet_loss(tape, pooled, &labels, TRIPLET_MARGIN)?;
        let total = tape.add(id, tri)?;
        Ok((id, tri, total))
    }

    /// One optimizer update on the stage-1 objective.
    pub fn stage1_step(
        &mut self,
        batch: &PkBatch<'_>,
        opt: &OptimizerConfig,
        lr_t: f64,
    ) -> Result<Stage1Losses> {
        let samples: Vec<&SynthSample> = batch.iter().collect();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let (id, tri, total) = self.stage1_objective(&mut tape, &p, &samples)?;
        let losses = Stage1Losses {
            id: tape.item(id),
            triplet: tape.item(tri),
            total: tape.item(total),
        };
        let grads = tape.backward(total)?;
        self.params.zero_grads();
        self.params.accumulate(&p, &grads);
        self.params.adamw_step(opt, lr_t)?;
        Ok(losses)
    }
}

/// Mean cross-entropy of `logits [B × K]` against integer labels.
pub fn id_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::dim("id_loss", &[b, k], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::usage(format!("label {bad} outside {k} classes")));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let entries = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| GatherEntry {
            src: i * k + l,
            dst: 0,
            coeff: -1.0 / b as f64,
        })
        .collect();
    tape.gather(logp, entries, &[])
}

/// Euclidean distance with the same epsilon as the taped loss.
fn distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() + DIST_EPS).sqrt()
}

/// Hardest positive and hardest negative per anchor, as `(anchor, pos, neg)`.
/// Anchors lacking a positive or a negative are skipped; ties keep the lowest
/// index.
pub fn batch_hard_triplets(
    pooled: &Tensor,
    labels: &[usize],
) -> Result<Vec<(usize, usize, usize)>> {
    let (b, _) = pooled.dims2()?;
    if labels.len() != b {
        return Err(Error::dim("triplet", pooled.shape(), &[labels.len()]));
    }
    let mut out = Vec::new();
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = distance(pooled.row(a), pooled.row(j));
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (pos, neg) {
            out.push((a, p, n));
        }
    }
    Ok(out)
}

/// Batch-hard triplet loss: mean over valid anchors of
/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(tape: &mut Tape, pooled: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let triplets = batch_hard_triplets(tape.value(pooled), labels)?;
    if triplets.is_empty() {
        return Err(Error::usage(
            "triplet loss needs an anchor with both a positive and a negative",
        ));
    }
    let c = tape.value(pooled).dims2()?.1;
    let anchors: Vec<usize> = triplets.iter().map(|t| t.0).collect();
    let positives: Vec<usize> = triplets.iter().map(|t| t.1).collect();
    let negatives: Vec<usize> = triplets.iter().map(|t| t.2).collect();
    let a = tape.select_rows(pooled, &anchors)?;
    let ones = tape.constant(Tensor::ones(&[c, 1]));
    let dist = |other: &[usize], tape: &mut Tape| -> Result<Var> {
        let o = tape.select_rows(pooled, other)?;
        let diff = tape.sub(a, o)?;
        let sq = tape.mul(diff, diff)?;
        let sq = tape.matmul(sq, ones)?;
        let sq = tape.add_scalar(sq, DIST_EPS)?;
        tape.sqrt(sq)
    };
    let d_ap = dist(&positives, tape)?;
    let d_an = dist(&negatives, tape)?;
    let gap = tape.sub(d_ap, d_an)?;
    let gap = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(gap)?;
    tape.mean(hinge)
}
