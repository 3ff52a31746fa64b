//! Trainable layers, parameter storage and the AdamW optimizer.

use std::f64::consts::PI;
use std::ops::Index;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-6;

/// Deterministic generator for a 64-bit seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a stream tag into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named, ordered collection of trainable tensors plus AdamW state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    slots: IndexMap<String, Slot>,
    step: u64,
}

/// Tape handles for every parameter of a set, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(true);
        let n = tensor.numel();
        let (idx, _) = self.slots.insert_full(
            name,
            Slot {
                tensor,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.slots.get_index_of(name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.tensor))
    }

    /// Replaces the values of an existing parameter, keeping its flags.
    pub fn set_values(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))?;
        if slot.tensor.numel() != data.len() {
            return Err(Error::dim("set_values", slot.tensor.shape(), &[data.len()]));
        }
        slot.tensor.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Marks every parameter trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for s in self.slots.values_mut() {
            s.tensor.set_requires_grad(trainable);
        }
    }

    /// Records every parameter as a tape leaf; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.slots
                .values()
                .map(|s| {
                    let t = &s.tensor;
                    tape.leaf(t.clone(), t.requires_grad())
                })
                .collect(),
        )
    }

    /// Adds gradients collected on a tape into each parameter's grad slot.
    /// Parameters unreachable from the loss receive an explicit zero.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (slot, var) in self.slots.values_mut().zip(&bound.0) {
            if !slot.tensor.requires_grad() {
                continue;
            }
            match grads.get(*var) {
                Some(g) => slot.tensor.accumulate_grad(g),
                None => {
                    let zeros = vec![0.0; slot.tensor.numel()];
                    slot.tensor.accumulate_grad(&zeros);
                }
            }
        }
    }

    /// Adds a flat gradient per parameter (in set order).
    pub fn accumulate_flat(&mut self, grads: &[Vec<f64>]) {
        for (slot, g) in self.slots.values_mut().zip(grads) {
            if slot.tensor.requires_grad() {
                slot.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.tensor.zero_grad();
        }
    }

    /// One AdamW update of every trainable parameter at learning rate `lr_t`:
    /// decoupled weight decay, then the bias-corrected moment step.
    /// Gradients are left in place.
    pub fn adamw_step(&mut self, cfg: &OptimizerConfig, lr_t: f64) -> Result<()> {
        if lr_t < 0.0 || !lr_t.is_finite() {
            return Err(Error::usage(format!("invalid learning rate {lr_t}")));
        }
        for (name, s) in &self.slots {
            if s.tensor.requires_grad() && s.tensor.grad().is_none() {
                return Err(Error::usage(format!("parameter {name} has no gradient")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for s in self.slots.values_mut() {
            if !s.tensor.requires_grad() {
                continue;
            }
            let g = s.tensor.grad().expect("checked above").to_vec();
            let Slot { tensor, m, v } = s;
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                *w -= lr_t * cfg.weight_decay * *w;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// AdamW hyperparameters and cosine schedule bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            total_steps: 1,
            min_lr: 3e-6,
        }
    }
}

impl OptimizerConfig {
    /// Default betas/eps/decay at learning rate `lr`, with `min_lr = lr / 100`.
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            min_lr: lr / 100.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_beta = |b: f64| b > 0.0 && b < 1.0;
        if !ok_beta(self.beta1) || !ok_beta(self.beta2) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.min_lr > self.lr || self.min_lr < 0.0 {
            return Err(Error::config("min_lr must lie in [0, lr]"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be positive"));
        }
        if self.eps < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("eps and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(cfg: &OptimizerConfig, step: u64) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::usage(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let frac = step as f64 / cfg.total_steps as f64;
    Ok(cfg.min_lr + (cfg.lr - cfg.min_lr) * (1.0 + (PI * frac).cos()) / 2.0)
}

/// `x·W (+ b)` over the last axis.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl LinearLayer {
    /// Weights uniform in `±sqrt(6 / (c_in + c_out))`, bias zero.
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (c_in + c_out) as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            Tensor::uniform(&[c_in, c_out], bound, rng),
        )?;
        let bias = if bias {
            Some(params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    /// Accepts `[C_in]` or `[rows × C_in]`; the output keeps the input rank.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.c_in) || shape.len() > 2 || shape.is_empty() {
            return Err(Error::dim("linear", &shape, &[self.c_in, self.c_out]));
        }
        let vector = shape.len() == 1;
        let x2 = if vector {
            tape.reshape(x, &[1, self.c_in])?
        } else {
            x
        };
        let rows = tape.shape(x2)[0];
        let mut y = tape.matmul(x2, p[self.weight])?;
        if let Some(b) = self.bias {
            // Row broadcast of the bias as an outer product with ones.
            let ones = tape.constant(Tensor::ones(&[rows, 1]));
            let b2 = tape.reshape(p[b], &[1, self.c_out])?;
            let bb = tape.matmul(ones, b2)?;
            y = tape.add(y, bb)?;
        }
        if vector {
            y = tape.reshape(y, &[self.c_out])?;
        }
        Ok(y)
    }
}

/// Affine layer-norm parameters over a `dim`-wide last axis.
#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(params: &mut ParameterSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// `lin2(gelu(lin1(x)))` with hidden width `4·C`.
#[derive(Clone, Debug)]
pub struct FeedForwardBlock {
    pub lin1: LinearLayer,
    pub lin2: LinearLayer,
}

impl FeedForwardBlock {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            lin1: LinearLayer::new(params, &format!("{name}.lin1"), dim, 4 * dim, true, rng)?,
            lin2: LinearLayer::new(params, &format!("{name}.lin2"), 4 * dim, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.lin1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.lin2.forward(tape, p, h)
    }
}

/// Scaled dot-product attention with bias-free projections.
///
/// With one head this is `softmax(Q W_q (K W_k)ᵀ / √C) · V W_v`. With `H`
/// heads the projected features are split into `H` column blocks of width
/// `C/H`, each attended separately with scale `√(C/H)`, and concatenated.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            wq: LinearLayer::new(params, &format!("{name}.wq"), dim, dim, false, rng)?,
            wk: LinearLayer::new(params, &format!("{name}.wk"), dim, dim, false, rng)?,
            wv: LinearLayer::new(params, &format!("{name}.wv"), dim, dim, false, rng)?,
            dim,
            heads,
        })
    }

    /// Queries from `q_in`, keys and values from `kv_in`; both `N×C`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, q_in: Var, kv_in: Var) -> Result<Var> {
        self.forward_grouped(tape, p, q_in, kv_in, 1)
    }

    /// As [`Attention::forward`] over `groups` independent row blocks of
    /// equal height, stacked in `(G·N)×C` inputs. Rows attend only within
    /// their own block.
    pub fn forward_grouped(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q_in: Var,
        kv_in: Var,
        groups: usize,
    ) -> Result<Var> {
        let (qs, ks) = (tape.shape(q_in).to_vec(), tape.shape(kv_in).to_vec());
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.dim || ks[1] != self.dim {
            return Err(Error::dim("attention", &qs, &ks));
        }
        if groups == 0 || qs[0] % groups != 0 || ks[0] % groups != 0 {
            return Err(Error::dim("attention", &qs, &[groups]));
        }
        let q = self.wq.forward(tape, p, q_in)?;
        let k = self.wk.forward(tape, p, kv_in)?;
        let v = self.wv.forward(tape, p, kv_in)?;
        if self.heads == 1 {
            return attend(tape, q, k, v, self.dim, groups);
        }
        let width = self.dim / self.heads;
        let mut out: Option<Var> = None;
        for h in 0..self.heads {
            let sel = tape.constant(column_selector(self.dim, h * width, width));
            let sel_t = tape.constant(column_selector(self.dim, h * width, width).transpose2()?);
            let qh = tape.matmul(q, sel)?;
            let kh = tape.matmul(k, sel)?;
            let vh = tape.matmul(v, sel)?;
            let oh = attend(tape, qh, kh, vh, width, groups)?;
            let placed = tape.matmul(oh, sel_t)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, placed)?,
                None => placed,
            });
        }
        Ok(out.expect("at least one head"))
    }
}

fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, width: usize, groups: usize) -> Result<Var> {
    let scores = tape.batch_matmul(q, k, groups, true)?;
    let scores = tape.scale(scores, 1.0 / (width as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    tape.batch_matmul(weights, v, groups, false)
}

/// `dim × width` matrix copying columns `[start, start+width)`.
fn column_selector(dim: usize, start: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[dim, width]);
    for j in 0..width {
        t.data_mut()[(start + j) * width + j] = 1.0;
    }
    t
}
