//! Query-aware scoring of a refined visible/infrared pair.
//!
//! Patch similarities are normalized in both directions, each visible patch
//! keeps the infrared patches that pick it back among their top `k`, patches
//! left without a reciprocal partner fall back to their best match at a
//! penalty `α`, and a small head maps the per-patch similarity vector to a
//! match probability. Index choices are made on forward values and treated as
//! constants; gradients flow through the gathered similarities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherEntry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, LinearLayer, ParameterSet};
use crate::tensor::Tensor;

pub const PSI_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaConfig {
    pub k: usize,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 0.2,
            lambda: 0.6,
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Raw scores and both row-normalized directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SimPair {
    /// `F_v'·F_i'ᵀ / √C`; the infrared direction uses its transpose.
    pub raw: Tensor,
    pub vi: Tensor,
    pub iv: Tensor,
}

/// Reciprocal matches plus the fallback matches of uncovered visible patches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pub mutual: Vec<(usize, usize)>,
    pub complementary: Vec<(usize, usize)>,
}

impl MatchSet {
    /// `(q, weight)` for every match of visible patch `p`.
    pub fn matches_of(&self, p: usize, alpha: f64) -> Vec<(usize, f64)> {
        let m = self.mutual.iter().filter(|m| m.0 == p).map(|m| (m.1, 1.0));
        let c = self
            .complementary
            .iter()
            .filter(|m| m.0 == p)
            .map(|m| (m.1, alpha));
        m.chain(c).collect()
    }
}

fn check_pair(f_v: &Tensor, f_i: &Tensor) -> Result<(usize, usize)> {
    let (n, c) = f_v.dims2()?;
    if f_i.shape() != [n, c] {
        return Err(Error::dim("similarity", f_v.shape(), f_i.shape()));
    }
    Ok((n, c))
}

pub fn similarity_matrices(f_v: &Tensor, f_i: &Tensor) -> Result<SimPair> {
    check_pair(f_v, f_i)?;
    let mut tape = Tape::new();
    let (v, i) = (tape.constant(f_v.clone()), tape.constant(f_i.clone()));
    let (raw, vi) = similarity_taped(&mut tape, v, i)?;
    let raw = tape.value(raw).clone();
    let iv = softmax_rows_value(&raw.transpose2()?)?;
    Ok(SimPair {
        vi: tape.value(vi).clone(),
        iv,
        raw,
    })
}

/// Taped `(S_raw, S_vi)`.
pub fn similarity_taped(tape: &mut Tape, f_v: Var, f_i: Var) -> Result<(Var, Var)> {
    similarity_grouped(tape, f_v, f_i, 1)
}

/// `(S_raw, S_vi)` for `groups` pairs stacked as `(G·N)×C`; both results
/// stack the per-pair `N×N` matrices as `(G·N)×N`.
pub fn similarity_grouped(
    tape: &mut Tape,
    f_v: Var,
    f_i: Var,
    groups: usize,
) -> Result<(Var, Var)> {
    let c = tape.value(f_v).dims2()?.1;
    let raw = tape.batch_matmul(f_v, f_i, groups, true)?;
    let raw = tape.scale(raw, 1.0 / (c as f64).sqrt())?;
    let vi = tape.softmax_rows(raw)?;
    Ok((raw, vi))
}

fn softmax_rows_value(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.softmax_rows(v)?;
    Ok(tape.value(s).clone())
}

/// Per row, the indices of the `k` largest entries ordered by value
/// descending then index ascending.
pub fn topk_filter(s: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let (rows, cols) = s.dims2()?;
    if k == 0 || k > cols {
        return Err(Error::usage(format!("k = {k} outside [1, {cols}]")));
    }
    Ok((0..rows)
        .map(|r| {
            let row = s.row(r);
            let mut idx: Vec<usize> = (0..cols).collect();
            idx.sort_unstable_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

/// Pairs `(p, q)` with `q ∈ R_vi[p]` and `p ∈ R_iv[q]`, sorted.
pub fn mutual_matches(r_vi: &[Vec<usize>], r_iv: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = r_vi
        .iter()
        .enumerate()
        .flat_map(|(p, qs)| {
            qs.iter()
                .copied()
                .filter(move |&q| r_iv.get(q).is_some_and(|ps| ps.contains(&p)))
                .map(move |q| (p, q))
        })
        .collect();
    out.sort_unstable();
    out
}

/// Adds `(p, argmax_q S_vi[p,q])` for every visible patch without a mutual
/// match.
pub fn smooth_complement(mutual: &[(usize, usize)], s_vi: &Tensor) -> Result<MatchSet> {
    let (n, _) = s_vi.dims2()?;
    let mut covered = vec![false; n];
    for &(p, _) in mutual {
        if p >= n {
            return Err(Error::usage(format!("match row {p} outside {n}")));
        }
        covered[p] = true;
    }
    let complementary = (0..n)
        .filter(|&p| !covered[p])
        .map(|p| (p, argmax(s_vi.row(p))))
        .collect();
    Ok(MatchSet {
        mutual: mutual.to_vec(),
        complementary,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Sparse read of `S_vi` producing `Ŝ[p] = (1/|M'_p|) Σ w(p,q)·S_vi[p,q]`.
pub fn patch_similarity_entries(ms: &MatchSet, n: usize, alpha: f64) -> Result<Vec<GatherEntry>> {
    let mut entries = Vec::new();
    for p in 0..n {
        let matched = ms.matches_of(p, alpha);
        if matched.is_empty() {
            return Err(Error::usage(format!("visible patch {p} has no match")));
        }
        let inv = 1.0 / matched.len() as f64;
        entries.extend(matched.into_iter().map(|(q, w)| GatherEntry {
            src: p * n + q,
            dst: p,
            coeff: w * inv,
        }));
    }
    Ok(entries)
}

pub fn patch_similarity_vector(ms: &MatchSet, s_vi: &Tensor, alpha: f64) -> Result<Tensor> {
    let (n, _) = s_vi.dims2()?;
    let mut out = vec![0.0; n];
    for e in patch_similarity_entries(ms, n, alpha)? {
        out[e.dst] += e.coeff * s_vi.data()[e.src];
    }
    Tensor::new(&[n], out)
}

/// `sigmoid(lin2(gelu(lin1(Ŝ))))` with hidden width `4·N`.
#[derive(Clone, Debug)]
pub struct CasmHead {
    pub lin1: LinearLayer,
    pub lin2: LinearLayer,
    pub patches: usize,
}

impl CasmHead {
    pub fn new(
        params: &mut ParameterSet,
        prefix: &str,
        patches: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patches == 0 {
            return Err(Error::config("patch count must be positive"));
        }
        Ok(Self {
            lin1: LinearLayer::new(
                params,
                &format!("{prefix}.lin1"),
                patches,
                4 * patches,
                true,
                rng,
            )?,
            lin2: LinearLayer::new(params, &format!("{prefix}.lin2"), 4 * patches, 1, true, rng)?,
            patches,
        })
    }

    /// Scalar match probability for `Ŝ` of shape `[N]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, s_hat: Var) -> Result<Var> {
        if tape.shape(s_hat) != [self.patches] {
            return Err(Error::dim("casm", tape.shape(s_hat), &[self.patches]));
        }
        let h = self.lin1.forward(tape, p, s_hat)?;
        let h = tape.gelu(h)?;
        let o = self.lin2.forward(tape, p, h)?;
        let o = tape.reshape(o, &[])?;
        tape.sigmoid(o)
    }

    /// One probability per row of `Ŝ` with shape `[G × N]`; returns `[G]`.
    pub fn forward_rows(&self, tape: &mut Tape, p: &Bound, s_hat: Var) -> Result<Var> {
        let shape = tape.shape(s_hat).to_vec();
        if shape.len() != 2 || shape[1] != self.patches {
            return Err(Error::dim("casm", &shape, &[self.patches]));
        }
        let h = self.lin1.forward(tape, p, s_hat)?;
        let h = tape.gelu(h)?;
        let o = self.lin2.forward(tape, p, h)?;
        let o = tape.reshape(o, &[shape[0]])?;
        tape.sigmoid(o)
    }
}

/// Evaluates the head on a concrete `Ŝ`.
pub fn casm_score(head: &CasmHead, params: &ParameterSet, s_hat: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = bind_constants(params, &mut tape);
    let s = tape.constant(s_hat.clone());
    let psi = head.forward(&mut tape, &p, s)?;
    Ok(tape.item(psi))
}

pub(crate) fn bind_constants(params: &ParameterSet, tape: &mut Tape) -> Bound {
    Bound::from_vars(
        params
            .iter()
            .map(|(_, t)| tape.constant(t.clone()))
            .collect(),
    )
}

/// Binary cross-entropy of a match probability, clamped away from 0 and 1.
pub fn pair_loss(tape: &mut Tape, psi: Var, y: bool) -> Result<Var> {
    let c = tape.clamp(psi, PSI_CLAMP, 1.0 - PSI_CLAMP)?;
    let target = if y {
        c
    } else {
        let n = tape.neg(c)?;
        tape.add_scalar(n, 1.0)?
    };
    let l = tape.log(target)?;
    tape.neg(l)
}

/// Mean binary cross-entropy of a vector of match probabilities.
pub fn mean_pair_loss(tape: &mut Tape, psi: Var, labels: &[bool]) -> Result<Var> {
    if tape.shape(psi) != [labels.len()] {
        return Err(Error::dim("pair_loss", tape.shape(psi), &[labels.len()]));
    }
    let c = tape.clamp(psi, PSI_CLAMP, 1.0 - PSI_CLAMP)?;
    // y·c + (1 − y)·(1 − c) written as sign·c + offset.
    let sign = tape.constant(Tensor::new(
        &[labels.len()],
        labels.iter().map(|&y| if y { 1.0 } else { -1.0 }).collect(),
    )?);
    let offset = tape.constant(Tensor::new(
        &[labels.len()],
        labels.iter().map(|&y| if y { 0.0 } else { 1.0 }).collect(),
    )?);
    let signed = tape.mul(c, sign)?;
    let target = tape.add(signed, offset)?;
    let l = tape.log(target)?;
    let m = tape.mean(l)?;
    tape.neg(m)
}

/// `mean_pair + λ·L_AC`.
pub fn total_loss(tape: &mut Tape, mean_pair: Var, l_ac: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::usage("lambda must be non-negative"));
    }
    let w = tape.scale(l_ac, lambda)?;
    tape.add(mean_pair, w)
}

/// Taped scoring of one refined pair: returns `(Ψ, matches, Ŝ)`.
pub fn qa_forward_taped(
    tape: &mut Tape,
    head: &CasmHead,
    p: &Bound,
    f_v: Var,
    f_i: Var,
    cfg: &QaConfig,
) -> Result<(Var, MatchSet, Var)> {
    let (n, c) = tape.value(f_v).dims2()?;
    if tape.shape(f_i) != [n, c] {
        return Err(Error::dim("qa_forward", tape.shape(f_v), tape.shape(f_i)));
    }
    let (psi, mut matches, s_hat) = qa_forward_grouped(tape, head, p, f_v, f_i, cfg, 1)?;
    let psi = tape.reshape(psi, &[])?;
    let s_hat = tape.reshape(s_hat, &[n])?;
    Ok((psi, matches.pop().expect("one group"), s_hat))
}

/// Scores `groups` refined pairs stacked as `(G·N)×C`. Returns `Ψ` as `[G]`,
/// the match sets in pair order, and `Ŝ` as `[G × N]`.
pub fn qa_forward_grouped(
    tape: &mut Tape,
    head: &CasmHead,
    p: &Bound,
    f_v: Var,
    f_i: Var,
    cfg: &QaConfig,
    groups: usize,
) -> Result<(Var, Vec<MatchSet>, Var)> {
    let shape = tape.shape(f_v).to_vec();
    if shape.len() != 2
        || tape.shape(f_i) != shape.as_slice()
        || groups == 0
        || !shape[0].is_multiple_of(groups)
    {
        return Err(Error::dim("qa_forward", &shape, tape.shape(f_i)));
    }
    let n = shape[0] / groups;
    let (raw, vi) = similarity_grouped(tape, f_v, f_i, groups)?;
    let mut all = Vec::with_capacity(groups);
    let mut entries = Vec::new();
    for g in 0..groups {
        let block =
            |t: &Tensor| Tensor::new(&[n, n], t.data()[g * n * n..(g + 1) * n * n].to_vec());
        let s_vi = block(tape.value(vi))?;
        let s_iv = softmax_rows_value(&block(tape.value(raw))?.transpose2()?)?;
        let r_vi = topk_filter(&s_vi, cfg.k)?;
        let r_iv = topk_filter(&s_iv, cfg.k)?;
        let mutual = mutual_matches(&r_vi, &r_iv);
        let ms = smooth_complement(&mutual, &s_vi)?;
        entries.extend(
            patch_similarity_entries(&ms, n, cfg.alpha)?
                .into_iter()
                .map(|e| GatherEntry {
                    src: g * n * n + e.src,
                    dst: g * n + e.dst,
                    coeff: e.coeff,
                }),
        );
        all.push(ms);
    }
    let s_hat = tape.gather(vi, entries, &[groups, n])?;
    let psi = head.forward_rows(tape, p, s_hat)?;
    Ok((psi, all, s_hat))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaOutput {
    pub psi: f64,
    pub matches: MatchSet,
    pub s_hat: Tensor,
}

/// Scores a refined pair with fixed parameters.
pub fn qa_forward(
    head: &CasmHead,
    params: &ParameterSet,
    f_v: &Tensor,
    f_i: &Tensor,
    cfg: &QaConfig,
) -> Result<QaOutput> {
    check_pair(f_v, f_i)?;
    let mut tape = Tape::new();
    let p = bind_constants(params, &mut tape);
    let (v, i) = (tape.constant(f_v.clone()), tape.constant(f_i.clone()));
    let (psi, matches, s_hat) = qa_forward_taped(&mut tape, head, &p, v, i, cfg)?;
    Ok(QaOutput {
        psi: tape.item(psi),
        matches,
        s_hat: tape.value(s_hat).clone(),
    })
}

/// Machine-readable view of one scored pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchDump {
    pub mutual: Vec<[usize; 2]>,
    pub complementary: Vec<[usize; 2]>,
    #[serde(rename = "S_hat")]
    pub s_hat: Vec<f64>,
    pub psi: f64,
}

impl From<&QaOutput> for MatchDump {
    fn from(o: &QaOutput) -> Self {
        Self {
            mutual: o.matches.mutual.iter().map(|&(p, q)| [p, q]).collect(),
            complementary: o
                .matches
                .complementary
                .iter()
                .map(|&(p, q)| [p, q])
                .collect(),
            s_hat: o.s_hat.data().to_vec(),
            psi: o.psi,
        }
    }
}
