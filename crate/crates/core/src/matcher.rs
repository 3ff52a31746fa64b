//! Stage-2 matching model: the cross-interaction stack plus the scoring head,
//! trained on expanded pair batches with the pair loss and the aggregation
//! contrastive term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bci::{
    aggregation_contrastive_loss, pool_normalize_groups, BciConfig, BciStack, PairBatch,
};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, seeded_rng, Bound, OptimizerConfig, ParameterSet};
use crate::qascore::{
    bind_constants, mean_pair_loss, qa_forward_grouped, qa_forward_taped, total_loss, CasmHead,
    QaConfig, QaOutput,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Matcher {
    pub bci: BciConfig,
    pub qa: QaConfig,
    pub patches: usize,
    pub params: ParameterSet,
    pub stack: BciStack,
    pub casm: CasmHead,
}

/// Values of the stage-2 objective for one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Losses {
    pub pair: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl Matcher {
    pub fn new(bci: BciConfig, qa: QaConfig, patches: usize, seed: u64) -> Result<Self> {
        bci.validate()?;
        qa.validate()?;
        if qa.k > patches {
            return Err(Error::config(format!(
                "k = {} exceeds {patches} patches",
                qa.k
            )));
        }
        let mut rng = seeded_rng(derive_seed(seed, 0xB1C1));
        let mut params = ParameterSet::new();
        let stack = BciStack::new(&mut params, "bci", bci.clone(), &mut rng)?;
        let casm = CasmHead::new(&mut params, "casm", patches, &mut rng)?;
        Ok(Self {
            bci,
            qa,
            patches,
            params,
            stack,
            casm,
        })
    }

    /// Refines a pair and scores it, without gradient tracking.
    pub fn score(&self, f_v: &Tensor, f_i: &Tensor) -> Result<QaOutput> {
        let mut tape = Tape::new();
        let p = bind_constants(&self.params, &mut tape);
        let (v, i) = (tape.constant(f_v.clone()), tape.constant(f_i.clone()));
        let (rv, ri) = self.stack.forward(&mut tape, &p, v, i)?;
        let (psi, matches, s_hat) = qa_forward_taped(&mut tape, &self.casm, &p, rv, ri, &self.qa)?;
        Ok(QaOutput {
            psi: tape.item(psi),
            matches,
            s_hat: tape.value(s_hat).clone(),
        })
    }

    /// The whole objective with every pair stacked on one tape; returns
    /// `(total, mean pair loss, L_AC)`. The contrastive rows are all pooled
    /// visible outputs followed by all pooled infrared outputs.
    pub fn stage2_objective(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pb: &PairBatch,
    ) -> Result<(Var, Var, Var)> {
        if pb.is_empty() {
            return Err(Error::usage("empty pair batch"));
        }
        let g = pb.len();
        let (n, c) = (pb.f_v0.shape()[1], pb.f_v0.shape()[2]);
        let v = tape.constant(pb.f_v0.reshape(&[g * n, c])?);
        let i = tape.constant(pb.f_i0.reshape(&[g * n, c])?);
        let (rv, ri) = self.stack.forward_grouped(tape, p, v, i, g)?;
        let (psi, _, _) = qa_forward_grouped(tape, &self.casm, p, rv, ri, &self.qa, g)?;
        let mean_pair = mean_pair_loss(tape, psi, &pb.labels)?;
        let pv = pool_normalize_groups(tape, rv, g)?;
        let pi = pool_normalize_groups(tape, ri, g)?;
        let pooled = tape.stack_rows(&[pv, pi])?;
        let labels: Vec<usize> = pb
            .sources
            .iter()
            .map(|&(a, _)| pb.vis_identities[a])
            .chain(pb.sources.iter().map(|&(_, b)| pb.ir_identities[b]))
            .collect();
        let l_ac = aggregation_contrastive_loss(tape, pooled, &labels, self.bci.tau)?;
        let total = total_loss(tape, mean_pair, l_ac, self.qa.lambda)?;
        Ok((total, mean_pair, l_ac))
    }

    /// Objective values and the gradient for every parameter, in parameter
    /// order.
    pub fn stage2_gradients(&self, pb: &PairBatch) -> Result<(Stage2Losses, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (total, pair, ac) = self.stage2_objective(&mut tape, &bound, pb)?;
        let losses = Stage2Losses {
            pair: tape.item(pair),
            contrastive: tape.item(ac),
            total: tape.item(total),
        };
        let grads = tape.backward(total)?;
        let flat = bound
            .vars()
            .iter()
            .zip(self.params.iter())
            .map(|(v, (_, t))| {
                grads
                    .get(*v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((losses, flat))
    }

    /// One optimizer update on a pair batch.
    pub fn stage2_step(
        &mut self,
        pb: &PairBatch,
        opt: &OptimizerConfig,
        lr_t: f64,
    ) -> Result<Stage2Losses> {
        let (losses, grads) = self.stage2_gradients(pb)?;
        self.params.zero_grads();
        self.params.accumulate_flat(&grads);
        self.params.adamw_step(opt, lr_t)?;
        Ok(losses)
    }
}
