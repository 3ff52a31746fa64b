//! Central-difference verification of every differentiable operation and of
//! both training objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_projected, grad_check_with, GatherEntry, OpKind, Tape, Var};
use crate::bci::{bci_block_forward, expand_pairs, BciConfig, BciStack};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::matcher::Matcher;
use crate::nn::{seeded_rng, Attention, Bound, FeedForwardBlock, LinearLayer, ParameterSet};
use crate::qascore::QaConfig;
use crate::synthdata::{Modality, Split, SynthSample};
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Check = Box<dyn Fn(&dyn Fn() -> Tape) -> Result<f64>>;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut seeded_rng(seed))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(shape: &[usize], seed: u64, lo: f64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (v.abs() + lo));
    t
}

/// Keeps values clear of the clamp bounds at ±0.5.
fn away_from_bounds(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| {
        if (v.abs() - 0.5).abs() < 0.05 {
            *v += 0.2;
        }
    });
    t
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    t
}

fn unary(op: OpKind, input: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> (String, Check) {
    (
        op.name().to_string(),
        Box::new(move |mk| {
            grad_check_projected(mk, |t, v| f(t, v[0]), std::slice::from_ref(&input), STEP)
        }),
    )
}

fn binary(
    op: OpKind,
    a: Tensor,
    b: Tensor,
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> (String, Check) {
    (
        op.name().to_string(),
        Box::new(move |mk| {
            grad_check_projected(mk, |t, v| f(t, v[0], v[1]), &[a.clone(), b.clone()], STEP)
        }),
    )
}

fn op_checks() -> Vec<(String, Check)> {
    let mut checks: Vec<(String, Check)> = vec![
        binary(
            OpKind::MatMul,
            randn(&[3, 4], 1),
            randn(&[4, 2], 2),
            |t, a, b| t.matmul(a, b),
        ),
        binary(
            OpKind::BatchMatMul,
            randn(&[4, 3], 32),
            randn(&[4, 3], 33),
            |t, a, b| {
                let ab = t.batch_matmul(a, b, 2, true)?;
                t.batch_matmul(ab, b, 2, false)
            },
        ),
        unary(OpKind::Transpose, randn(&[3, 4], 3), |t, x| t.transpose(x)),
        unary(OpKind::Reshape, randn(&[3, 4], 4), |t, x| {
            t.reshape(x, &[2, 6])
        }),
        binary(
            OpKind::Add,
            randn(&[3, 4], 5),
            randn(&[3, 4], 6),
            |t, a, b| t.add(a, b),
        ),
        binary(
            OpKind::Mul,
            randn(&[3, 4], 7),
            randn(&[3, 4], 8),
            |t, a, b| t.mul(a, b),
        ),
        unary(OpKind::Scale, randn(&[3, 4], 9), |t, x| t.scale(x, -1.7)),
        unary(OpKind::AddScalar, randn(&[3, 4], 10), |t, x| {
            t.add_scalar(x, 0.3)
        }),
        unary(OpKind::Neg, randn(&[3, 4], 11), |t, x| t.neg(x)),
        unary(OpKind::Gelu, randn(&[3, 4], 12), |t, x| t.gelu(x)),
        unary(OpKind::Sigmoid, randn(&[3, 4], 13), |t, x| t.sigmoid(x)),
        unary(OpKind::Log, positive(&[3, 4], 14), |t, x| t.log(x)),
        unary(OpKind::Sqrt, positive(&[3, 4], 15), |t, x| t.sqrt(x)),
        unary(OpKind::Relu, away_from_zero(&[3, 4], 16, 0.05), |t, x| {
            t.relu(x)
        }),
        unary(
            OpKind::Clamp,
            away_from_bounds(randn(&[3, 4], 17)),
            |t, x| t.clamp(x, -0.5, 0.5),
        ),
        unary(OpKind::SoftmaxRows, randn(&[3, 4], 18), |t, x| {
            t.softmax_rows(x)
        }),
        unary(OpKind::LogSoftmaxRows, randn(&[3, 4], 19), |t, x| {
            t.log_softmax_rows(x)
        }),
        unary(OpKind::MeanPoolRows, randn(&[6, 4], 20), |t, x| {
            t.mean_pool_groups(x, 3)
        }),
        unary(OpKind::Sum, randn(&[3, 4], 21), |t, x| t.sum(x)),
        unary(OpKind::L2Normalize, randn(&[3, 4], 22), |t, x| {
            t.l2_normalize(x, 1e-12)
        }),
    ];
    let (x, g, b) = (randn(&[3, 4], 23), randn(&[4], 24), randn(&[4], 25));
    checks.push((
        OpKind::LayerNorm.name().into(),
        Box::new(move |mk| {
            grad_check_projected(
                mk,
                |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
                &[x.clone(), g.clone(), b.clone()],
                STEP,
            )
        }),
    ));
    let mut rows: Vec<Tensor> = (0..3).map(|i| randn(&[4], 26 + i)).collect();
    rows.push(randn(&[2, 4], 29));
    checks.push((
        OpKind::StackRows.name().into(),
        Box::new(move |mk| grad_check_projected(mk, |t, v| t.stack_rows(v), &rows, STEP)),
    ));
    let x = randn(&[3, 4], 30);
    checks.push((
        OpKind::Gather.name().into(),
        Box::new(move |mk| {
            let entries = vec![
                GatherEntry {
                    src: 1,
                    dst: 0,
                    coeff: 0.5,
                },
                GatherEntry {
                    src: 6,
                    dst: 0,
                    coeff: -1.0,
                },
                GatherEntry {
                    src: 11,
                    dst: 2,
                    coeff: 2.0,
                },
                GatherEntry {
                    src: 1,
                    dst: 1,
                    coeff: 0.2,
                },
            ];
            grad_check_projected(
                mk,
                |t, v| t.gather(v[0], entries.clone(), &[3]),
                std::slice::from_ref(&x),
                STEP,
            )
        }),
    ));
    let logits = randn(&[6, 6], 31);
    checks.push((
        OpKind::Contrastive.name().into(),
        Box::new(move |mk| {
            grad_check_with(
                mk,
                |t, v| t.contrastive(v[0], &[0, 0, 1, 1, 2, 0]),
                std::slice::from_ref(&logits),
                STEP,
            )
        }),
    ));
    checks
}

fn params_of(ps: &ParameterSet) -> Vec<Tensor> {
    ps.iter().map(|(_, t)| t.clone()).collect()
}

fn layer_checks() -> Result<Vec<(String, Check)>> {
    let mut checks: Vec<(String, Check)> = Vec::new();
    let mut rng = seeded_rng(40);

    let mut ps = ParameterSet::new();
    let lin = LinearLayer::new(&mut ps, "lin", 4, 3, true, &mut rng)?;
    let bias = ps.get(lin.bias.expect("bias")).clone();
    ps.set_values("lin.bias", bias.data().iter().map(|_| 0.1).collect())?;
    let (inputs, x) = (params_of(&ps), randn(&[3, 4], 41));
    checks.push((
        "linear".into(),
        Box::new(move |mk| {
            grad_check_projected(
                mk,
                |t, v| {
                    let xv = t.constant(x.clone());
                    lin.forward(t, &Bound::from_vars(v.to_vec()), xv)
                },
                &inputs,
                STEP,
            )
        }),
    ));

    let mut ps = ParameterSet::new();
    let ffn = FeedForwardBlock::new(&mut ps, "ffn", 4, &mut rng)?;
    let (inputs, x) = (params_of(&ps), randn(&[3, 4], 42));
    checks.push((
        "feed_forward".into(),
        Box::new(move |mk| {
            grad_check_projected(
                mk,
                |t, v| {
                    let xv = t.constant(x.clone());
                    ffn.forward(t, &Bound::from_vars(v.to_vec()), xv)
                },
                &inputs,
                STEP,
            )
        }),
    ));

    let mut ps = ParameterSet::new();
    let attn = Attention::new(&mut ps, "attn", 4, 2, &mut rng)?;
    let (inputs, q, kv) = (params_of(&ps), randn(&[3, 4], 43), randn(&[3, 4], 44));
    checks.push((
        "cross_attention".into(),
        Box::new(move |mk| {
            grad_check_projected(
                mk,
                |t, v| {
                    let (a, b) = (t.constant(q.clone()), t.constant(kv.clone()));
                    attn.forward(t, &Bound::from_vars(v.to_vec()), a, b)
                },
                &inputs,
                STEP,
            )
        }),
    ));

    let mut ps = ParameterSet::new();
    let bci = BciConfig {
        dim: 4,
        depth: 1,
        ..BciConfig::default()
    };
    let stack = BciStack::new(&mut ps, "bci", bci, &mut rng)?;
    let (inputs, v0, i0) = (params_of(&ps), randn(&[3, 4], 45), randn(&[3, 4], 46));
    checks.push((
        "bci_block".into(),
        Box::new(move |mk| {
            grad_check_projected(
                mk,
                |t, v| {
                    let (a, b) = (t.constant(v0.clone()), t.constant(i0.clone()));
                    let (x, y) = bci_block_forward(
                        t,
                        &stack.blocks[0],
                        &Bound::from_vars(v.to_vec()),
                        a,
                        b,
                        1,
                    )?;
                    t.stack_rows(&[x, y])
                },
                &inputs,
                STEP,
            )
        }),
    ));
    Ok(checks)
}

fn objective_checks() -> Result<Vec<(String, Check)>> {
    let mut checks: Vec<(String, Check)> = Vec::new();

    let enc_cfg = EncoderConfig {
        raw_dim: 3,
        patches: 2,
        dim: 4,
        depth: 1,
        heads: 1,
        num_train_identities: 2,
    };
    let enc = Encoder::new(enc_cfg, 50)?;
    let samples: Vec<SynthSample> = (0..4)
        .map(|i| SynthSample {
            identity: i % 2,
            modality: if i < 2 {
                Modality::Visible
            } else {
                Modality::Infrared
            },
            split: Split::Train,
            camera: 0,
            patches: randn(&[2, 3], 51 + i as u64),
        })
        .collect();
    let inputs = params_of(&enc.params);
    checks.push((
        "stage1_l_base".into(),
        Box::new(move |mk| {
            let refs: Vec<&SynthSample> = samples.iter().collect();
            grad_check_with(
                mk,
                |t, v| {
                    Ok(enc
                        .stage1_objective(t, &Bound::from_vars(v.to_vec()), &refs)?
                        .2)
                },
                &inputs,
                STEP,
            )
        }),
    ));

    // B = 2, N = 3, C = 4, two blocks.
    let bci = BciConfig {
        dim: 4,
        depth: 2,
        ..BciConfig::default()
    };
    let m = Matcher::new(
        bci,
        QaConfig {
            k: 2,
            ..QaConfig::default()
        },
        3,
        60,
    )?;
    let pb = expand_pairs(
        &randn(&[2, 3, 4], 61),
        &randn(&[2, 3, 4], 62),
        &[0, 1],
        &[0, 1],
    )?;
    let inputs = params_of(&m.params);
    checks.push((
        "stage2_l_total".into(),
        Box::new(move |mk| {
            grad_check_with(
                mk,
                |t, v| Ok(m.stage2_objective(t, &Bound::from_vars(v.to_vec()), &pb)?.0),
                &inputs,
                STEP,
            )
        }),
    ));
    Ok(checks)
}

/// Runs every check. With `fault`, analytic gradients of that operation are
/// deliberately corrupted so the affected checks must fail.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut checks = op_checks();
    checks.extend(layer_checks()?);
    checks.extend(objective_checks()?);
    let make = move || match fault {
        Some(kind) => Tape::with_fault(kind),
        None => Tape::new(),
    };
    checks
        .into_iter()
        .map(|(name, check)| {
            let err = check(&make)?;
            Ok(CheckResult {
                passed: err < GRADCHECK_TOLERANCE,
                max_rel_error: err,
                name,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_is_covered() {
        let names: Vec<String> = op_checks().into_iter().map(|c| c.0).collect();
        for op in OpKind::ALL {
            if op != OpKind::Leaf {
                assert!(names.contains(&op.name().to_string()), "{op} unchecked");
            }
        }
    }

    #[test]
    fn clean_suite_passes() {
        let results = run_suite(None).unwrap();
        for r in &results {
            assert!(r.passed, "{} failed with {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught_by_its_check() {
        for op in [OpKind::Gelu, OpKind::SoftmaxRows, OpKind::Gather] {
            let results = run_suite(Some(op)).unwrap();
            let own = results.iter().find(|r| r.name == op.name()).unwrap();
            assert!(!own.passed, "{op} fault not detected");
            let sum = results.iter().find(|r| r.name == "sum").unwrap();
            assert!(sum.passed);
        }
    }
}
