//! Two-stage training, evaluation, and the modality-imbalance study.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bci::expand_pairs;
use crate::config::RunConfig;
use crate::encoder::{Encoder, Stage1Losses};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, Stage2Losses};
use crate::nn::{cosine_lr, derive_seed, OptimizerConfig};
use crate::retrieval::{evaluate, EvalReport, InferenceConfig};
use crate::synthdata::{reduce_modality, Dataset, Modality, Split};
use crate::tensor::Tensor;

const STAGE1_STREAM: u64 = 0x5731;
const STAGE2_STREAM: u64 = 0x5732;
const REDUCE_STREAM: u64 = 0x1B;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpochLosses {
    Stage1(Stage1Losses),
    Stage2(Stage2Losses),
}

/// One JSON-lines record: mean losses over the epoch's steps and the
/// learning rate of its last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: EpochLosses,
}

/// Steps per epoch: enough P-identity batches to visit every training
/// identity once in expectation.
pub fn steps_per_epoch(ds: &Dataset, p: usize) -> usize {
    let ids: std::collections::BTreeSet<usize> = ds
        .samples
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.identity)
        .collect();
    ids.len().div_ceil(p).max(1)
}

fn schedule(base: &OptimizerConfig, epochs: usize, steps: usize) -> OptimizerConfig {
    OptimizerConfig {
        total_steps: (epochs * steps) as u64,
        ..base.clone()
    }
}

/// Rejects datasets whose sample shape or identity range the models
/// configured by `cfg` cannot consume.
pub fn check_compatible(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let (g, e) = (&ds.config, &cfg.encoder);
    if g.patches != e.patches || g.raw_dim != e.raw_dim {
        return Err(Error::config(format!(
            "dataset has {}x{} patches but the encoder expects {}x{}",
            g.patches, g.raw_dim, e.patches, e.raw_dim
        )));
    }
    if let Some(s) = ds
        .samples
        .iter()
        .find(|s| s.split == Split::Train && s.identity >= e.num_train_identities)
    {
        return Err(Error::config(format!(
            "training identity {} outside the classifier's {} classes",
            s.identity, e.num_train_identities
        )));
    }
    Ok(())
}

/// Stage 1: the shared encoder on identity plus batch-hard triplet loss.
pub fn train_stage1(
    cfg: &RunConfig,
    ds: &Dataset,
    mut log: impl FnMut(&EpochLog),
) -> Result<Encoder> {
    cfg.validate()?;
    check_compatible(cfg, ds)?;
    let mut encoder = Encoder::new(cfg.encoder.clone(), cfg.seed)?;
    let steps = steps_per_epoch(ds, cfg.batch.p);
    let opt = schedule(&cfg.stage1_optim, cfg.stage1_epochs, steps);
    let stream = derive_seed(cfg.seed, STAGE1_STREAM);
    for epoch in 0..cfg.stage1_epochs {
        let mut sum = Stage1Losses {
            id: 0.0,
            triplet: 0.0,
            total: 0.0,
        };
        let mut lr = 0.0;
        for s in 0..steps {
            let step = (epoch * steps + s) as u64;
            lr = cosine_lr(&opt, step)?;
            let batch = ds.sample_pk_batch(cfg.batch.p, cfg.batch.k, stream, step)?;
            let l = encoder.stage1_step(&batch, &opt, lr)?;
            sum.id += l.id;
            sum.triplet += l.triplet;
            sum.total += l.total;
        }
        let n = steps as f64;
        log(&EpochLog {
            stage: 1,
            epoch,
            steps,
            lr,
            losses: EpochLosses::Stage1(Stage1Losses {
                id: sum.id / n,
                triplet: sum.triplet / n,
                total: sum.total / n,
            }),
        });
    }
    Ok(encoder)
}

/// Stage 2: the cross-interaction stack and scoring head on pair loss plus
/// the aggregation contrastive term. The encoder is only read; its outputs
/// for every training sample are computed once up front.
pub fn train_stage2(
    cfg: &RunConfig,
    ds: &Dataset,
    encoder: &Encoder,
    mut log: impl FnMut(&EpochLog),
) -> Result<Matcher> {
    cfg.validate()?;
    check_compatible(cfg, ds)?;
    let mut matcher = Matcher::new(cfg.bci.clone(), cfg.qa.clone(), cfg.gen.patches, cfg.seed)?;
    let cache: Vec<Option<Tensor>> = ds
        .samples
        .par_iter()
        .map(|s| {
            (s.split == Split::Train)
                .then(|| encoder.encode(s))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let gather = |idx: &[usize]| -> Result<Tensor> {
        let rows: Vec<Tensor> = idx
            .iter()
            .map(|&i| cache[i].clone().expect("training samples are cached"))
            .collect();
        Tensor::stack(&rows)
    };

    let steps = steps_per_epoch(ds, cfg.batch.p);
    let opt = schedule(&cfg.stage2_optim, cfg.stage2_epochs, steps);
    let stream = derive_seed(cfg.seed, STAGE2_STREAM);
    for epoch in 0..cfg.stage2_epochs {
        let mut sum = Stage2Losses {
            pair: 0.0,
            contrastive: 0.0,
            total: 0.0,
        };
        let mut lr = 0.0;
        for s in 0..steps {
            let step = (epoch * steps + s) as u64;
            lr = cosine_lr(&opt, step)?;
            let batch = ds.sample_pk_batch(cfg.batch.p, cfg.batch.k, stream, step)?;
            let vis_ids: Vec<usize> = batch.visible.iter().map(|s| s.identity).collect();
            let ir_ids: Vec<usize> = batch.infrared.iter().map(|s| s.identity).collect();
            let pb = expand_pairs(
                &gather(&batch.visible_idx)?,
                &gather(&batch.infrared_idx)?,
                &vis_ids,
                &ir_ids,
            )?;
            let l = matcher.stage2_step(&pb, &opt, lr)?;
            sum.pair += l.pair;
            sum.contrastive += l.contrastive;
            sum.total += l.total;
        }
        let n = steps as f64;
        log(&EpochLog {
            stage: 2,
            epoch,
            steps,
            lr,
            losses: EpochLosses::Stage2(Stage2Losses {
                pair: sum.pair / n,
                contrastive: sum.contrastive / n,
                total: sum.total / n,
            }),
        });
    }
    Ok(matcher)
}

/// Evaluates with the matcher, or with the cosine coarse ranking alone when
/// `matcher` is `None`.
pub fn evaluate_run(
    cfg: &RunConfig,
    ds: &Dataset,
    encoder: &Encoder,
    matcher: Option<&Matcher>,
) -> Result<EvalReport> {
    let inference = InferenceConfig {
        top_k: cfg.top_k,
        use_bit_head: matcher.is_some(),
    };
    evaluate(encoder, matcher, ds, &inference)
}

/// BIT and baseline reports from one full two-stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub bit: EvalReport,
    pub baseline: EvalReport,
}

pub fn run_both(cfg: &RunConfig, ds: &Dataset) -> Result<RunResult> {
    let encoder = train_stage1(cfg, ds, |_| {})?;
    let matcher = train_stage2(cfg, ds, &encoder, |_| {})?;
    Ok(RunResult {
        bit: evaluate_run(cfg, ds, &encoder, Some(&matcher))?,
        baseline: evaluate_run(cfg, ds, &encoder, None)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRow {
    pub setting: String,
    pub fraction: f64,
    pub model: String,
    #[serde(rename = "rank1")]
    pub rank1: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

pub fn setting_label(modality: Modality, fraction: f64) -> String {
    if fraction == 0.0 {
        "full".to_string()
    } else {
        format!("{}-{}%", modality.tag(), (fraction * 100.0).round())
    }
}

/// For each fraction: thin the training split, train both stages from
/// scratch, and evaluate BIT and the cosine baseline.
pub fn imbalance(
    cfg: &RunConfig,
    ds: &Dataset,
    fractions: &[f64],
    modality: Modality,
) -> Result<Vec<ImbalanceRow>> {
    let mut rows = Vec::with_capacity(2 * fractions.len());
    for &fraction in fractions {
        let reduced =
            reduce_modality(ds, modality, fraction, derive_seed(cfg.seed, REDUCE_STREAM))?;
        let r = run_both(cfg, &reduced)?;
        let setting = setting_label(modality, fraction);
        for (model, report) in [("BIT", &r.bit), ("baseline", &r.baseline)] {
            rows.push(ImbalanceRow {
                setting: setting.clone(),
                fraction,
                model: model.to_string(),
                rank1: report.rank1(),
                map: report.map,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synthdata::{generate, GenConfig};

    fn tiny() -> (RunConfig, Dataset) {
        let mut cfg = RunConfig::default();
        cfg.gen = GenConfig {
            num_identities: 8,
            num_test_identities: 3,
            vis_per_id: 4,
            ir_per_id: 2,
            patches: 4,
            raw_dim: 6,
            collision_groups: 2,
            ..GenConfig::default()
        };
        cfg.encoder = EncoderConfig {
            raw_dim: 6,
            patches: 4,
            dim: 8,
            depth: 1,
            heads: 1,
            num_train_identities: 5,
        };
        cfg.bci.dim = 8;
        cfg.bci.depth = 1;
        cfg.qa.k = 2;
        cfg.batch.p = 2;
        cfg.batch.k = 2;
        cfg.stage1_epochs = 2;
        cfg.stage2_epochs = 2;
        cfg.top_k = 4;
        let ds = generate(&cfg.gen).unwrap();
        (cfg, ds)
    }

    #[test]
    fn one_log_line_per_epoch() {
        let (cfg, ds) = tiny();
        let mut lines = Vec::new();
        let enc = train_stage1(&cfg, &ds, |l| lines.push(*l)).unwrap();
        train_stage2(&cfg, &ds, &enc, |l| lines.push(*l)).unwrap();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines.iter().map(|l| (l.stage, l.epoch)).collect::<Vec<_>>(),
            vec![(1, 0), (1, 1), (2, 0), (2, 1)]
        );
        assert!(lines.iter().all(|l| l.steps == 3));
        let json = serde_json::to_string(&lines[2]).unwrap();
        assert!(json.contains("\"contrastive\""), "{json}");
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, ds) = tiny();
        let a = run_both(&cfg, &ds).unwrap();
        let b = run_both(&cfg, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.baseline.psi_evals_per_query, 0);
        assert_eq!(a.bit.psi_evals_per_query, 3);
    }

    #[test]
    fn imbalance_emits_two_rows_per_setting() {
        let (cfg, ds) = tiny();
        let rows = imbalance(&cfg, &ds, &[0.0, 0.2], Modality::Infrared).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].setting, "full");
        assert_eq!(rows[2].setting, "ir-20%");
        let full = run_both(&cfg, &ds).unwrap();
        assert_eq!(rows[0].rank1, full.bit.rank1());
        assert_eq!(rows[1].map, full.baseline.map);
    }

    #[test]
    fn incompatible_dataset_is_rejected() {
        let (cfg, _) = tiny();
        let other = generate(&GenConfig::default()).unwrap();
        assert!(matches!(
            train_stage1(&cfg, &other, |_| {}),
            Err(Error::Config(_))
        ));
    }
}
