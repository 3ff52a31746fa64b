//! Ranking, CMC/mAP metrics and the two-stage inference path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::matcher::Matcher;
use crate::synthdata::{Dataset, Split};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub top_k: usize,
    pub use_bit_head: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            use_bit_head: true,
        }
    }
}

/// CMC curve (index `r` holds rank `r + 1`) and mean average precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    /// Queries without any relevant gallery item; left out of both metrics.
    pub skipped: usize,
}

/// Computes CMC and mAP from per-query relevance flags in ranked order.
pub fn cmc_map(relevance: &[Vec<bool>]) -> Result<Metrics> {
    let len = relevance.iter().map(Vec::len).max().unwrap_or(0);
    let mut hits = vec![0usize; len];
    let mut ap_sum = 0.0;
    let mut used = 0usize;
    for rel in relevance {
        let Some(first) = rel.iter().position(|&r| r) else {
            continue;
        };
        used += 1;
        hits[first..].iter_mut().for_each(|h| *h += 1);
        let mut found = 0.0;
        let mut precision_sum = 0.0;
        for (i, _) in rel.iter().enumerate().filter(|(_, &r)| r) {
            found += 1.0;
            precision_sum += found / (i + 1) as f64;
        }
        ap_sum += precision_sum / found;
    }
    if used == 0 {
        return Err(Error::usage("no query has a relevant gallery item"));
    }
    Ok(Metrics {
        cmc: hits.iter().map(|&h| h as f64 / used as f64).collect(),
        map: ap_sum / used as f64,
        num_queries: used,
        skipped: relevance.len() - used,
    })
}

/// Mean-pooled, L2-normalized patch features.
pub fn pooled_unit(features: &Tensor) -> Result<Vec<f64>> {
    let (n, c) = features.dims2()?;
    let mut out = vec![0.0; c];
    for r in 0..n {
        out.iter_mut()
            .zip(features.row(r))
            .for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    out.iter_mut().for_each(|o| *o /= norm);
    Ok(out)
}

/// A gallery entry: stable identifier, identity and encoded features.
#[derive(Clone, Debug)]
pub struct GalleryItem {
    pub id: usize,
    pub identity: usize,
    pub features: Tensor,
    pub pooled: Vec<f64>,
}

/// One ranked gallery position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranked {
    /// Position in the gallery slice.
    pub index: usize,
    pub score: f64,
}

fn by_score_then_id(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Cosine ranking of unit vectors, best first; ties go to the lower stable id.
pub fn coarse_rank(query: &[f64], gallery: &[GalleryItem]) -> Vec<Ranked> {
    let mut out: Vec<Ranked> = gallery
        .iter()
        .enumerate()
        .map(|(index, g)| Ranked {
            index,
            score: query.iter().zip(&g.pooled).map(|(a, b)| a * b).sum(),
        })
        .collect();
    out.sort_by(|a, b| {
        by_score_then_id(
            (a.score, gallery[a.index].id),
            (b.score, gallery[b.index].id),
        )
    });
    out
}

/// Result of ranking one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub order: Vec<Ranked>,
    /// `(gallery index, Ψ)` for every rescored candidate.
    pub psi: Vec<(usize, f64)>,
    pub psi_evals: usize,
}

/// Coarse ranking followed by rescoring of the top candidates with the
/// matcher; the query is the infrared stream, the gallery item the visible
/// one. Rescored candidates come first by `Ψ`, the rest keep coarse order.
pub fn bit_rank(
    query: &Tensor,
    gallery: &[GalleryItem],
    matcher: Option<&Matcher>,
    cfg: &InferenceConfig,
) -> Result<QueryResult> {
    if cfg.top_k == 0 {
        return Err(Error::usage("top_K must be at least 1"));
    }
    let coarse = coarse_rank(&pooled_unit(query)?, gallery);
    let matcher = match (cfg.use_bit_head, matcher) {
        (false, _) => {
            return Ok(QueryResult {
                order: coarse,
                psi: Vec::new(),
                psi_evals: 0,
            })
        }
        (true, None) => return Err(Error::usage("BIT ranking needs a trained matcher")),
        (true, Some(m)) => m,
    };
    let k = cfg.top_k.min(gallery.len());
    let mut rescored = Vec::with_capacity(k);
    for r in &coarse[..k] {
        let out = matcher.score(&gallery[r.index].features, query)?;
        rescored.push(Ranked {
            index: r.index,
            score: out.psi,
        });
    }
    let psi = rescored.iter().map(|r| (r.index, r.score)).collect();
    rescored.sort_by(|a, b| {
        by_score_then_id(
            (a.score, gallery[a.index].id),
            (b.score, gallery[b.index].id),
        )
    });
    rescored.extend_from_slice(&coarse[k..]);
    Ok(QueryResult {
        order: rescored,
        psi,
        psi_evals: k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub gap: f64,
}

pub fn similarity_stats(scores: &[f64], labels: &[bool]) -> Result<SimilarityStats> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "similarity_stats",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    let mean = |want: bool| {
        let vals: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(s, _)| *s)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    match (mean(true), mean(false)) {
        (Some(mean_pos), Some(mean_neg)) => Ok(SimilarityStats {
            mean_pos,
            mean_neg,
            gap: mean_pos - mean_neg,
        }),
        _ => Err(Error::usage(
            "similarity stats need both positive and negative pairs",
        )),
    }
}

/// Evaluation summary written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Mean score of same-identity pairs (`Ψ` when rescoring, cosine otherwise).
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub num_queries: usize,
    #[serde(rename = "top_K")]
    pub top_k: usize,
    pub psi_evals_per_query: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Encodes the gallery split of `ds`.
pub fn encode_gallery(encoder: &Encoder, ds: &Dataset) -> Result<Vec<GalleryItem>> {
    ds.indices(Split::Gallery)
        .into_par_iter()
        .map(|i| {
            let s = &ds.samples[i];
            let features = encoder.encode(s)?;
            Ok(GalleryItem {
                id: i,
                identity: s.identity,
                pooled: pooled_unit(&features)?,
                features,
            })
        })
        .collect()
}

/// Ranks every query against the gallery and aggregates the metrics.
pub fn evaluate(
    encoder: &Encoder,
    matcher: Option<&Matcher>,
    ds: &Dataset,
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let gallery = encode_gallery(encoder, ds)?;
    if gallery.is_empty() {
        return Err(Error::usage("dataset has no gallery samples"));
    }
    let queries = ds.indices(Split::Query);
    let results: Vec<(QueryResult, usize)> = queries
        .par_iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let f = encoder.encode(s)?;
            Ok((bit_rank(&f, &gallery, matcher, cfg)?, s.identity))
        })
        .collect::<Result<_>>()?;

    let mut relevance = Vec::with_capacity(results.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (r, identity) in &results {
        relevance.push(
            r.order
                .iter()
                .map(|x| gallery[x.index].identity == *identity)
                .collect(),
        );
        if cfg.use_bit_head {
            for &(g, psi) in &r.psi {
                scores.push(psi);
                labels.push(gallery[g].identity == *identity);
            }
        } else {
            for x in &r.order {
                scores.push(x.score);
                labels.push(gallery[x.index].identity == *identity);
            }
        }
    }
    let metrics = cmc_map(&relevance)?;
    let stats = similarity_stats(&scores, &labels)?;
    let evals = results.first().map_or(0, |r| r.0.psi_evals);
    if results.iter().any(|r| r.0.psi_evals != evals) {
        return Err(Error::usage("inconsistent candidate counts across queries"));
    }
    Ok(EvalReport {
        cmc: metrics.cmc,
        map: metrics.map,
        mean_pos: stats.mean_pos,
        mean_neg: stats.mean_neg,
        num_queries: metrics.num_queries,
        top_k: cfg.top_k,
        psi_evals_per_query: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn item(id: usize, identity: usize, pooled: Vec<f64>) -> GalleryItem {
        GalleryItem {
            id,
            identity,
            features: Tensor::zeros(&[1, pooled.len()]),
            pooled,
        }
    }

    /// AP straight from the definition: precision at each relevant rank.
    fn oracle_ap(rel: &[bool]) -> f64 {
        let positions: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
        let mut total = 0.0;
        for (j, &pos) in positions.iter().enumerate() {
            let relevant_so_far = rel[..=pos].iter().filter(|&&r| r).count();
            assert_eq!(relevant_so_far, j + 1);
            total += relevant_so_far as f64 / (pos + 1) as f64;
        }
        total / positions.len() as f64
    }

    fn oracle_cmc(rels: &[Vec<bool>], r: usize) -> f64 {
        let hits = rels
            .iter()
            .filter(|rel| rel[..=r].iter().any(|&x| x))
            .count();
        hits as f64 / rels.len() as f64
    }

    #[test]
    fn cmc_examples() {
        let m = cmc_map(&[vec![true, false], vec![false, true]]).unwrap();
        assert_eq!(m.cmc, vec![0.5, 1.0]);
        let m = cmc_map(&[vec![true, false, true, false]]).unwrap();
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.map - 0.8333).abs() < 1e-4);
        let m = cmc_map(&[vec![true, false], vec![true, true]]).unwrap();
        assert_eq!((m.map, m.cmc[0]), (1.0, 1.0));
        let m = cmc_map(&[vec![false, false], vec![true, false]]).unwrap();
        assert_eq!((m.num_queries, m.skipped), (1, 1));
        assert!(cmc_map(&[vec![false]]).is_err());
    }

    #[test]
    fn cmc_map_matches_oracle() {
        for seed in 0..100u64 {
            let mut rng = seeded_rng(seed);
            let g = 1 + (seed as usize % 8);
            let rels: Vec<Vec<bool>> = (0..5)
                .map(|_| {
                    let mut r: Vec<bool> = (0..g)
                        .map(|_| rand::Rng::random_bool(&mut rng, 0.3))
                        .collect();
                    let at = rand::Rng::random_range(&mut rng, 0..g);
                    r[at] = true;
                    r
                })
                .collect();
            let m = cmc_map(&rels).unwrap();
            for r in 0..g {
                assert!((m.cmc[r] - oracle_cmc(&rels, r)).abs() < 1e-12);
            }
            let map = rels.iter().map(|r| oracle_ap(r)).sum::<f64>() / rels.len() as f64;
            assert!((m.map - map).abs() < 1e-12);
        }
    }

    #[test]
    fn coarse_examples() {
        let g = vec![
            item(0, 0, vec![1.0, 0.0]),
            item(1, 1, vec![0.0, 1.0]),
            item(2, 2, vec![0.6, 0.8]),
        ];
        let r = coarse_rank(&[0.6, 0.8], &g);
        assert_eq!(r[0].index, 2);
        let orth = vec![item(5, 0, vec![0.0, 1.0]), item(3, 1, vec![0.0, -1.0])];
        let r = coarse_rank(&[1.0, 0.0], &orth);
        assert_eq!(
            r.iter().map(|x| orth[x.index].id).collect::<Vec<_>>(),
            vec![3, 5]
        );
        assert!(r.iter().all(|x| x.score == 0.0));
    }

    #[test]
    fn coarse_matches_scalar_cosine() {
        for seed in 0..100u64 {
            let mut rng = seeded_rng(seed);
            let q = Tensor::normal(&[3, 5], 1.0, &mut rng);
            let feats: Vec<Tensor> = (0..6)
                .map(|_| Tensor::normal(&[3, 5], 1.0, &mut rng))
                .collect();
            let g: Vec<GalleryItem> = feats
                .iter()
                .enumerate()
                .map(|(i, f)| item(i, i, pooled_unit(f).unwrap()))
                .collect();
            let ranked = coarse_rank(&pooled_unit(&q).unwrap(), &g);
            let mean = |t: &Tensor| -> Vec<f64> {
                (0..5)
                    .map(|c| (0..3).map(|r| t.get2(r, c)).sum::<f64>() / 3.0)
                    .collect()
            };
            let qm = mean(&q);
            let mut want: Vec<(f64, usize)> = feats
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let gm = mean(f);
                    let dot: f64 = qm.iter().zip(&gm).map(|(a, b)| a * b).sum();
                    let nq = qm.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ng = gm.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (dot / (nq * ng), i)
                })
                .collect();
            want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            for (r, (s, i)) in ranked.iter().zip(want) {
                assert_eq!(r.index, i);
                assert!((r.score - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_examples() {
        let s = similarity_stats(&[0.2, 0.8, 0.1], &[true, true, false]).unwrap();
        assert!((s.mean_pos - 0.5).abs() < 1e-15);
        let same = similarity_stats(&[0.3, 0.3], &[true, false]).unwrap();
        assert_eq!(same.gap, 0.0);
        assert!(matches!(
            similarity_stats(&[0.3], &[true]),
            Err(Error::Usage(_))
        ));
        let mut rng = seeded_rng(1);
        let scores: Vec<f64> = (0..50)
            .map(|_| rand::Rng::random::<f64>(&mut rng))
            .collect();
        let labels: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
        let s = similarity_stats(&scores, &labels).unwrap();
        let (mut p, mut np, mut n, mut nn) = (0.0, 0.0, 0.0, 0.0);
        for (x, l) in scores.iter().zip(&labels) {
            if *l {
                p += x;
                np += 1.0;
            } else {
                n += x;
                nn += 1.0;
            }
        }
        assert!((s.mean_pos - p / np).abs() < 1e-15);
        assert!((s.mean_neg - n / nn).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metrics_are_invariant_to_gallery_order(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let q = pooled_unit(&Tensor::normal(&[2, 3], 1.0, &mut rng)).unwrap();
            // quantized vectors produce exact score ties
            let mut g: Vec<GalleryItem> = (0..8)
                .map(|i| {
                    let v: Vec<f64> = (0..3).map(|_| rand::Rng::random_range(&mut rng, -1i32..=1) as f64).collect();
                    item(i, i % 3, v)
                })
                .collect();
            let metrics = |g: &[GalleryItem]| {
                let rel = coarse_rank(&q, g).iter().map(|r| g[r.index].identity == 0).collect::<Vec<_>>();
                cmc_map(&[rel]).unwrap()
            };
            let base = metrics(&g);
            for m in base.cmc.windows(2) {
                prop_assert!(m[0] <= m[1]);
            }
            for _ in 0..50 {
                g.shuffle(&mut rng);
                prop_assert_eq!(&metrics(&g), &base);
            }
        }
    }
}
