use bit_core::nn::seeded_rng;
use bit_core::qascore::{
    mutual_matches, patch_similarity_vector, similarity_matrices, smooth_complement, topk_filter,
};
use bit_core::retrieval::cmc_map;
use bit_core::synthdata::generate;
use bit_core::{Dataset, GenConfig, Modality, Split, Tensor};
use proptest::prelude::*;

fn features(n: usize, c: usize, seed: u64) -> Tensor {
    Tensor::normal(&[n, c], 1.0, &mut seeded_rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn s_hat_stays_in_unit_interval(n in 1usize..9, c in 1usize..7, seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let k = 1 + (seed as usize) % n;
        let sp = similarity_matrices(&features(n, c, seed), &features(n, c, seed ^ 1)).unwrap();
        let m = mutual_matches(&topk_filter(&sp.vi, k).unwrap(), &topk_filter(&sp.iv, k).unwrap());
        let ms = smooth_complement(&m, &sp.vi).unwrap();
        let s_hat = patch_similarity_vector(&ms, &sp.vi, alpha).unwrap();
        prop_assert_eq!(s_hat.data().len(), n);
        for &v in s_hat.data() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn larger_k_never_loses_mutual_matches(n in 2usize..9, c in 1usize..7, seed in any::<u64>()) {
        let sp = similarity_matrices(&features(n, c, seed), &features(n, c, seed ^ 7)).unwrap();
        let at = |k| mutual_matches(&topk_filter(&sp.vi, k).unwrap(), &topk_filter(&sp.iv, k).unwrap());
        for k in 1..n {
            let (small, large) = (at(k), at(k + 1));
            prop_assert!(small.iter().all(|m| large.contains(m)));
        }
        prop_assert_eq!(at(n).len(), n * n);
    }

    #[test]
    fn metrics_are_bounded(rel in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 1..6)) {
        if !rel.iter().flatten().any(|&r| r) {
            prop_assert!(cmc_map(&rel).is_err());
            return Ok(());
        }
        let m = cmc_map(&rel).unwrap();
        prop_assert!(m.cmc.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(m.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&m.map));
    }

    #[test]
    fn generated_splits_have_expected_sizes(ids in 3usize..12, test in 1usize..3, vis in 1usize..4, ir in 1usize..3, seed in 0u64..1000) {
        let cfg = GenConfig {
            num_identities: ids,
            num_test_identities: test,
            vis_per_id: vis,
            ir_per_id: ir,
            collision_groups: 1,
            seed,
            ..GenConfig::default()
        };
        let ds: Dataset = generate(&cfg).unwrap();
        let train = ids - test;
        prop_assert_eq!(ds.count(Split::Train, Modality::Visible), train * vis);
        prop_assert_eq!(ds.count(Split::Train, Modality::Infrared), train * ir);
        prop_assert_eq!(ds.indices(Split::Gallery).len(), test);
        prop_assert_eq!(ds.indices(Split::Query).len(), test * ir);
        prop_assert!(ds.samples.iter().all(|s| s.patches.all_finite()));
        prop_assert_eq!(generate(&cfg).unwrap(), ds);
    }
}
