//! Shared fixtures for the benchmarks: a small trained-from-init model and
//! encoded features, built deterministically from a seed.

use bit_core::bci::expand_pairs;
use bit_core::nn::seeded_rng;
use bit_core::synthdata::generate;
use bit_core::{Dataset, Encoder, Matcher, PairBatch, RunConfig, Split, Tensor};

pub struct Fixture {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub encoder: Encoder,
    pub matcher: Matcher,
}

impl Fixture {
    /// Default-sized model with freshly initialised weights.
    pub fn new(seed: u64) -> Self {
        let config = RunConfig::default().with_seed(seed);
        let dataset = generate(&config.gen).expect("default dataset");
        let encoder = Encoder::new(config.encoder.clone(), seed).expect("encoder");
        let matcher = Matcher::new(
            config.bci.clone(),
            config.qa.clone(),
            config.gen.patches,
            seed,
        )
        .expect("matcher");
        Self {
            config,
            dataset,
            encoder,
            matcher,
        }
    }

    /// Encoded patch features of the first query and first gallery sample.
    pub fn pair(&self) -> (Tensor, Tensor) {
        let q = self.dataset.indices(Split::Query)[0];
        let g = self.dataset.indices(Split::Gallery)[0];
        let f_i = self
            .encoder
            .encode(&self.dataset.samples[q])
            .expect("encode query");
        let f_v = self
            .encoder
            .encode(&self.dataset.samples[g])
            .expect("encode gallery");
        (f_v, f_i)
    }

    /// One stage-2 pair batch drawn from a balanced training batch.
    pub fn pair_batch(&self) -> PairBatch {
        let batch = self
            .dataset
            .sample_pk_batch(
                self.config.batch.p,
                self.config.batch.k,
                self.config.seed,
                0,
            )
            .expect("batch");
        let encode = |samples: &[&bit_core::SynthSample]| -> Tensor {
            let rows: Vec<Tensor> = samples
                .iter()
                .map(|s| self.encoder.encode(s).expect("encode"))
                .collect();
            Tensor::stack(&rows).expect("stack")
        };
        let vis_ids: Vec<usize> = batch.visible.iter().map(|s| s.identity).collect();
        let ir_ids: Vec<usize> = batch.infrared.iter().map(|s| s.identity).collect();
        let (f_v, f_i) = (encode(&batch.visible), encode(&batch.infrared));
        expand_pairs(&f_v, &f_i, &vis_ids, &ir_ids).expect("pairs")
    }
}

/// Square matrix with standard-normal entries.
pub fn random_matrix(n: usize, seed: u64) -> Tensor {
    Tensor::normal(&[n, n], 1.0, &mut seeded_rng(seed))
}
