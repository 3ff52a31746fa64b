//! The single JSON document that drives a whole experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bci::BciConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::OptimizerConfig;
use crate::qascore::QaConfig;
use crate::retrieval::DEFAULT_TOP_K;
use crate::synthdata::{parse_error, GenConfig};

/// Identity-balanced batch shape: `p` identities with `k` samples per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { p: 4, k: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub bci: BciConfig,
    pub qa: QaConfig,
    pub stage1_optim: OptimizerConfig,
    pub stage2_optim: OptimizerConfig,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch: BatchConfig,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            encoder: EncoderConfig::default(),
            bci: BciConfig::default(),
            qa: QaConfig::default(),
            stage1_optim: OptimizerConfig::default(),
            stage2_optim: OptimizerConfig::default(),
            stage1_epochs: 8,
            stage2_epochs: 12,
            batch: BatchConfig::default(),
            top_k: DEFAULT_TOP_K,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Checks every nested config and the agreements between them.
    /// `total_steps` in the optimizer sections is derived at training time
    /// and is not checked here.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.encoder.validate()?;
        self.bci.validate()?;
        self.qa.validate()?;
        for opt in [&self.stage1_optim, &self.stage2_optim] {
            let mut probe = opt.clone();
            probe.total_steps = probe.total_steps.max(1);
            probe.validate()?;
        }
        let (g, e) = (&self.gen, &self.encoder);
        if e.raw_dim != g.raw_dim || e.patches != g.patches {
            return Err(Error::config(format!(
                "encoder expects {}x{} patches but data has {}x{}",
                e.patches, e.raw_dim, g.patches, g.raw_dim
            )));
        }
        if e.num_train_identities != g.num_train_identities() {
            return Err(Error::config(format!(
                "encoder classifies {} identities but data has {} training identities",
                e.num_train_identities,
                g.num_train_identities()
            )));
        }
        if self.bci.dim != e.dim {
            return Err(Error::config(format!(
                "bci width {} differs from encoder width {}",
                self.bci.dim, e.dim
            )));
        }
        if self.qa.k > g.patches {
            return Err(Error::config(format!(
                "k = {} exceeds {} patches",
                self.qa.k, g.patches
            )));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::config("stage epochs must be at least 1"));
        }
        if self.batch.p == 0 || self.batch.k == 0 {
            return Err(Error::config("batch P and K must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_K must be positive"));
        }
        Ok(())
    }

    /// Replaces the run seed. The data seed follows it so one number
    /// reproduces the whole experiment.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.gen.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::usage(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
