//! Synthetic visible/infrared person observations.
//!
//! Each identity owns a latent patch matrix `Z ∈ R^{N×d_raw}`. Visible samples
//! are a fixed linear transform of the whole latent. Infrared samples split the
//! output coordinates: the first half ("appearance") is driven by a signature
//! shared by every identity of the same collision group, the second half
//! ("structure") by the identity's own latent. Infrared observations of
//! different identities in one group therefore collide on appearance while
//! their visible observations stay distinct.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{derive_seed, seeded_rng};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "bit-synth-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "vis")]
    Visible,
    #[serde(rename = "ir")]
    Infrared,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "vis",
            Modality::Infrared => "ir",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vis" => Some(Modality::Visible),
            "ir" => Some(Modality::Infrared),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_identities: usize,
    /// Identities held out for query/gallery; taken from the end of the range.
    pub num_test_identities: usize,
    pub vis_per_id: usize,
    pub ir_per_id: usize,
    pub patches: usize,
    pub raw_dim: usize,
    pub noise_sigma: f64,
    pub collision_groups: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            num_test_identities: 10,
            vis_per_id: 8,
            ir_per_id: 4,
            patches: 8,
            raw_dim: 16,
            noise_sigma: 0.1,
            collision_groups: 10,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::config("num_identities must be positive"));
        }
        if self.num_test_identities == 0 || self.num_test_identities >= self.num_identities {
            return Err(Error::config(
                "num_test_identities must lie in [1, num_identities)",
            ));
        }
        if self.vis_per_id == 0 || self.ir_per_id == 0 {
            return Err(Error::config("vis_per_id and ir_per_id must be positive"));
        }
        if self.patches == 0 {
            return Err(Error::config("patches must be positive"));
        }
        if self.raw_dim < 2 {
            return Err(Error::config("raw_dim must be at least 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and non-negative"));
        }
        if self.collision_groups == 0 || self.collision_groups > self.num_identities {
            return Err(Error::config(
                "collision_groups must lie in [1, num_identities]",
            ));
        }
        Ok(())
    }

    pub fn num_train_identities(&self) -> usize {
        self.num_identities - self.num_test_identities
    }

    /// Width of the appearance coordinate block (the leading half).
    pub fn appearance_dims(&self) -> usize {
        self.raw_dim / 2
    }

    /// Contiguous partition of identities into collision groups.
    pub fn group_of(&self, identity: usize) -> usize {
        identity * self.collision_groups / self.num_identities
    }

    pub fn is_train_identity(&self, identity: usize) -> bool {
        identity < self.num_train_identities()
    }
}

/// One observation: `patches` is `N × d_raw`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub identity: usize,
    pub modality: Modality,
    pub split: Split,
    pub camera: u32,
    pub patches: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub samples: Vec<SynthSample>,
}

const VIS_CAMERAS: u32 = 4;
const IR_CAMERAS: u32 = 2;

/// Builds the dataset described by `cfg`; a pure function of the config.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n, d) = (cfg.patches, cfg.raw_dim);
    let d_app = cfg.appearance_dims();
    let d_struct = d - d_app;

    let mut trng = seeded_rng(derive_seed(cfg.seed, 1));
    let a_vis = Tensor::normal(&[d, d], 1.0 / (d as f64).sqrt(), &mut trng);
    let a_app = Tensor::normal(&[d_app, d_app], 1.0 / (d_app as f64).sqrt(), &mut trng);
    let a_struct = Tensor::normal(
        &[d_struct, d_struct],
        1.0 / (d_struct as f64).sqrt(),
        &mut trng,
    );

    let latents: Vec<Tensor> = (0..cfg.num_identities)
        .map(|i| {
            Tensor::normal(
                &[n, d],
                1.0,
                &mut seeded_rng(derive_seed(cfg.seed, 1000 + i as u64)),
            )
        })
        .collect();

    // Group signature: mean appearance latent of the group's members.
    let mut signatures = vec![vec![0.0; n * d_app]; cfg.collision_groups];
    let mut members = vec![0usize; cfg.collision_groups];
    for (i, z) in latents.iter().enumerate() {
        let g = cfg.group_of(i);
        members[g] += 1;
        for r in 0..n {
            for c in 0..d_app {
                signatures[g][r * d_app + c] += z.get2(r, c);
            }
        }
    }
    for (sig, &m) in signatures.iter_mut().zip(&members) {
        sig.iter_mut().for_each(|v| *v /= m as f64);
    }

    let mut samples = Vec::new();
    for (identity, z) in latents.iter().enumerate() {
        let mut noise = seeded_rng(derive_seed(cfg.seed, 500_000 + identity as u64));
        let train = cfg.is_train_identity(identity);
        let clean_vis = transform(z.data(), n, d, 0, d, a_vis.data(), d);
        let vis_count = if train { cfg.vis_per_id } else { 1 };
        for j in 0..vis_count {
            samples.push(SynthSample {
                identity,
                modality: Modality::Visible,
                split: if train { Split::Train } else { Split::Gallery },
                camera: j as u32 % VIS_CAMERAS,
                patches: noisy(&clean_vis, &[n, d], cfg.noise_sigma, &mut noise),
            });
        }

        let sig = &signatures[cfg.group_of(identity)];
        let app = transform(sig, n, d_app, 0, d_app, a_app.data(), d_app);
        let structure = transform(z.data(), n, d, d_app, d_struct, a_struct.data(), d_struct);
        let mut clean_ir = Vec::with_capacity(n * d);
        for r in 0..n {
            clean_ir.extend_from_slice(&app[r * d_app..(r + 1) * d_app]);
            clean_ir.extend_from_slice(&structure[r * d_struct..(r + 1) * d_struct]);
        }
        for j in 0..cfg.ir_per_id {
            samples.push(SynthSample {
                identity,
                modality: Modality::Infrared,
                split: if train { Split::Train } else { Split::Query },
                camera: VIS_CAMERAS + j as u32 % IR_CAMERAS,
                patches: noisy(&clean_ir, &[n, d], cfg.noise_sigma, &mut noise),
            });
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

/// Rows of `x[n × stride]` restricted to columns `[start, start+width)`,
/// multiplied by `a[width × out]`.
fn transform(
    x: &[f64],
    n: usize,
    stride: usize,
    start: usize,
    width: usize,
    a: &[f64],
    out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; n * out];
    for r in 0..n {
        for k in 0..width {
            let xv = x[r * stride + start + k];
            for c in 0..out {
                y[r * out + c] += xv * a[k * out + c];
            }
        }
    }
    y
}

fn noisy(clean: &[f64], shape: &[usize], sigma: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::normal(shape, sigma, rng);
    t.data_mut()
        .iter_mut()
        .zip(clean)
        .for_each(|(v, c)| *v += c);
    t
}

/// Removes `⌊fraction · count⌋` training samples of `modality` uniformly at
/// random, never emptying an identity. Query and gallery samples are kept.
pub fn reduce_modality(
    ds: &Dataset,
    modality: Modality,
    fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!("fraction {fraction} outside [0, 1)")));
    }
    let mut candidates: Vec<usize> = ds
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train && s.modality == modality)
        .map(|(i, _)| i)
        .collect();
    let target = (fraction * candidates.len() as f64 + 1e-9).floor() as usize;
    if target == 0 {
        return Ok(ds.clone());
    }
    let mut remaining: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &candidates {
        *remaining.entry(ds.samples[i].identity).or_default() += 1;
    }
    candidates.shuffle(&mut seeded_rng(derive_seed(seed, 77)));
    let mut removed = vec![false; ds.samples.len()];
    let mut count = 0;
    for &i in &candidates {
        if count == target {
            break;
        }
        let left = remaining.get_mut(&ds.samples[i].identity).expect("counted");
        if *left > 1 {
            *left -= 1;
            removed[i] = true;
            count += 1;
        }
    }
    if count < target {
        return Err(Error::config(format!(
            "cannot remove {target} {} samples while keeping one per identity",
            modality.tag()
        )));
    }
    let samples = ds
        .samples
        .iter()
        .zip(&removed)
        .filter(|(_, r)| !**r)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(Dataset {
        config: ds.config.clone(),
        samples,
    })
}

/// Identity-balanced batch: `P·K` visible followed by `P·K` infrared samples,
/// grouped by identity in the same order for both modalities.
#[derive(Clone, Debug)]
pub struct PkBatch<'a> {
    pub visible: Vec<&'a SynthSample>,
    pub infrared: Vec<&'a SynthSample>,
    /// Dataset positions of `visible` and `infrared`.
    pub visible_idx: Vec<usize>,
    pub infrared_idx: Vec<usize>,
}

impl PkBatch<'_> {
    pub fn len(&self) -> usize {
        self.visible.len() + self.infrared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &SynthSample> {
        self.visible.iter().chain(&self.infrared).copied()
    }
}

impl Dataset {
    pub fn count(&self, split: Split, modality: Modality) -> usize {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.modality == modality)
            .count()
    }

    /// Visible-to-infrared ratio of the training split.
    pub fn train_imbalance(&self) -> f64 {
        self.count(Split::Train, Modality::Visible) as f64
            / self.count(Split::Train, Modality::Infrared).max(1) as f64
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    /// Training samples indexed by identity, then modality.
    fn train_index(&self) -> BTreeMap<usize, [Vec<usize>; 2]> {
        let mut map: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.split != Split::Train {
                continue;
            }
            let slot = match s.modality {
                Modality::Visible => 0,
                Modality::Infrared => 1,
            };
            map.entry(s.identity).or_default()[slot].push(i);
        }
        map
    }

    /// Draws `p` identities and `k` samples per modality for each of them.
    /// Deterministic in `(seed, step)`; draws with replacement only where an
    /// identity or modality has too few samples.
    pub fn sample_pk_batch(&self, p: usize, k: usize, seed: u64, step: u64) -> Result<PkBatch<'_>> {
        if p == 0 || k == 0 {
            return Err(Error::usage("P and K must be positive"));
        }
        let index = self.train_index();
        let eligible: Vec<usize> = index
            .iter()
            .filter(|(_, m)| !m[0].is_empty() && !m[1].is_empty())
            .map(|(&id, _)| id)
            .collect();
        if eligible.is_empty() {
            return Err(Error::usage(
                "training split has no identity with both modalities",
            ));
        }
        let mut rng = seeded_rng(derive_seed(seed, step.wrapping_add(0x5EED)));
        let ids: Vec<usize> = if p <= eligible.len() {
            eligible.choose_multiple(&mut rng, p).copied().collect()
        } else {
            (0..p)
                .map(|_| *eligible.choose(&mut rng).expect("nonempty"))
                .collect()
        };
        let mut picked = [Vec::with_capacity(p * k), Vec::with_capacity(p * k)];
        for id in ids {
            for (slot, out) in picked.iter_mut().enumerate() {
                let pool = &index[&id][slot];
                if pool.len() >= k {
                    out.extend(pool.choose_multiple(&mut rng, k).copied());
                } else {
                    out.extend((0..k).map(|_| *pool.choose(&mut rng).expect("nonempty")));
                }
            }
        }
        let [visible_idx, infrared_idx] = picked;
        Ok(PkBatch {
            visible: visible_idx.iter().map(|&i| &self.samples[i]).collect(),
            infrared: infrared_idx.iter().map(|&i| &self.samples[i]).collect(),
            visible_idx,
            infrared_idx,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            format: FORMAT_TAG.to_string(),
            config: self.config.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    id: s.identity,
                    modality: s.modality,
                    split: s.split,
                    camera: s.camera,
                    patches: (0..s.patches.shape()[0])
                        .map(|r| s.patches.row(r).to_vec())
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::usage(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        if header.format != FORMAT_TAG {
            return Err(Error::Version {
                found: header.format,
                expected: FORMAT_TAG.into(),
            });
        }
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        file.config.validate()?;
        let (n, d) = (file.config.patches, file.config.raw_dim);
        let mut samples = Vec::with_capacity(file.samples.len());
        for (i, rec) in file.samples.into_iter().enumerate() {
            let bad = |what: &str| Error::Parse {
                offset: text.len(),
                detail: format!("sample {i}: {what}"),
            };
            if rec.id >= file.config.num_identities {
                return Err(bad("identity out of range"));
            }
            if rec.patches.len() != n || rec.patches.iter().any(|r| r.len() != d) {
                return Err(bad("patch matrix has the wrong shape"));
            }
            let patches =
                Tensor::new(&[n, d], rec.patches.concat()).map_err(|e| bad(&e.to_string()))?;
            samples.push(SynthSample {
                identity: rec.id,
                modality: rec.modality,
                split: rec.split,
                camera: rec.camera,
                patches,
            });
        }
        Ok(Dataset {
            config: file.config,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
            offset: e.valid_up_to(),
            detail: "invalid UTF-8".into(),
        })?;
        Self::from_json(text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    config: GenConfig,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: usize,
    modality: Modality,
    split: Split,
    camera: u32,
    patches: Vec<Vec<f64>>,
}

/// Converts serde_json's line/column into a byte offset.
pub(crate) fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == e.line() {
            offset += e.column().saturating_sub(1).min(line.len());
            break;
        }
        offset += line.len();
    }
    Error::Parse {
        offset: offset.min(text.len()),
        detail: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> GenConfig {
        GenConfig {
            num_identities: 6,
            num_test_identities: 2,
            vis_per_id: 3,
            ir_per_id: 2,
            patches: 3,
            raw_dim: 4,
            noise_sigma: 0.1,
            collision_groups: 3,
            seed: 9,
        }
    }

    fn app(s: &SynthSample, d_app: usize) -> Vec<f64> {
        (0..s.patches.shape()[0])
            .flat_map(|r| s.patches.row(r)[..d_app].to_vec())
            .collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&GenConfig::default()).unwrap();
        let b = generate(&GenConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = generate(&GenConfig {
            seed: 1,
            ..GenConfig::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_counts_and_ratio() {
        let ds = generate(&GenConfig::default()).unwrap();
        assert_eq!(ds.count(Split::Train, Modality::Visible), 40 * 8);
        assert_eq!(ds.count(Split::Train, Modality::Infrared), 40 * 4);
        assert_eq!(ds.train_imbalance(), 2.0);
        assert_eq!(ds.count(Split::Gallery, Modality::Visible), 10);
        assert_eq!(ds.count(Split::Query, Modality::Infrared), 40);
        let ids: BTreeSet<usize> = ds.samples.iter().map(|s| s.identity).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn noiseless_singleton_groups() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            collision_groups: 6,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let ir: Vec<&SynthSample> = ds
            .samples
            .iter()
            .filter(|s| s.modality == Modality::Infrared)
            .collect();
        for a in &ir {
            for b in &ir {
                if a.identity == b.identity {
                    assert_eq!(a.patches, b.patches);
                } else {
                    assert_ne!(a.patches, b.patches);
                }
            }
        }
    }

    #[test]
    fn single_group_collapses_infrared_appearance() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            collision_groups: 1,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let d_app = cfg.appearance_dims();
        let ir: Vec<Vec<f64>> = ds
            .samples
            .iter()
            .filter(|s| s.modality == Modality::Infrared)
            .map(|s| app(s, d_app))
            .collect();
        assert!(ir.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn many_to_one_within_group() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let d_app = cfg.appearance_dims();
        let first = |id: usize, m: Modality| {
            ds.samples
                .iter()
                .find(|s| s.identity == id && s.modality == m)
                .unwrap()
        };
        // identities 0 and 1 share group 0
        assert_eq!(cfg.group_of(0), cfg.group_of(1));
        assert_eq!(
            app(first(0, Modality::Infrared), d_app),
            app(first(1, Modality::Infrared), d_app)
        );
        assert_ne!(
            first(0, Modality::Visible).patches,
            first(1, Modality::Visible).patches
        );
        assert_ne!(
            first(0, Modality::Infrared).patches,
            first(1, Modality::Infrared).patches
        );
    }

    #[test]
    fn split_hygiene() {
        let ds = generate(&GenConfig::default()).unwrap();
        let train: BTreeSet<usize> = ds
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.identity)
            .collect();
        let test: BTreeSet<usize> = ds
            .samples
            .iter()
            .filter(|s| s.split != Split::Train)
            .map(|s| s.identity)
            .collect();
        assert!(train.is_disjoint(&test));
        for s in &ds.samples {
            match s.split {
                Split::Query => assert_eq!(s.modality, Modality::Infrared),
                Split::Gallery => assert_eq!(s.modality, Modality::Visible),
                Split::Train => {}
            }
        }
        let gallery: Vec<usize> = ds
            .samples
            .iter()
            .filter(|s| s.split == Split::Gallery)
            .map(|s| s.identity)
            .collect();
        assert_eq!(gallery.len(), gallery.iter().collect::<BTreeSet<_>>().len());
    }

    #[test]
    fn reduce_single_identity_floor() {
        let cfg = GenConfig {
            num_identities: 2,
            num_test_identities: 1,
            ir_per_id: 10,
            collision_groups: 1,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let out = reduce_modality(&ds, Modality::Infrared, 0.2, 3).unwrap();
        assert_eq!(out.count(Split::Train, Modality::Infrared), 8);
        assert_eq!(out.count(Split::Query, Modality::Infrared), 10);
    }

    #[test]
    fn reduce_zero_and_determinism() {
        let ds = generate(&GenConfig::default()).unwrap();
        assert_eq!(
            reduce_modality(&ds, Modality::Infrared, 0.0, 1).unwrap(),
            ds
        );
        let a = reduce_modality(&ds, Modality::Infrared, 0.2, 5).unwrap();
        let b = reduce_modality(&ds, Modality::Infrared, 0.2, 5).unwrap();
        assert_eq!(a, b);
        let removed =
            ds.count(Split::Train, Modality::Infrared) - a.count(Split::Train, Modality::Infrared);
        assert_eq!(removed, 32);
        // visible count untouched, so the ratio moves exactly by the removal
        let vis = a.count(Split::Train, Modality::Visible) as f64;
        assert_eq!(a.train_imbalance(), vis / (160.0 - removed as f64));
        assert!(reduce_modality(&ds, Modality::Infrared, 1.0, 5).is_err());
    }

    #[test]
    fn reduce_keeps_one_per_identity() {
        let cfg = GenConfig {
            ir_per_id: 2,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let out = reduce_modality(&ds, Modality::Infrared, 0.5, 0).unwrap();
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for s in out
            .samples
            .iter()
            .filter(|s| s.split == Split::Train && s.modality == Modality::Infrared)
        {
            *per.entry(s.identity).or_default() += 1;
        }
        assert!(per.values().all(|&c| c == 1));
        assert_eq!(per.len(), 40);
        assert!(reduce_modality(&ds, Modality::Infrared, 0.6, 0).is_err());
    }

    #[test]
    fn pk_batches() {
        let ds = generate(&GenConfig::default()).unwrap();
        let b = ds.sample_pk_batch(4, 4, 11, 3).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b.visible.len(), 16);
        assert!(b
            .visible
            .iter()
            .all(|s| s.modality == Modality::Visible && s.split == Split::Train));
        assert!(b.infrared.iter().all(|s| s.modality == Modality::Infrared));
        let ids: Vec<usize> = b.visible.iter().map(|s| s.identity).collect();
        let ir_ids: Vec<usize> = b.infrared.iter().map(|s| s.identity).collect();
        assert_eq!(ids, ir_ids);
        assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 4);

        let again = ds.sample_pk_batch(4, 4, 11, 3).unwrap();
        assert!(b.iter().zip(again.iter()).all(|(x, y)| std::ptr::eq(x, y)));

        let one = ds.sample_pk_batch(1, 1, 0, 0).unwrap();
        assert_eq!((one.visible.len(), one.infrared.len()), (1, 1));

        // ir_per_id = 4 < K = 6 forces replacement
        let rep = ds.sample_pk_batch(2, 6, 0, 0).unwrap();
        assert_eq!(rep.infrared.len(), 12);

        let empty = Dataset {
            config: ds.config.clone(),
            samples: ds
                .samples
                .iter()
                .filter(|s| s.split != Split::Train)
                .cloned()
                .collect(),
        };
        assert!(matches!(
            empty.sample_pk_batch(4, 4, 0, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let ds = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"format":"bit-synth-v1","config":{"#));
        assert!(text.contains(r#""modality":"vis""#) && text.contains(r#""modality":"ir""#));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = generate(&small()).unwrap().to_json().unwrap();
        let cut = &text[..text.len() / 2];
        match Dataset::from_json(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        match Dataset::from_json("{\"format\": [1,") {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = generate(&small()).unwrap().to_json().unwrap();
        let text = text.replacen(FORMAT_TAG, "bit-synth-v9", 1);
        assert!(matches!(
            Dataset::from_json(&text),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = GenConfig {
            num_identities: 0,
            ..GenConfig::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = GenConfig {
            collision_groups: 51,
            ..GenConfig::default()
        };
        assert!(generate(&bad).is_err());
    }
}
