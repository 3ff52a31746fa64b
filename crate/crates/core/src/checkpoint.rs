//! Binary checkpoints.
//!
//! Layout: the ASCII magic `BITCKPT1`, a little-endian `u32` manifest length,
//! the UTF-8 JSON manifest, then every parameter buffer as little-endian
//! `f64` values in manifest order. The manifest carries the run config so a
//! checkpoint is enough to rebuild the models it came from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::matcher::Matcher;
use crate::nn::ParameterSet;
use crate::synthdata::parse_error;

pub const MAGIC: &[u8; 8] = b"BITCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Matcher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    stage: u8,
    config: RunConfig,
    params: Vec<ManifestEntry>,
}

/// Trained parameters plus the config that shaped them. Stage 1 holds the
/// encoder only; stage 2 adds the matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub config: RunConfig,
    pub entries: Vec<ManifestEntry>,
    pub buffers: Vec<Vec<f64>>,
}

fn collect(
    set: &ParameterSet,
    group: ParamGroup,
    entries: &mut Vec<ManifestEntry>,
    buffers: &mut Vec<Vec<f64>>,
) {
    for (name, t) in set.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            group,
        });
        buffers.push(t.data().to_vec());
    }
}

impl Checkpoint {
    pub fn new(config: &RunConfig, encoder: &Encoder, matcher: Option<&Matcher>) -> Self {
        let mut entries = Vec::new();
        let mut buffers = Vec::new();
        collect(
            &encoder.params,
            ParamGroup::Encoder,
            &mut entries,
            &mut buffers,
        );
        if let Some(m) = matcher {
            collect(&m.params, ParamGroup::Matcher, &mut entries, &mut buffers);
        }
        Self {
            stage: if matcher.is_some() { 2 } else { 1 },
            config: config.clone(),
            entries,
            buffers,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            params: self.entries.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::usage(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::usage("manifest too large"))?;
        let values: usize = self.buffers.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for buf in &self.buffers {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let magic = bytes.get(..MAGIC.len()).unwrap_or(bytes);
        if magic != MAGIC {
            return Err(Error::Version {
                found: String::from_utf8_lossy(magic).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        let mut pos = MAGIC.len();
        let len_bytes: [u8; 4] = bytes
            .get(pos..pos + 4)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| truncated(pos, "manifest length"))?;
        pos += 4;
        let len = u32::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(pos..pos + len)
            .ok_or_else(|| truncated(pos, "manifest"))?;
        let text = std::str::from_utf8(json).map_err(|e| Error::Parse {
            offset: pos + e.valid_up_to(),
            detail: "manifest is not UTF-8".into(),
        })?;
        let manifest: Manifest =
            serde_json::from_str(text).map_err(|e| match parse_error(text, &e) {
                Error::Parse { offset, detail } => Error::Parse {
                    offset: offset + pos,
                    detail,
                },
                other => other,
            })?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        if !(1..=2).contains(&manifest.stage) {
            return Err(Error::Parse {
                offset: pos,
                detail: format!("unknown stage {}", manifest.stage),
            });
        }
        pos += len;

        let mut buffers = Vec::with_capacity(manifest.params.len());
        for entry in &manifest.params {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| Error::Parse {
                offset: pos,
                detail: format!(
                    "parameter {} needs {} values but only {} bytes remain",
                    entry.name,
                    n,
                    bytes.len() - pos
                ),
            })?;
            buffers.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            );
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(Error::Parse {
                offset: pos,
                detail: format!(
                    "{} trailing bytes after the last parameter",
                    bytes.len() - pos
                ),
            });
        }
        Ok(Self {
            stage: manifest.stage,
            config: manifest.config,
            entries: manifest.params,
            buffers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn restore_into(&self, set: &mut ParameterSet, group: ParamGroup) -> Result<()> {
        let mut seen = 0;
        for (entry, buf) in self.entries.iter().zip(&self.buffers) {
            if entry.group != group {
                continue;
            }
            let expected = set.by_name(&entry.name).ok_or_else(|| {
                Error::config(format!(
                    "checkpoint parameter {} is not in the model",
                    entry.name
                ))
            })?;
            if expected.shape() != entry.shape.as_slice() {
                return Err(Error::dim(
                    "checkpoint restore",
                    expected.shape(),
                    &entry.shape,
                ));
            }
            set.set_values(&entry.name, buf.clone())?;
            seen += 1;
        }
        if seen != set.len() {
            return Err(Error::config(format!(
                "checkpoint holds {seen} of the model's {} parameters",
                set.len()
            )));
        }
        Ok(())
    }

    /// Rebuilds the encoder described by the stored config.
    pub fn encoder(&self) -> Result<Encoder> {
        let mut enc = Encoder::new(self.config.encoder.clone(), self.config.seed)?;
        self.restore_into(&mut enc.params, ParamGroup::Encoder)?;
        Ok(enc)
    }

    /// Rebuilds the matcher; only stage-2 checkpoints have one.
    pub fn matcher(&self) -> Result<Matcher> {
        if self.stage < 2 {
            return Err(Error::usage(
                "checkpoint has no stage-2 matcher; train stage 2 first",
            ));
        }
        let cfg = &self.config;
        let mut m = Matcher::new(cfg.bci.clone(), cfg.qa.clone(), cfg.gen.patches, cfg.seed)?;
        self.restore_into(&mut m.params, ParamGroup::Matcher)?;
        Ok(m)
    }
}

fn truncated(offset: usize, what: &str) -> Error {
    Error::Parse {
        offset,
        detail: format!("file ends inside the {what}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder = EncoderConfig {
            dim: 8,
            depth: 1,
            ..EncoderConfig::default()
        };
        cfg.bci.dim = 8;
        cfg.bci.depth = 1;
        cfg
    }

    fn stage2() -> Checkpoint {
        let cfg = small_config();
        let enc = Encoder::new(cfg.encoder.clone(), 3).unwrap();
        let m = Matcher::new(cfg.bci.clone(), cfg.qa.clone(), cfg.gen.patches, 4).unwrap();
        Checkpoint::new(&cfg, &enc, Some(&m))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = stage2();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn restored_models_carry_the_stored_values() {
        let cfg = small_config();
        let enc = Encoder::new(cfg.encoder.clone(), 11).unwrap();
        let m = Matcher::new(cfg.bci.clone(), cfg.qa.clone(), cfg.gen.patches, 12).unwrap();
        let ck = Checkpoint::from_bytes(&Checkpoint::new(&cfg, &enc, Some(&m)).to_bytes().unwrap())
            .unwrap();
        let (e2, m2) = (ck.encoder().unwrap(), ck.matcher().unwrap());
        for ((_, a), (_, b)) in enc.params.iter().zip(e2.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
        for ((_, a), (_, b)) in m.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn stage1_checkpoint_has_no_matcher() {
        let cfg = small_config();
        let enc = Encoder::new(cfg.encoder.clone(), 1).unwrap();
        let ck = Checkpoint::new(&cfg, &enc, None);
        assert_eq!(ck.stage, 1);
        assert!(matches!(ck.matcher(), Err(Error::Usage(_))));
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let mut bytes = stage2().to_bytes().unwrap();
        bytes[7] = b'9';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"BIT"),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn truncated_data_names_the_parameter() {
        let ck = stage2();
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        let last = &ck.entries.last().unwrap().name;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Parse { detail, .. }) => assert!(detail.contains(last.as_str()), "{detail}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = stage2().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Parse { .. })
        ));
    }
}
