//! Checkpoints: parameters plus the lineage that produced them, and their
//! binary file format.
//!
//! Layout: `b"CLSC"`, format version (`u32` LE), header length (`u32` LE),
//! a JSON header, then every parameter array as `f32` LE in
//! [`PARAM_NAMES`] order.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PoolLabel;
use crate::model::{Matrix, ModelConfig, ModelError, Parameters, PARAM_NAMES};

pub const MAGIC: [u8; 4] = *b"CLSC";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "clsc";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint arrays: {0}")]
    Arrays(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// One training stage a parameter set went through.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub segment: PoolLabel,
    pub set_size: usize,
    pub epochs: usize,
    /// Seed replica index within the grid cell.
    pub seed: u64,
}

impl StageRecord {
    /// `short-2000-s1-e4`.
    pub fn key(&self) -> String {
        format!("{}-{}-s{}-e{}", self.segment, self.set_size, self.seed, self.epochs)
    }
}

impl fmt::Display for StageRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Stage keys joined by `__`, oldest first.
pub fn lineage_key(lineage: &[StageRecord]) -> String {
    lineage.iter().map(StageRecord::key).collect::<Vec<_>>().join("__")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub lineage: Vec<StageRecord>,
    pub val_loss: f64,
    pub config_digest: String,
    pub metrics_digest: String,
    pub params: Parameters<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    lineage: Vec<StageRecord>,
    val_loss: f64,
    config_digest: String,
    metrics_digest: String,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    pub fn key(&self) -> String {
        lineage_key(&self.lineage)
    }

    /// Record of the stage that produced these parameters.
    pub fn last_stage(&self) -> &StageRecord {
        self.lineage.last().expect("checkpoint lineage is never empty")
    }

    pub fn file_name(&self) -> String {
        format!("{}.{FILE_EXTENSION}", self.key())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        if self.lineage.is_empty() {
            return Err(CheckpointError::Arrays("empty lineage".into()));
        }
        self.params.check_shapes(&self.config)?;
        let header = Header {
            model: self.config.clone(),
            lineage: self.lineage.clone(),
            val_loss: self.val_loss,
            config_digest: self.config_digest.clone(),
            metrics_digest: self.metrics_digest.clone(),
            arrays: PARAM_NAMES
                .iter()
                .zip(self.params.arrays())
                .map(|(name, m)| ArrayEntry {
                    name: name.to_string(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len()).map_err(|_| CheckpointError::Arrays("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.param_count());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.params.arrays() {
            for x in &m.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut rest = bytes;
        let mut take = |n: usize, what: &'static str| -> Result<&[u8], CheckpointError> {
            if rest.len() < n {
                return Err(CheckpointError::Truncated(what));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Ok(head)
        };
        if take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(header_len, "header")?)?;
        header.model.validate()?;
        if header.lineage.is_empty() {
            return Err(CheckpointError::Arrays("empty lineage".into()));
        }
        let shapes = header.model.shapes();
        if header.arrays.len() != PARAM_NAMES.len() {
            return Err(CheckpointError::Arrays(format!(
                "{} arrays listed, expected {}",
                header.arrays.len(),
                PARAM_NAMES.len()
            )));
        }
        let mut params = Parameters::<f32>::zeros(&header.model);
        for (((entry, name), shape), dst) in header
            .arrays
            .iter()
            .zip(PARAM_NAMES)
            .zip(shapes)
            .zip(params.arrays_mut())
        {
            if entry.name != name || (entry.rows, entry.cols) != shape {
                return Err(CheckpointError::Arrays(format!(
                    "entry {} {}x{} does not match {name} {}x{}",
                    entry.name, entry.rows, entry.cols, shape.0, shape.1
                )));
            }
            let raw = take(4 * entry.rows * entry.cols, "array data")?;
            *dst = Matrix {
                rows: entry.rows,
                cols: entry.cols,
                data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            };
        }
        if !rest.is_empty() {
            return Err(CheckpointError::Arrays(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            config: header.model,
            lineage: header.lineage,
            val_loss: header.val_loss,
            config_digest: header.config_digest,
            metrics_digest: header.metrics_digest,
            params,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so a killed
    /// process never leaves a partial checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
            context: format!("writing checkpoint {}", path.display()),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            context: format!("reading checkpoint {}", path.display()),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = PathBuf::from(path);
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    tmp.set_file_name(name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let config = ModelConfig::new(9, 3, 4, 7);
        Checkpoint {
            params: init_params(&config).unwrap(),
            config,
            lineage: vec![
                StageRecord {
                    segment: PoolLabel::Short,
                    set_size: 2000,
                    epochs: 2,
                    seed: 1,
                },
                StageRecord {
                    segment: PoolLabel::Medium,
                    set_size: 10_000,
                    epochs: 4,
                    seed: 0,
                },
            ],
            val_loss: 2.718_281_9,
            config_digest: "abc".into(),
            metrics_digest: "def".into(),
        }
    }

    #[test]
    fn key_joins_stages() {
        assert_eq!(sample().key(), "short-2000-s1-e2__medium-10000-s0-e4");
        assert_eq!(sample().file_name(), "short-2000-s1-e2__medium-10000-s0-e4.clsc");
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CLSC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn array_section_is_raw_f32() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12 + header_len..];
        assert_eq!(body.len(), 4 * ck.config.param_count());
        let first = f32::from_le_bytes(body[..4].try_into().unwrap());
        assert_eq!(first, ck.params.enc_embed.data[0]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(2))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Arrays(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let path = dir.path().join(ck.file_name());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
