//! Persistent record of completed runs and the inheritance links between
//! their checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BaselineKind, CheckpointSummary, CurriculumError};
use crate::checkpoint::StageRecord;

pub const LINEAGE_FILE: &str = "lineage.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "lowercase")]
pub enum RunGroup {
    Curriculum { segment: usize },
    Baseline { baseline: BaselineKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub key: String,
    pub lineage: Vec<StageRecord>,
    pub val_loss: f64,
    pub file: String,
    pub sha256: String,
}

impl CheckpointEntry {
    pub fn summary(&self) -> CheckpointSummary {
        CheckpointSummary {
            key: self.key.clone(),
            lineage: self.lineage.clone(),
            val_loss: self.val_loss,
            file: self.file.clone(),
        }
    }
}

/// One completed training run. A failed run has a `failure` and no
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_key: String,
    #[serde(flatten)]
    pub group: RunGroup,
    /// Key of the checkpoint the run was initialized from.
    pub parent: Option<String>,
    pub stage: StageRecord,
    pub checkpoints: Vec<CheckpointEntry>,
    pub failure: Option<String>,
    pub metrics_file: String,
    pub metrics_digest: String,
    pub config_digest: String,
    pub wall_ms: u64,
}

/// All runs of an output directory, keyed by run key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LineageTree {
    pub runs: BTreeMap<String, RunRecord>,
}

impl LineageTree {
    /// Loads `lineage.jsonl` from `dir`. A torn final line, left by a killed
    /// writer, is dropped and truncated away; other bad lines are errors.
    pub fn load(dir: &Path) -> Result<Option<Self>, CurriculumError> {
        let path = dir.join(LINEAGE_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CurriculumError::io(format!("reading {}", path.display()), e)),
        };
        let mut tree = Self::default();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            offset += line.len();
            if line.trim().is_empty() {
                good_len = offset;
                continue;
            }
            match serde_json::from_str::<RunRecord>(line) {
                Ok(rec) if line.ends_with('\n') => {
                    tree.runs.insert(rec.run_key.clone(), rec);
                    good_len = offset;
                }
                _ if i + 1 == lines.len() && !line.ends_with('\n') => break,
                Ok(_) => unreachable!("only the last line can lack a newline"),
                Err(e) => {
                    return Err(CurriculumError::Lineage {
                        path,
                        line: i + 1,
                        reason: e.to_string(),
                    })
                }
            }
        }
        if good_len < text.len() {
            log::warn!("dropping torn final record of {}", path.display());
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| CurriculumError::io(format!("repairing {}", path.display()), e))?;
            f.set_len(good_len as u64)
                .map_err(|e| CurriculumError::io(format!("repairing {}", path.display()), e))?;
        }
        Ok(Some(tree))
    }

    /// Appends one record to `dir/lineage.jsonl` and to the in-memory tree.
    pub fn append(&mut self, dir: &Path, record: RunRecord) -> Result<(), CurriculumError> {
        let path = dir.join(LINEAGE_FILE);
        let ctx = || format!("appending to {}", path.display());
        let mut line = serde_json::to_string(&record).expect("run record serializes");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CurriculumError::io(ctx(), e))?;
        f.write_all(line.as_bytes()).map_err(|e| CurriculumError::io(ctx(), e))?;
        f.sync_data().map_err(|e| CurriculumError::io(ctx(), e))?;
        self.runs.insert(record.run_key.clone(), record);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn get(&self, run_key: &str) -> Option<&RunRecord> {
        self.runs.get(run_key)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.values().filter(|r| r.failure.is_some())
    }

    /// Checkpoints of the runs in `group`, sorted by key.
    pub fn checkpoints(&self, group: RunGroup) -> Vec<CheckpointSummary> {
        let mut out: Vec<CheckpointSummary> = self
            .runs
            .values()
            .filter(|r| r.group == group)
            .flat_map(|r| r.checkpoints.iter().map(CheckpointEntry::summary))
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    /// Number of curriculum segments with at least one run.
    pub fn segment_count(&self) -> usize {
        self.runs
            .values()
            .filter_map(|r| match r.group {
                RunGroup::Curriculum { segment } => Some(segment + 1),
                RunGroup::Baseline { .. } => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Runs initialized from the checkpoint `parent_key`.
    pub fn children(&self, parent_key: &str) -> Vec<&RunRecord> {
        self.runs
            .values()
            .filter(|r| r.parent.as_deref() == Some(parent_key))
            .collect()
    }

    /// Every checkpoint entry across all runs, keyed by checkpoint key.
    pub fn checkpoint_index(&self) -> BTreeMap<&str, &CheckpointEntry> {
        self.runs
            .values()
            .flat_map(|r| r.checkpoints.iter().map(|c| (c.key.as_str(), c)))
            .collect()
    }
}

/// Exclusive advisory lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutDirLock {
    _file: File,
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CurriculumError> {
        fs::create_dir_all(dir).map_err(|e| CurriculumError::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| CurriculumError::io(format!("opening {}", path.display()), e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(fs::TryLockError::WouldBlock) => Err(CurriculumError::Locked(dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(CurriculumError::io(format!("locking {}", path.display()), e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
