//! Segmented grid search over length classes with weight inheritance,
//! winner selection, lineage subsampling and fresh/mix/cross baselines.

mod data;
mod lineage;
pub mod report;
mod runner;

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{lineage_key, CheckpointError, StageRecord};
use crate::corpus::{CorpusError, LengthClass, PoolLabel};
use crate::model::{AdamConfig, ModelConfig, ModelError};
use crate::rng::{keyed_rng, sha256_hex};
use crate::trainer::{TrainConfig, TrainError};
use crate::vocab::VocabError;

pub use data::{ExperimentData, PreparedPools, TrainSet, POOL_FILES, VOCAB_FILE};
pub use lineage::{CheckpointEntry, LineageTree, OutDirLock, RunGroup, RunRecord, LINEAGE_FILE};
pub use report::{build_report, regenerate, table_short_epoch_analysis, table_type_comparison, ExperimentReport, InputsRecord};
pub use runner::{run_plan, Experiment, GridFragment, Job, RunOptions, INPUTS_FILE, PLAN_FILE};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("plan {path}: {source}")]
    PlanParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("no surviving runs in cell (set size {size}, {epochs} epochs)")]
    EmptyCell { size: usize, epochs: usize },
    #[error("missing {label} file {path}")]
    MissingPool { label: String, path: PathBuf },
    #[error("stopped after {0} runs; rerun to resume")]
    Interrupted(usize),
    #[error("{path} holds a different plan (digest {existing}); use a fresh output directory")]
    PlanMismatch { path: PathBuf, existing: String },
    #[error("output directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("no lineage tree in {0}")]
    MissingTree(PathBuf),
    #[error("lineage store {path}: line {line}: {reason}")]
    Lineage {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl CurriculumError {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }
}

fn one() -> usize {
    1
}
fn default_checkpoints() -> Vec<usize> {
    vec![2, 4, 6]
}

/// One curriculum stage: a length class and its size × seed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub class: LengthClass,
    pub set_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub seeds_per_cell: usize,
    #[serde(default = "default_checkpoints")]
    pub epoch_checkpoints: Vec<usize>,
    pub val_size: usize,
}

impl SegmentSpec {
    pub fn max_epochs(&self) -> usize {
        self.epoch_checkpoints.last().copied().unwrap_or(0)
    }

    /// Parameter sets a grid over `parents` parents produces.
    pub fn parameter_sets(&self, parents: usize) -> usize {
        self.runs(parents) * self.epoch_checkpoints.len()
    }

    pub fn runs(&self, parents: usize) -> usize {
        parents * self.set_sizes.len() * self.seeds_per_cell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Fresh initialization trained only on the final segment's class.
    Fresh,
    Mix,
    Cross,
}

impl BaselineKind {
    pub const ALL: [Self; 3] = [Self::Fresh, Self::Mix, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fresh => "fresh",
            Self::Mix => "mix",
            Self::Cross => "cross",
        }
    }

    /// Row label used in the type comparison table.
    pub fn title(self) -> &'static str {
        match self {
            Self::Fresh => "Fresh",
            Self::Mix => "Mix",
            Self::Cross => "Cross",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_kinds() -> Vec<BaselineKind> {
    BaselineKind::ALL.to_vec()
}
fn default_replicas() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<BaselineKind>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Training-set sizes; the final segment's sizes when absent.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self {
            kinds: default_kinds(),
            replicas: default_replicas(),
            sizes: None,
        }
    }
}

fn default_embed() -> usize {
    64
}
fn default_hidden() -> usize {
    128
}
fn default_init_scale() -> f64 {
    0.08
}

/// Model hyperparameters of a plan; the vocabulary size comes from the
/// prepared pools and the seed from each grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub reverse_source: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            init_scale: default_init_scale(),
            reverse_source: false,
        }
    }
}

impl ModelSettings {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            init_scale: self.init_scale,
            seed,
            reverse_source: self.reverse_source,
        }
    }
}

fn default_batch() -> usize {
    128
}
fn default_window() -> usize {
    32
}
fn default_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSettings {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_window")]
    pub bucket_window: usize,
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            bucket_window: default_window(),
            early_stop: false,
            optimizer: AdamConfig::default(),
            clip_norm: default_clip(),
        }
    }
}

impl TrainerSettings {
    pub fn config(&self, checkpoints: &[usize], shuffle_seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            shuffle_seed,
            early_stop: self.early_stop,
            bucket_window: self.bucket_window,
            optimizer: self.optimizer,
            clip_norm: self.clip_norm,
            ..TrainConfig::default().with_checkpoints(checkpoints)
        }
    }
}

fn default_pools() -> PathBuf {
    PathBuf::from("pools")
}
fn default_carry() -> f64 {
    1.0 / 6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPlan {
    /// Directory written by `prepare`, relative to the plan file.
    #[serde(default = "default_pools")]
    pub pools: PathBuf,
    pub master_seed: u64,
    /// Fraction of the previous segment's checkpoints inherited by the
    /// final segment.
    #[serde(default = "default_carry")]
    pub carry_fraction: f64,
    pub segments: Vec<SegmentSpec>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub trainer: TrainerSettings,
    #[serde(default)]
    pub baselines: BaselineSpec,
}

impl CurriculumPlan {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, CurriculumError> {
        let plan: Self = serde_json::from_str(text).map_err(|source| CurriculumError::PlanParse {
            path: path.to_path_buf(),
            source,
        })?;
        plan.validate()?;
        Ok(plan)
    }

    /// Reads and validates a plan file.
    pub fn load(path: &Path) -> Result<Self, CurriculumError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CurriculumError::io(format!("reading plan {}", path.display()), e))?;
        Self::from_json(&text, path)
    }

    /// Pools directory, resolved against the directory holding the plan.
    pub fn pools_dir(&self, plan_path: &Path) -> PathBuf {
        match plan_path.parent() {
            Some(dir) if self.pools.is_relative() => dir.join(&self.pools),
            _ => self.pools.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("plan serializes").as_bytes())
    }

    pub fn final_segment(&self) -> &SegmentSpec {
        self.segments.last().expect("validated plan has a segment")
    }

    pub fn baseline_sizes(&self) -> Vec<usize> {
        self.baselines
            .sizes
            .clone()
            .unwrap_or_else(|| self.final_segment().set_sizes.clone())
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        let bad = |m: String| Err(CurriculumError::Plan(m));
        if self.segments.is_empty() {
            return bad("segments: at least one segment is required".into());
        }
        if !(self.carry_fraction > 0.0 && self.carry_fraction <= 1.0) {
            return bad(format!("carry_fraction: {} is outside (0, 1]", self.carry_fraction));
        }
        let ascending = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        for (i, s) in self.segments.iter().enumerate() {
            if s.class == LengthClass::Overlong {
                return bad(format!("segments[{i}].class: overlong pairs are never pooled"));
            }
            if s.set_sizes.is_empty() || s.set_sizes[0] == 0 || !ascending(&s.set_sizes) {
                return bad(format!("segments[{i}].set_sizes: must be non-empty, positive, ascending and distinct"));
            }
            if s.seeds_per_cell == 0 {
                return bad(format!("segments[{i}].seeds_per_cell: must be >= 1"));
            }
            if s.epoch_checkpoints.is_empty() || s.epoch_checkpoints[0] == 0 || !ascending(&s.epoch_checkpoints) {
                return bad(format!("segments[{i}].epoch_checkpoints: must be non-empty, positive and ascending"));
            }
            if s.val_size == 0 {
                return bad(format!("segments[{i}].val_size: must be >= 1"));
            }
        }
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return bad("model: embed_dim and hidden_dim must be >= 1".into());
        }
        if !(self.model.init_scale > 0.0 && self.model.init_scale.is_finite()) {
            return bad("model.init_scale: must be > 0".into());
        }
        self.trainer
            .config(&[1], 0)
            .validate()
            .map_err(|e| CurriculumError::Plan(format!("trainer: {e}")))?;
        if !self.baselines.kinds.is_empty() {
            if self.baselines.replicas == 0 {
                return bad("baselines.replicas: must be >= 1".into());
            }
            let sizes = self.baseline_sizes();
            if sizes.is_empty() || sizes[0] == 0 || !ascending(&sizes) {
                return bad("baselines.sizes: must be non-empty, positive and ascending".into());
            }
        }
        Ok(())
    }
}

/// `ceil(fraction * n)`, robust to the representation error of fractions
/// such as 1/6.
pub fn carry_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Uniform choice of `ceil(fraction * n)` items without replacement,
/// returned in their original order.
pub fn subsample_lineages<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let k = carry_count(items.len(), fraction);
    let mut picked = index::sample(&mut keyed_rng(&[seed]), items.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

/// A stored checkpoint as seen by selection and reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub key: String,
    pub lineage: Vec<StageRecord>,
    pub val_loss: f64,
    /// Path relative to the output directory.
    pub file: String,
}

impl CheckpointSummary {
    pub fn stage(&self) -> &StageRecord {
        self.lineage.last().expect("checkpoint lineage is never empty")
    }

    pub fn parent_key(&self) -> String {
        lineage_key(&self.lineage[..self.lineage.len() - 1])
    }

    /// Stage record of the given segment label, if the lineage has one.
    pub fn stage_of(&self, label: PoolLabel) -> Option<&StageRecord> {
        self.lineage.iter().find(|s| s.segment == label)
    }
}

/// A grid cell: parent lineage, training-set size and epoch mark.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub parent: String,
    pub set_size: usize,
    pub epochs: usize,
}

impl CellKey {
    pub fn of(ck: &CheckpointSummary) -> Self {
        Self {
            parent: ck.parent_key(),
            set_size: ck.stage().set_size,
            epochs: ck.stage().epochs,
        }
    }
}

/// Lowest validation loss; ties go to the lowest seed index, then key.
pub fn best_of<'a, I>(candidates: I) -> Option<&'a CheckpointSummary>
where
    I: IntoIterator<Item = &'a CheckpointSummary>,
{
    candidates.into_iter().min_by(|a, b| {
        a.val_loss
            .total_cmp(&b.val_loss)
            .then(a.stage().seed.cmp(&b.stage().seed))
            .then_with(|| a.key.cmp(&b.key))
    })
}

/// Winner of every expected cell, `None` where no run survived.
pub fn winners_by_cell(
    checkpoints: &[CheckpointSummary],
    expected: impl IntoIterator<Item = CellKey>,
) -> Vec<(CellKey, Option<CheckpointSummary>)> {
    let mut cells: std::collections::BTreeMap<CellKey, Vec<&CheckpointSummary>> =
        expected.into_iter().map(|c| (c, Vec::new())).collect();
    for ck in checkpoints {
        cells.entry(CellKey::of(ck)).or_default().push(ck);
    }
    cells
        .into_iter()
        .map(|(cell, members)| {
            let best = best_of(members).cloned();
            (cell, best)
        })
        .collect()
}

/// Minimum-loss checkpoint of every cell, in cell order.
pub fn select_winners(
    checkpoints: &[CheckpointSummary],
    expected: impl IntoIterator<Item = CellKey>,
) -> Result<Vec<CheckpointSummary>, CurriculumError> {
    winners_by_cell(checkpoints, expected)
        .into_iter()
        .map(|(cell, best)| {
            best.ok_or(CurriculumError::EmptyCell {
                size: cell.set_size,
                epochs: cell.epochs,
            })
        })
        .collect()
}
