//! Grid execution: job generation, parallel training, persistence and
//! resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use super::data::{ExperimentData, PreparedPools, TrainSet};
use super::lineage::{CheckpointEntry, LineageTree, OutDirLock, RunGroup, RunRecord};
use super::report::{build_report, ExperimentReport, InputsRecord};
use super::{
    best_of, subsample_lineages, winners_by_cell, BaselineKind, CellKey, CheckpointSummary, CurriculumError,
    CurriculumPlan,
};
use crate::checkpoint::{write_atomic, Checkpoint, StageRecord};
use crate::model::init_params;
use crate::rng::{derive_seed, label_hash, sha256_hex};
use crate::trainer::{train_segment, SegmentRun};

pub const PLAN_FILE: &str = "plan.json";
pub const INPUTS_FILE: &str = "inputs.json";
const CHECKPOINT_DIR: &str = "checkpoints";
const BASELINE_DIR: &str = "baselines";
const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Stop starting new runs after this many have been trained in this
    /// invocation. Lets tests interrupt a plan at a known point.
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            stop_after: None,
        }
    }
}

/// One training run of a grid cell or baseline replica.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub group: RunGroup,
    pub parent: Option<CheckpointSummary>,
    /// The new stage, with `epochs` set to the full schedule.
    pub stage: StageRecord,
    pub set: TrainSet,
    pub checkpoints: Vec<usize>,
    pub cell_seed: u64,
}

impl Job {
    fn key_prefix(&self) -> String {
        match self.group {
            RunGroup::Baseline { baseline } => format!("{baseline}@"),
            RunGroup::Curriculum { .. } => String::new(),
        }
    }

    pub fn run_key(&self) -> String {
        match &self.parent {
            Some(p) => format!("{}{}__{}", self.key_prefix(), p.key, self.stage.key()),
            None => format!("{}{}", self.key_prefix(), self.stage.key()),
        }
    }

    fn checkpoint_file(&self, ck: &Checkpoint) -> String {
        match self.group {
            RunGroup::Curriculum { .. } => format!("{CHECKPOINT_DIR}/{}", ck.file_name()),
            RunGroup::Baseline { baseline } => format!("{BASELINE_DIR}/{baseline}/{}", ck.file_name()),
        }
    }
}

/// Runs of one segment grid together with the parents it was built on.
#[derive(Debug, Clone)]
pub struct GridFragment {
    pub segment: usize,
    pub parents: Vec<Option<CheckpointSummary>>,
    pub runs: Vec<RunRecord>,
}

impl GridFragment {
    pub fn checkpoints(&self) -> Vec<CheckpointSummary> {
        let mut out: Vec<CheckpointSummary> = self
            .runs
            .iter()
            .flat_map(|r| r.checkpoints.iter().map(CheckpointEntry::summary))
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    /// Every (parent, size, epoch mark) cell the grid should fill.
    pub fn expected_cells(&self, plan: &CurriculumPlan) -> Vec<CellKey> {
        let spec = &plan.segments[self.segment];
        let mut cells = Vec::new();
        for parent in &self.parents {
            for &set_size in &spec.set_sizes {
                for &epochs in &spec.epoch_checkpoints {
                    cells.push(CellKey {
                        parent: parent.as_ref().map(|p| p.key.clone()).unwrap_or_default(),
                        set_size,
                        epochs,
                    });
                }
            }
        }
        cells
    }
}

/// A plan bound to its data and output directory.
pub struct Experiment {
    pub plan: CurriculumPlan,
    pub data: ExperimentData,
    out: PathBuf,
    tree: Mutex<LineageTree>,
    opts: RunOptions,
    started_runs: AtomicUsize,
    interrupted: AtomicBool,
}

impl Experiment {
    /// Binds a plan to an output directory, loading any lineage tree found
    /// there. The caller is responsible for locking the directory.
    pub fn open(plan: &CurriculumPlan, pools: PreparedPools, out: &Path, opts: RunOptions) -> Result<Self, CurriculumError> {
        plan.validate()?;
        for dir in [CHECKPOINT_DIR, BASELINE_DIR, RUNS_DIR] {
            let d = out.join(dir);
            fs::create_dir_all(&d).map_err(|e| CurriculumError::io(format!("creating {}", d.display()), e))?;
        }
        let tree = LineageTree::load(out)?.unwrap_or_default();
        Ok(Self {
            plan: plan.clone(),
            data: ExperimentData::new(plan, pools)?,
            out: out.to_path_buf(),
            tree: Mutex::new(tree),
            opts,
            started_runs: AtomicUsize::new(0),
            interrupted: AtomicBool::new(false),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn tree(&self) -> LineageTree {
        self.tree.lock().expect("tree lock").clone()
    }

    /// Parent × size × seed jobs of a segment. Each cell's RNG key depends
    /// only on its coordinates, never on scheduling.
    pub fn grid_jobs(&self, segment: usize, parents: &[Option<CheckpointSummary>]) -> Vec<Job> {
        let spec = &self.plan.segments[segment];
        let label = spec.class.pool_label().expect("validated plan classes are pooled");
        let mut jobs = Vec::new();
        for parent in parents {
            let parent_key = parent.as_ref().map(|p| p.key.as_str()).unwrap_or("");
            for &size in &spec.set_sizes {
                for seed in 0..spec.seeds_per_cell as u64 {
                    jobs.push(Job {
                        group: RunGroup::Curriculum { segment },
                        parent: parent.clone(),
                        stage: StageRecord {
                            segment: label,
                            set_size: size,
                            epochs: spec.max_epochs(),
                            seed,
                        },
                        set: TrainSet::Segment { segment, size },
                        checkpoints: spec.epoch_checkpoints.clone(),
                        cell_seed: derive_seed(&[
                            self.plan.master_seed,
                            segment as u64,
                            label_hash(parent_key),
                            size as u64,
                            seed,
                        ]),
                    });
                }
            }
        }
        jobs
    }

    /// Replicas × sizes of one baseline kind, on the final segment's
    /// epoch schedule.
    pub fn baseline_jobs(&self, kind: BaselineKind) -> Vec<Job> {
        let last = self.plan.final_segment();
        let label = match kind {
            BaselineKind::Fresh => last.class.pool_label().expect("validated plan classes are pooled"),
            BaselineKind::Mix => crate::corpus::PoolLabel::Mix,
            BaselineKind::Cross => crate::corpus::PoolLabel::Cross,
        };
        let tag = label_hash(&format!("baseline-{kind}"));
        let mut jobs = Vec::new();
        for size in self.plan.baseline_sizes() {
            for replica in 0..self.plan.baselines.replicas as u64 {
                jobs.push(Job {
                    group: RunGroup::Baseline { baseline: kind },
                    parent: None,
                    stage: StageRecord {
                        segment: label,
                        set_size: size,
                        epochs: last.max_epochs(),
                        seed: replica,
                    },
                    set: TrainSet::Baseline { kind, size },
                    checkpoints: last.epoch_checkpoints.clone(),
                    cell_seed: derive_seed(&[self.plan.master_seed, tag, size as u64, replica]),
                });
            }
        }
        jobs
    }

    /// Trains a job without persisting anything.
    pub fn execute(&self, job: &Job) -> Result<SegmentRun, CurriculumError> {
        let model = self.plan.model.config(self.data.vocab.len(), job.cell_seed);
        let init = match &job.parent {
            Some(p) => {
                let ck = Checkpoint::load(&self.out.join(&p.file))?;
                ck.params.check_shapes(&model)?;
                ck.params
            }
            None => init_params(&model)?,
        };
        let train = self.data.training_set(job.set)?;
        let val = self
            .data
            .validation_for(job.set)
            .ok_or_else(|| CurriculumError::Plan(format!("no validation set for {:?}", job.set)))?;
        let cfg = self.plan.trainer.config(&job.checkpoints, derive_seed(&[job.cell_seed, 1]));
        let parent_lineage = job.parent.as_ref().map(|p| p.lineage.clone()).unwrap_or_default();
        let stage = StageRecord {
            epochs: 0,
            ..job.stage.clone()
        };
        Ok(train_segment(init, &model, &train, &val, &cfg, &parent_lineage, stage)?)
    }

    fn persist(&self, job: &Job, run: &SegmentRun, wall_ms: u64) -> Result<RunRecord, CurriculumError> {
        let run_key = job.run_key();
        let mut entries = Vec::with_capacity(run.checkpoints.len());
        for ck in &run.checkpoints {
            let file = job.checkpoint_file(ck);
            let path = self.out.join(&file);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| CurriculumError::io(format!("creating {}", dir.display()), e))?;
            }
            let bytes = ck.to_bytes()?;
            write_atomic(&path, &bytes).map_err(|e| CurriculumError::io(format!("writing {}", path.display()), e))?;
            entries.push(CheckpointEntry {
                key: format!("{}{}", job.key_prefix(), ck.key()),
                lineage: ck.lineage.clone(),
                val_loss: ck.val_loss,
                file,
                sha256: sha256_hex(&bytes),
            });
        }
        let metrics_file = format!("{RUNS_DIR}/{run_key}.metrics.jsonl");
        let path = self.out.join(&metrics_file);
        write_atomic(&path, run.metrics.to_jsonl().as_bytes())
            .map_err(|e| CurriculumError::io(format!("writing {}", path.display()), e))?;
        Ok(RunRecord {
            run_key,
            group: job.group,
            parent: job.parent.as_ref().map(|p| p.key.clone()),
            stage: job.stage.clone(),
            checkpoints: entries,
            failure: run.failure.clone(),
            metrics_file,
            metrics_digest: run.metrics.digest(),
            config_digest: run.checkpoints.first().map(|c| c.config_digest.clone()).unwrap_or_default(),
            wall_ms,
        })
    }

    fn run_job(&self, job: &Job) -> Result<Option<RunRecord>, CurriculumError> {
        let key = job.run_key();
        if let Some(done) = self.tree.lock().expect("tree lock").get(&key) {
            return Ok(Some(done.clone()));
        }
        if let Some(limit) = self.opts.stop_after {
            if self.started_runs.fetch_add(1, Ordering::SeqCst) >= limit {
                self.interrupted.store(true, Ordering::SeqCst);
                return Ok(None);
            }
        }
        let started = Instant::now();
        let run = self.execute(job)?;
        let wall_ms = started.elapsed().as_millis() as u64;
        let record = self.persist(job, &run, wall_ms)?;
        match &record.failure {
            Some(reason) => log::warn!("event=run_failed key={key} reason=\"{reason}\""),
            None => log::info!(
                "event=run_done key={key} checkpoints={} val_loss={:.6} wall_ms={wall_ms}",
                record.checkpoints.len(),
                record.checkpoints.last().map_or(f64::NAN, |c| c.val_loss),
            ),
        }
        self.tree
            .lock()
            .expect("tree lock")
            .append(&self.out, record.clone())?;
        Ok(Some(record))
    }

    /// Runs jobs on the worker pool, skipping those already in the tree.
    pub fn run_jobs(&self, jobs: &[Job]) -> Result<Vec<RunRecord>, CurriculumError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.opts.workers.max(1))
            .build()
            .map_err(|e| CurriculumError::Plan(format!("worker pool: {e}")))?;
        let results: Vec<Result<Option<RunRecord>, CurriculumError>> =
            pool.install(|| jobs.par_iter().map(|job| self.run_job(job)).collect());
        let mut records = Vec::with_capacity(jobs.len());
        for r in results {
            if let Some(rec) = r? {
                records.push(rec);
            }
        }
        if self.interrupted.load(Ordering::SeqCst) {
            return Err(CurriculumError::Interrupted(self.opts.stop_after.unwrap_or(0)));
        }
        Ok(records)
    }

    pub fn run_segment_grid(
        &self,
        segment: usize,
        parents: &[Option<CheckpointSummary>],
    ) -> Result<GridFragment, CurriculumError> {
        let jobs = self.grid_jobs(segment, parents);
        log::info!(
            "event=segment_start segment={segment} class={} parents={} runs={}",
            self.plan.segments[segment].class,
            parents.len(),
            jobs.len()
        );
        Ok(GridFragment {
            segment,
            parents: parents.to_vec(),
            runs: self.run_jobs(&jobs)?,
        })
    }

    /// Trains every replica and returns the best final-epoch checkpoint per
    /// size.
    pub fn run_baseline(&self, kind: BaselineKind) -> Result<Vec<CheckpointSummary>, CurriculumError> {
        let jobs = self.baseline_jobs(kind);
        log::info!("event=baseline_start kind={kind} runs={}", jobs.len());
        let records = self.run_jobs(&jobs)?;
        Ok(best_final_per_size(&records))
    }

    /// Parents of each segment: nothing for the first, the previous
    /// segment's winners for middle segments, and a `carry_fraction`
    /// subsample of all previous checkpoints for the final one.
    pub fn parents_after(&self, fragment: &GridFragment) -> Vec<Option<CheckpointSummary>> {
        let next = fragment.segment + 1;
        let chosen = if next + 1 == self.plan.segments.len() {
            let seed = derive_seed(&[self.plan.master_seed, label_hash("carry"), next as u64]);
            subsample_lineages(&fragment.checkpoints(), self.plan.carry_fraction, seed)
        } else {
            let mut winners = Vec::new();
            for (cell, best) in winners_by_cell(&fragment.checkpoints(), fragment.expected_cells(&self.plan)) {
                match best {
                    Some(w) => winners.push(w),
                    None => log::warn!(
                        "event=empty_cell segment={} parent={} size={} epochs={}",
                        fragment.segment,
                        cell.parent,
                        cell.set_size,
                        cell.epochs
                    ),
                }
            }
            winners
        };
        chosen.into_iter().map(Some).collect()
    }

    /// Every segment in order, then the baselines.
    pub fn run_all(&self) -> Result<Vec<GridFragment>, CurriculumError> {
        let mut fragments: Vec<GridFragment> = Vec::new();
        for segment in 0..self.plan.segments.len() {
            let parents = match fragments.last() {
                None => vec![None],
                Some(prev) => self.parents_after(prev),
            };
            self.data.release_before(segment);
            fragments.push(self.run_segment_grid(segment, &parents)?);
        }
        for &kind in &self.plan.baselines.kinds {
            self.run_baseline(kind)?;
        }
        Ok(fragments)
    }

    pub fn inputs_record(&self) -> InputsRecord {
        InputsRecord {
            plan_digest: self.plan.digest(),
            corpus_digests: self.data.corpus_digests.iter().cloned().collect(),
            vocab_digest: self.data.vocab.digest(),
            vocab_size: self.data.vocab.len(),
        }
    }
}

/// Best final-epoch checkpoint per set size, over all replicas.
pub(crate) fn best_final_per_size(records: &[RunRecord]) -> Vec<CheckpointSummary> {
    let finals: Vec<CheckpointSummary> = records
        .iter()
        .filter_map(|r| r.checkpoints.iter().find(|c| c.lineage.last().map(|s| s.epochs) == Some(r.stage.epochs)))
        .map(CheckpointEntry::summary)
        .collect();
    let mut sizes: Vec<usize> = finals.iter().map(|c| c.stage().set_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .filter_map(|s| best_of(finals.iter().filter(|c| c.stage().set_size == s)).cloned())
        .collect()
}

fn check_plan_file(plan: &CurriculumPlan, out: &Path) -> Result<(), CurriculumError> {
    let path = out.join(PLAN_FILE);
    match fs::read_to_string(&path) {
        Ok(text) => {
            let existing: CurriculumPlan = serde_json::from_str(&text)
                .map_err(|source| CurriculumError::PlanParse { path: path.clone(), source })?;
            if existing.digest() != plan.digest() {
                return Err(CurriculumError::PlanMismatch {
                    path,
                    existing: existing.digest(),
                });
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            write_atomic(&path, plan.to_json().as_bytes())
                .map_err(|e| CurriculumError::io(format!("writing {}", path.display()), e))
        }
        Err(e) => Err(CurriculumError::io(format!("reading {}", path.display()), e)),
    }
}

/// Executes a whole plan into `out`, resuming from any lineage tree already
/// there, and writes the report.
pub fn run_plan(
    plan: &CurriculumPlan,
    pools_dir: &Path,
    out: &Path,
    opts: &RunOptions,
) -> Result<ExperimentReport, CurriculumError> {
    plan.validate()?;
    let _lock = OutDirLock::acquire(out)?;
    check_plan_file(plan, out)?;
    let pools = PreparedPools::load(pools_dir)?;
    let exp = Experiment::open(plan, pools, out, opts.clone())?;
    let inputs = exp.inputs_record();
    let path = out.join(INPUTS_FILE);
    write_atomic(&path, (serde_json::to_string_pretty(&inputs).expect("inputs serialize") + "\n").as_bytes())
        .map_err(|e| CurriculumError::io(format!("writing {}", path.display()), e))?;
    exp.run_all()?;
    let report = build_report(&exp.tree(), Some(inputs));
    report.write(out)?;
    Ok(report)
}
