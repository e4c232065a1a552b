//! Tables generated from a lineage tree: short-epoch analysis, type
//! comparison, and the curriculum-versus-baseline summary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lineage::{LineageTree, RunGroup};
use super::runner::best_final_per_size;
use super::{BaselineKind, CheckpointSummary, CurriculumError};
use crate::checkpoint::write_atomic;
use crate::corpus::PoolLabel;
use crate::rng::sha256_hex;

pub const TABLE1_FILE: &str = "table1.csv";
pub const TABLE2_FILE: &str = "table2.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const REPORT_FILE: &str = "report.json";

pub const TABLE1_HEADER: [&str; 3] = ["Short TD", "Short Epochs", "Val. Loss"];
pub const TABLE2_HEADER: [&str; 7] = [
    "Type",
    "Val. Loss",
    "Long TD",
    "Med TD",
    "Med Epochs",
    "Short TD",
    "Short Epochs",
];
pub const COMPARISON_HEADER: [&str; 12] = [
    "Long TD",
    "Curriculum Runs",
    "Curriculum Median",
    "Curriculum Worst",
    "Curriculum Best",
    "Fresh Runs",
    "Fresh Median",
    "Fresh Best",
    "Mix Best",
    "Cross Best",
    "Median Beats Fresh",
    "Worst Beats Fresh",
];

/// Rows shown per block of the type comparison.
const BLOCK_ROWS: usize = 3;

/// Digests of the inputs an experiment was run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputsRecord {
    pub plan_digest: String,
    pub corpus_digests: Vec<String>,
    pub vocab_digest: String,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortEpochRow {
    pub short_td: usize,
    pub short_epochs: Option<usize>,
    pub val_loss: Option<f64>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub kind: String,
    pub val_loss: f64,
    pub long_td: usize,
    pub med_td: Option<usize>,
    pub med_epochs: Option<usize>,
    pub short_td: Option<usize>,
    pub short_epochs: Option<usize>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub long_td: usize,
    pub curriculum_runs: usize,
    pub curriculum_median: Option<f64>,
    pub curriculum_worst: Option<f64>,
    pub curriculum_best: Option<f64>,
    pub fresh_runs: usize,
    pub fresh_median: Option<f64>,
    pub fresh_best: Option<f64>,
    pub mix_best: Option<f64>,
    pub cross_best: Option<f64>,
    /// Median curriculum loss below median fresh loss.
    pub median_beats_fresh: Option<bool>,
    /// Worst curriculum loss below the best fresh loss.
    pub worst_beats_fresh: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_key: String,
    pub wall_ms: u64,
    pub checkpoints: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub package_version: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            package_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub inputs: Option<InputsRecord>,
    pub table1: Vec<ShortEpochRow>,
    pub table2: Vec<TypeRow>,
    pub comparison: Vec<ComparisonRow>,
    pub runs: Vec<RunSummary>,
    pub checkpoint_count: usize,
    pub environment: Environment,
}

fn final_segment_checkpoints(tree: &LineageTree) -> Vec<CheckpointSummary> {
    let Some(last) = tree.segment_count().checked_sub(1) else {
        return Vec::new();
    };
    let all = tree.checkpoints(RunGroup::Curriculum { segment: last });
    let full = all.iter().map(|c| c.stage().epochs).max().unwrap_or(0);
    all.into_iter().filter(|c| c.stage().epochs == full).collect()
}

/// For each first-segment size: among second-segment checkpoints trained on
/// the largest second-segment set for the full schedule, the first-segment
/// epoch count of the lowest validation loss. Sizes without such runs are
/// left as gaps.
pub fn table_short_epoch_analysis(tree: &LineageTree) -> Vec<ShortEpochRow> {
    if tree.segment_count() < 2 {
        return Vec::new();
    }
    let first = tree.checkpoints(RunGroup::Curriculum { segment: 0 });
    let second = tree.checkpoints(RunGroup::Curriculum { segment: 1 });
    let sizes: BTreeSet<usize> = first.iter().map(|c| c.stage().set_size).collect();
    let largest = second.iter().map(|c| c.stage().set_size).max();
    let full = second.iter().map(|c| c.stage().epochs).max();
    sizes
        .into_iter()
        .map(|short_td| {
            let best = super::best_of(second.iter().filter(|c| {
                Some(c.stage().set_size) == largest
                    && Some(c.stage().epochs) == full
                    && c.lineage[0].set_size == short_td
            }));
            ShortEpochRow {
                short_td,
                short_epochs: best.map(|b| b.lineage[0].epochs),
                val_loss: best.map(|b| b.val_loss),
                checkpoint: best.map(|b| b.key.clone()),
            }
        })
        .collect()
}

fn curriculum_row(kind: &str, ck: &CheckpointSummary) -> TypeRow {
    let last = ck.lineage.len() - 1;
    let earlier = |label| ck.lineage[..last].iter().find(|s| s.segment == label);
    let med = earlier(PoolLabel::Medium);
    let short = earlier(PoolLabel::Short);
    TypeRow {
        kind: kind.into(),
        val_loss: ck.val_loss,
        long_td: ck.stage().set_size,
        med_td: med.map(|s| s.set_size),
        med_epochs: med.map(|s| s.epochs),
        short_td: short.map(|s| s.set_size),
        short_epochs: short.map(|s| s.epochs),
        checkpoint: ck.key.clone(),
    }
}

fn sizes_of(cks: &[CheckpointSummary]) -> Vec<usize> {
    let set: BTreeSet<usize> = cks.iter().map(|c| c.stage().set_size).collect();
    set.into_iter().collect()
}

fn by_loss(mut v: Vec<&CheckpointSummary>) -> Vec<&CheckpointSummary> {
    v.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then_with(|| a.key.cmp(&b.key)));
    v
}

/// Worst and best final-segment checkpoints per final-segment size,
/// followed by the best replica of each baseline per size.
pub fn table_type_comparison(tree: &LineageTree) -> Vec<TypeRow> {
    let finals = final_segment_checkpoints(tree);
    let sizes = sizes_of(&finals);
    let mut rows = Vec::new();
    for &size in &sizes {
        let ranked = by_loss(finals.iter().filter(|c| c.stage().set_size == size).collect());
        for ck in ranked.iter().rev().take(BLOCK_ROWS) {
            rows.push(curriculum_row("DT (worst)", ck));
        }
    }
    for &size in &sizes {
        let ranked = by_loss(finals.iter().filter(|c| c.stage().set_size == size).collect());
        for ck in ranked.iter().take(BLOCK_ROWS) {
            rows.push(curriculum_row("DT (best)", ck));
        }
    }
    for kind in BaselineKind::ALL {
        for best in baseline_best(tree, kind) {
            rows.push(TypeRow {
                kind: kind.title().into(),
                val_loss: best.val_loss,
                long_td: best.stage().set_size,
                med_td: None,
                med_epochs: None,
                short_td: None,
                short_epochs: None,
                checkpoint: best.key,
            });
        }
    }
    rows
}

fn baseline_records(tree: &LineageTree, kind: BaselineKind) -> Vec<super::RunRecord> {
    tree.runs
        .values()
        .filter(|r| r.group == RunGroup::Baseline { baseline: kind })
        .cloned()
        .collect()
}

fn baseline_best(tree: &LineageTree, kind: BaselineKind) -> Vec<CheckpointSummary> {
    best_final_per_size(&baseline_records(tree, kind))
}

fn baseline_finals(tree: &LineageTree, kind: BaselineKind, size: usize) -> Vec<f64> {
    baseline_records(tree, kind)
        .iter()
        .filter(|r| r.stage.set_size == size)
        .filter_map(|r| r.checkpoints.iter().find(|c| c.lineage.last().map(|s| s.epochs) == Some(r.stage.epochs)))
        .map(|c| c.val_loss)
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn min_of(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::min)
}

fn max_of(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::max)
}

/// Curriculum versus baselines on each final-segment validation set.
pub fn comparison(tree: &LineageTree) -> Vec<ComparisonRow> {
    let finals = final_segment_checkpoints(tree);
    let mut sizes: BTreeSet<usize> = sizes_of(&finals).into_iter().collect();
    for kind in BaselineKind::ALL {
        sizes.extend(baseline_records(tree, kind).iter().map(|r| r.stage.set_size));
    }
    sizes
        .into_iter()
        .map(|size| {
            let cur: Vec<f64> = finals
                .iter()
                .filter(|c| c.stage().set_size == size)
                .map(|c| c.val_loss)
                .collect();
            let fresh = baseline_finals(tree, BaselineKind::Fresh, size);
            let cur_median = median(&cur);
            let fresh_median = median(&fresh);
            let fresh_best = min_of(&fresh);
            let worst = max_of(&cur);
            ComparisonRow {
                long_td: size,
                curriculum_runs: cur.len(),
                curriculum_median: cur_median,
                curriculum_worst: worst,
                curriculum_best: min_of(&cur),
                fresh_runs: fresh.len(),
                fresh_median,
                fresh_best,
                mix_best: min_of(&baseline_finals(tree, BaselineKind::Mix, size)),
                cross_best: min_of(&baseline_finals(tree, BaselineKind::Cross, size)),
                median_beats_fresh: cur_median.zip(fresh_median).map(|(c, f)| c < f),
                worst_beats_fresh: worst.zip(fresh_best).map(|(w, f)| w < f),
            }
        })
        .collect()
}

pub fn build_report(tree: &LineageTree, inputs: Option<InputsRecord>) -> ExperimentReport {
    ExperimentReport {
        inputs,
        table1: table_short_epoch_analysis(tree),
        table2: table_type_comparison(tree),
        comparison: comparison(tree),
        runs: tree
            .runs
            .values()
            .map(|r| RunSummary {
                run_key: r.run_key.clone(),
                wall_ms: r.wall_ms,
                checkpoints: r.checkpoints.len(),
                failure: r.failure.clone(),
            })
            .collect(),
        checkpoint_count: tree.runs.values().map(|r| r.checkpoints.len()).sum(),
        environment: Environment::current(),
    }
}

fn loss(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn count(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flag(v: Option<bool>) -> String {
    v.map(|b| if b { "pass" } else { "fail" }.to_string()).unwrap_or_default()
}

fn csv_text<const N: usize>(header: [&str; N], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

impl ExperimentReport {
    pub fn table1_csv(&self) -> String {
        let rows = self
            .table1
            .iter()
            .map(|r| vec![r.short_td.to_string(), count(r.short_epochs), loss(r.val_loss)])
            .collect();
        csv_text(TABLE1_HEADER, rows)
    }

    pub fn table2_csv(&self) -> String {
        let rows = self
            .table2
            .iter()
            .map(|r| {
                vec![
                    r.kind.clone(),
                    loss(Some(r.val_loss)),
                    r.long_td.to_string(),
                    count(r.med_td),
                    count(r.med_epochs),
                    count(r.short_td),
                    count(r.short_epochs),
                ]
            })
            .collect();
        csv_text(TABLE2_HEADER, rows)
    }

    pub fn comparison_csv(&self) -> String {
        let rows = self
            .comparison
            .iter()
            .map(|r| {
                vec![
                    r.long_td.to_string(),
                    r.curriculum_runs.to_string(),
                    loss(r.curriculum_median),
                    loss(r.curriculum_worst),
                    loss(r.curriculum_best),
                    r.fresh_runs.to_string(),
                    loss(r.fresh_median),
                    loss(r.fresh_best),
                    loss(r.mix_best),
                    loss(r.cross_best),
                    flag(r.median_beats_fresh),
                    flag(r.worst_beats_fresh),
                ]
            })
            .collect();
        csv_text(COMPARISON_HEADER, rows)
    }

    /// Writes the three CSV tables and `report.json`, which carries their
    /// digests, the checkpoint behind every table row, and run wall times.
    pub fn write(&self, out: &Path) -> Result<(), CurriculumError> {
        let mut digests = serde_json::Map::new();
        for (name, text) in [
            (TABLE1_FILE, self.table1_csv()),
            (TABLE2_FILE, self.table2_csv()),
            (COMPARISON_FILE, self.comparison_csv()),
        ] {
            let path = out.join(name);
            write_atomic(&path, text.as_bytes())
                .map_err(|e| CurriculumError::io(format!("writing {}", path.display()), e))?;
            digests.insert(name.into(), sha256_hex(text.as_bytes()).into());
        }
        let json = serde_json::json!({
            "table_digests": digests,
            "report": self,
        });
        let path = out.join(REPORT_FILE);
        write_atomic(&path, (serde_json::to_string_pretty(&json).expect("report serializes") + "\n").as_bytes())
            .map_err(|e| CurriculumError::io(format!("writing {}", path.display()), e))
    }

    /// Digest over the three CSV tables.
    pub fn tables_digest(&self) -> String {
        sha256_hex((self.table1_csv() + &self.table2_csv() + &self.comparison_csv()).as_bytes())
    }
}

/// Regenerates the report of an output directory from its lineage tree.
pub fn regenerate(out: &Path) -> Result<ExperimentReport, CurriculumError> {
    let tree = LineageTree::load(out)?.ok_or_else(|| CurriculumError::MissingTree(out.to_path_buf()))?;
    let inputs = match fs::read_to_string(out.join(super::runner::INPUTS_FILE)) {
        Ok(text) => serde_json::from_str(&text).ok(),
        Err(_) => None,
    };
    let report = build_report(&tree, inputs);
    report.write(out)?;
    Ok(report)
}
