//! Whole-plan runs on a small synthetic corpus: determinism, resume,
//! schedule independence, lineage replay and report traceability.

mod common;

use std::fs;

use common::{checkpoint_files, prepare_synthetic, smoke_plan, table_bytes};
use currseq::checkpoint::Checkpoint;
use currseq::curriculum::{
    run_plan, CurriculumError, Experiment, LineageTree, PreparedPools, RunGroup, RunOptions, TrainSet,
};
use currseq::trainer::evaluate;

fn opts(workers: usize, stop_after: Option<usize>) -> RunOptions {
    RunOptions { workers, stop_after }
}

fn without_wall_times(tree: &LineageTree) -> LineageTree {
    let mut t = tree.clone();
    for r in t.runs.values_mut() {
        r.wall_ms = 0;
    }
    t
}

#[test]
fn grid_sizes_follow_the_cardinality_law() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 300, 1);
    let out = dir.path().join("out");
    let plan = smoke_plan(3);
    let report = run_plan(&plan, &pools, &out, &opts(1, None)).unwrap();
    let tree = LineageTree::load(&out).unwrap().unwrap();

    let counts: Vec<usize> = (0..3)
        .map(|s| tree.checkpoints(RunGroup::Curriculum { segment: s }).len())
        .collect();
    // 1 parent x 2 sizes x 2 seeds x 2 marks; then 4 winners x 2 x 1 x 2;
    // then half of the 16 medium checkpoints x 2 x 1 x 2.
    assert_eq!(counts, [8, 16, 32]);
    assert_eq!(plan.segments[2].parameter_sets(8), 32);
    assert_eq!(report.runs.len(), 4 + 8 + 16 + 3 * 2 * 2);
    assert_eq!(report.checkpoint_count, 8 + 16 + 32 + 24);
    assert!(tree.failures().next().is_none());

    // Every long-segment run descends from a medium checkpoint, which
    // descends from a short winner.
    let index = tree.checkpoint_index();
    for ck in tree.checkpoints(RunGroup::Curriculum { segment: 2 }) {
        assert_eq!(ck.lineage.len(), 3);
        let parent = index.get(ck.parent_key().as_str()).expect("parent is stored");
        assert_eq!(parent.lineage.len(), 2);
        assert!(index.contains_key(currseq::checkpoint::lineage_key(&ck.lineage[..1]).as_str()));
    }
}

#[test]
fn reruns_are_bit_identical_and_replay_reproduces_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 300, 2);
    let plan = smoke_plan(5);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_plan(&plan, &pools, &a, &opts(1, None)).unwrap();
    run_plan(&plan, &pools, &b, &opts(1, None)).unwrap();
    let files = checkpoint_files(&a);
    assert_eq!(files.len(), 80);
    assert_eq!(files, checkpoint_files(&b));
    assert_eq!(table_bytes(&a), table_bytes(&b));

    let tree = LineageTree::load(&a).unwrap().unwrap();
    let exp = Experiment::open(&plan, PreparedPools::load(&pools).unwrap(), &a, RunOptions::default()).unwrap();
    let index = tree.checkpoint_index();
    let record = tree
        .runs
        .values()
        .find(|r| r.group == RunGroup::Curriculum { segment: 2 })
        .unwrap();
    let parent = index[record.parent.as_deref().unwrap()].summary();
    let job = exp
        .grid_jobs(2, &[Some(parent)])
        .into_iter()
        .find(|j| j.run_key() == record.run_key)
        .unwrap();
    let replay = exp.execute(&job).unwrap();
    assert_eq!(replay.checkpoints.len(), record.checkpoints.len());
    for (ck, entry) in replay.checkpoints.iter().zip(&record.checkpoints) {
        assert!((ck.val_loss - entry.val_loss).abs() <= 1e-9);
        assert_eq!(ck.to_bytes().unwrap(), fs::read(a.join(&entry.file)).unwrap());

        let loaded = Checkpoint::load(&a.join(&entry.file)).unwrap();
        let val = exp.data.validation_for(job.set).unwrap();
        assert!((evaluate(&loaded.params, &val).unwrap() - entry.val_loss).abs() <= 1e-9);
    }
}

#[test]
fn resume_after_interrupt_equals_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 300, 3);
    let plan = smoke_plan(9);
    let (full, resumed) = (dir.path().join("full"), dir.path().join("resumed"));
    run_plan(&plan, &pools, &full, &opts(1, None)).unwrap();

    let err = run_plan(&plan, &pools, &resumed, &opts(1, Some(20))).unwrap_err();
    assert!(matches!(err, CurriculumError::Interrupted(20)));
    assert_eq!(LineageTree::load(&resumed).unwrap().unwrap().runs.len(), 20);
    // A second interruption in the middle of the long segment.
    let err = run_plan(&plan, &pools, &resumed, &opts(1, Some(5))).unwrap_err();
    assert!(matches!(err, CurriculumError::Interrupted(5)));
    run_plan(&plan, &pools, &resumed, &opts(1, None)).unwrap();

    assert_eq!(checkpoint_files(&full), checkpoint_files(&resumed));
    assert_eq!(table_bytes(&full), table_bytes(&resumed));
    assert_eq!(
        without_wall_times(&LineageTree::load(&full).unwrap().unwrap()),
        without_wall_times(&LineageTree::load(&resumed).unwrap().unwrap())
    );
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 300, 4);
    let plan = smoke_plan(13);
    let (one, three) = (dir.path().join("one"), dir.path().join("three"));
    run_plan(&plan, &pools, &one, &opts(1, None)).unwrap();
    run_plan(&plan, &pools, &three, &opts(3, None)).unwrap();
    assert_eq!(checkpoint_files(&one), checkpoint_files(&three));
    assert_eq!(table_bytes(&one), table_bytes(&three));
}

#[test]
fn every_reported_number_resolves_to_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 300, 5);
    let out = dir.path().join("out");
    let report = run_plan(&smoke_plan(21), &pools, &out, &opts(1, None)).unwrap();
    let tree = LineageTree::load(&out).unwrap().unwrap();
    let index = tree.checkpoint_index();
    assert!(!report.table1.is_empty() && !report.table2.is_empty());
    for row in &report.table2 {
        let ck = index[row.checkpoint.as_str()];
        assert_eq!(ck.val_loss, row.val_loss);
        assert_eq!(ck.lineage.last().unwrap().set_size, row.long_td);
        assert!(out.join(&ck.file).is_file());
    }
    for row in &report.table1 {
        let ck = index[row.checkpoint.as_deref().unwrap()];
        assert_eq!(Some(ck.val_loss), row.val_loss);
        assert_eq!(ck.lineage[0].set_size, row.short_td);
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["inputs"]["plan_digest"], smoke_plan(21).digest());
    assert_eq!(json["report"]["runs"].as_array().unwrap().len(), tree.runs.len());
    assert!(json["table_digests"]["table2.csv"].is_string());
}

#[test]
fn plan_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 120, 6);
    let out = dir.path().join("out");

    fs::rename(pools.join("long.tsv"), dir.path().join("long.tsv")).unwrap();
    let err = run_plan(&smoke_plan(1), &pools, &out, &opts(1, None)).unwrap_err();
    assert!(err.to_string().contains("long.tsv"), "{err}");
    fs::rename(dir.path().join("long.tsv"), pools.join("long.tsv")).unwrap();

    run_plan(&smoke_plan(1), &pools, &out, &opts(1, Some(1))).unwrap_err();
    let err = run_plan(&smoke_plan(2), &pools, &out, &opts(1, None)).unwrap_err();
    assert!(matches!(err, CurriculumError::PlanMismatch { .. }), "{err}");

    let mut big = smoke_plan(1);
    big.segments[0].set_sizes = vec![1_000_000];
    let err = run_plan(&big, &pools, &dir.path().join("big"), &opts(1, None)).unwrap_err();
    assert!(err.to_string().contains("insufficient pairs"), "{err}");
}

#[test]
fn diverging_runs_are_recorded_as_failures() {
    let dir = tempfile::tempdir().unwrap();
    let pools = prepare_synthetic(dir.path(), 120, 7);
    let out = dir.path().join("out");
    let mut plan = smoke_plan(1);
    plan.trainer.optimizer.lr = 1e30;
    plan.trainer.clip_norm = 1e30;
    plan.baselines.kinds.clear();
    let report = run_plan(&plan, &pools, &out, &opts(1, None)).unwrap();
    let tree = LineageTree::load(&out).unwrap().unwrap();
    assert_eq!(tree.failures().count(), 4);
    assert_eq!(report.checkpoint_count, 0);
    assert!(report.table2.is_empty());
    assert!(report.runs.iter().all(|r| r.failure.as_deref().unwrap().contains("non-finite")));
    assert_eq!(
        Experiment::open(&plan, PreparedPools::load(&pools).unwrap(), &out, RunOptions::default())
            .unwrap()
            .data
            .validation_for(TrainSet::Segment { segment: 0, size: 60 })
            .unwrap()
            .len(),
        40
    );
}
