//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any required criterion fails. The directional experiment
//! (criterion 8) reports its outcome but only fails on a missing report.
//!
//! cargo test --release --test acceptance

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{checkpoint_files, prepare_synthetic, smoke_plan, table_bytes};
use currseq::checkpoint::{lineage_key, Checkpoint, StageRecord};
use currseq::commands::{cmd_gradcheck, GradcheckConfig};
use currseq::corpus::{build_mix_set, mix_counts, sample_uniform, DialoguePair, LengthClass, PairPool, PoolLabel, Utterance};
use currseq::curriculum::{
    best_of, run_plan, select_winners, subsample_lineages, CellKey, CheckpointSummary, CurriculumPlan, Experiment,
    LineageTree, PreparedPools, RunGroup, RunOptions, TrainSet,
};
use currseq::model::{
    forward_loss, greedy_decode, init_params, AdamConfig, Batch, EncodedPair, ModelConfig, MAX_TARGET_IDS,
};
use currseq::rng::keyed_rng;
use currseq::trainer::{evaluate, train_segment, TrainConfig};
use currseq::vocab::{EOS, SOS};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_pairs(seed: u64, n: usize, vocab: usize, max_words: usize) -> Vec<EncodedPair> {
    let mut rng = keyed_rng(&[seed]);
    (0..n)
        .map(|_| {
            let src_len = rng.random_range(2..=5);
            let tgt_len = rng.random_range(1..=max_words);
            let source = (0..src_len).map(|_| rng.random_range(4..vocab as u32)).collect();
            let mut target = vec![SOS];
            target.extend((0..tgt_len).map(|_| rng.random_range(4..vocab as u32)));
            target.push(EOS);
            EncodedPair { source, target }
        })
        .collect()
}

fn gradient_oracle() -> Outcome {
    let started = Instant::now();
    let cfg = GradcheckConfig::default();
    let o = cmd_gradcheck(&cfg).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    check(o.max_rel_error <= 1e-4, format!("max relative error {:.3e}", o.max_rel_error))?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "V=20 d=8 h=12, {} coordinates, max relative error {:.3e}, {secs:.2}s",
        o.coordinates, o.max_rel_error
    ))
}

fn uniform_loss_identity() -> Outcome {
    let mut worst = 0.0f64;
    for v in [6usize, 20, 4000] {
        let model = ModelConfig::new(v, 4, 5, v as u64);
        let mut p = init_params::<f64>(&model).map_err(|e| e.to_string())?;
        p.out_w.fill(0.0);
        p.out_b.fill(0.0);
        let pairs = random_pairs(v as u64, 4, v, 4);
        let (loss, _) = forward_loss(&p, &Batch::from_pairs(&pairs)).map_err(|e| e.to_string())?;
        let err = (loss - (v as f64).ln()).abs();
        check(err <= 1e-9, format!("V={v}: loss {loss} vs ln V {}", (v as f64).ln()))?;
        worst = worst.max(err);
    }
    Ok(format!("V in {{6, 20, 4000}}, max |loss - ln V| = {worst:.1e}"))
}

fn memorization() -> Outcome {
    let data = random_pairs(3, 32, 20, 4);
    let model = ModelConfig::new(20, 16, 32, 1);
    let cfg = TrainConfig {
        batch_size: 32,
        optimizer: AdamConfig::with_lr(0.01),
        ..TrainConfig::default().with_checkpoints(&[500])
    };
    let stage = StageRecord {
        segment: PoolLabel::Short,
        set_size: 32,
        epochs: 0,
        seed: 0,
    };
    let init = init_params(&model).map_err(|e| e.to_string())?;
    let run = train_segment(init, &model, &data, &data, &cfg, &[], stage).map_err(|e| e.to_string())?;
    let params = &run.checkpoints.last().ok_or("no checkpoint")?.params;
    let loss = evaluate(params, &data).map_err(|e| e.to_string())?;
    let exact = data
        .iter()
        .filter(|p| greedy_decode(params, &p.source, MAX_TARGET_IDS) == p.target[1..])
        .count();
    check(loss < 0.2 && exact >= 30, format!("loss {loss:.4}, exact {exact}/32"))?;
    Ok(format!("500 epochs, per-token loss {loss:.4}, exact {exact}/32"))
}

fn reference_shape_plan() -> CurriculumPlan {
    let sizes: Vec<usize> = (1..=6).map(|i| i * 8).collect();
    serde_json::from_value(serde_json::json!({
        "master_seed": 1,
        "segments": [
            { "class": "short", "set_sizes": sizes, "seeds_per_cell": 10, "val_size": 8 },
            { "class": "medium", "set_sizes": sizes, "seeds_per_cell": 1, "val_size": 8 },
            { "class": "long", "set_sizes": sizes, "seeds_per_cell": 1, "val_size": 8 }
        ],
        "model": { "embed_dim": 2, "hidden_dim": 2 },
        "trainer": { "batch_size": 16 },
        "baselines": { "kinds": [] }
    }))
    .unwrap()
}

fn grid_cardinality(work: &Path) -> Outcome {
    let pools = prepare_synthetic(&work.join("c4"), 300, 40);
    let out = work.join("c4/out");
    let plan = reference_shape_plan();
    run_plan(&plan, &pools, &out, &RunOptions::default()).map_err(|e| e.to_string())?;
    let tree = LineageTree::load(&out).map_err(|e| e.to_string())?.ok_or("no tree")?;
    let segment = |s| tree.checkpoints(RunGroup::Curriculum { segment: s });
    let first = segment(0).len();
    let medium_runs = tree
        .runs
        .values()
        .filter(|r| r.group == RunGroup::Curriculum { segment: 1 })
        .count();
    let medium_parents: std::collections::BTreeSet<_> = segment(1).iter().map(|c| c.parent_key()).collect();
    let second = segment(1).len();
    let carried: std::collections::BTreeSet<_> = segment(2).iter().map(|c| c.parent_key()).collect();
    let got = (first, medium_parents.len(), medium_runs, second, carried.len());
    check(got == (180, 18, 108, 324, 54), format!("got {got:?}"))?;
    Ok("180 first-segment sets, 18 parents x 6 sizes = 108 models / 324 sets, 54 carried".into())
}

fn summary(parent: usize, size: usize, epochs: usize, seed: u64, loss: f64) -> CheckpointSummary {
    let mut lineage = vec![StageRecord {
        segment: PoolLabel::Short,
        set_size: parent + 1,
        epochs: 2,
        seed: 0,
    }];
    lineage.push(StageRecord {
        segment: PoolLabel::Medium,
        set_size: size,
        epochs,
        seed,
    });
    CheckpointSummary {
        key: lineage_key(&lineage),
        lineage,
        val_loss: loss,
        file: String::new(),
    }
}

fn selection_brute_force() -> Outcome {
    for trial in 0..1000u64 {
        let mut rng = keyed_rng(&[trial, 5]);
        let (parents, sizes, marks, seeds) = (
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..6u64),
        );
        let mut cks = Vec::new();
        for p in 0..parents {
            for s in 0..sizes {
                for e in 0..marks {
                    for seed in 0..seeds {
                        // Coarse losses force frequent ties.
                        let loss = rng.random_range(0..8) as f64 / 4.0;
                        cks.push(summary(p, 10 * (s + 1), 2 * (e + 1), seed, loss));
                    }
                }
            }
        }
        let expected: Vec<CellKey> = cks.iter().map(CellKey::of).collect();
        let winners = select_winners(&cks, expected).map_err(|e| e.to_string())?;
        let mut brute: BTreeMap<CellKey, (f64, u64)> = BTreeMap::new();
        for c in &cks {
            let e = brute.entry(CellKey::of(c)).or_insert((f64::INFINITY, u64::MAX));
            if (c.val_loss, c.stage().seed) < *e {
                *e = (c.val_loss, c.stage().seed);
            }
        }
        check(winners.len() == brute.len(), format!("trial {trial}: {} winners", winners.len()))?;
        for w in &winners {
            let b = brute[&CellKey::of(w)];
            check((w.val_loss, w.stage().seed) == b, format!("trial {trial}: picked {} for {b:?}", w.key))?;
        }

        let replicas: Vec<CheckpointSummary> =
            (0..seeds).map(|s| summary(0, 10, 6, s, rng.random_range(0..5) as f64)).collect();
        let best = best_of(&replicas).ok_or("no replica")?;
        let min = replicas.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        let first = replicas.iter().position(|r| r.val_loss == min).unwrap() as u64;
        check(best.val_loss == min && best.stage().seed == first, format!("trial {trial}: best-of-replica"))?;
    }
    Ok("1000 randomized loss tables, winners and best replicas equal brute force".into())
}

fn determinism(work: &Path) -> Outcome {
    let pools = prepare_synthetic(&work.join("c6"), 300, 60);
    let plan = smoke_plan(17);
    let dir = work.join("c6");
    let run = |name: &str, stop: Option<usize>| {
        run_plan(&plan, &pools, &dir.join(name), &RunOptions { workers: 1, stop_after: stop })
    };
    run("a", None).map_err(|e| e.to_string())?;
    run("b", None).map_err(|e| e.to_string())?;
    check(run("r", Some(20)).is_err(), "interrupt hook did not stop the run")?;
    run("r", None).map_err(|e| e.to_string())?;
    let files = checkpoint_files(&dir.join("a"));
    check(files == checkpoint_files(&dir.join("b")), "checkpoint files differ between runs")?;
    check(table_bytes(&dir.join("a")) == table_bytes(&dir.join("b")), "report CSVs differ between runs")?;
    check(files == checkpoint_files(&dir.join("r")), "resumed checkpoints differ")?;
    check(table_bytes(&dir.join("a")) == table_bytes(&dir.join("r")), "resumed CSVs differ")?;
    Ok(format!("{} checkpoint files and 3 CSVs identical across reruns and after resume", files.len()))
}

/// Inclusion counts normalized by their binomial variance; expectation is
/// the number of items.
fn inclusion_statistic(counts: &[u64], trials: u64, k: usize) -> (f64, f64) {
    let n = counts.len() as f64;
    let p = k as f64 / n;
    let mean = trials as f64 * p;
    let var = trials as f64 * p * (1.0 - p);
    let x: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / var).sum();
    let sigma = (2.0 * (n - 1.0)).sqrt();
    (x, (x - n).abs() / sigma)
}

fn sampler_uniformity() -> Outcome {
    const N: usize = 60;
    const SEEDS: u64 = 2000;
    let word = |i: usize| Utterance::new(vec![format!("w{i}")]).unwrap();
    let pool = PairPool::from_pairs(PoolLabel::Short, (0..N).map(|i| DialoguePair::new(word(i), word(i))).collect());
    let mut counts = vec![0u64; N];
    for seed in 0..SEEDS {
        for p in sample_uniform(&pool, 10, seed).map_err(|e| e.to_string())?.pairs {
            let id: usize = p.source.tokens()[0][1..].parse().unwrap();
            counts[id] += 1;
        }
    }
    let (x1, z1) = inclusion_statistic(&counts, SEEDS, 10);
    check(z1 <= 5.0, format!("sample_uniform statistic {x1:.1} is {z1:.2} sigma off"))?;

    let items: Vec<usize> = (0..N).collect();
    let mut counts = vec![0u64; N];
    for seed in 0..SEEDS {
        for i in subsample_lineages(&items, 1.0 / 6.0, seed) {
            counts[i] += 1;
        }
    }
    let (x2, z2) = inclusion_statistic(&counts, SEEDS, 10);
    check(z2 <= 5.0, format!("subsample_lineages statistic {x2:.1} is {z2:.2} sigma off"))?;

    let class_pool = |label: PoolLabel, len: usize| {
        let u = |i: usize, t: &str| Utterance::new((0..len).map(|j| format!("{t}{i}_{j}")).collect()).unwrap();
        PairPool::from_pairs(label, (0..400).map(|i| DialoguePair::new(u(i, "s"), u(i, "t"))).collect())
    };
    let (s, m, l) = (
        class_pool(PoolLabel::Short, 3),
        class_pool(PoolLabel::Medium, 7),
        class_pool(PoolLabel::Long, 12),
    );
    for n in 0..=1000 {
        let c = mix_counts(n);
        check(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, format!("mix counts {c:?} for {n}"))?;
    }
    for n in [1usize, 2, 3, 100, 301, 1000] {
        let mix = build_mix_set(&s, &m, &l, n, n as u64).map_err(|e| e.to_string())?;
        let count = |c| mix.pairs.iter().filter(|p| p.source.class() == c).count();
        let got = [count(LengthClass::Short), count(LengthClass::Medium), count(LengthClass::Long)];
        check(got == mix_counts(n), format!("mix set of {n}: {got:?}"))?;
    }
    Ok(format!(
        "{SEEDS} seeds: sample_uniform {z1:.2} sigma, subsample_lineages {z2:.2} sigma; mix classes differ by <= 1"
    ))
}

fn directional_plan() -> CurriculumPlan {
    let segment = |class: &str, seeds: usize| {
        serde_json::json!({
            "class": class, "set_sizes": [2000, 10000, 50000], "seeds_per_cell": seeds,
            "epoch_checkpoints": [2, 4, 6], "val_size": 1000,
        })
    };
    serde_json::from_value(serde_json::json!({
        "master_seed": 11,
        "segments": [segment("short", 3), segment("medium", 1), segment("long", 1)],
        "model": { "embed_dim": 16, "hidden_dim": 32 },
        "trainer": { "batch_size": 64, "optimizer": { "lr": 0.005 } },
        "baselines": { "replicas": 3 },
    }))
    .unwrap()
}

fn directional(work: &Path) -> Result<(bool, String), String> {
    let started = Instant::now();
    let pools = prepare_synthetic(&work.join("c8"), 20_000, 2024);
    let prepared = PreparedPools::load(&pools).map_err(|e| e.to_string())?;
    let total = prepared.cross.manifest.dispositions.total;
    check(total >= 200_000, format!("corpus has only {total} pairs"))?;
    drop(prepared);
    let out = work.join("c8/out");
    let report = run_plan(&directional_plan(), &pools, &out, &RunOptions::default()).map_err(|e| e.to_string())?;
    check(out.join("comparison.csv").is_file(), "comparison table missing")?;
    let mut lines = Vec::new();
    let mut all = true;
    for row in &report.comparison {
        let median = row.median_beats_fresh.ok_or(format!("no comparison at {}", row.long_td))?;
        let worst = row.worst_beats_fresh.ok_or(format!("no comparison at {}", row.long_td))?;
        all &= median;
        lines.push(format!(
            "      long {}: curriculum median {:.4} (n={}, worst {:.4}) vs fresh median {:.4} (n={}, best {:.4}); mix {:.4} cross {:.4}; median {} worst {}",
            row.long_td,
            row.curriculum_median.unwrap_or(f64::NAN),
            row.curriculum_runs,
            row.curriculum_worst.unwrap_or(f64::NAN),
            row.fresh_median.unwrap_or(f64::NAN),
            row.fresh_runs,
            row.fresh_best.unwrap_or(f64::NAN),
            row.mix_best.unwrap_or(f64::NAN),
            row.cross_best.unwrap_or(f64::NAN),
            if median { "beats fresh" } else { "loses to fresh" },
            if worst { "beats fresh" } else { "loses to fresh" },
        ));
    }
    check(report.comparison.len() == 3, "expected three long-segment sizes")?;
    Ok((
        all,
        format!(
            "{total} pairs, {} runs, {:.0}s\n{}",
            report.runs.len(),
            started.elapsed().as_secs_f64(),
            lines.join("\n")
        ),
    ))
}

fn checkpoint_round_trip(work: &Path) -> Outcome {
    let dir = work.join("c6");
    let out = dir.join("a");
    let plan = smoke_plan(17);
    let exp = Experiment::open(&plan, PreparedPools::load(&dir.join("pools")).map_err(|e| e.to_string())?, &out, RunOptions::default())
        .map_err(|e| e.to_string())?;
    let tree = exp.tree();
    let mut worst = 0.0f64;
    let mut n = 0;
    for record in tree.runs.values() {
        for entry in &record.checkpoints {
            let path = out.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| e.to_string())?;
            let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
            let copy = work.join("c9.clsc");
            ck.save(&copy).map_err(|e| e.to_string())?;
            check(fs::read(&copy).map_err(|e| e.to_string())? == bytes, format!("{} changed on re-save", entry.file))?;
            let set = match record.group {
                RunGroup::Curriculum { segment } => TrainSet::Segment {
                    segment,
                    size: record.stage.set_size,
                },
                RunGroup::Baseline { baseline } => TrainSet::Baseline {
                    kind: baseline,
                    size: record.stage.set_size,
                },
            };
            let val = exp.data.validation_for(set).ok_or("no validation set")?;
            let err = (evaluate(&ck.params, &val).map_err(|e| e.to_string())? - entry.val_loss).abs();
            check(err <= 1e-9, format!("{}: re-evaluation differs by {err:e}", entry.file))?;
            worst = worst.max(err);
            n += 1;
        }
    }
    check(n > 0, "no checkpoints to check")?;
    Ok(format!("{n} checkpoints byte-identical after save/load/save, max re-evaluation error {worst:.1e}"))
}

fn guarded(f: &mut dyn FnMut() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let w = work.path();
    // The directional run takes hours; a persistent directory lets an
    // interrupted run resume instead of starting over.
    let long_work = std::env::var_os("CURRSEQ_ACCEPTANCE_WORK").map(std::path::PathBuf::from);
    let dw = long_work.as_deref().unwrap_or(w);
    let (mut passed, mut failed) = (0, 0);
    // A comma-separated list of criterion numbers restricts the run.
    let only: Option<Vec<usize>> = std::env::var("CURRSEQ_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut report = |id: usize, name: &str, r: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            println!("criterion {id} SKIPPED {name}");
            return;
        }
        match guarded(r) {
            Ok(detail) => {
                passed += 1;
                println!("criterion {id} PASS {name}: {detail}");
            }
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL {name}: {why}");
            }
        }
    };
    report(1, "gradient oracle", &mut gradient_oracle);
    report(2, "uniform-loss identity", &mut uniform_loss_identity);
    report(3, "memorization", &mut memorization);
    report(4, "grid cardinality", &mut || grid_cardinality(w));
    report(5, "winner selection", &mut selection_brute_force);
    report(6, "determinism and resume", &mut || determinism(w));
    report(7, "sampler uniformity", &mut sampler_uniformity);
    let mut directional_ok = None;
    report(
        8,
        "directional experiment",
        &mut || {
            directional(dw).map(|(ok, detail)| {
                directional_ok = Some(ok);
                format!("report produced; {detail}")
            })
        },
    );
    report(9, "checkpoint round-trip", &mut || {
        if !w.join("c6/a").is_dir() {
            determinism(w)?;
        }
        checkpoint_round_trip(w)
    });
    match directional_ok {
        Some(true) => println!("directional outcome PASS: curriculum median below fresh median at every size"),
        Some(false) => println!("directional outcome FAIL (recorded, not build-breaking): curriculum median not below fresh median at every size"),
        None => {}
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
