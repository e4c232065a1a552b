//! Curriculum versus fresh/mix/cross baselines on a synthetic corpus of
//! about 300K pairs: short, medium and long segments at sizes {2K, 10K, 50K}
//! with checkpoints after 2, 4 and 6 epochs and three seeds.
//!
//! cargo run --release --example directional_experiment -- <work-dir> [scale] [workers]
//!
//! `scale` multiplies every set size (0.1 gives a run of a few minutes).

use std::path::PathBuf;
use std::time::Instant;

use currseq::commands::cmd_prepare;
use currseq::curriculum::{run_plan, CurriculumPlan, RunOptions};
use currseq::synthetic::SyntheticGrammar;
use currseq::vocab::DEFAULT_MAX_SIZE;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().ok_or("usage: directional_experiment <work-dir> [scale] [workers]")?);
    let scale: f64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1.0);
    let workers: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1);
    let sizes: Vec<usize> = [2_000.0, 10_000.0, 50_000.0].iter().map(|s| (s * scale) as usize).collect();

    let started = Instant::now();
    std::fs::create_dir_all(&work)?;
    let corpus = work.join("corpus.txt");
    let grammar = SyntheticGrammar {
        conversations: 20_000,
        seed: 2024,
        ..SyntheticGrammar::default()
    };
    grammar.write_corpus(&corpus)?;
    let pools = work.join("pools");
    let prepared = cmd_prepare(&corpus, &pools, DEFAULT_MAX_SIZE, Vec::new())?;
    println!("pairs {} pools {:?}", prepared.dispositions.total, prepared.pool_sizes);

    let segment = |class: &str, seeds: usize| {
        serde_json::json!({
            "class": class, "set_sizes": sizes, "seeds_per_cell": seeds,
            "epoch_checkpoints": [2, 4, 6], "val_size": 1000,
        })
    };
    let plan: CurriculumPlan = serde_json::from_value(serde_json::json!({
        "master_seed": 11,
        "segments": [segment("short", 3), segment("medium", 1), segment("long", 1)],
        "model": { "embed_dim": 16, "hidden_dim": 32 },
        "trainer": { "batch_size": 64, "optimizer": { "lr": 0.005 } },
        "baselines": { "replicas": 3 },
    }))?;
    let report = run_plan(&plan, &pools, &work.join("out"), &RunOptions { workers, stop_after: None })?;
    print!("{}", report.comparison_csv());
    println!("{:.0}s", started.elapsed().as_secs_f64());
    Ok(())
}
