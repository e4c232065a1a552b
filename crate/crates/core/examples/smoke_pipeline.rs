//! Prepares a small synthetic corpus, runs the bundled smoke plan, prints
//! the two tables and decodes a few prompts with the best curriculum model.
//!
//! cargo run --release --example smoke_pipeline -- <work dir> [workers]

use std::path::PathBuf;

use currseq::commands::{cmd_decode, cmd_prepare};
use currseq::curriculum::{run_plan, CurriculumPlan, LineageTree, RunOptions, VOCAB_FILE};
use currseq::synthetic::SyntheticGrammar;
use currseq::vocab::DEFAULT_MAX_SIZE;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().ok_or("usage: smoke_pipeline <work dir> [workers]")?);
    let workers = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1);
    std::fs::create_dir_all(&work)?;

    let corpus = work.join("corpus.txt");
    SyntheticGrammar {
        conversations: 1_500,
        seed: 5,
        ..Default::default()
    }
    .write_corpus(&corpus)?;
    let pools = work.join("pools");
    let prepared = cmd_prepare(&corpus, &pools, DEFAULT_MAX_SIZE, Vec::new())?;
    println!("pools {:?} vocab {}", prepared.pool_sizes, prepared.vocab_size);

    let plan_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("plans/smoke.json");
    let plan = CurriculumPlan::load(&plan_path)?;
    let out = work.join("out");
    let report = run_plan(&plan, &pools, &out, &RunOptions { workers, stop_after: None })?;
    print!("{}\n{}", report.table1_csv(), report.table2_csv());

    if let Some(best) = report
        .table2
        .iter()
        .filter(|r| r.kind.starts_with("DT"))
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    {
        let tree = LineageTree::load(&out)?.ok_or("no lineage tree")?;
        let file = out.join(&tree.checkpoint_index()[best.checkpoint.as_str()].file);
        let prompts = ["yes the ship".to_string(), "what do you see".to_string()];
        let replies = cmd_decode(&file, &pools.join(VOCAB_FILE), &prompts, None)?;
        for (p, r) in prompts.iter().zip(replies) {
            println!("{p} -> {r}");
        }
    }
    Ok(())
}
