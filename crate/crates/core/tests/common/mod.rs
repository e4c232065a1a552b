#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use currseq::commands::cmd_prepare;
use currseq::curriculum::CurriculumPlan;
use currseq::synthetic::SyntheticGrammar;
use currseq::vocab::DEFAULT_MAX_SIZE;

/// Writes a synthetic corpus under `dir` and prepares its pools.
pub fn prepare_synthetic(dir: &Path, conversations: usize, seed: u64) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let corpus = dir.join("corpus.txt");
    SyntheticGrammar {
        conversations,
        seed,
        ..SyntheticGrammar::default()
    }
    .write_corpus(&corpus)
    .unwrap();
    let pools = dir.join("pools");
    cmd_prepare(&corpus, &pools, DEFAULT_MAX_SIZE, vec![]).unwrap();
    pools
}

/// Three segments, two sizes each, two seeds on the first, all baselines.
pub fn smoke_plan(master_seed: u64) -> CurriculumPlan {
    serde_json::from_value(serde_json::json!({
        "master_seed": master_seed,
        "carry_fraction": 0.5,
        "segments": [
            { "class": "short", "set_sizes": [60, 120], "seeds_per_cell": 2, "epoch_checkpoints": [1, 2], "val_size": 40 },
            { "class": "medium", "set_sizes": [60, 120], "epoch_checkpoints": [1, 2], "val_size": 40 },
            { "class": "long", "set_sizes": [60, 120], "epoch_checkpoints": [1, 2], "val_size": 40 }
        ],
        "model": { "embed_dim": 6, "hidden_dim": 8 },
        "trainer": { "batch_size": 32, "optimizer": { "lr": 0.01 } },
        "baselines": { "replicas": 2 }
    }))
    .unwrap()
}

/// Relative path -> bytes of every file below `dir/sub`.
pub fn files_under(dir: &Path, sub: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.join(sub)];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Every stored checkpoint file of an output directory.
pub fn checkpoint_files(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut all = files_under(out, "checkpoints");
    all.extend(files_under(out, "baselines"));
    all
}

pub fn table_bytes(out: &Path) -> Vec<Vec<u8>> {
    ["table1.csv", "table2.csv", "comparison.csv"]
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect()
}
