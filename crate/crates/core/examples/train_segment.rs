//! Trains one segment on synthetic medium-length pairs and prints the
//! per-epoch metrics and checkpoint losses.
//!
//! cargo run --release --example train_segment -- [pairs] [embed] [hidden]

use std::time::Instant;

use currseq::checkpoint::StageRecord;
use currseq::corpus::{build_pools, extract_pairs, sample_uniform, CorpusSource, PoolLabel, Utterance};
use currseq::model::{init_params, ModelConfig};
use currseq::synthetic::SyntheticGrammar;
use currseq::trainer::{encode_pool, train_segment, TrainConfig};
use currseq::vocab::{build_vocab, DEFAULT_MAX_SIZE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let n = args.first().copied().unwrap_or(2_000);
    let embed = args.get(1).copied().unwrap_or(16);
    let hidden = args.get(2).copied().unwrap_or(32);

    let grammar = SyntheticGrammar {
        conversations: 2_000,
        seed: 1,
        ..SyntheticGrammar::default()
    };
    let pairs = grammar.conversations().flat_map(|conv| {
        let utts: Vec<Utterance> = conv.into_iter().map(|w| Utterance::new(w).unwrap()).collect();
        extract_pairs(&utts)
    });
    let pools = build_pools(pairs, &CorpusSource::default());
    let vocab = build_vocab(&pools.cross.pairs, DEFAULT_MAX_SIZE, 1);
    let train = sample_uniform(&pools.medium, n, 7)?;
    let val = sample_uniform(&pools.medium, 300, 8)?;

    let model = ModelConfig::new(vocab.len(), embed, hidden, 11);
    let cfg = TrainConfig {
        shuffle_seed: 5,
        ..TrainConfig::default()
    };
    let stage = StageRecord {
        segment: PoolLabel::Medium,
        set_size: n,
        epochs: 0,
        seed: 0,
    };
    println!("vocab {} params {} train {} val {}", vocab.len(), model.param_count(), train.len(), val.len());
    let started = Instant::now();
    let run = train_segment(
        init_params(&model)?,
        &model,
        &encode_pool(&train, &vocab, &model),
        &encode_pool(&val, &vocab, &model),
        &cfg,
        &[],
        stage,
    )?;
    for r in &run.metrics.records {
        println!(
            "epoch {} train {} val {:.4} ({} ms)",
            r.epoch,
            r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
            r.val_loss,
            r.wall_ms
        );
    }
    for ck in &run.checkpoints {
        println!("{} val_loss {:.6}", ck.key(), ck.val_loss);
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
