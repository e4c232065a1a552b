//! Overfits a tiny model to 32 fixed random pairs and checks that greedy
//! decoding reproduces them.
//!
//! cargo run --release --example memorize -- [embed] [hidden] [lr] [epochs]

use std::time::Instant;

use currseq::checkpoint::StageRecord;
use currseq::corpus::PoolLabel;
use currseq::model::{greedy_decode, init_params, AdamConfig, EncodedPair, ModelConfig, MAX_TARGET_IDS};
use currseq::rng::keyed_rng;
use currseq::trainer::{evaluate, train_segment, TrainConfig};
use currseq::vocab::{EOS, SOS};
use rand::Rng;

const VOCAB: usize = 20;

fn pairs(seed: u64) -> Vec<EncodedPair> {
    let mut rng = keyed_rng(&[seed]);
    (0..32)
        .map(|_| {
            let src_len = rng.random_range(2..=5);
            let tgt_len = rng.random_range(1..=4);
            let source = (0..src_len).map(|_| rng.random_range(4..VOCAB as u32)).collect();
            let mut target = vec![SOS];
            target.extend((0..tgt_len).map(|_| rng.random_range(4..VOCAB as u32)));
            target.push(EOS);
            EncodedPair { source, target }
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let embed = args.first().map(|a| a.parse()).transpose()?.unwrap_or(16);
    let hidden = args.get(1).map(|a| a.parse()).transpose()?.unwrap_or(32);
    let lr = args.get(2).map(|a| a.parse()).transpose()?.unwrap_or(0.01);
    let epochs = args.get(3).map(|a| a.parse()).transpose()?.unwrap_or(500);

    let data = pairs(3);
    let model = ModelConfig::new(VOCAB, embed, hidden, 1);
    let cfg = TrainConfig {
        batch_size: 32,
        optimizer: AdamConfig::with_lr(lr),
        ..TrainConfig::default().with_checkpoints(&[epochs])
    };
    let stage = StageRecord {
        segment: PoolLabel::Short,
        set_size: data.len(),
        epochs: 0,
        seed: 0,
    };
    let started = Instant::now();
    let run = train_segment(init_params(&model)?, &model, &data, &data, &cfg, &[], stage)?;
    let params = &run.checkpoints.last().ok_or("no checkpoint")?.params;
    let loss = evaluate(params, &data)?;
    let exact = data
        .iter()
        .filter(|p| greedy_decode(params, &p.source, MAX_TARGET_IDS) == p.target[1..])
        .count();
    println!(
        "d={embed} h={hidden} lr={lr} epochs={epochs}: per-token loss {loss:.4}, exact {exact}/32, {:.1}s",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
