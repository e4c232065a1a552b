//! Batching, epoch loop with checkpoints, and validation loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{lineage_key, Checkpoint, StageRecord};
use crate::corpus::PairPool;
use crate::model::{
    backward, clip_global_norm, forward_loss, pair_nll, AdamConfig, Batch, EncodedPair, ModelConfig, ModelError,
    OptimizerState, Parameters, MAX_TARGET_IDS,
};
use crate::rng::{keyed_rng, sha256_hex, ContentDigest};
use crate::vocab::{encode_source, encode_target, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_batch_size() -> usize {
    128
}
fn default_checkpoints() -> Vec<usize> {
    vec![2, 4, 6]
}
fn default_max_epochs() -> usize {
    6
}
fn default_bucket_window() -> usize {
    32
}
fn default_clip_norm() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_checkpoints")]
    pub epoch_checkpoints: Vec<usize>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub early_stop: bool,
    /// Bucketing window, in batches.
    #[serde(default = "default_bucket_window")]
    pub bucket_window: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            epoch_checkpoints: default_checkpoints(),
            max_epochs: default_max_epochs(),
            shuffle_seed: 0,
            early_stop: false,
            bucket_window: default_bucket_window(),
            optimizer: AdamConfig::default(),
            clip_norm: default_clip_norm(),
        }
    }
}

impl TrainConfig {
    /// Sets the checkpoint marks and `max_epochs` to the last of them.
    pub fn with_checkpoints(mut self, marks: &[usize]) -> Self {
        self.epoch_checkpoints = marks.to_vec();
        self.max_epochs = marks.last().copied().unwrap_or(0);
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.bucket_window == 0 {
            return bad("bucket_window must be >= 1".into());
        }
        if self.epoch_checkpoints.first() == Some(&0) || self.epoch_checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("epoch_checkpoints {:?} must be ascending and >= 1", self.epoch_checkpoints));
        }
        if self.epoch_checkpoints.last().copied().unwrap_or(0) != self.max_epochs {
            return bad(format!(
                "max_epochs {} must equal the last checkpoint of {:?}",
                self.max_epochs, self.epoch_checkpoints
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip_norm {} must be > 0", self.clip_norm));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("optimizer settings {o:?} out of range"));
        }
        Ok(())
    }
}

/// Encodes every pair of a pool. Targets longer than the model's maximum are
/// truncated to keep `<eos>`; pools never hold such pairs.
pub fn encode_pool(pool: &PairPool, v: &Vocabulary, model: &ModelConfig) -> Vec<EncodedPair> {
    pool.pairs
        .iter()
        .map(|p| {
            let mut target = encode_target(&p.target, v);
            if target.len() > MAX_TARGET_IDS {
                target.truncate(MAX_TARGET_IDS - 1);
                target.push(crate::vocab::EOS);
            }
            EncodedPair {
                source: model.encoder_order(&encode_source(&p.source, v)),
                target,
            }
        })
        .collect()
}

/// Shuffles by `(shuffle_seed, epoch)`, sorts each window of
/// `bucket_window * batch_size` pairs by target length, and cuts batches.
pub fn make_batches(pairs: &[EncodedPair], cfg: &TrainConfig, epoch: usize) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut keyed_rng(&[cfg.shuffle_seed, epoch as u64]));
    let bs = cfg.batch_size.max(1);
    let window = bs * cfg.bucket_window.max(1);
    let mut batches = Vec::with_capacity(pairs.len().div_ceil(bs));
    for chunk in order.chunks_mut(window) {
        chunk.sort_by_key(|&i| pairs[i].target.len());
        for ids in chunk.chunks(bs) {
            batches.push(Batch::from_pairs(ids.iter().map(|&i| &pairs[i])));
        }
    }
    batches
}

/// Per-token mean negative log-likelihood over a whole pair set,
/// accumulated in `f64`.
pub fn evaluate(p: &Parameters<f32>, pairs: &[EncodedPair]) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for pair in pairs {
        let (nll, steps) = pair_nll(p, pair)?;
        total += nll;
        count += steps;
    }
    if count == 0 {
        return Err(TrainError::EmptyValidationSet);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch; absent for the epoch-0 evaluation.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub lineage_key: String,
    pub records: Vec<EpochRecord>,
}

impl Metrics {
    /// Digest of the losses only; wall times are excluded so reruns match.
    pub fn digest(&self) -> String {
        let mut d = ContentDigest::new();
        d.update(self.lineage_key.as_bytes());
        for r in &self.records {
            let train = r.train_loss.map_or(u64::MAX, f64::to_bits);
            d.update(format!("\n{} {:016x} {:016x}", r.epoch, train, r.val_loss.to_bits()).as_bytes());
        }
        d.finish()
    }

    /// One JSON line per record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::json!({
                "lineage_key": self.lineage_key,
                "epoch": r.epoch,
                "train_loss": r.train_loss,
                "val_loss": r.val_loss,
                "wall_ms": r.wall_ms,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Outcome of one segment run. A numerical failure keeps the metrics
/// recorded so far and no checkpoints.
#[derive(Debug, Clone)]
pub struct SegmentRun {
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Metrics,
    pub failure: Option<String>,
    pub stopped_early: bool,
}

/// Digest binding checkpoints to the configs that produced them.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::json!({ "model": model, "train": train });
    sha256_hex(json.to_string().as_bytes())
}

/// Trains from `init` for `cfg.max_epochs` epochs and emits a checkpoint at
/// every mark. `stage` is the new lineage record; its `epochs` field is
/// filled per checkpoint.
pub fn train_segment(
    init: Parameters<f32>,
    model: &ModelConfig,
    train: &[EncodedPair],
    val: &[EncodedPair],
    cfg: &TrainConfig,
    parent_lineage: &[StageRecord],
    stage: StageRecord,
) -> Result<SegmentRun, TrainError> {
    cfg.validate()?;
    init.check_shapes(model)?;
    if train.is_empty() && cfg.max_epochs > 0 {
        return Err(TrainError::EmptyTrainingSet);
    }
    let run_key = {
        let mut l = parent_lineage.to_vec();
        l.push(StageRecord {
            epochs: cfg.max_epochs,
            ..stage.clone()
        });
        lineage_key(&l)
    };
    let mut metrics = Metrics {
        lineage_key: run_key,
        records: Vec::new(),
    };
    let failed = |metrics: Metrics, reason: String| SegmentRun {
        checkpoints: Vec::new(),
        metrics,
        failure: Some(reason),
        stopped_early: false,
    };
    let started = Instant::now();
    let elapsed = |s: &Instant| s.elapsed().as_millis() as u64;
    let initial = match evaluate(&init, val) {
        Ok(v) => v,
        Err(TrainError::Model(e @ ModelError::Numerical(_))) => return Ok(failed(metrics, format!("epoch 0: {e}"))),
        Err(e) => return Err(e),
    };
    metrics.records.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: initial,
        wall_ms: elapsed(&started),
    });

    let digest = config_digest(model, cfg);
    let mut params = init;
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    let mut pending = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut sum = 0.0;
        let mut n = 0usize;
        let step = (|| -> Result<(), ModelError> {
            for batch in make_batches(train, cfg, epoch) {
                let (loss, cache) = forward_loss(&params, &batch)?;
                let mut g = backward(&params, &cache)?;
                clip_global_norm(&mut g, cfg.clip_norm);
                opt.step(&mut params, &g);
                sum += loss;
                n += 1;
            }
            if !params.is_finite() {
                return Err(ModelError::Numerical("parameters"));
            }
            Ok(())
        })();
        let val_loss = match step.map_err(TrainError::from).and_then(|()| evaluate(&params, val)) {
            Ok(v) => v,
            Err(TrainError::Model(e @ ModelError::Numerical(_))) => {
                return Ok(failed(metrics, format!("epoch {epoch}: {e}")));
            }
            Err(e) => return Err(e),
        };
        let prev = metrics.records.last().map(|r| r.val_loss);
        metrics.records.push(EpochRecord {
            epoch,
            train_loss: Some(sum / n.max(1) as f64),
            val_loss,
            wall_ms: elapsed(&t0),
        });
        if cfg.epoch_checkpoints.contains(&epoch) {
            pending.push((epoch, params.clone(), val_loss));
        }
        if cfg.early_stop && prev.is_some_and(|p| val_loss > p) {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let metrics_digest = metrics.digest();
    let checkpoints = pending
        .into_iter()
        .map(|(epochs, params, val_loss)| {
            let mut lineage = parent_lineage.to_vec();
            lineage.push(StageRecord {
                epochs,
                ..stage.clone()
            });
            Checkpoint {
                config: model.clone(),
                lineage,
                val_loss,
                config_digest: digest.clone(),
                metrics_digest: metrics_digest.clone(),
                params,
            }
        })
        .collect();
    Ok(SegmentRun {
        checkpoints,
        metrics,
        failure: None,
        stopped_early,
    })
}
