//! Encoder-decoder LSTM for next-utterance prediction.
//!
//! The encoder reads the source ids; its final `(h, c)` seeds the decoder,
//! which is teacher-forced on `target[..T-1]` and scored against
//! `target[1..]`. Loss is the natural-log cross-entropy averaged over every
//! masked (real) target position in the batch.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! runs gradient checks in `f64`.

mod gradcheck;
mod lstm;
mod optim;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{counter_uniform, derive_seed};
use crate::vocab::{EOS, PAD, SOS};

pub use gradcheck::{gradient_check, relative_error, Coordinate, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{adam_step, clip_global_norm, global_norm, AdamConfig, OptimizerState};

use lstm::{LstmGrads, LstmTrace, LstmWeights};

/// Longest target the pools can produce: 16 words plus `<sos>` and `<eos>`.
pub const MAX_TARGET_IDS: usize = 18;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite value in {0}")]
    Numerical(&'static str),
    #[error("batch has no predictable target positions")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Floating-point element type of parameters and activations.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

fn default_init_scale() -> f64 {
    0.08
}

/// Model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Feed the source to the encoder last word first.
    #[serde(default)]
    pub reverse_source: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            init_scale: default_init_scale(),
            seed,
            reverse_source: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 4 {
            return Err(ModelError::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::Config("embed_dim and hidden_dim must be >= 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::Config(format!("init_scale {} must be > 0", self.init_scale)));
        }
        Ok(())
    }

    /// Shapes of the parameter arrays, in [`PARAM_NAMES`] order.
    pub fn shapes(&self) -> [(usize, usize); 10] {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        [
            (v, d),
            (d, 4 * h),
            (h, 4 * h),
            (1, 4 * h),
            (v, d),
            (d, 4 * h),
            (h, 4 * h),
            (1, 4 * h),
            (h, v),
            (1, v),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Source ids in the order the encoder consumes them.
    pub fn encoder_order(&self, source: &[u32]) -> Vec<u32> {
        if self.reverse_source {
            source.iter().rev().copied().collect()
        } else {
            source.to_vec()
        }
    }
}

/// Names of the parameter arrays, in storage order.
pub const PARAM_NAMES: [&str; 10] = [
    "encoder.embedding",
    "encoder.lstm.input_weights",
    "encoder.lstm.recurrent_weights",
    "encoder.lstm.bias",
    "decoder.embedding",
    "decoder.lstm.input_weights",
    "decoder.lstm.recurrent_weights",
    "decoder.lstm.bias",
    "output.weights",
    "output.bias",
];

/// All model weights. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub enc_embed: Matrix<F>,
    pub enc_wx: Matrix<F>,
    pub enc_wh: Matrix<F>,
    pub enc_b: Matrix<F>,
    pub dec_embed: Matrix<F>,
    pub dec_wx: Matrix<F>,
    pub dec_wh: Matrix<F>,
    pub dec_b: Matrix<F>,
    pub out_w: Matrix<F>,
    pub out_b: Matrix<F>,
}

pub type Gradients<F> = Parameters<F>;

impl<F: Real> Parameters<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let s = cfg.shapes();
        let m = |i: usize| Matrix::zeros(s[i].0, s[i].1);
        Self {
            enc_embed: m(0),
            enc_wx: m(1),
            enc_wh: m(2),
            enc_b: m(3),
            dec_embed: m(4),
            dec_wx: m(5),
            dec_wh: m(6),
            dec_b: m(7),
            out_w: m(8),
            out_b: m(9),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.fill(F::zero());
        }
        z
    }

    pub fn arrays(&self) -> [&Matrix<F>; 10] {
        [
            &self.enc_embed,
            &self.enc_wx,
            &self.enc_wh,
            &self.enc_b,
            &self.dec_embed,
            &self.dec_wx,
            &self.dec_wh,
            &self.dec_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Matrix<F>; 10] {
        [
            &mut self.enc_embed,
            &mut self.enc_wx,
            &mut self.enc_wh,
            &mut self.enc_b,
            &mut self.dec_embed,
            &mut self.dec_wx,
            &mut self.dec_wh,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn vocab_size(&self) -> usize {
        self.out_b.cols
    }

    pub fn embed_dim(&self) -> usize {
        self.enc_embed.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_wh.rows
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.data.len()).sum()
    }

    /// Checks every array against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for ((name, a), want) in PARAM_NAMES.iter().zip(self.arrays()).zip(cfg.shapes()) {
            if a.shape() != want || a.data.len() != want.0 * want.1 {
                return Err(ModelError::Shape(format!(
                    "{name} is {:?}, config implies {want:?}",
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        let c = |m: &Matrix<F>| Matrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        };
        Parameters {
            enc_embed: c(&self.enc_embed),
            enc_wx: c(&self.enc_wx),
            enc_wh: c(&self.enc_wh),
            enc_b: c(&self.enc_b),
            dec_embed: c(&self.dec_embed),
            dec_wx: c(&self.dec_wx),
            dec_wh: c(&self.dec_wh),
            dec_b: c(&self.dec_b),
            out_w: c(&self.out_w),
            out_b: c(&self.out_b),
        }
    }
}

/// Uniform `[-init_scale, init_scale)` entries from a counter-based stream
/// keyed by `(cfg.seed, array index)`.
pub fn init_params<F: Real>(cfg: &ModelConfig) -> Result<Parameters<F>, ModelError> {
    cfg.validate()?;
    let mut p = Parameters::zeros(cfg);
    for (idx, a) in p.arrays_mut().into_iter().enumerate() {
        let key = derive_seed(&[cfg.seed, idx as u64]);
        for (j, x) in a.data.iter_mut().enumerate() {
            let u = counter_uniform(key, j as u64);
            *x = F::of(cfg.init_scale * (2.0 * u - 1.0));
        }
    }
    Ok(p)
}

/// One encoded training example. `target` carries `<sos>`/`<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// A padded minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    /// Padded source width `S`.
    pub source_width: usize,
    /// Padded target width `T`.
    pub target_width: usize,
    /// `rows x S`, right-padded with `<pad>`.
    pub source: Vec<u32>,
    /// `rows x T`, right-padded with `<pad>`.
    pub target: Vec<u32>,
    /// `rows x (T-1)`; true where `target[t+1]` is a real token to predict.
    pub mask: Vec<bool>,
    pub source_lens: Vec<usize>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn from_pairs<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = &'a EncodedPair>,
    {
        let pairs: Vec<&EncodedPair> = pairs.into_iter().collect();
        let rows = pairs.len();
        let s = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let t = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let steps = t.saturating_sub(1);
        let mut source = vec![PAD; rows * s];
        let mut target = vec![PAD; rows * t];
        let mut mask = vec![false; rows * steps];
        for (r, p) in pairs.iter().enumerate() {
            source[r * s..r * s + p.source.len()].copy_from_slice(&p.source);
            target[r * t..r * t + p.target.len()].copy_from_slice(&p.target);
            for m in &mut mask[r * steps..r * steps + p.target.len().saturating_sub(1)] {
                *m = true;
            }
        }
        Self {
            rows,
            source_width: s,
            target_width: t,
            source,
            target,
            mask,
            source_lens: pairs.iter().map(|p| p.source.len()).collect(),
            target_lens: pairs.iter().map(|p| p.target.len()).collect(),
        }
    }

    pub fn source_row(&self, r: usize) -> &[u32] {
        &self.source[r * self.source_width..r * self.source_width + self.source_lens[r]]
    }

    pub fn target_row(&self, r: usize) -> &[u32] {
        &self.target[r * self.target_width..(r + 1) * self.target_width]
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        let steps = self.target_width.saturating_sub(1);
        &self.mask[r * steps..(r + 1) * steps]
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

struct RowCache<F> {
    source: Vec<u32>,
    /// Decoder input ids, one per decoder step.
    inputs: Vec<u32>,
    /// Gold id per decoder step, `None` where masked out.
    gold: Vec<Option<u32>>,
    encoder: LstmTrace<F>,
    decoder: LstmTrace<F>,
    /// Softmax output per decoder step, `steps x V`.
    probs: Vec<F>,
}

/// Activations from [`forward_loss`], consumed by [`backward`].
pub struct ForwardCache<F> {
    rows: Vec<RowCache<F>>,
    count: usize,
}

impl<F> ForwardCache<F> {
    pub fn predicted_positions(&self) -> usize {
        self.count
    }
}

fn output_logits<F: Real>(p: &Parameters<F>, h: &[F]) -> Vec<F> {
    let mut logits = p.out_b.data.clone();
    for (k, &hk) in h.iter().enumerate() {
        lstm::axpy(hk, p.out_w.row(k), &mut logits);
    }
    logits
}

/// Sum of `-ln p(gold)` over one row's masked positions, plus its cache.
fn forward_row<F: Real>(
    p: &Parameters<F>,
    source: &[u32],
    target: &[u32],
    mask: &[bool],
) -> Result<(f64, RowCache<F>), ModelError> {
    let hd = p.hidden_dim();
    let v = p.vocab_size();
    if source.is_empty() {
        return Err(ModelError::Shape("empty source sequence".into()));
    }
    if let Some(&bad) = source.iter().chain(target).find(|&&id| id as usize >= v) {
        return Err(ModelError::Shape(format!("token id {bad} >= vocab size {v}")));
    }
    let enc_w = LstmWeights {
        wx: &p.enc_wx,
        wh: &p.enc_wh,
        b: &p.enc_b,
    };
    let mut encoder = LstmTrace::new(hd, vec![F::zero(); hd], vec![F::zero(); hd], source.len());
    for &id in source {
        encoder.step(&enc_w, p.enc_embed.row(id as usize));
    }
    let (h0, c0) = encoder.last_state();

    let steps = mask.iter().rposition(|&m| m).map_or(0, |t| t + 1);
    let dec_w = LstmWeights {
        wx: &p.dec_wx,
        wh: &p.dec_wh,
        b: &p.dec_b,
    };
    let mut decoder = LstmTrace::new(hd, h0, c0, steps);
    let mut probs = Vec::with_capacity(steps * v);
    let mut gold = Vec::with_capacity(steps);
    let mut loss = 0.0f64;
    for t in 0..steps {
        decoder.step(&dec_w, p.dec_embed.row(target[t] as usize));
        let mut logits = output_logits(p, decoder.h(t));
        let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let gold_id = mask[t].then(|| target[t + 1]);
        let gold_shifted = gold_id.map(|g| logits[g as usize] - max);
        let mut sum = F::zero();
        for x in &mut logits {
            *x = (*x - max).exp();
            sum += *x;
        }
        if let Some(shifted) = gold_shifted {
            loss += (sum.ln() - shifted).as_f64();
        }
        gold.push(gold_id);
        let inv = F::one() / sum;
        probs.extend(logits.iter().map(|&e| e * inv));
    }
    if !loss.is_finite() {
        return Err(ModelError::Numerical("forward activations"));
    }
    Ok((
        loss,
        RowCache {
            source: source.to_vec(),
            inputs: target[..steps].to_vec(),
            gold,
            encoder,
            decoder,
            probs,
        },
    ))
}

/// Masked mean cross-entropy of a batch (natural log, per predicted token).
pub fn forward_loss<F: Real>(p: &Parameters<F>, b: &Batch) -> Result<(f64, ForwardCache<F>), ModelError> {
    let count = b.mask_count();
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    let mut total = 0.0f64;
    let mut rows = Vec::with_capacity(b.rows);
    for r in 0..b.rows {
        let (loss, cache) = forward_row(p, b.source_row(r), b.target_row(r), b.mask_row(r))?;
        total += loss;
        rows.push(cache);
    }
    Ok((total / count as f64, ForwardCache { rows, count }))
}

/// Summed `-ln p(gold)` and predicted-token count for one pair, without
/// keeping activations. Used for evaluation.
pub fn pair_nll<F: Real>(p: &Parameters<F>, pair: &EncodedPair) -> Result<(f64, usize), ModelError> {
    let steps = pair.target.len().saturating_sub(1);
    let mask = vec![true; steps];
    let (loss, _) = forward_row(p, &pair.source, &pair.target, &mask)?;
    Ok((loss, steps))
}

/// Exact gradient of the masked mean loss by backpropagation through time.
pub fn backward<F: Real>(p: &Parameters<F>, cache: &ForwardCache<F>) -> Result<Gradients<F>, ModelError> {
    let mut g = p.zeros_like();
    let hd = p.hidden_dim();
    let v = p.vocab_size();
    let scale = F::of(1.0 / cache.count as f64);
    for row in &cache.rows {
        let steps = row.inputs.len();
        let mut dh_out = vec![F::zero(); steps * hd];
        let mut dlogits = vec![F::zero(); v];
        for t in 0..steps {
            let Some(gold) = row.gold[t] else { continue };
            dlogits.copy_from_slice(&row.probs[t * v..(t + 1) * v]);
            dlogits[gold as usize] -= F::one();
            for x in &mut dlogits {
                *x *= scale;
            }
            lstm::axpy(F::one(), &dlogits, &mut g.out_b.data);
            let h = row.decoder.h(t);
            let dh = &mut dh_out[t * hd..(t + 1) * hd];
            for k in 0..hd {
                lstm::axpy(h[k], &dlogits, g.out_w.row_mut(k));
                dh[k] = lstm::dot(p.out_w.row(k), &dlogits);
            }
        }
        let mut dh = vec![F::zero(); hd];
        let mut dc = vec![F::zero(); hd];
        row.decoder.backward(
            &LstmWeights {
                wx: &p.dec_wx,
                wh: &p.dec_wh,
                b: &p.dec_b,
            },
            LstmGrads {
                wx: &mut g.dec_wx,
                wh: &mut g.dec_wh,
                b: &mut g.dec_b,
            },
            &p.dec_embed,
            &mut g.dec_embed,
            &row.inputs,
            Some(&dh_out),
            &mut dh,
            &mut dc,
        );
        row.encoder.backward(
            &LstmWeights {
                wx: &p.enc_wx,
                wh: &p.enc_wh,
                b: &p.enc_b,
            },
            LstmGrads {
                wx: &mut g.enc_wx,
                wh: &mut g.enc_wh,
                b: &mut g.enc_b,
            },
            &p.enc_embed,
            &mut g.enc_embed,
            &row.source,
            None,
            &mut dh,
            &mut dc,
        );
    }
    if !global_norm(&g).is_finite() {
        return Err(ModelError::Numerical("gradients"));
    }
    Ok(g)
}

/// Greedy next-utterance decoding.
///
/// Feeds `<sos>`, then repeatedly emits the arg-max token (lowest id on ties)
/// until `<eos>` is emitted or `max_len` tokens have been produced. The
/// returned ids exclude `<sos>` and include the terminating `<eos>` when one
/// was produced.
pub fn greedy_decode<F: Real>(p: &Parameters<F>, source: &[u32], max_len: usize) -> Vec<u32> {
    let hd = p.hidden_dim();
    let mut out = Vec::new();
    if source.is_empty() || max_len == 0 {
        return out;
    }
    let enc_w = LstmWeights {
        wx: &p.enc_wx,
        wh: &p.enc_wh,
        b: &p.enc_b,
    };
    let dec_w = LstmWeights {
        wx: &p.dec_wx,
        wh: &p.dec_wh,
        b: &p.dec_b,
    };
    let mut encoder = LstmTrace::new(hd, vec![F::zero(); hd], vec![F::zero(); hd], source.len());
    for &id in source {
        encoder.step(&enc_w, p.enc_embed.row(id as usize));
    }
    let (h, c) = encoder.last_state();
    let mut state = (h, c);
    let mut input = SOS;
    while out.len() < max_len {
        let mut trace = LstmTrace::new(hd, state.0, state.1, 1);
        trace.step(&dec_w, p.dec_embed.row(input as usize));
        let logits = output_logits(p, trace.h(0));
        let mut best = 0u32;
        let mut best_logit = F::neg_infinity();
        for (id, &logit) in logits.iter().enumerate() {
            if logit > best_logit {
                best_logit = logit;
                best = id as u32;
            }
        }
        out.push(best);
        if best == EOS {
            break;
        }
        state = trace.last_state();
        input = best;
    }
    out
}

/// Default decode budget: 16 words plus `<eos>` fits with room to spare.
pub const DEFAULT_DECODE_LEN: usize = MAX_TARGET_IDS;
