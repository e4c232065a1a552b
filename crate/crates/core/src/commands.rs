//! Entry points behind the `currseq` binary: prepare, run, gradcheck,
//! report and decode. Each writes a run manifest before it starts and
//! finalizes it when it ends.

use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{write_atomic, Checkpoint, CheckpointError};
use crate::corpus::{build_pools, extract_pairs, parse_conversations, CorpusError, CorpusSource, DispositionCounts, Utterance};
use crate::curriculum::{
    report, run_plan, CurriculumError, CurriculumPlan, ExperimentReport, LineageTree, PreparedPools, RunOptions,
    INPUTS_FILE,
};
use crate::model::{
    gradient_check, greedy_decode, init_params, Batch, Coordinate, EncodedPair, ModelConfig, ModelError,
    DEFAULT_DECODE_LEN,
};
use crate::rng::keyed_rng;
use crate::trainer::TrainError;
use crate::vocab::{build_vocab, decode, encode_source, VocabError, Vocabulary, EOS, SOS};

pub const MANIFEST_DIR: &str = "manifests";
pub const PREPARE_FILE: &str = "prepare.json";

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(context: String) -> impl FnOnce(io::Error) -> CommandError {
    move |source| CommandError::Io { context, source }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Config(_) => 2,
        _ => 1,
    }
}

fn corpus_code(e: &CorpusError) -> i32 {
    match e {
        CorpusError::InsufficientPairs { .. } | CorpusError::InvalidUtterance(_) => 2,
        _ => 3,
    }
}

impl CommandError {
    /// 0 success, 1 verification or training failure, 2 usage or
    /// configuration error, 3 I/O or data error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Verification(_) => 1,
            Self::Corpus(e) => corpus_code(e),
            Self::Model(e) => model_code(e),
            Self::Vocab(_) | Self::Checkpoint(_) | Self::Io { .. } => 3,
            Self::Curriculum(e) => match e {
                CurriculumError::Plan(_)
                | CurriculumError::PlanParse { .. }
                | CurriculumError::PlanMismatch { .. }
                | CurriculumError::Locked(_) => 2,
                CurriculumError::EmptyCell { .. } | CurriculumError::Interrupted(_) => 1,
                CurriculumError::Corpus(e) => corpus_code(e),
                CurriculumError::Model(e) | CurriculumError::Train(TrainError::Model(e)) => model_code(e),
                CurriculumError::Train(TrainError::Config(_)) => 2,
                CurriculumError::Train(_) => 1,
                _ => 3,
            },
        }
    }
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub plan_digest: Option<String>,
    pub corpus_digest: Option<String>,
    pub code_version: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn path(out: &Path, name: &str) -> PathBuf {
        out.join(MANIFEST_DIR).join(format!("{name}.json"))
    }

    /// Records the start of a command and writes the manifest.
    pub fn begin(out: &Path, name: &str, command: Vec<String>) -> Result<Self, CommandError> {
        let m = Self {
            command,
            plan_digest: None,
            corpus_digest: None,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_at: unix_seconds(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
        };
        m.write(out, name)?;
        Ok(m)
    }

    pub fn write(&self, out: &Path, name: &str) -> Result<(), CommandError> {
        let path = Self::path(out, name);
        let dir = path.parent().expect("manifest path has a parent");
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(&path, text.as_bytes()).map_err(io_err(format!("writing {}", path.display())))
    }

    /// Stamps the end time and outcome and rewrites the manifest.
    pub fn finish<T>(mut self, out: &Path, name: &str, result: &Result<T, CommandError>) -> Result<(), CommandError> {
        self.finished_at = Some(unix_seconds());
        self.status = match result {
            Ok(_) => "ok".into(),
            Err(e) => format!("error: {e}"),
        };
        self.write(out, name)
    }
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

/// What `prepare` saw and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub corpus: String,
    pub corpus_digest: String,
    pub conversations: usize,
    pub dispositions: DispositionCounts,
    pub pool_sizes: [usize; 4],
    pub vocab_size: usize,
    pub vocab_digest: String,
    pub files: Vec<String>,
}

/// Streams a corpus into Short/Medium/Long/Cross pools and builds the
/// vocabulary from the cross pool. Output files depend only on the corpus
/// bytes and `vocab_size`.
pub fn cmd_prepare(corpus: &Path, out: &Path, vocab_size: usize, argv: Vec<String>) -> Result<PrepareSummary, CommandError> {
    if vocab_size < 5 {
        return Err(CommandError::Usage(format!("--vocab-size {vocab_size}: must be >= 5")));
    }
    let mut manifest = RunManifest::begin(out, "prepare", argv)?;
    let result = (|| {
        let source = CorpusSource::from_file(corpus)?;
        let file = File::open(corpus).map_err(io_err(format!("opening corpus {}", corpus.display())))?;
        let mut conversations = 0usize;
        let mut pairs = Vec::new();
        for conv in parse_conversations(BufReader::new(file)) {
            conversations += 1;
            pairs.extend(extract_pairs(&conv?));
        }
        let pools = build_pools(pairs, &source);
        let dispositions = pools.dispositions;
        let vocab = build_vocab(&pools.cross.pairs, vocab_size, 1);
        let prepared = PreparedPools::from_pools(pools, vocab);
        let written = prepared.write(out)?;
        let summary = PrepareSummary {
            corpus: source.path.clone(),
            corpus_digest: source.digest.clone(),
            conversations,
            dispositions,
            pool_sizes: [
                prepared.short.len(),
                prepared.medium.len(),
                prepared.long.len(),
                prepared.cross.len(),
            ],
            vocab_size: prepared.vocab.len(),
            vocab_digest: prepared.vocab.digest(),
            files: written.iter().map(|p| relative(out, p)).collect(),
        };
        let path = out.join(PREPARE_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        write_atomic(&path, text.as_bytes()).map_err(io_err(format!("writing {}", path.display())))?;
        log::info!(
            "event=prepared conversations={conversations} pairs={} short={} medium={} long={} cross={} discarded={} vocab={}",
            dispositions.total,
            summary.pool_sizes[0],
            summary.pool_sizes[1],
            summary.pool_sizes[2],
            summary.pool_sizes[3],
            dispositions.discarded,
            summary.vocab_size
        );
        Ok(summary)
    })();
    if let Ok(s) = &result {
        manifest.corpus_digest = Some(s.corpus_digest.clone());
        manifest.outputs = s.files.iter().cloned().chain([PREPARE_FILE.to_string()]).collect();
    }
    manifest.finish(out, "prepare", &result)?;
    result
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub plan: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: usize,
    pub resume: bool,
    pub stop_after: Option<usize>,
}

/// Executes a plan. An output directory that already holds runs is only
/// continued when `resume` is set.
pub fn cmd_run(args: &RunArgs, argv: Vec<String>) -> Result<ExperimentReport, CommandError> {
    let mut plan = CurriculumPlan::load(&args.plan)?;
    if let Some(seed) = args.seed {
        plan.master_seed = seed;
    }
    if args.workers == 0 {
        return Err(CommandError::Usage("--workers: must be >= 1".into()));
    }
    if !args.resume {
        if let Some(tree) = LineageTree::load(&args.out)? {
            if !tree.is_empty() {
                return Err(CommandError::Usage(format!(
                    "{} already holds {} runs; pass --resume to continue it",
                    args.out.display(),
                    tree.runs.len()
                )));
            }
        }
    }
    let mut manifest = RunManifest::begin(&args.out, "run", argv)?;
    manifest.plan_digest = Some(plan.digest());
    manifest.write(&args.out, "run")?;
    let opts = RunOptions {
        workers: args.workers,
        stop_after: args.stop_after,
    };
    let result = run_plan(&plan, &plan.pools_dir(&args.plan), &args.out, &opts).map_err(CommandError::from);
    if let Ok(r) = &result {
        manifest.corpus_digest = r.inputs.as_ref().map(|i| i.corpus_digests.join(","));
        manifest.outputs = [
            crate::curriculum::PLAN_FILE,
            INPUTS_FILE,
            crate::curriculum::LINEAGE_FILE,
            report::TABLE1_FILE,
            report::TABLE2_FILE,
            report::COMPARISON_FILE,
            report::REPORT_FILE,
        ]
        .map(String::from)
        .to_vec();
        let failed = r.runs.iter().filter(|s| s.failure.is_some()).count();
        log::info!(
            "event=plan_done runs={} failed={failed} checkpoints={}",
            r.runs.len(),
            r.checkpoint_count
        );
    }
    manifest.finish(&args.out, "run", &result)?;
    result
}

/// Rebuilds the report tables from a stored lineage tree.
pub fn cmd_report(out: &Path, argv: Vec<String>) -> Result<ExperimentReport, CommandError> {
    if LineageTree::load(out)?.is_none() {
        return Err(CurriculumError::MissingTree(out.to_path_buf()).into());
    }
    let manifest = RunManifest::begin(out, "report", argv)?;
    let result = report::regenerate(out).map_err(CommandError::from);
    manifest.finish(out, "report", &result)?;
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub pairs: usize,
    /// Longest target, counting the start and end markers.
    pub max_target_ids: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Adds a delta to one analytic coordinate `(array, index, delta)` so
    /// the check can be shown to fail.
    pub corrupt: Option<(usize, usize, f64)>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            embed_dim: 8,
            hidden_dim: 12,
            pairs: 3,
            max_target_ids: 5,
            init_scale: 0.5,
            seed: 0,
            step: 1e-4,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub passed: bool,
}

/// Random pairs for the gradient check, ids drawn from the word range.
pub fn gradcheck_batch(cfg: &GradcheckConfig) -> Batch {
    let mut rng = keyed_rng(&[cfg.seed, 0x6772_6164]);
    let words = 4..cfg.vocab_size as u32;
    let max_words = cfg.max_target_ids.saturating_sub(2).max(1);
    let pairs: Vec<EncodedPair> = (0..cfg.pairs)
        .map(|_| {
            let src_len = rng.random_range(1..=6);
            let tgt_len = rng.random_range(1..=max_words);
            let source = (0..src_len).map(|_| rng.random_range(words.clone())).collect();
            let mut target = vec![SOS];
            target.extend((0..tgt_len).map(|_| rng.random_range(words.clone())));
            target.push(EOS);
            EncodedPair { source, target }
        })
        .collect();
    Batch::from_pairs(&pairs)
}

/// Central finite-difference check of every gradient coordinate in 64-bit
/// arithmetic. Fails with the worst coordinate named.
pub fn cmd_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckOutcome, CommandError> {
    if cfg.vocab_size < 5 || cfg.pairs == 0 || cfg.max_target_ids < 3 {
        return Err(CommandError::Usage(
            "gradcheck needs vocab_size >= 5, pairs >= 1 and max_target_ids >= 3".into(),
        ));
    }
    let mut model = ModelConfig::new(cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.seed);
    model.init_scale = cfg.init_scale;
    let params = init_params::<f64>(&model)?;
    let batch = gradcheck_batch(cfg);
    let report = gradient_check(&params, &batch, cfg.step, cfg.corrupt)?;
    let passed = report.passed(cfg.tolerance);
    let outcome = GradcheckOutcome {
        coordinates: report.coordinates,
        max_rel_error: report.max_rel_error,
        worst: report.worst,
        passed,
    };
    if !passed {
        let w = outcome.worst.as_ref().expect("a failing check has a worst coordinate");
        return Err(CommandError::Verification(format!(
            "gradient check failed: max relative error {:.3e} > {:.0e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            outcome.max_rel_error, cfg.tolerance, w.array, w.index, w.analytic, w.numeric
        )));
    }
    Ok(outcome)
}

/// Greedy replies of a checkpoint to each input line.
pub fn cmd_decode(
    checkpoint: &Path,
    vocab: &Path,
    inputs: &[String],
    max_len: Option<usize>,
) -> Result<Vec<String>, CommandError> {
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = Vocabulary::read_file(vocab)?;
    if vocab.len() != ck.config.vocab_size {
        return Err(CommandError::Usage(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            ck.config.vocab_size
        )));
    }
    let max_len = max_len.unwrap_or(DEFAULT_DECODE_LEN);
    inputs
        .iter()
        .map(|line| {
            let source = match Utterance::from_line(line) {
                Some(u) => ck.config.encoder_order(&encode_source(&u, &vocab)),
                None => Vec::new(),
            };
            let ids = greedy_decode(&ck.params, &source, max_len);
            Ok(decode(&ids, &vocab)?.join(" "))
        })
        .collect()
}
