//! Dialogue corpus handling: conversation parsing, successive-utterance
//! pairs, length classes, pools and uniform sampling.
//!
//! Corpus layout is plain UTF-8 text with one utterance per line. A blank
//! line ends a conversation; end of file ends the last one. Tokens are the
//! lowercased whitespace-separated words of a line.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, keyed_rng, ContentDigest};

/// Largest word count a sentence may have to enter any pool.
pub const MAX_POOL_WORDS: usize = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid utterance: {0}")]
    InvalidUtterance(String),
    #[error("corpus line {line}: bytes are not valid UTF-8")]
    Decode { line: usize },
    #[error("insufficient pairs in {label} pool: have {have}, want {want}")]
    InsufficientPairs {
        label: PoolLabel,
        have: usize,
        want: usize,
    },
    #[error("pool file {path}: line {line}: {reason}")]
    PoolFormat {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }
}

/// A single tokenized line of dialogue. Never empty; tokens never contain
/// whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Utterance {
    tokens: Vec<String>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::InvalidUtterance("no tokens".into()));
        }
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(CorpusError::InvalidUtterance(format!(
                "token {bad:?} is empty or contains whitespace"
            )));
        }
        Ok(Self { tokens })
    }

    /// Lowercases and splits a line on whitespace. `None` for blank lines.
    pub fn from_line(line: &str) -> Option<Self> {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            None
        } else {
            Some(Self { tokens })
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn class(&self) -> LengthClass {
        LengthClass::from_word_count(self.tokens.len())
            .expect("utterances are never empty")
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Sentence length bucket by word count (markers not counted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    /// 1 to 4 words.
    Short,
    /// 5 to 10 words.
    Medium,
    /// 11 to 16 words.
    Long,
    /// More than 16 words.
    Overlong,
}

impl LengthClass {
    pub const POOLED: [LengthClass; 3] = [LengthClass::Short, LengthClass::Medium, LengthClass::Long];

    pub fn from_word_count(words: usize) -> Option<Self> {
        match words {
            0 => None,
            1..=4 => Some(Self::Short),
            5..=10 => Some(Self::Medium),
            11..=16 => Some(Self::Long),
            _ => Some(Self::Overlong),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Medium => "medium",
            Self::Long => "long",
            Self::Overlong => "overlong",
        }
    }

    pub fn pool_label(self) -> Option<PoolLabel> {
        match self {
            Self::Short => Some(PoolLabel::Short),
            Self::Medium => Some(PoolLabel::Medium),
            Self::Long => Some(PoolLabel::Long),
            Self::Overlong => None,
        }
    }
}

impl fmt::Display for LengthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Length class of a token list.
pub fn classify_length<S: AsRef<str>>(tokens: &[S]) -> Result<LengthClass, CorpusError> {
    LengthClass::from_word_count(tokens.len())
        .ok_or_else(|| CorpusError::InvalidUtterance("no tokens".into()))
}

/// Two successive utterances of one conversation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DialoguePair {
    pub source: Utterance,
    pub target: Utterance,
    pub source_class: LengthClass,
    pub target_class: LengthClass,
}

impl DialoguePair {
    pub fn new(source: Utterance, target: Utterance) -> Self {
        let source_class = source.class();
        let target_class = target.class();
        Self {
            source,
            target,
            source_class,
            target_class,
        }
    }

    /// The shared class when both sentences fall in the same bucket.
    pub fn length_pair_class(&self) -> Option<LengthClass> {
        (self.source_class == self.target_class).then_some(self.source_class)
    }

    pub fn max_words(&self) -> usize {
        self.source.len().max(self.target.len())
    }

    pub fn is_cross_eligible(&self) -> bool {
        self.max_words() <= MAX_POOL_WORDS
    }

    fn to_tsv_line(&self) -> String {
        format!("{}\t{}", self.source, self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolLabel {
    Short,
    Medium,
    Long,
    Mix,
    Cross,
}

impl PoolLabel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Medium => "medium",
            Self::Long => "long",
            Self::Mix => "mix",
            Self::Cross => "cross",
        }
    }

    pub fn length_class(self) -> Option<LengthClass> {
        match self {
            Self::Short => Some(LengthClass::Short),
            Self::Medium => Some(LengthClass::Medium),
            Self::Long => Some(LengthClass::Long),
            Self::Mix | Self::Cross => None,
        }
    }
}

impl fmt::Display for PoolLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where each extracted pair went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispositionCounts {
    pub total: usize,
    pub short: usize,
    pub medium: usize,
    pub long: usize,
    /// Cross-eligible pairs whose two sentences differ in class.
    pub cross_only: usize,
    /// Pairs with at least one overlong sentence.
    pub discarded: usize,
}

impl DispositionCounts {
    /// Size of the cross pool: every pair with both sentences within bounds.
    pub fn cross(&self) -> usize {
        self.short + self.medium + self.long + self.cross_only
    }
}

/// Provenance recorded next to every pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub corpus: String,
    pub corpus_digest: String,
    pub class: PoolLabel,
    pub n: usize,
    pub seed: Option<u64>,
    pub dispositions: DispositionCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairPool {
    pub label: PoolLabel,
    pub pairs: Vec<DialoguePair>,
    pub manifest: PoolManifest,
}

impl PairPool {
    pub fn new(label: PoolLabel, pairs: Vec<DialoguePair>, manifest: PoolManifest) -> Self {
        let mut manifest = manifest;
        manifest.class = label;
        manifest.n = pairs.len();
        Self {
            label,
            pairs,
            manifest,
        }
    }

    /// A pool with an anonymous manifest, mostly for tests and in-memory use.
    pub fn from_pairs(label: PoolLabel, pairs: Vec<DialoguePair>) -> Self {
        let manifest = PoolManifest {
            corpus: String::new(),
            corpus_digest: String::new(),
            class: label,
            n: pairs.len(),
            seed: None,
            dispositions: DispositionCounts::default(),
        };
        Self::new(label, pairs, manifest)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn derived(&self, label: PoolLabel, pairs: Vec<DialoguePair>, seed: u64) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.seed = Some(seed);
        Self::new(label, pairs, manifest)
    }

    /// Writes `source<TAB>target` lines to `path` and the manifest to the
    /// sidecar returned by [`manifest_path`].
    pub fn write_tsv(&self, path: &Path) -> Result<(), CorpusError> {
        let ctx = || format!("writing pool {}", path.display());
        let file = File::create(path).map_err(|e| CorpusError::io(ctx(), e))?;
        let mut out = BufWriter::new(file);
        for pair in &self.pairs {
            writeln!(out, "{}", pair.to_tsv_line()).map_err(|e| CorpusError::io(ctx(), e))?;
        }
        out.flush().map_err(|e| CorpusError::io(ctx(), e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(manifest_path(path), manifest + "\n")
            .map_err(|e| CorpusError::io(ctx(), e))?;
        Ok(())
    }

    /// Reads a pool written by [`PairPool::write_tsv`]. The sidecar manifest is
    /// used when present.
    pub fn read_tsv(path: &Path, label: PoolLabel) -> Result<Self, CorpusError> {
        let file = File::open(path)
            .map_err(|e| CorpusError::io(format!("opening {label} pool {}", path.display()), e))?;
        let mut pairs = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| CorpusError::io(format!("reading {}", path.display()), e))?;
            let bad = |reason: &str| CorpusError::PoolFormat {
                path: path.to_path_buf(),
                line: line_no,
                reason: reason.to_string(),
            };
            let (src, tgt) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let source = Utterance::from_line(src).ok_or_else(|| bad("empty source"))?;
            let target = Utterance::from_line(tgt).ok_or_else(|| bad("empty target"))?;
            pairs.push(DialoguePair::new(source, target));
        }
        let sidecar = manifest_path(path);
        let manifest = match std::fs::read_to_string(&sidecar) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CorpusError::PoolFormat {
                path: sidecar.clone(),
                line: e.line(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => PoolManifest {
                corpus: path.display().to_string(),
                corpus_digest: String::new(),
                class: label,
                n: pairs.len(),
                seed: None,
                dispositions: DispositionCounts::default(),
            },
            Err(e) => return Err(CorpusError::io(format!("reading {}", sidecar.display()), e)),
        };
        Ok(Self::new(label, pairs, manifest))
    }
}

/// Sidecar manifest path for a pool file: `short.tsv` -> `short.manifest.json`.
pub fn manifest_path(pool_path: &Path) -> PathBuf {
    pool_path.with_extension("manifest.json")
}

/// Streaming conversation reader. See [`parse_conversations`].
pub struct Conversations<R> {
    reader: R,
    line_no: usize,
    buf: Vec<u8>,
    finished: bool,
}

/// Splits a text stream into conversations of utterances.
pub fn parse_conversations<R: BufRead>(reader: R) -> Conversations<R> {
    Conversations {
        reader,
        line_no: 0,
        buf: Vec::new(),
        finished: false,
    }
}

impl<R: BufRead> Iterator for Conversations<R> {
    type Item = Result<Vec<Utterance>, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut conversation = Vec::new();
        while !self.finished {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => {
                    self.finished = true;
                    break;
                }
                Ok(_) => {}
                Err(e) => {
                    self.finished = true;
                    return Some(Err(CorpusError::io(
                        format!("reading corpus near line {}", self.line_no + 1),
                        e,
                    )));
                }
            }
            self.line_no += 1;
            let line = match std::str::from_utf8(&self.buf) {
                Ok(s) => s,
                Err(_) => {
                    self.finished = true;
                    return Some(Err(CorpusError::Decode { line: self.line_no }));
                }
            };
            match Utterance::from_line(line) {
                Some(u) => conversation.push(u),
                None if conversation.is_empty() => continue,
                None => return Some(Ok(conversation)),
            }
        }
        (!conversation.is_empty()).then_some(Ok(conversation))
    }
}

/// Adjacent pairs `(u1,u2), (u2,u3), ...` of one conversation.
pub fn extract_pairs(conversation: &[Utterance]) -> Vec<DialoguePair> {
    conversation
        .windows(2)
        .map(|w| DialoguePair::new(w[0].clone(), w[1].clone()))
        .collect()
}

/// Identifies the corpus a pool came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSource {
    pub path: String,
    pub digest: String,
}

impl CorpusSource {
    /// Streams a file through SHA-256.
    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let ctx = || format!("hashing corpus {}", path.display());
        let mut file = File::open(path).map_err(|e| CorpusError::io(ctx(), e))?;
        let mut digest = ContentDigest::new();
        let mut chunk = vec![0u8; 1 << 16];
        loop {
            let n = file.read(&mut chunk).map_err(|e| CorpusError::io(ctx(), e))?;
            if n == 0 {
                break;
            }
            digest.update(&chunk[..n]);
        }
        Ok(Self {
            path: path.display().to_string(),
            digest: digest.finish(),
        })
    }
}

/// The length pools and the cross-eligible pool built from one pair stream.
#[derive(Debug, Clone)]
pub struct Pools {
    pub short: PairPool,
    pub medium: PairPool,
    pub long: PairPool,
    pub cross: PairPool,
    pub dispositions: DispositionCounts,
}

impl Pools {
    pub fn length_pool(&self, class: LengthClass) -> Option<&PairPool> {
        match class {
            LengthClass::Short => Some(&self.short),
            LengthClass::Medium => Some(&self.medium),
            LengthClass::Long => Some(&self.long),
            LengthClass::Overlong => None,
        }
    }

    pub fn by_label(&self, label: PoolLabel) -> Option<&PairPool> {
        match label {
            PoolLabel::Short => Some(&self.short),
            PoolLabel::Medium => Some(&self.medium),
            PoolLabel::Long => Some(&self.long),
            PoolLabel::Cross => Some(&self.cross),
            PoolLabel::Mix => None,
        }
    }
}

/// Routes every pair to its pools. A length pair also enters the cross pool;
/// pairs with an overlong sentence are dropped.
pub fn build_pools<I>(pairs: I, source: &CorpusSource) -> Pools
where
    I: IntoIterator<Item = DialoguePair>,
{
    let mut counts = DispositionCounts::default();
    let (mut short, mut medium, mut long, mut cross) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for pair in pairs {
        counts.total += 1;
        if !pair.is_cross_eligible() {
            counts.discarded += 1;
            continue;
        }
        match pair.length_pair_class() {
            Some(LengthClass::Short) => {
                counts.short += 1;
                short.push(pair.clone());
            }
            Some(LengthClass::Medium) => {
                counts.medium += 1;
                medium.push(pair.clone());
            }
            Some(LengthClass::Long) => {
                counts.long += 1;
                long.push(pair.clone());
            }
            Some(LengthClass::Overlong) => unreachable!("overlong pairs are not cross eligible"),
            None => counts.cross_only += 1,
        }
        cross.push(pair);
    }
    let manifest = |label| PoolManifest {
        corpus: source.path.clone(),
        corpus_digest: source.digest.clone(),
        class: label,
        n: 0,
        seed: None,
        dispositions: counts,
    };
    Pools {
        short: PairPool::new(PoolLabel::Short, short, manifest(PoolLabel::Short)),
        medium: PairPool::new(PoolLabel::Medium, medium, manifest(PoolLabel::Medium)),
        long: PairPool::new(PoolLabel::Long, long, manifest(PoolLabel::Long)),
        cross: PairPool::new(PoolLabel::Cross, cross, manifest(PoolLabel::Cross)),
        dispositions: counts,
    }
}

/// Single-pass reservoir sample of `n` items (Algorithm R), then shuffled.
///
/// Returns `Err((seen, n))` when the stream holds fewer than `n` items.
pub fn reservoir_sample<T, I, R>(items: I, n: usize, rng: &mut R) -> Result<Vec<T>, (usize, usize)>
where
    I: IntoIterator<Item = T>,
    R: Rng + ?Sized,
{
    let mut reservoir = Vec::with_capacity(n);
    let mut seen = 0usize;
    for item in items {
        if reservoir.len() < n {
            reservoir.push(item);
        } else if n > 0 {
            let j = rng.random_range(0..=seen);
            if j < n {
                reservoir[j] = item;
            }
        }
        seen += 1;
    }
    if seen < n {
        return Err((seen, n));
    }
    reservoir.shuffle(rng);
    Ok(reservoir)
}

/// Uniform sample of `n` pairs without replacement, deterministic in `seed`.
pub fn sample_uniform(pool: &PairPool, n: usize, seed: u64) -> Result<PairPool, CorpusError> {
    let mut rng = keyed_rng(&[seed]);
    let pairs = reservoir_sample(pool.pairs.iter().cloned(), n, &mut rng).map_err(|(have, want)| {
        CorpusError::InsufficientPairs {
            label: pool.label,
            have,
            want,
        }
    })?;
    Ok(pool.derived(pool.label, pairs, seed))
}

/// Per-class pair counts of a mix set of size `n`: `n/3` each, remainder to
/// short first, then medium.
pub fn mix_counts(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + usize::from(rem >= 1), base + usize::from(rem >= 2), base]
}

/// A mix set: one third each of short, medium and long length pairs, in
/// random order.
pub fn build_mix_set(
    short: &PairPool,
    medium: &PairPool,
    long: &PairPool,
    n: usize,
    seed: u64,
) -> Result<PairPool, CorpusError> {
    let counts = mix_counts(n);
    let mut pairs = Vec::with_capacity(n);
    for (idx, (pool, count)) in [short, medium, long].into_iter().zip(counts).enumerate() {
        let part = sample_uniform(pool, count, derive_seed(&[seed, idx as u64]))?;
        pairs.extend(part.pairs);
    }
    pairs.shuffle(&mut keyed_rng(&[seed, 3]));
    let mut manifest = short.manifest.clone();
    manifest.seed = Some(seed);
    Ok(PairPool::new(PoolLabel::Mix, pairs, manifest))
}

/// A cross set: uniform sample from the cross-eligible pool.
pub fn build_cross_set(cross: &PairPool, n: usize, seed: u64) -> Result<PairPool, CorpusError> {
    let sampled = sample_uniform(cross, n, seed)?;
    Ok(PairPool::new(PoolLabel::Cross, sampled.pairs, sampled.manifest))
}
