//! Word vocabulary with reserved control ids.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{DialoguePair, Utterance};
use crate::rng::sha256_hex;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

pub const DEFAULT_MAX_SIZE: usize = 4_000;

const FILE_MAGIC: &str = "# currseq-vocab v1";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("id {id} out of range for vocabulary of size {size}")]
    UnknownId { id: u32, size: usize },
    #[error("vocabulary file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("vocabulary digest mismatch: header {expected}, content {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// Immutable word <-> id mapping. Ids 0..4 are `<pad>`, `<sos>`, `<eos>`,
/// `<unk>`; corpus words follow by descending frequency, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    freqs: Vec<u64>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; RESERVED.len()];
        let mut token_to_id = HashMap::with_capacity(entries.len());
        for (word, freq) in entries {
            token_to_id.insert(word.clone(), id_to_token.len() as u32);
            id_to_token.push(word);
            freqs.push(freq);
        }
        Self {
            id_to_token,
            freqs,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.token_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<u64> {
        self.freqs.get(id as usize).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.token_to_id.contains_key(word)
    }

    fn body(&self) -> String {
        let mut out = String::new();
        for (id, (tok, freq)) in self.id_to_token.iter().zip(&self.freqs).enumerate() {
            let _ = writeln!(out, "{id}\t{tok}\t{freq}");
        }
        out
    }

    /// SHA-256 of the serialized entry list; links manifests to the file.
    pub fn digest(&self) -> String {
        sha256_hex(self.body().as_bytes())
    }

    /// Serialized form: a header line carrying size and digest, then one
    /// `id<TAB>token<TAB>frequency` line per entry.
    pub fn to_text(&self) -> String {
        let body = self.body();
        format!(
            "{FILE_MAGIC} size={} digest={}\n{body}",
            self.len(),
            sha256_hex(body.as_bytes())
        )
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| VocabError::Format {
            line: 1,
            reason: "empty file".into(),
        })?;
        let expected = header
            .strip_prefix(FILE_MAGIC)
            .and_then(|rest| rest.split_whitespace().find_map(|kv| kv.strip_prefix("digest=")))
            .ok_or_else(|| VocabError::Format {
                line: 1,
                reason: "missing vocabulary header".into(),
            })?
            .to_string();
        let mut entries = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let bad = |reason: String| VocabError::Format { line: line_no, reason };
            let mut fields = line.split('\t');
            let (Some(id), Some(tok), Some(freq), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected id, token, frequency".into()));
            };
            let id: usize = id.parse().map_err(|_| bad(format!("bad id {id:?}")))?;
            let freq: u64 = freq.parse().map_err(|_| bad(format!("bad frequency {freq:?}")))?;
            if id != idx {
                return Err(bad(format!("id {id} out of sequence")));
            }
            if id < RESERVED.len() {
                if tok != RESERVED[id] {
                    return Err(bad(format!("reserved id {id} must be {}", RESERVED[id])));
                }
            } else {
                entries.push((tok.to_string(), freq));
            }
        }
        let vocab = Self::from_entries(entries);
        let actual = vocab.digest();
        if actual != expected {
            return Err(VocabError::DigestMismatch { expected, actual });
        }
        Ok(vocab)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text()).map_err(|source| VocabError::Io {
            context: format!("writing vocabulary {}", path.display()),
            source,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            context: format!("reading vocabulary {}", path.display()),
            source,
        })?;
        Self::from_text(&text)
    }
}

/// Counts words over both sides of every pair and keeps the `max_size - 4`
/// most frequent words seen at least `min_freq` times.
pub fn build_vocab<'a, I>(pairs: I, max_size: usize, min_freq: u64) -> Vocabulary
where
    I: IntoIterator<Item = &'a DialoguePair>,
{
    let mut counts: HashMap<&'a str, u64> = HashMap::new();
    for pair in pairs {
        for tok in pair.source.tokens().iter().chain(pair.target.tokens()) {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq.max(1))
        .collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size.saturating_sub(RESERVED.len()));
    Vocabulary::from_entries(ranked.into_iter().map(|(w, c)| (w.to_string(), c)).collect())
}

pub fn encode_source(u: &Utterance, v: &Vocabulary) -> Vec<u32> {
    u.tokens().iter().map(|t| v.id(t)).collect()
}

/// `[SOS] + ids + [EOS]`.
pub fn encode_target(u: &Utterance, v: &Vocabulary) -> Vec<u32> {
    let mut ids = Vec::with_capacity(u.len() + 2);
    ids.push(SOS);
    ids.extend(u.tokens().iter().map(|t| v.id(t)));
    ids.push(EOS);
    ids
}

pub fn decode(ids: &[u32], v: &Vocabulary) -> Result<Vec<String>, VocabError> {
    ids.iter()
        .map(|&id| {
            v.token(id).map(str::to_string).ok_or(VocabError::UnknownId { id, size: v.len() })
        })
        .collect()
}
