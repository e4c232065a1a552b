//! Seeded generator of toy dialogue corpora with learnable structure.
//!
//! Each conversation walks over topics and length classes. A reply tends to
//! keep the topic and length class of the utterance before it, opens with a
//! word determined by the previous opener, and continues with a bigram chain
//! inside its topic.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusError;
use crate::rng::KeyedRng;
use crate::rng::keyed_rng;

const OPENERS: [&str; 8] = ["yes", "no", "what", "why", "well", "ok", "so", "maybe"];
const TOPICS: [[&str; 10]; 4] = [
    ["ship", "sea", "wind", "sail", "storm", "port", "crew", "wave", "deck", "harbor"],
    ["bread", "oven", "salt", "flour", "cook", "table", "soup", "knife", "plate", "meal"],
    ["road", "car", "map", "drive", "bridge", "town", "fuel", "turn", "north", "mile"],
    ["song", "drum", "voice", "dance", "band", "note", "stage", "play", "sing", "tune"],
];
const LINKS: [&str; 8] = ["the", "a", "and", "to", "of", "is", "we", "it"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticGrammar {
    pub conversations: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Probability that a reply stays in the previous utterance's length class.
    pub class_persistence: f64,
    /// Probability that a reply keeps the previous topic.
    pub topic_persistence: f64,
    /// Probability of an utterance longer than any pool admits.
    pub overlong_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticGrammar {
    fn default() -> Self {
        Self {
            conversations: 1_000,
            min_turns: 8,
            max_turns: 24,
            class_persistence: 0.8,
            topic_persistence: 0.75,
            overlong_rate: 0.02,
            seed: 0,
        }
    }
}

struct Turn {
    class: usize,
    topic: usize,
    opener: usize,
}

impl SyntheticGrammar {
    /// Expected number of successive-utterance pairs.
    pub fn expected_pairs(&self) -> usize {
        let mean_turns = (self.min_turns + self.max_turns) as f64 / 2.0;
        (self.conversations as f64 * (mean_turns - 1.0)).round() as usize
    }

    /// The conversations as word lists, one `Vec` per utterance.
    pub fn conversations(&self) -> impl Iterator<Item = Vec<Vec<String>>> + '_ {
        (0..self.conversations).map(move |c| {
            let mut rng = keyed_rng(&[self.seed, c as u64]);
            let turns = rng.random_range(self.min_turns.max(2)..=self.max_turns.max(self.min_turns.max(2)));
            let mut prev = Turn {
                class: rng.random_range(0..3),
                topic: rng.random_range(0..TOPICS.len()),
                opener: rng.random_range(0..OPENERS.len()),
            };
            let mut out = Vec::with_capacity(turns);
            for t in 0..turns {
                let turn = if t == 0 { prev } else { self.next_turn(&prev, &mut rng) };
                out.push(self.utterance(&turn, &mut rng));
                prev = turn;
            }
            out
        })
    }

    fn next_turn(&self, prev: &Turn, rng: &mut KeyedRng) -> Turn {
        let class = if rng.random_bool(self.class_persistence) {
            prev.class
        } else {
            (prev.class + rng.random_range(1..3)) % 3
        };
        let topic = if rng.random_bool(self.topic_persistence) {
            prev.topic
        } else {
            rng.random_range(0..TOPICS.len())
        };
        let opener = if rng.random_bool(0.8) {
            (prev.opener * 3 + 1) % OPENERS.len()
        } else {
            rng.random_range(0..OPENERS.len())
        };
        Turn { class, topic, opener }
    }

    fn utterance(&self, turn: &Turn, rng: &mut KeyedRng) -> Vec<String> {
        let len = if rng.random_bool(self.overlong_rate) {
            rng.random_range(17..=22)
        } else {
            match turn.class {
                0 => rng.random_range(1..=4),
                1 => rng.random_range(5..=10),
                _ => rng.random_range(11..=16),
            }
        };
        let words = &TOPICS[turn.topic];
        let mut out = Vec::with_capacity(len);
        out.push(OPENERS[turn.opener].to_string());
        let mut cur = rng.random_range(0..words.len());
        while out.len() < len {
            if out.len() % 3 == 2 {
                out.push(LINKS[(cur + out.len()) % LINKS.len()].to_string());
                continue;
            }
            out.push(words[cur].to_string());
            cur = if rng.random_bool(0.7) {
                (cur + 1) % words.len()
            } else {
                rng.random_range(0..words.len())
            };
        }
        out
    }

    /// Writes the corpus as one utterance per line, conversations separated
    /// by a blank line.
    pub fn write_corpus(&self, path: &Path) -> Result<(), CorpusError> {
        let ctx = || format!("writing corpus {}", path.display());
        let file = File::create(path).map_err(|e| CorpusError::io(ctx(), e))?;
        let mut w = BufWriter::new(file);
        for (i, conv) in self.conversations().enumerate() {
            if i > 0 {
                writeln!(w).map_err(|e| CorpusError::io(ctx(), e))?;
            }
            for utt in conv {
                writeln!(w, "{}", utt.join(" ")).map_err(|e| CorpusError::io(ctx(), e))?;
            }
        }
        w.flush().map_err(|e| CorpusError::io(ctx(), e))
    }
}
