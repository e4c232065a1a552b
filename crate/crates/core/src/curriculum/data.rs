//! Prepared pools on disk, held-out validation sets and per-cell training
//! sets of a plan.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{BaselineKind, CurriculumError, CurriculumPlan};
use crate::corpus::{
    build_cross_set, build_mix_set, sample_uniform, DialoguePair, LengthClass, PairPool, PoolLabel, Pools,
};
use crate::model::EncodedPair;
use crate::rng::{derive_seed, label_hash};
use crate::trainer::encode_pool;
use crate::vocab::Vocabulary;

pub const POOL_FILES: [(PoolLabel, &str); 4] = [
    (PoolLabel::Short, "short.tsv"),
    (PoolLabel::Medium, "medium.tsv"),
    (PoolLabel::Long, "long.tsv"),
    (PoolLabel::Cross, "cross.tsv"),
];
pub const VOCAB_FILE: &str = "vocab.txt";

/// The pools and vocabulary written by `prepare`.
#[derive(Debug, Clone)]
pub struct PreparedPools {
    pub short: PairPool,
    pub medium: PairPool,
    pub long: PairPool,
    pub cross: PairPool,
    pub vocab: Vocabulary,
}

impl PreparedPools {
    pub fn from_pools(pools: Pools, vocab: Vocabulary) -> Self {
        Self {
            short: pools.short,
            medium: pools.medium,
            long: pools.long,
            cross: pools.cross,
            vocab,
        }
    }

    pub fn load(dir: &Path) -> Result<Self, CurriculumError> {
        let read = |label: PoolLabel, name: &str| {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(CurriculumError::MissingPool {
                    label: format!("{label} pool"),
                    path,
                });
            }
            Ok(PairPool::read_tsv(&path, label)?)
        };
        let short = read(PoolLabel::Short, POOL_FILES[0].1)?;
        let medium = read(PoolLabel::Medium, POOL_FILES[1].1)?;
        let long = read(PoolLabel::Long, POOL_FILES[2].1)?;
        let cross = read(PoolLabel::Cross, POOL_FILES[3].1)?;
        let vocab_path = dir.join(VOCAB_FILE);
        if !vocab_path.is_file() {
            return Err(CurriculumError::MissingPool {
                label: "vocabulary".into(),
                path: vocab_path,
            });
        }
        Ok(Self {
            short,
            medium,
            long,
            cross,
            vocab: Vocabulary::read_file(&vocab_path)?,
        })
    }

    /// Writes every pool with its manifest, and the vocabulary.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CurriculumError> {
        std::fs::create_dir_all(dir).map_err(|e| CurriculumError::io(format!("creating {}", dir.display()), e))?;
        let mut written = Vec::new();
        for (label, name) in POOL_FILES {
            let path = dir.join(name);
            self.pool(label).expect("file table covers stored pools").write_tsv(&path)?;
            written.push(path);
        }
        let vocab = dir.join(VOCAB_FILE);
        self.vocab.write_file(&vocab)?;
        written.push(vocab);
        Ok(written)
    }

    pub fn pool(&self, label: PoolLabel) -> Option<&PairPool> {
        match label {
            PoolLabel::Short => Some(&self.short),
            PoolLabel::Medium => Some(&self.medium),
            PoolLabel::Long => Some(&self.long),
            PoolLabel::Cross => Some(&self.cross),
            PoolLabel::Mix => None,
        }
    }

    fn class_pool(&self, class: LengthClass) -> &PairPool {
        match class {
            LengthClass::Short => &self.short,
            LengthClass::Medium => &self.medium,
            _ => &self.long,
        }
    }

    /// Corpus digests recorded in the pool manifests.
    pub fn corpus_digests(&self) -> BTreeSet<String> {
        [&self.short, &self.medium, &self.long, &self.cross]
            .iter()
            .map(|p| p.manifest.corpus_digest.clone())
            .collect()
    }
}

/// A training set requested by a grid cell or baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainSet {
    Segment { segment: usize, size: usize },
    Baseline { kind: BaselineKind, size: usize },
}

type Encoded = Arc<Vec<EncodedPair>>;

/// Everything a plan trains and evaluates on, derived deterministically from
/// the prepared pools and the master seed.
pub struct ExperimentData {
    pub vocab: Vocabulary,
    pub corpus_digests: BTreeSet<String>,
    plan: CurriculumPlan,
    train_pools: BTreeMap<PoolLabel, PairPool>,
    validation: BTreeMap<(LengthClass, usize), Encoded>,
    cache: Mutex<HashMap<TrainSet, Encoded>>,
}

impl ExperimentData {
    /// Carves one validation pool per (class, size label) from each class
    /// pool and removes every validation pair from all training pools.
    pub fn new(plan: &CurriculumPlan, pools: PreparedPools) -> Result<Self, CurriculumError> {
        let final_class = plan.final_segment().class;
        let mut labels: BTreeMap<LengthClass, (BTreeSet<usize>, usize)> = BTreeMap::new();
        for s in &plan.segments {
            let entry = labels.entry(s.class).or_default();
            entry.0.extend(&s.set_sizes);
            entry.1 = entry.1.max(s.val_size);
        }
        if !plan.baselines.kinds.is_empty() {
            labels.entry(final_class).or_default().0.extend(plan.baseline_sizes());
        }

        let model = plan.model.config(pools.vocab.len(), 0);
        let mut validation = BTreeMap::new();
        let mut held_out: HashSet<DialoguePair> = HashSet::new();
        for (class, (sizes, val_size)) in &labels {
            let pool = pools.class_pool(*class);
            let seed = derive_seed(&[plan.master_seed, label_hash("validation"), *class as u64]);
            let carved = sample_uniform(pool, val_size * sizes.len(), seed)?;
            for (chunk, size) in carved.pairs.chunks(*val_size).zip(sizes) {
                let part = PairPool::from_pairs(pool.label, chunk.to_vec());
                validation.insert((*class, *size), Arc::new(encode_pool(&part, &pools.vocab, &model)));
            }
            held_out.extend(carved.pairs);
        }

        let keep = |pool: &PairPool| {
            let pairs = pool.pairs.iter().filter(|p| !held_out.contains(*p)).cloned().collect();
            PairPool::new(pool.label, pairs, pool.manifest.clone())
        };
        let train_pools = [&pools.short, &pools.medium, &pools.long, &pools.cross]
            .into_iter()
            .map(|p| (p.label, keep(p)))
            .collect();
        Ok(Self {
            corpus_digests: pools.corpus_digests(),
            vocab: pools.vocab,
            plan: plan.clone(),
            train_pools,
            validation,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn train_pool(&self, label: PoolLabel) -> Option<&PairPool> {
        self.train_pools.get(&label)
    }

    pub fn validation(&self, class: LengthClass, size: usize) -> Option<Encoded> {
        self.validation.get(&(class, size)).cloned()
    }

    /// Validation set used by runs of `set`.
    pub fn validation_for(&self, set: TrainSet) -> Option<Encoded> {
        match set {
            TrainSet::Segment { segment, size } => self.validation(self.plan.segments[segment].class, size),
            TrainSet::Baseline { size, .. } => self.validation(self.plan.final_segment().class, size),
        }
    }

    /// Raw pairs of a training set. Segment sets depend only on the segment
    /// and size, so every seed and parent of a cell sees the same data; the
    /// fresh baseline reuses the final segment's sets.
    pub fn training_pool(&self, set: TrainSet) -> Result<PairPool, CurriculumError> {
        let seed = |tag: &str, a: u64, b: usize| derive_seed(&[self.plan.master_seed, label_hash(tag), a, b as u64]);
        let class_pool = |class: LengthClass| {
            let label = class.pool_label().expect("plan classes are pooled");
            &self.train_pools[&label]
        };
        let last = self.plan.segments.len() - 1;
        Ok(match set {
            TrainSet::Segment { segment, size } => {
                let class = self.plan.segments[segment].class;
                sample_uniform(class_pool(class), size, seed("train", segment as u64, size))?
            }
            TrainSet::Baseline {
                kind: BaselineKind::Fresh,
                size,
            } => {
                let class = self.plan.final_segment().class;
                sample_uniform(class_pool(class), size, seed("train", last as u64, size))?
            }
            TrainSet::Baseline {
                kind: BaselineKind::Mix,
                size,
            } => build_mix_set(
                &self.train_pools[&PoolLabel::Short],
                &self.train_pools[&PoolLabel::Medium],
                &self.train_pools[&PoolLabel::Long],
                size,
                seed("mix", 0, size),
            )?,
            TrainSet::Baseline {
                kind: BaselineKind::Cross,
                size,
            } => build_cross_set(&self.train_pools[&PoolLabel::Cross], size, seed("cross", 0, size))?,
        })
    }

    /// Encoded training set, built once and shared.
    pub fn training_set(&self, set: TrainSet) -> Result<Encoded, CurriculumError> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&set) {
            return Ok(hit.clone());
        }
        let model = self.plan.model.config(self.vocab.len(), 0);
        let encoded = Arc::new(encode_pool(&self.training_pool(set)?, &self.vocab, &model));
        Ok(self.cache.lock().expect("cache lock").entry(set).or_insert(encoded).clone())
    }

    /// Drops cached training sets of segments before `segment`.
    pub fn release_before(&self, segment: usize) {
        self.cache
            .lock()
            .expect("cache lock")
            .retain(|k, _| !matches!(k, TrainSet::Segment { segment: s, .. } if *s < segment));
    }
}
