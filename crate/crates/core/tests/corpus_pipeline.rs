//! Corpus preparation end to end, and property tests over pools, samplers
//! and mix sets.

use std::collections::HashSet;
use std::fs;

use currseq::commands::cmd_prepare;
use currseq::corpus::{
    build_mix_set, build_pools, mix_counts, sample_uniform, CorpusSource, DialoguePair, LengthClass, PairPool,
    PoolLabel, Utterance,
};
use currseq::curriculum::{carry_count, subsample_lineages, PreparedPools, POOL_FILES, VOCAB_FILE};
use currseq::vocab::DEFAULT_MAX_SIZE;
use proptest::prelude::*;

const TOY: &str = "hello there\n\
hi\n\
how are you doing today friend\n\
\n\
one two three four five six seven eight nine ten eleven\n\
a b c d e f g h i j k l\n\
q q q q q q q q q q q q q q q q q\n";

fn words(n: usize, tag: &str) -> Utterance {
    Utterance::new((0..n).map(|i| format!("{tag}{i}")).collect()).unwrap()
}

#[test]
fn toy_corpus_counts_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("toy.txt");
    fs::write(&corpus, TOY).unwrap();
    let out = dir.path().join("pools");
    let s = cmd_prepare(&corpus, &out, DEFAULT_MAX_SIZE, vec![]).unwrap();
    // (2,1) short, (1,6) mixed classes, (11,12) long, (12,17) overlong.
    assert_eq!(s.conversations, 2);
    let d = s.dispositions;
    assert_eq!(
        (d.total, d.short, d.medium, d.long, d.cross_only, d.discarded),
        (4, 1, 0, 1, 1, 1)
    );
    assert_eq!(s.pool_sizes, [1, 0, 1, 3]);

    let pools = PreparedPools::load(&out).unwrap();
    let p = &pools.short.pairs[0];
    assert_eq!((p.source.to_string(), p.target.to_string()), ("hello there".into(), "hi".into()));
    assert_eq!(pools.long.len(), 1);
    assert!(!pools.vocab.contains("q"), "overlong sentences never reach the vocabulary");
    assert!(pools.vocab.contains("friend"));
    for (_, name) in POOL_FILES {
        assert!(out.join(name).is_file());
    }
}

#[test]
fn empty_corpus_gives_empty_pools() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.txt");
    fs::write(&corpus, "").unwrap();
    let s = cmd_prepare(&corpus, &dir.path().join("pools"), DEFAULT_MAX_SIZE, vec![]).unwrap();
    assert_eq!(s.dispositions.total, 0);
    assert_eq!(s.pool_sizes, [0; 4]);
    assert_eq!(s.vocab_size, 4);
    let pools = PreparedPools::load(&dir.path().join("pools")).unwrap();
    assert!(pools.cross.is_empty());
}

#[test]
fn prepare_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    currseq::synthetic::SyntheticGrammar {
        conversations: 200,
        seed: 4,
        ..Default::default()
    }
    .write_corpus(&corpus)
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_prepare(&corpus, &a, 50, vec![]).unwrap();
    cmd_prepare(&corpus, &b, 50, vec![]).unwrap();
    let mut names: Vec<String> = POOL_FILES.iter().map(|(_, n)| n.to_string()).collect();
    names.extend(POOL_FILES.iter().map(|(_, n)| n.replace(".tsv", ".manifest.json")));
    names.push(VOCAB_FILE.into());
    names.push("prepare.json".into());
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_corpus_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_prepare(&dir.path().join("nope.txt"), &dir.path().join("p"), 50, vec![]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

fn pair_strategy() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=20, 1usize..=20)
}

proptest! {
    #[test]
    fn routing_respects_classes(lens in prop::collection::vec(pair_strategy(), 0..60)) {
        let pairs: Vec<DialoguePair> = lens
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| DialoguePair::new(words(a, &format!("s{i}x")), words(b, &format!("t{i}x"))))
            .collect();
        let pools = build_pools(pairs.clone(), &CorpusSource::default());
        let d = pools.dispositions;
        prop_assert_eq!(d.total, pairs.len());
        prop_assert_eq!(d.short + d.medium + d.long + d.cross_only + d.discarded, d.total);
        prop_assert_eq!(pools.cross.len(), d.cross());
        for class in LengthClass::POOLED {
            for p in &pools.length_pool(class).unwrap().pairs {
                prop_assert_eq!(p.source.class(), class);
                prop_assert_eq!(p.target.class(), class);
            }
        }
        for p in &pools.cross.pairs {
            prop_assert!(p.source.len() <= 16 && p.target.len() <= 16);
        }
    }

    #[test]
    fn word_count_classes_partition(n in 1usize..40) {
        let class = LengthClass::from_word_count(n).unwrap();
        let expected = match n {
            1..=4 => LengthClass::Short,
            5..=10 => LengthClass::Medium,
            11..=16 => LengthClass::Long,
            _ => LengthClass::Overlong,
        };
        prop_assert_eq!(class, expected);
    }

    #[test]
    fn samples_are_distinct_subsets(size in 0usize..80, n in 0usize..80, seed in any::<u64>()) {
        let pool = PairPool::from_pairs(
            PoolLabel::Short,
            (0..size).map(|i| DialoguePair::new(words(1, &format!("a{i}x")), words(1, "b"))).collect(),
        );
        match sample_uniform(&pool, n, seed) {
            Ok(s) => {
                prop_assert!(n <= size);
                prop_assert_eq!(s.len(), n);
                let all: HashSet<_> = pool.pairs.iter().collect();
                let picked: HashSet<_> = s.pairs.iter().collect();
                prop_assert_eq!(picked.len(), n);
                prop_assert!(picked.is_subset(&all));
                prop_assert_eq!(sample_uniform(&pool, n, seed).unwrap(), s);
            }
            Err(_) => prop_assert!(n > size),
        }
    }

    #[test]
    fn mix_counts_differ_by_at_most_one(n in 0usize..100_000) {
        let c = mix_counts(n);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        prop_assert!(c[0] >= c[1] && c[1] >= c[2] && c[0] - c[2] <= 1);
    }

    #[test]
    fn mix_set_composition(n in 0usize..60, seed in any::<u64>()) {
        let pool = |label: PoolLabel, len: usize| PairPool::from_pairs(
            label,
            (0..30).map(|i| DialoguePair::new(words(len, &format!("{label}{i}x")), words(len, "r"))).collect(),
        );
        let mix = build_mix_set(&pool(PoolLabel::Short, 2), &pool(PoolLabel::Medium, 7), &pool(PoolLabel::Long, 12), n, seed).unwrap();
        let count = |c| mix.pairs.iter().filter(|p| p.source.class() == c).count();
        prop_assert_eq!([count(LengthClass::Short), count(LengthClass::Medium), count(LengthClass::Long)], mix_counts(n));
    }

    #[test]
    fn carry_count_is_exact_ceiling(n in 0usize..5_000, k in 1usize..12, m in 1usize..12) {
        prop_assume!(k <= m);
        prop_assert_eq!(carry_count(n, k as f64 / m as f64), (k * n).div_ceil(m));
    }

    #[test]
    fn subsample_keeps_order_and_size(n in 0usize..200, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let picked = subsample_lineages(&items, 1.0 / 6.0, seed);
        prop_assert_eq!(picked.len(), n.div_ceil(6));
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
    }
}
