use std::collections::BTreeSet;

use fusekit::distribution::{DistributionMatrix, SparseRow};
use fusekit::vocab_align::{
    accumulate_statistics, align_sequences, build_projection_table, project_distribution,
    segment_cost, AlignmentMap, MappingStatistics, Strategy, Vocabulary,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random split of `text` into at most `max_pieces` non-empty pieces.
fn split(rng: &mut ChaCha8Rng, text: &str, max_pieces: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let pieces = rng.gen_range(1..=max_pieces.min(chars.len()));
    let mut cuts: BTreeSet<usize> = BTreeSet::new();
    while cuts.len() < pieces - 1 {
        cuts.insert(rng.gen_range(1..chars.len()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for c in cuts.into_iter().chain([chars.len()]) {
        out.push(chars[start..c].iter().collect());
        start = c;
    }
    out
}

struct Case {
    pivot_vocab: Vocabulary,
    source_vocab: Vocabulary,
    pivot: Vec<u32>,
    source: Vec<u32>,
}

fn vocab_of(pieces: &[String]) -> Vocabulary {
    let mut tokens = vec!["<unk>".to_string()];
    for p in pieces {
        if !tokens.contains(p) {
            tokens.push(p.clone());
        }
    }
    Vocabulary::new(tokens, "\u{2581}", Some(0), []).unwrap()
}

fn ids(v: &Vocabulary, pieces: &[String]) -> Vec<u32> {
    pieces.iter().map(|p| v.id_of(p).unwrap()).collect()
}

fn random_case(rng: &mut ChaCha8Rng, max_len: usize) -> Case {
    let len = rng.gen_range(1..=10);
    let text: String = (0..len)
        .map(|_| ['a', 'b', 'c', '\u{2581}'][rng.gen_range(0..4)])
        .collect();
    let p = split(rng, &text, max_len);
    let s = split(rng, &text, max_len);
    let pivot_vocab = vocab_of(&p);
    let source_vocab = vocab_of(&s);
    Case {
        pivot: ids(&pivot_vocab, &p),
        source: ids(&source_vocab, &s),
        pivot_vocab,
        source_vocab,
    }
}

/// Exhaustive minimum over all monotone 1-1 / 1-n / n-1 segmentations.
fn brute_force(ps: &[&str], ss: &[&str]) -> f64 {
    if ps.is_empty() && ss.is_empty() {
        return 0.0;
    }
    if ps.is_empty() || ss.is_empty() {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    for n in 1..=ss.len() {
        let c = segment_cost(&ps[..1], &ss[..n]) + brute_force(&ps[1..], &ss[n..]);
        best = best.min(c);
    }
    for n in 2..=ps.len() {
        let c = segment_cost(&ps[..n], &ss[..1]) + brute_force(&ps[n..], &ss[1..]);
        best = best.min(c);
    }
    best
}

fn surfaces<'a>(v: &'a Vocabulary, seq: &[u32]) -> Vec<&'a str> {
    seq.iter().map(|&id| v.surface(id)).collect()
}

fn recomputed_cost(map: &AlignmentMap, ps: &[&str], ss: &[&str]) -> f64 {
    map.segments()
        .iter()
        .map(|seg| segment_cost(&ps[seg.pivot.clone()], &ss[seg.source.clone()]))
        .sum()
}

#[test]
fn dp_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..300 {
        let c = random_case(&mut rng, 6);
        let map = align_sequences(&c.pivot, &c.source, &c.pivot_vocab, &c.source_vocab).unwrap();
        let ps = surfaces(&c.pivot_vocab, &c.pivot);
        let ss = surfaces(&c.source_vocab, &c.source);
        let oracle = brute_force(&ps, &ss);
        assert!((map.cost() - oracle).abs() < 1e-12, "{ps:?} {ss:?}");
        assert!((recomputed_cost(&map, &ps, &ss) - map.cost()).abs() < 1e-12);
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, v: usize) -> DistributionMatrix {
    let k = rng.gen_range(1..=v);
    let rows = (0..n)
        .map(|_| {
            let mut ids: Vec<u32> = (0..v as u32).collect();
            for i in (1..ids.len()).rev() {
                ids.swap(i, rng.gen_range(0..=i));
            }
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            SparseRow::from_probs(ids[..k].iter().zip(&w).map(|(&i, &x)| (i, x / s)).collect())
                .unwrap()
        })
        .collect();
    DistributionMatrix::new(rows, v, k).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projected_rows_are_stochastic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng, 8);
        let map = align_sequences(&c.pivot, &c.source, &c.pivot_vocab, &c.source_vocab).unwrap();
        let stats = accumulate_statistics(
            &[(&map, &c.pivot[..], &c.source[..])],
            c.pivot_vocab.len(),
            c.source_vocab.len(),
        )
        .unwrap();
        let m = random_matrix(&mut rng, c.source.len(), c.source_vocab.len());
        for strategy in [Strategy::ExactMatch, Strategy::MinEditDistance, Strategy::MappingStatistics] {
            let st = (strategy == Strategy::MappingStatistics).then_some(&stats);
            let table = build_projection_table(strategy, &c.pivot_vocab, &c.source_vocab, st).unwrap();
            let out = project_distribution(&m, &map, &c.pivot, &c.source, &table).unwrap();
            prop_assert_eq!(out.matrix.num_rows(), c.pivot.len());
            for row in out.matrix.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn statistics_ignore_corpus_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text: String = (0..12).map(|_| ['x', 'y', 'z'][rng.gen_range(0..3)]).collect();
        let splits: Vec<(Vec<String>, Vec<String>)> = (0..6)
            .map(|_| (split(&mut rng, &text, 8), split(&mut rng, &text, 8)))
            .collect();
        let all: Vec<String> = splits.iter().flat_map(|(p, s)| p.iter().chain(s).cloned()).collect();
        let pv = vocab_of(&all);
        let sv = pv.clone();
        let corpus: Vec<(Vec<u32>, Vec<u32>, AlignmentMap)> = splits
            .iter()
            .map(|(p, s)| {
                let p = ids(&pv, p);
                let s = ids(&sv, s);
                let m = align_sequences(&p, &s, &pv, &sv).unwrap();
                (p, s, m)
            })
            .collect();
        let view = |order: &[usize]| -> MappingStatistics {
            let items: Vec<_> = order
                .iter()
                .map(|&i| (&corpus[i].2, &corpus[i].0[..], &corpus[i].1[..]))
                .collect();
            accumulate_statistics(&items, pv.len(), sv.len()).unwrap()
        };
        let forward = view(&[0, 1, 2, 3, 4, 5]);
        let shuffled = view(&[3, 5, 0, 2, 1, 4]);
        prop_assert_eq!(forward.to_text(), shuffled.to_text());
    }
}
