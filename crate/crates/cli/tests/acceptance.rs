//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.
//!
//! Run with `cargo test -p fusekit-cli --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    dir_files, fixture, fusekit, fusion_scenario, random_dump, read_corpus, s, write_dataset,
};
use fusekit::distill::{
    combined_objective, fusion_loss, mean_fusion_cross_entropy, model_distributions,
    select_fused_targets, sft_loss, train_pairwise_fusion, FusionWeight, SupervisedExample, ToyLm,
    ToyLmDims, TrainConfig,
};
use fusekit::dump::DistributionDump;
use fusekit::merge::{
    canonical_order, compute_fusion_vectors, dare_rng, merge_dare, merge_linear,
    merge_task_arithmetic, merge_ties, run_merge, sce_erase, sce_merge, sce_select, Ablation,
    MergeMethod, MergeSettings, MergedParams, DEFAULT_DROP_RATE, DEFAULT_TAU, DEFAULT_TA_SCALE,
    DEFAULT_TRIM_RATE,
};
use fusekit::tensorio::write_checkpoint;
use fusekit::vocab_align::{
    accumulate_statistics, align_sequences, build_projection_table, project_distribution,
    segment_cost, MappingStatistics, SegmentKind, Strategy, Vocabulary,
};
use fusekit::{DistributionMatrix, NamedTensorMap, SparseRow, Tensor};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, Option<Duration>, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- merging

fn random_geometry(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<usize>)> {
    (0..rng.gen_range(1..=3))
        .map(|i| {
            let shape = if rng.gen_bool(0.3) {
                vec![rng.gen_range(1..=8)]
            } else {
                vec![rng.gen_range(1..=8), rng.gen_range(1..=8)]
            };
            (format!("layer{i}.weight"), shape)
        })
        .collect()
}

/// Values on a coarse grid now and then so exact zeros and sign ties occur.
fn random_value(rng: &mut ChaCha8Rng) -> f32 {
    if rng.gen_bool(0.15) {
        rng.gen_range(-2..=2) as f32 * 0.5
    } else {
        rng.gen_range(-1.0f32..1.0)
    }
}

fn random_map(rng: &mut ChaCha8Rng, geometry: &[(String, Vec<usize>)]) -> NamedTensorMap {
    let mut m = NamedTensorMap::new();
    for (name, shape) in geometry {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| random_value(rng)).collect();
        m.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap());
    }
    m
}

struct MergeCase {
    pivot: NamedTensorMap,
    targets: Vec<NamedTensorMap>,
}

fn random_merge_case(rng: &mut ChaCha8Rng, max_targets: usize) -> MergeCase {
    let geometry = random_geometry(rng);
    let pivot = random_map(rng, &geometry);
    let targets = (0..rng.gen_range(1..=max_targets))
        .map(|_| random_map(rng, &geometry))
        .collect();
    MergeCase { pivot, targets }
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Literal per-tensor transcription: fusion vectors, top-τ% variance mask,
/// energy coefficients, minority-sign erasure, weighted sum onto the pivot.
fn sce_oracle(pivot: &[f64], targets: &[Vec<f64>], tau_percent: usize) -> Vec<f64> {
    if targets.len() == 1 {
        return targets[0].clone();
    }
    let n = pivot.len();
    let k = targets.len();
    let delta: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| t.iter().zip(pivot).map(|(a, b)| a - b).collect())
        .collect();
    let mut variance = vec![0.0; n];
    for e in 0..n {
        let mut mean = 0.0;
        for d in &delta {
            mean += d[e];
        }
        mean /= k as f64;
        let mut v = 0.0;
        for d in &delta {
            v += (d[e] - mean) * (d[e] - mean);
        }
        variance[e] = v / k as f64;
    }
    let count = (tau_percent * n).div_ceil(100);
    let mut ranked = variance.clone();
    ranked.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = ranked[count - 1];
    let masked: Vec<Vec<f64>> = delta
        .iter()
        .map(|d| {
            (0..n)
                .map(|e| if variance[e] >= threshold { d[e] } else { 0.0 })
                .collect()
        })
        .collect();
    let energy: Vec<f64> = masked
        .iter()
        .map(|d| d.iter().map(|x| x * x).sum())
        .collect();
    let total: f64 = energy.iter().sum();
    let eta: Vec<f64> = if total == 0.0 {
        vec![1.0 / k as f64; k]
    } else {
        energy.iter().map(|x| x / total).collect()
    };
    let mut out = pivot.to_vec();
    for e in 0..n {
        let s: f64 = masked.iter().map(|d| d[e]).sum();
        for j in 0..k {
            let x = masked[j][e];
            let kept = if s == 0.0 || sgn(x) != sgn(s) { 0.0 } else { x };
            out[e] += eta[j] * kept;
        }
    }
    out
}

fn max_error(merged: &MergedParams, oracle: impl Fn(&str) -> Vec<f64>) -> f64 {
    merged
        .tensors
        .iter()
        .map(|(name, t)| {
            let want = oracle(name);
            t.data
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn tensor_lists(case: &MergeCase, name: &str) -> (Vec<f64>, Vec<Vec<f64>>) {
    (
        f64s(case.pivot.get(name).unwrap()),
        case.targets
            .iter()
            .map(|t| f64s(t.get(name).unwrap()))
            .collect(),
    )
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let case = random_merge_case(&mut rng, 3);
        let tau = [10, 50, 100][i % 3];
        let (merged, _) = sce_merge(&case.pivot, &case.targets, tau as f64, Ablation::Full)
            .map_err(|e| e.to_string())?;
        let err = max_error(&merged, |name| {
            let (p, t) = tensor_lists(&case, name);
            sce_oracle(&p, &t, tau)
        });
        worst = worst.max(err);
    }
    ensure(worst <= 1e-12, || {
        format!("max abs error {worst:e} > 1e-12")
    })?;
    Ok(format!("200 instances, max abs error {worst:e}"))
}

fn population_variance(slices: &[&[f64]], e: usize) -> f64 {
    let k = slices.len() as f64;
    let mean = slices.iter().map(|d| d[e]).sum::<f64>() / k;
    slices.iter().map(|d| (d[e] - mean).powi(2)).sum::<f64>() / k
}

fn sce_invariants(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut case = random_merge_case(&mut rng, 3);
    while case.targets.len() < 2 {
        case.targets
            .push(random_map(&mut rng, &geometry_of(&case.pivot)));
    }
    let tau = [5.0, 10.0, 25.0, 50.0, 100.0][rng.gen_range(0..5)];
    let settings = MergeSettings {
        tau,
        ..MergeSettings::default()
    };

    // Coefficient normalization.
    let (_, report) =
        sce_merge(&case.pivot, &case.targets, tau, Ablation::Full).map_err(|e| e.to_string())?;
    for (name, sum) in report.eta_sums() {
        ensure((sum - 1.0).abs() <= 1e-9, || {
            format!("{name}: eta sums to {sum}")
        })?;
    }

    // Select cardinality against a brute-force ranking.
    let vectors = compute_fusion_vectors(&case.pivot, &case.targets).map_err(|e| e.to_string())?;
    let (masked, mask) = sce_select(&vectors, tau).map_err(|e| e.to_string())?;
    for name in vectors.names() {
        let slices: Vec<&[f64]> = vectors
            .deltas
            .iter()
            .map(|d| d[&name].data.as_slice())
            .collect();
        let n = slices[0].len();
        let var: Vec<f64> = (0..n).map(|e| population_variance(&slices, e)).collect();
        let mut ranked = var.clone();
        ranked.sort_by(|a, b| b.total_cmp(a));
        let c = ((tau as usize) * n).div_ceil(100).max(1);
        let threshold = ranked[c - 1];
        let expected = var.iter().filter(|&&v| v >= threshold).count();
        let got = mask.masks[&name].iter().filter(|&&b| b).count();
        ensure(got == expected, || {
            format!("{name}: {got} selected, expected {expected}")
        })?;
        let tie_free = c == n || ranked[c] < threshold;
        ensure(!tie_free || got == c, || {
            format!("{name}: {got} selected, expected {c}")
        })?;
        ensure(report.tensors[&name].selected == Some(got), || {
            format!("{name}: report count")
        })?;
    }

    // Erase sign-soundness.
    let erased = sce_erase(&masked);
    for name in masked.names() {
        let before: Vec<&[f64]> = masked
            .deltas
            .iter()
            .map(|d| d[&name].data.as_slice())
            .collect();
        let after: Vec<&[f64]> = erased
            .vectors
            .deltas
            .iter()
            .map(|d| d[&name].data.as_slice())
            .collect();
        for e in 0..before[0].len() {
            let s = sgn(before.iter().map(|d| d[e]).sum());
            for d in &after {
                ensure(d[e] == 0.0 || sgn(d[e]) == s, || {
                    format!("{name}[{e}] keeps a minority sign")
                })?;
            }
        }
    }

    // Pivot fixed point for every method.
    let copies = vec![case.pivot.clone(); case.targets.len()];
    let pivot_params = fusekit::merge::to_param_map(&case.pivot);
    for method in MergeMethod::ALL {
        let (m, _) =
            run_merge(method, &case.pivot, &copies, &settings).map_err(|e| e.to_string())?;
        let d = m.max_abs_diff(&pivot_params);
        ensure(d == 0.0, || {
            format!("{}: pivot moved by {d}", method.name())
        })?;
    }

    // Target permutation invariance for every method.
    let mut permuted = case.targets.clone();
    permuted.rotate_left(1);
    permuted.reverse();
    for method in MergeMethod::ALL {
        let (a, _) =
            run_merge(method, &case.pivot, &case.targets, &settings).map_err(|e| e.to_string())?;
        let (b, _) =
            run_merge(method, &case.pivot, &permuted, &settings).map_err(|e| e.to_string())?;
        ensure(a == b, || {
            format!("{}: order changed the result", method.name())
        })?;
    }
    Ok(())
}

fn geometry_of(m: &NamedTensorMap) -> Vec<(String, Vec<usize>)> {
    m.iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

fn criterion_2() -> Check {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&proptest::num::u64::ANY, |seed| {
            sce_invariants(seed).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    Ok("1000 cases: eta normalization, select cardinality, erase soundness, pivot fixed point, permutation invariance".into())
}

fn linear_oracle(targets: &[Vec<f64>]) -> Vec<f64> {
    let k = targets.len() as f64;
    (0..targets[0].len())
        .map(|e| targets.iter().map(|t| t[e]).sum::<f64>() / k)
        .collect()
}

fn ta_oracle(pivot: &[f64], targets: &[Vec<f64>], scale: f64) -> Vec<f64> {
    (0..pivot.len())
        .map(|e| pivot[e] + scale * targets.iter().map(|t| t[e] - pivot[e]).sum::<f64>())
        .collect()
}

fn ties_oracle(pivot: &[f64], targets: &[Vec<f64>], trim_rate: f64) -> Vec<f64> {
    let n = pivot.len();
    let n_trim = (trim_rate * n as f64 + 1e-9).floor() as usize;
    let keep = n - n_trim;
    let trimmed: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            let d: Vec<f64> = (0..n).map(|e| t[e] - pivot[e]).collect();
            if keep == 0 {
                return vec![0.0; n];
            }
            let mut mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cutoff = mags[keep - 1];
            d.iter()
                .map(|&x| if x.abs() >= cutoff { x } else { 0.0 })
                .collect()
        })
        .collect();
    (0..n)
        .map(|e| {
            let elected = sgn(trimmed.iter().map(|d| d[e]).sum());
            let agreeing: Vec<f64> = trimmed
                .iter()
                .map(|d| d[e])
                .filter(|&x| x != 0.0 && sgn(x) == elected)
                .collect();
            let merged = if agreeing.is_empty() {
                0.0
            } else {
                agreeing.iter().sum::<f64>() / agreeing.len() as f64
            };
            pivot[e] + merged
        })
        .collect()
}

fn dare_oracle(case: &MergeCase, name: &str, p: f64, seed: u64) -> Vec<f64> {
    let pivot = f64s(case.pivot.get(name).unwrap());
    let order = canonical_order(&case.targets);
    let k = order.len() as f64;
    let mut acc = vec![0.0; pivot.len()];
    for (j, &i) in order.iter().enumerate() {
        let t = f64s(case.targets[i].get(name).unwrap());
        let mut rng = dare_rng(seed, j, name);
        for e in 0..pivot.len() {
            let u: f64 = rng.gen();
            if u >= p {
                acc[e] += (t[e] - pivot[e]) / (1.0 - p);
            }
        }
    }
    (0..pivot.len()).map(|e| pivot[e] + acc[e] / k).collect()
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let case = random_merge_case(&mut rng, 3);
        let scale = rng.gen_range(-1.0..1.0);
        let trim = [0.0, 0.2, 0.4, 0.7, 1.0][rng.gen_range(0..5)];
        let drop = [0.0, 0.4, 0.9][rng.gen_range(0..3)];
        let seed: u64 = rng.gen();
        let errs = [
            max_error(
                &merge_linear(&case.targets).map_err(|e| e.to_string())?,
                |n| linear_oracle(&tensor_lists(&case, n).1),
            ),
            max_error(
                &merge_task_arithmetic(&case.pivot, &case.targets, scale)
                    .map_err(|e| e.to_string())?,
                |n| {
                    let (p, t) = tensor_lists(&case, n);
                    ta_oracle(&p, &t, scale)
                },
            ),
            max_error(
                &merge_ties(&case.pivot, &case.targets, trim).map_err(|e| e.to_string())?,
                |n| {
                    let (p, t) = tensor_lists(&case, n);
                    ties_oracle(&p, &t, trim)
                },
            ),
            max_error(
                &merge_dare(&case.pivot, &case.targets, drop, seed).map_err(|e| e.to_string())?,
                |n| dare_oracle(&case, n, drop, seed),
            ),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    for (name, w) in ["linear", "ta", "ties", "dare"].iter().zip(worst) {
        ensure(w <= 1e-12, || format!("{name}: max abs error {w:e}"))?;
    }
    let d = MergeSettings::default();
    ensure(
        DEFAULT_TA_SCALE == 0.3
            && DEFAULT_TRIM_RATE == 0.4
            && DEFAULT_DROP_RATE == 0.4
            && DEFAULT_TAU == 10.0
            && d.scale == 0.3
            && d.trim_rate == 0.4
            && d.drop_rate == 0.4
            && d.tau == 10.0,
        || "shipped defaults differ from scale 0.3, trim/drop 0.4, tau 10".into(),
    )?;
    Ok(format!(
        "200 instances, max abs error linear {:e} ta {:e} ties {:e} dare {:e}; defaults scale 0.3, trim 0.4, drop 0.4, tau 10",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ------------------------------------------------------- trained targets

struct Trained {
    pivot: ToyLm,
    targets: Vec<ToyLm>,
}

fn train_toy_targets() -> Result<Trained, String> {
    let sc = fusion_scenario(64, 0, 17);
    let k = 4;
    let a = model_distributions(&sc.teacher_a, &sc.train, k).map_err(|e| e.to_string())?;
    let b = model_distributions(&sc.teacher_b, &sc.train, k).map_err(|e| e.to_string())?;
    let own = model_distributions(&sc.pivot, &sc.train, k).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let mut targets = Vec::new();
    for source in [&a, &b] {
        let fused = select_fused_targets(&own, source, &sc.train).map_err(|e| e.to_string())?;
        let out = train_pairwise_fusion(&sc.pivot, &sc.train, &fused.matrices, &config)
            .map_err(|e| e.to_string())?;
        targets.push(out.model);
    }
    let fused = select_fused_targets(&a, &b, &sc.train).map_err(|e| e.to_string())?;
    let out = train_pairwise_fusion(&sc.pivot, &sc.train, &fused.matrices, &config)
        .map_err(|e| e.to_string())?;
    targets.push(out.model);
    Ok(Trained {
        pivot: sc.pivot,
        targets,
    })
}

fn criterion_4() -> Check {
    let trained = train_toy_targets()?;
    let pivot = trained.pivot.to_checkpoint();
    let targets: Vec<NamedTensorMap> = trained.targets.iter().map(|m| m.to_checkpoint()).collect();
    let mut outputs = Vec::new();
    let mut details = Vec::new();
    for ablation in [
        Ablation::Full,
        Ablation::CalculateErase,
        Ablation::CalculateOnly,
    ] {
        let (merged, report) =
            sce_merge(&pivot, &targets, DEFAULT_TAU, ablation).map_err(|e| e.to_string())?;
        for (name, t) in &report.tensors {
            match ablation {
                Ablation::Full => {
                    let want = (t.numel * 10).div_ceil(100);
                    ensure(t.selected == Some(want), || {
                        format!("SCE {name}: selected {:?}, expected {want}", t.selected)
                    })?;
                    ensure(t.erased.is_some(), || format!("SCE {name}: no erase count"))?;
                }
                Ablation::CalculateErase => {
                    ensure(t.selected == Some(t.numel), || {
                        format!("CE {name}: not all selected")
                    })?;
                    ensure(t.erased.is_some(), || format!("CE {name}: no erase count"))?;
                }
                Ablation::CalculateOnly => {
                    ensure(t.selected.is_none() && t.erased.is_none(), || {
                        format!("C {name}: reports selection or erasure")
                    })?;
                }
            }
        }
        details.push(format!(
            "{} selected {:?} erased {:?}",
            report.method,
            report.total_selected(),
            report.total_erased()
        ));
        outputs.push(merged.to_checkpoint());
    }
    for i in 0..3 {
        for j in i + 1..3 {
            ensure(!outputs[i].bit_eq(&outputs[j]), || {
                format!("ablations {i} and {j} coincide")
            })?;
        }
    }
    Ok(format!("3 distinct checkpoints; {}", details.join("; ")))
}

// -------------------------------------------------------------- alignment

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

struct AlignCase {
    pv: Vocabulary,
    sv: Vocabulary,
    pivot: Vec<u32>,
    source: Vec<u32>,
}

fn random_align_case(rng: &mut ChaCha8Rng, max_chars: usize, max_pieces: usize) -> AlignCase {
    let len = rng.gen_range(1..=max_chars);
    let text: String = (0..len)
        .map(|_| ['a', 'b', 'c', 'd', '\u{2581}'][rng.gen_range(0..5)])
        .collect();
    let p = split(rng, &text, max_pieces);
    let s = split(rng, &text, max_pieces);
    let pv = vocab_of(&p);
    let sv = vocab_of(&s);
    AlignCase {
        pivot: ids(&pv, &p),
        source: ids(&sv, &s),
        pv,
        sv,
    }
}

fn exhaustive(ps: &[&str], ss: &[&str]) -> f64 {
    if ps.is_empty() && ss.is_empty() {
        return 0.0;
    }
    if ps.is_empty() || ss.is_empty() {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    for n in 1..=ss.len() {
        best = best.min(segment_cost(&ps[..1], &ss[..n]) + exhaustive(&ps[1..], &ss[n..]));
    }
    for n in 2..=ps.len() {
        best = best.min(segment_cost(&ps[..n], &ss[..1]) + exhaustive(&ps[n..], &ss[1..]));
    }
    best
}

fn split_word_tables() -> Result<String, String> {
    let pv = Vocabulary::read(fixture("split_words/pivot.vocab")).map_err(|e| e.to_string())?;
    let sv = Vocabulary::read(fixture("split_words/source.vocab")).map_err(|e| e.to_string())?;
    let corpus = read_corpus(&fixture("split_words/corpus.jsonl"));
    let maps = corpus
        .iter()
        .map(|(p, q)| align_sequences(p, q, &pv, &sv))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let items: Vec<_> = corpus
        .iter()
        .zip(&maps)
        .map(|((p, q), m)| (m, &p[..], &q[..]))
        .collect();
    let stats = accumulate_statistics(&items, pv.len(), sv.len()).map_err(|e| e.to_string())?;
    let table = |st: Strategy, stats: Option<&MappingStatistics>| {
        build_projection_table(st, &pv, &sv, stats).map_err(|e| e.to_string())
    };
    let ms = table(Strategy::MappingStatistics, Some(&stats))?;
    let mined = table(Strategy::MinEditDistance, None)?;
    let em = table(Strategy::ExactMatch, None)?;
    let name = |id: Option<u32>| {
        id.and_then(|i| pv.token(i))
            .unwrap_or("<unmapped>")
            .to_string()
    };
    let flow = sv.id_of("flow_").unwrap();
    let belo = sv.id_of("belo_").unwrap();
    let got = [
        ("MS flow_", name(ms.map_source(flow)), "flowers"),
        ("MS belo_", name(ms.map_source(belo)), "belongs"),
        ("MinED flow_", name(mined.map_source(flow)), "flown"),
        ("EM flow_", name(em.map_source(flow)), "<unmapped>"),
    ];
    for (what, have, want) in &got {
        ensure(have == want, || {
            format!("{what} -> {have}, expected {want}")
        })?;
    }
    let unk = em.pivot_unk().and_then(|i| pv.token(i)).unwrap_or("none");
    Ok(format!(
        "split words: MS flow_->flowers belo_->belongs, MinED flow_->flown, EM flow_->unknown bucket {unk}"
    ))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut cases = 0;
    while cases < 600 {
        let c = random_align_case(&mut rng, 12, 6);
        if c.pivot.len() > 6 || c.source.len() > 6 {
            continue;
        }
        let map = align_sequences(&c.pivot, &c.source, &c.pv, &c.sv).map_err(|e| e.to_string())?;
        let ps: Vec<&str> = c.pivot.iter().map(|&i| c.pv.surface(i)).collect();
        let ss: Vec<&str> = c.source.iter().map(|&i| c.sv.surface(i)).collect();
        let best = exhaustive(&ps, &ss);
        ensure((map.cost() - best).abs() <= 1e-12, || {
            format!("{ps:?} vs {ss:?}: dp {} exhaustive {best}", map.cost())
        })?;
        cases += 1;
    }
    let tables = split_word_tables()?;
    Ok(format!("{cases} cases equal exhaustive optimum; {tables}"))
}

fn random_source_matrix(rng: &mut ChaCha8Rng, n: usize, v: usize) -> DistributionMatrix {
    let k = rng.gen_range(1..=v.min(6));
    let rows = (0..n).map(|_| common::random_row(rng, v, k)).collect();
    DistributionMatrix::new(rows, v, k).unwrap()
}

fn criterion_6() -> Check {
    const TARGET_ROWS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let strategies = [
        Strategy::ExactMatch,
        Strategy::MinEditDistance,
        Strategy::MappingStatistics,
    ];
    let mut rows = [0usize; 3];
    let mut worst: f64 = 0.0;
    let mut averaged_segments = 0;
    while rows.iter().any(|&r| r < TARGET_ROWS) {
        let c = random_align_case(&mut rng, 40, 16);
        let map = align_sequences(&c.pivot, &c.source, &c.pv, &c.sv).map_err(|e| e.to_string())?;
        let stats = accumulate_statistics(
            &[(&map, &c.pivot[..], &c.source[..])],
            c.pv.len(),
            c.sv.len(),
        )
        .map_err(|e| e.to_string())?;
        let m = random_source_matrix(&mut rng, c.source.len(), c.sv.len());
        for (i, st) in strategies.into_iter().enumerate() {
            let stats = (st == Strategy::MappingStatistics).then_some(&stats);
            let table =
                build_projection_table(st, &c.pv, &c.sv, stats).map_err(|e| e.to_string())?;
            let out = project_distribution(&m, &map, &c.pivot, &c.source, &table)
                .map_err(|e| e.to_string())?;
            for row in out.matrix.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
            rows[i] += out.matrix.num_rows();
        }
        averaged_segments += map
            .segments()
            .iter()
            .filter(|s| s.kind() == SegmentKind::OneToMany)
            .count();
    }
    ensure(worst <= 1e-6, || format!("row sum off by {worst:e}"))?;
    ensure(averaged_segments > 0, || {
        "no weighted-average segments exercised".into()
    })?;
    Ok(format!(
        "rows EM {} MinED {} MS {}, {averaged_segments} weighted-average segments, max |sum-1| {worst:e}",
        rows[0], rows[1], rows[2]
    ))
}

// ---------------------------------------------------------------- training

fn gradient_instance(rng: &mut ChaCha8Rng) -> (ToyLm, SupervisedExample, DistributionMatrix) {
    let v = rng.gen_range(3..8);
    let dims = ToyLmDims::new(v, rng.gen_range(2..5), rng.gen_range(2..6)).unwrap();
    let model = ToyLm::init(dims, rng.gen());
    let n = rng.gen_range(1..5);
    let ex = SupervisedExample::new(
        (0..rng.gen_range(0..3))
            .map(|_| rng.gen_range(0..v as u32))
            .collect(),
        (0..n).map(|_| rng.gen_range(0..v as u32)).collect(),
    )
    .unwrap();
    let k = rng.gen_range(1..=v);
    let rows: Vec<SparseRow> = (0..n).map(|_| common::random_row(rng, v, k)).collect();
    (model, ex, DistributionMatrix::new(rows, v, k).unwrap())
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

fn finite_differences(model: &ToyLm, f: impl Fn(&ToyLm) -> f64) -> Vec<f64> {
    const STEP: f64 = 1e-6;
    let mut m = model.clone();
    (0..model.params().len())
        .map(|i| {
            let x = m.params()[i];
            m.params_mut()[i] = x + STEP;
            let up = f(&m);
            m.params_mut()[i] = x - STEP;
            let down = f(&m);
            m.params_mut()[i] = x;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn criterion_7() -> Check {
    const INSTANCES: usize = 120;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = [0.0f64; 3];
    for _ in 0..INSTANCES {
        let (model, ex, fused) = gradient_instance(&mut rng);
        let lambda = FusionWeight::new(rng.gen_range(0.0..=1.0)).unwrap();
        let sft = sft_loss(&model, &ex).map_err(|e| e.to_string())?.grad;
        let fd_sft = finite_differences(&model, |m| sft_loss(m, &ex).unwrap().loss);
        let fus = fusion_loss(&model, &ex, &fused)
            .map_err(|e| e.to_string())?
            .grad;
        let fd_fus = finite_differences(&model, |m| fusion_loss(m, &ex, &fused).unwrap().loss);
        let comb = combined_objective(&model, &ex, &fused, lambda)
            .map_err(|e| e.to_string())?
            .grad;
        let fd_comb = finite_differences(&model, |m| {
            combined_objective(m, &ex, &fused, lambda).unwrap().combined
        });
        worst[0] = worst[0].max(relative_error(&sft, &fd_sft));
        worst[1] = worst[1].max(relative_error(&fus, &fd_fus));
        worst[2] = worst[2].max(relative_error(&comb, &fd_comb));
    }
    for (name, w) in ["supervised", "fusion", "combined"].iter().zip(worst) {
        ensure(w < 1e-4, || format!("{name}: relative error {w:e}"))?;
    }
    Ok(format!(
        "{INSTANCES} instances per loss, max relative error supervised {:e} fusion {:e} combined {:e}",
        worst[0], worst[1], worst[2]
    ))
}

fn criterion_8() -> Check {
    const K: usize = 4;
    let sc = fusion_scenario(64, 64, 8);
    let dists = |m: &ToyLm, d: &[SupervisedExample]| {
        model_distributions(m, d, K).map_err(|e| e.to_string())
    };
    let train_fused = select_fused_targets(
        &dists(&sc.teacher_a, &sc.train)?,
        &dists(&sc.teacher_b, &sc.train)?,
        &sc.train,
    )
    .map_err(|e| e.to_string())?;
    let held_fused = select_fused_targets(
        &dists(&sc.teacher_a, &sc.heldout)?,
        &dists(&sc.teacher_b, &sc.heldout)?,
        &sc.heldout,
    )
    .map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for lambda in [0.9, 1.0] {
        let start = Instant::now();
        let config = TrainConfig {
            lambda: FusionWeight::new(lambda).unwrap(),
            ..TrainConfig::default()
        };
        let out = train_pairwise_fusion(&sc.pivot, &sc.train, &train_fused.matrices, &config)
            .map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(120), || {
            format!("lambda {lambda} took {elapsed:?}")
        })?;
        let ce = mean_fusion_cross_entropy(&out.model, &sc.heldout, &held_fused.matrices)
            .map_err(|e| e.to_string())?;
        results.push((ce, elapsed));
    }
    let (fused_ce, fused_t) = results[0];
    let (sft_ce, sft_t) = results[1];
    ensure(fused_ce < sft_ce, || {
        format!("held-out cross-entropy lambda 0.9 {fused_ce:.6} is not below lambda 1 {sft_ce:.6}")
    })?;
    Ok(format!(
        "held-out cross-entropy to fused teachers: lambda 0.9 {fused_ce:.6} < lambda 1 {sft_ce:.6} ({} of 64 train instructions from the second teacher; runs {:.2?} and {:.2?})",
        train_fused.source_count(),
        fused_t,
        sft_t
    ))
}

// --------------------------------------------------------------- the CLI

fn run_ok(args: &[String]) -> Result<String, String> {
    let r = fusekit(args);
    if r.code == 0 {
        Ok(r.stdout)
    } else {
        Err(format!(
            "`fusekit {}` exited {}: {}",
            args.join(" "),
            r.code,
            r.stderr.trim()
        ))
    }
}

fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|a| a.to_string()).collect()
}

/// Writes every input artifact the pipeline needs into `dir`.
fn pipeline_inputs(dir: &Path) -> Result<(), String> {
    let lens: Vec<usize> = read_corpus(&fixture("split_words/corpus.jsonl"))
        .iter()
        .map(|(_, q)| q.len())
        .collect();
    random_dump("source-model", &lens, 12, 4, 99)
        .write(dir.join("source.dump"))
        .map_err(|e| e.to_string())?;
    let sc = fusion_scenario(24, 0, 31);
    write_dataset(&dir.join("data.jsonl"), &sc.train);
    let dump = |m: &ToyLm, id: &str, path: &str| -> Result<(), String> {
        let mats = model_distributions(m, &sc.train, 4).map_err(|e| e.to_string())?;
        DistributionDump::new(id, 16, 4, mats)
            .and_then(|d| d.write(dir.join(path)))
            .map_err(|e| e.to_string())
    };
    dump(&sc.teacher_a, "teacher-a", "a.dump")?;
    dump(&sc.teacher_b, "teacher-b", "b.dump")?;
    write_checkpoint(&sc.pivot.to_checkpoint(), dir.join("pivot.ckpt"))
        .map_err(|e| e.to_string())?;
    fs::write(
        dir.join("merge.json"),
        serde_json::json!({"seed": 5, "tau": 20.0}).to_string(),
    )
    .map_err(|e| e.to_string())
}

/// Runs the whole pipeline into `root` with the given worker count.
fn pipeline(inputs: &Path, root: &Path, workers: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let fig = |f: &str| s(&fixture(&format!("split_words/{f}")));
    let input = |f: &str| s(&inputs.join(f));
    let out = |d: &str| s(&root.join(d));
    let w = ["--workers", workers];
    let align = [
        "--corpus".to_string(),
        fig("corpus.jsonl"),
        "--pivot-vocab".into(),
        fig("pivot.vocab"),
        "--source-vocab".into(),
        fig("source.vocab"),
    ];
    let mut runs: Vec<Vec<String>> = Vec::new();
    let mut cmd = strings(&w);
    cmd.extend(strings(&["align-stats", "--out", &out("stats")]));
    cmd.extend(align.iter().cloned());
    runs.push(cmd);
    for (strategy, dir) in [
        ("MS", "proj-ms"),
        ("MinED", "proj-mined"),
        ("EM", "proj-em"),
    ] {
        let mut cmd = strings(&w);
        cmd.extend(strings(&[
            "project",
            "--out",
            &out(dir),
            "--dump",
            &input("source.dump"),
        ]));
        cmd.extend(strings(&["--strategy", strategy]));
        if strategy == "MS" {
            cmd.extend(strings(&["--stats", &s(&root.join("stats/stats.tsv"))]));
        }
        cmd.extend(align.iter().cloned());
        runs.push(cmd);
    }
    for (source, dir) in [("a.dump", "fuse-a"), ("b.dump", "fuse-b")] {
        let mut cmd = strings(&w);
        cmd.extend(strings(&[
            "fuse-train",
            "--out",
            &out(dir),
            "--dataset",
            &input("data.jsonl"),
            "--pivot-checkpoint",
            &input("pivot.ckpt"),
            "--source-dump",
            &input(source),
            "--epochs",
            "10",
        ]));
        runs.push(cmd);
    }
    let mut cmd = strings(&w);
    cmd.extend(strings(&[
        "fuse-train",
        "--out",
        &out("fuse-init"),
        "--dataset",
        &input("data.jsonl"),
        "--source-dump",
        &input("b.dump"),
        "--pivot-dump",
        &input("a.dump"),
        "--vocab-size",
        "16",
        "--init-seed",
        "3",
        "--epochs",
        "10",
    ]));
    runs.push(cmd);
    for method in MergeMethod::ALL {
        let mut cmd = strings(&w);
        cmd.extend(strings(&[
            "merge",
            "--config",
            &input("merge.json"),
            "--out",
            &out(&format!("merge-{}", method.name())),
            "--pivot",
            &input("pivot.ckpt"),
            "--target",
            &s(&root.join("fuse-a/target.ckpt")),
            "--target",
            &s(&root.join("fuse-b/target.ckpt")),
            "--target",
            &s(&root.join("fuse-init/target.ckpt")),
            "--method",
            method.name(),
        ]));
        runs.push(cmd);
    }
    for cmd in &runs {
        run_ok(cmd)?;
    }
    let mut files = Vec::new();
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| e.to_string())?
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    dirs.sort_by_key(|d| d.file_name());
    for d in dirs {
        for (name, bytes) in dir_files(&d.path()) {
            let rel = format!("{}/{name}", d.file_name().to_string_lossy());
            let mut inspect = strings(&w);
            inspect.extend(["inspect".to_string(), s(&d.path().join(&name))]);
            if !name.ends_with(".json") && !name.ends_with(".jsonl") {
                files.push((format!("inspect {rel}"), run_ok(&inspect)?.into_bytes()));
            }
            // The echoed config names this run's own output paths.
            let bytes = if name == "config.json" {
                String::from_utf8_lossy(&bytes)
                    .replace(&s(root), "<run>")
                    .into_bytes()
            } else {
                bytes
            };
            files.push((rel, bytes));
        }
    }
    Ok(files)
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let inputs = dir.path().join("inputs");
    fs::create_dir(&inputs).map_err(|e| e.to_string())?;
    pipeline_inputs(&inputs)?;
    let runs = [
        ("1", "run-a"),
        ("4", "run-b"),
        ("4", "run-c"),
        ("2", "run-d"),
    ];
    let mut results = Vec::new();
    for (workers, name) in runs {
        let root = dir.path().join(name);
        fs::create_dir(&root).map_err(|e| e.to_string())?;
        results.push(pipeline(&inputs, &root, workers)?);
    }
    let base = &results[0];
    for (i, other) in results.iter().enumerate().skip(1) {
        ensure(base.len() == other.len(), || {
            format!("run {i} produced a different file set")
        })?;
        for ((na, a), (nb, b)) in base.iter().zip(other) {
            ensure(na == nb && a == b, || {
                format!(
                    "{na} differs between --workers {} and --workers {}",
                    runs[0].0, runs[i].0
                )
            })?;
        }
    }
    let commands = base
        .iter()
        .filter(|(n, _)| n.ends_with("config.json"))
        .count();
    Ok(format!(
        "{commands} command runs plus inspect on every artifact, {} outputs byte-identical across 4 runs with 1, 4, 4 and 2 workers",
        base.len()
    ))
}

// ----------------------------------------------------------------- driver

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        (
            1,
            "SCE oracle equivalence",
            Some(Duration::from_secs(5)),
            criterion_1,
        ),
        (
            2,
            "SCE invariant suite",
            Some(Duration::from_secs(30)),
            criterion_2,
        ),
        (3, "baseline mergers and defaults", None, criterion_3),
        (4, "SCE/CE/C ablation harness", None, criterion_4),
        (
            5,
            "token alignment",
            Some(Duration::from_secs(60)),
            criterion_5,
        ),
        (6, "projection mass conservation", None, criterion_6),
        (7, "gradient checks", None, criterion_7),
        (8, "end-to-end fusion beats SFT", None, criterion_8),
        (9, "CLI reproducibility", None, criterion_9),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            })
            .and_then(|detail| match limit {
                Some(l) if start.elapsed() > l => {
                    Err(format!("{detail}; exceeded the {l:?} time limit"))
                }
                _ => Ok(detail),
            });
        let elapsed = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 9 criteria failed");
        ExitCode::FAILURE
    }
}
