//! Distribution-dimension alignment: relabeling source-vocabulary rows into
//! the pivot vocabulary.
//!
//! Three strategies build a [`ProjectionTable`]:
//!
//! * exact match: a source token maps to the pivot token with the same text;
//! * minimum edit distance: a source token maps to the pivot token at the
//!   smallest character edit distance;
//! * mapping statistics: every pivot token is paired with the source token it
//!   was most often aligned to in the corpus. Source ids are then relabeled
//!   to the pivot token that claims them with the highest count.
//!
//! Token text is compared after rewriting each vocabulary's space marker to a
//! shared marker. Special tokens never match; mass on unmatched ids goes to
//! the pivot unknown token, or is dropped and the row renormalized when the
//! pivot vocabulary has none. All ties break toward the lower token id.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use super::{AlignError, AlignmentMap, MappingStatistics, SegmentKind, Vocabulary};
use crate::distribution::{DistributionMatrix, SparseRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Strategy {
    #[serde(rename = "EM")]
    ExactMatch,
    #[serde(rename = "MinED")]
    MinEditDistance,
    #[serde(rename = "MS")]
    MappingStatistics,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::ExactMatch => "EM",
            Strategy::MinEditDistance => "MinED",
            Strategy::MappingStatistics => "MS",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(Strategy::ExactMatch),
            "mined" => Ok(Strategy::MinEditDistance),
            "ms" => Ok(Strategy::MappingStatistics),
            _ => Err(format!("unknown strategy `{s}` (expected EM, MinED or MS)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionTable {
    strategy: Strategy,
    source_to_pivot: Vec<Option<u32>>,
    /// MS only: per pivot token, its most frequent source token, or the
    /// nearest source token by edit distance when never observed.
    pivot_to_source: Vec<Option<u32>>,
    /// MS only: whether `pivot_to_source[p]` came from observed counts.
    observed: Vec<bool>,
    stats: Option<MappingStatistics>,
    pivot_vocab_size: usize,
    pivot_unk: Option<u32>,
}

impl ProjectionTable {
    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Pivot id that source id `s` is relabeled to, if any.
    pub fn map_source(&self, s: u32) -> Option<u32> {
        self.source_to_pivot.get(s as usize).copied().flatten()
    }

    /// MS pairing of pivot id `p`. `None` for other strategies.
    pub fn pivot_partner(&self, p: u32) -> Option<u32> {
        self.pivot_to_source.get(p as usize).copied().flatten()
    }

    /// Whether the MS pairing of `p` is backed by observed frequencies rather
    /// than the edit-distance fallback.
    pub fn is_observed(&self, p: u32) -> bool {
        self.observed.get(p as usize).copied().unwrap_or(false)
    }

    pub fn statistics(&self) -> Option<&MappingStatistics> {
        self.stats.as_ref()
    }

    pub fn source_vocab_size(&self) -> usize {
        self.source_to_pivot.len()
    }

    pub fn pivot_vocab_size(&self) -> usize {
        self.pivot_vocab_size
    }

    pub fn pivot_unk(&self) -> Option<u32> {
        self.pivot_unk
    }

    pub fn mapped_source_count(&self) -> usize {
        self.source_to_pivot.iter().filter(|e| e.is_some()).count()
    }
}

/// Character-level Levenshtein distance between normalized token strings.
pub fn token_edit_distance(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// Index of the candidate with minimal edit distance to `query`; ties go to
/// the earliest candidate.
fn nearest(query: &str, candidates: &[(u32, &str)]) -> Option<u32> {
    let mut best: Option<(usize, u32)> = None;
    for &(id, text) in candidates {
        // Cheap lower bound before the quadratic distance.
        let lower = query.chars().count().abs_diff(text.chars().count());
        if best.is_some_and(|(d, _)| lower >= d) {
            continue;
        }
        let d = token_edit_distance(query, text);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, id));
            if d == 0 {
                break;
            }
        }
    }
    best.map(|(_, id)| id)
}

fn matchable(v: &Vocabulary) -> Vec<(u32, &str)> {
    (0..v.len() as u32)
        .filter(|&id| !v.is_special(id))
        .map(|id| (id, v.normalized(id)))
        .collect()
}

pub fn build_projection_table(
    strategy: Strategy,
    pivot_vocab: &Vocabulary,
    source_vocab: &Vocabulary,
    stats: Option<&MappingStatistics>,
) -> Result<ProjectionTable, AlignError> {
    let base = |source_to_pivot| ProjectionTable {
        strategy,
        source_to_pivot,
        pivot_to_source: Vec::new(),
        observed: Vec::new(),
        stats: None,
        pivot_vocab_size: pivot_vocab.len(),
        pivot_unk: pivot_vocab.unk_id(),
    };
    match strategy {
        Strategy::ExactMatch => {
            if stats.is_some() {
                return Err(AlignError::StrategyMismatch(
                    "statistics are only used by MS".into(),
                ));
            }
            let mut by_text: HashMap<&str, u32> = HashMap::new();
            for (id, text) in matchable(pivot_vocab) {
                by_text.entry(text).or_insert(id);
            }
            let table = (0..source_vocab.len() as u32)
                .map(|s| {
                    if source_vocab.is_special(s) {
                        None
                    } else {
                        by_text.get(source_vocab.normalized(s)).copied()
                    }
                })
                .collect();
            Ok(base(table))
        }
        Strategy::MinEditDistance => {
            if stats.is_some() {
                return Err(AlignError::StrategyMismatch(
                    "statistics are only used by MS".into(),
                ));
            }
            let candidates = matchable(pivot_vocab);
            let table = (0..source_vocab.len() as u32)
                .into_par_iter()
                .map(|s| {
                    if source_vocab.is_special(s) {
                        None
                    } else {
                        nearest(source_vocab.normalized(s), &candidates)
                    }
                })
                .collect();
            Ok(base(table))
        }
        Strategy::MappingStatistics => {
            let stats = stats.ok_or_else(|| {
                AlignError::StrategyMismatch("MS requires mapping statistics".into())
            })?;
            if stats.pivot_vocab_size() != pivot_vocab.len()
                || stats.source_vocab_size() != source_vocab.len()
            {
                return Err(AlignError::StrategyMismatch(format!(
                    "statistics are for vocab sizes {}/{}, vocabularies are {}/{}",
                    stats.pivot_vocab_size(),
                    stats.source_vocab_size(),
                    pivot_vocab.len(),
                    source_vocab.len()
                )));
            }
            build_ms(pivot_vocab, source_vocab, stats).map(|(p2s, observed, s2p)| ProjectionTable {
                pivot_to_source: p2s,
                observed,
                stats: Some(stats.clone()),
                ..base(s2p)
            })
        }
    }
}

type MsTables = (Vec<Option<u32>>, Vec<bool>, Vec<Option<u32>>);

fn build_ms(
    pivot_vocab: &Vocabulary,
    source_vocab: &Vocabulary,
    stats: &MappingStatistics,
) -> Result<MsTables, AlignError> {
    let source_candidates = matchable(source_vocab);
    let pairs: Vec<(Option<u32>, bool)> = (0..pivot_vocab.len() as u32)
        .into_par_iter()
        .map(|p| {
            if pivot_vocab.is_special(p) {
                return (None, false);
            }
            // Row is ascending by source id, so strict `>` keeps the lowest id.
            let mut best: Option<(u64, u32)> = None;
            for (s, c) in stats.row(p) {
                if source_vocab.is_special(s) {
                    continue;
                }
                if best.is_none_or(|(bc, _)| c > bc) {
                    best = Some((c, s));
                }
            }
            match best {
                Some((_, s)) => (Some(s), true),
                None => (
                    nearest(pivot_vocab.normalized(p), &source_candidates),
                    false,
                ),
            }
        })
        .collect();
    let (pivot_to_source, observed): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();

    // Claims on each source id: (count, pivot id); keep the highest count,
    // then the lowest pivot id.
    let mut claim: Vec<Option<(u64, u32)>> = vec![None; source_vocab.len()];
    for (p, partner) in pivot_to_source.iter().enumerate() {
        if let Some(s) = *partner {
            let c = stats.count(p as u32, s);
            let slot = &mut claim[s as usize];
            if slot.is_none_or(|(bc, _)| c > bc) {
                *slot = Some((c, p as u32));
            }
        }
    }
    // Observed source ids that no pivot token claims fall back to the pivot
    // token they were most often aligned with.
    let mut column_best: Vec<Option<(u64, u32)>> = vec![None; source_vocab.len()];
    for (p, s, c) in stats.entries() {
        if pivot_vocab.is_special(p) {
            continue;
        }
        let slot = &mut column_best[s as usize];
        if slot.is_none_or(|(bc, bp)| c > bc || (c == bc && p < bp)) {
            *slot = Some((c, p));
        }
    }
    let source_to_pivot = (0..source_vocab.len())
        .map(|s| {
            if source_vocab.is_special(s as u32) {
                return None;
            }
            claim[s].or(column_best[s]).map(|(_, p)| p)
        })
        .collect();
    Ok((pivot_to_source, observed, source_to_pivot))
}

/// Result of projecting one instruction's matrix.
#[derive(Debug, Clone)]
pub struct Projected {
    pub matrix: DistributionMatrix,
    /// Total probability mass (summed over rows) that had no table entry.
    pub unmatched_mass: f64,
}

/// Probability mass accumulated for one output id.
#[derive(Clone, Copy)]
enum Mass {
    /// A single untouched log-probability.
    Log(f64),
    Prob(f64),
}

impl Mass {
    fn prob(self) -> f64 {
        match self {
            Mass::Log(lp) => lp.exp(),
            Mass::Prob(p) => p,
        }
    }

    fn log(self) -> f64 {
        match self {
            Mass::Log(lp) => lp,
            Mass::Prob(p) => p.ln(),
        }
    }
}

/// Relabels one source-space row. Returns the pivot-space row and the mass
/// that had no table entry.
fn relabel(
    entries: impl Iterator<Item = (u32, Mass)>,
    table: &ProjectionTable,
    k: usize,
    position: usize,
) -> Result<(SparseRow, f64), AlignError> {
    let mut out: Vec<(u32, Mass)> = Vec::new();
    let mut index: HashMap<u32, usize> = HashMap::new();
    let mut push = |out: &mut Vec<(u32, Mass)>, id: u32, m: Mass| match index.get(&id) {
        Some(&i) => out[i].1 = Mass::Prob(out[i].1.prob() + m.prob()),
        None => {
            index.insert(id, out.len());
            out.push((id, m));
        }
    };
    let mut unmatched = 0.0;
    for (s, m) in entries {
        match table.map_source(s) {
            Some(p) => push(&mut out, p, m),
            None => {
                unmatched += m.prob();
                if let Some(unk) = table.pivot_unk {
                    push(&mut out, unk, m);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(AlignError::Projection(format!(
            "position {position}: no mass maps into the pivot vocabulary and it has no unknown token"
        )));
    }
    let row = SparseRow::from_log_probs(out.into_iter().map(|(id, m)| (id, m.log())).collect())
        .map_err(|e| AlignError::Projection(format!("position {position}: {e}")))?;
    Ok((row.normalized().truncated(k), unmatched))
}

/// Projects a source-space matrix onto the pivot token sequence.
///
/// * 1-1 segments relabel the source row.
/// * 1-n segments (one pivot token, several source tokens): under MS the
///   member rows are averaged with weights given by how often the pivot token
///   was aligned to each member's token; other strategies use the first
///   member's row.
/// * n-1 segments (several pivot tokens, one source token) give every pivot
///   position the relabeled source row.
pub fn project_distribution(
    source_matrix: &DistributionMatrix,
    map: &AlignmentMap,
    pivot_tokens: &[u32],
    source_tokens: &[u32],
    table: &ProjectionTable,
) -> Result<Projected, AlignError> {
    if source_matrix.num_rows() != map.source_len() || source_tokens.len() != map.source_len() {
        return Err(AlignError::Projection(format!(
            "{} source rows and {} source tokens for an alignment over {} source positions",
            source_matrix.num_rows(),
            source_tokens.len(),
            map.source_len()
        )));
    }
    if pivot_tokens.len() != map.pivot_len() {
        return Err(AlignError::Projection(format!(
            "{} pivot tokens for an alignment over {} pivot positions",
            pivot_tokens.len(),
            map.pivot_len()
        )));
    }
    if source_matrix.vocab_size() != table.source_vocab_size() {
        return Err(AlignError::Projection(format!(
            "matrix vocabulary {} does not match table source vocabulary {}",
            source_matrix.vocab_size(),
            table.source_vocab_size()
        )));
    }
    for (i, row) in source_matrix.rows().iter().enumerate() {
        if !row.is_stochastic() {
            return Err(AlignError::Projection(format!(
                "source row {i} sums to {}",
                row.sum()
            )));
        }
    }
    let k = source_matrix.k();
    let rows = source_matrix.rows();
    let mut out = Vec::with_capacity(map.pivot_len());
    let mut unmatched_mass = 0.0;
    for seg in map.segments() {
        let first = seg.source.start;
        let (row, lost) = match (seg.kind(), table.strategy) {
            (SegmentKind::OneToMany, Strategy::MappingStatistics) => {
                let p = pivot_tokens[seg.pivot.start];
                let merged = weighted_average(
                    seg.source.clone().map(|i| &rows[i]),
                    seg.source.clone().map(|i| source_tokens[i]),
                    p,
                    table.stats.as_ref().expect("MS table carries statistics"),
                );
                relabel(merged.into_iter(), table, k, seg.pivot.start)?
            }
            _ => relabel(
                rows[first]
                    .ids()
                    .iter()
                    .zip(rows[first].log_probs())
                    .map(|(&id, &lp)| (id, Mass::Log(lp))),
                table,
                k,
                seg.pivot.start,
            )?,
        };
        for _ in seg.pivot.clone() {
            unmatched_mass += lost;
            out.push(row.clone());
        }
    }
    let matrix = DistributionMatrix::new(out, table.pivot_vocab_size, k)
        .map_err(|e| AlignError::Projection(e.to_string()))?;
    Ok(Projected {
        matrix,
        unmatched_mass,
    })
}

/// Frequency-weighted average of several source rows. Weights are
/// `count(pivot, token of member)`; uniform when all counts are zero.
fn weighted_average<'a>(
    rows: impl Iterator<Item = &'a SparseRow>,
    tokens: impl Iterator<Item = u32>,
    pivot: u32,
    stats: &MappingStatistics,
) -> Vec<(u32, Mass)> {
    let rows: Vec<&SparseRow> = rows.collect();
    let counts: Vec<f64> = tokens.map(|s| stats.count(pivot, s) as f64).collect();
    let total: f64 = counts.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / rows.len() as f64; rows.len()]
    };
    let mut order: Vec<u32> = Vec::new();
    let mut acc: HashMap<u32, f64> = HashMap::new();
    for (row, w) in rows.iter().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        for (id, p) in row.iter() {
            let slot = acc.entry(id).or_insert_with(|| {
                order.push(id);
                0.0
            });
            *slot += w * p;
        }
    }
    order
        .into_iter()
        .map(|id| (id, Mass::Prob(acc[&id])))
        .collect()
}
