//! Sequence-dimension alignment of two tokenizations of the same text.
//!
//! The aligner searches all monotone segmentations of the pivot and source
//! token sequences into paired groups where at least one side of every pair
//! is a single token (1-1, 1-n, n-1). A segment costs the normalized
//! Levenshtein distance between the concatenated surfaces of its two sides,
//! so a 1-1 pair costs exactly the token substitution cost and any segment
//! whose two sides spell the same characters costs zero. The minimum-cost
//! segmentation is found by dynamic programming over prefix pairs.

use std::ops::Range;

use serde::Serialize;

use super::{AlignError, Vocabulary};

/// Default bound on the number of tokens on the "many" side of a segment.
pub const DEFAULT_MAX_SPAN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SegmentKind {
    OneToOne,
    /// One pivot token, several source tokens.
    OneToMany,
    /// Several pivot tokens, one source token.
    ManyToOne,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSegment {
    pub pivot: Range<usize>,
    pub source: Range<usize>,
}

impl AlignmentSegment {
    pub fn kind(&self) -> SegmentKind {
        match (self.pivot.len(), self.source.len()) {
            (1, 1) => SegmentKind::OneToOne,
            (1, _) => SegmentKind::OneToMany,
            _ => SegmentKind::ManyToOne,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    segments: Vec<AlignmentSegment>,
    pivot_len: usize,
    source_len: usize,
    cost: f64,
}

impl AlignmentMap {
    /// Builds a map from explicit segments, checking the partition invariants.
    pub fn from_segments(
        segments: Vec<AlignmentSegment>,
        pivot_len: usize,
        source_len: usize,
        cost: f64,
    ) -> Result<Self, AlignError> {
        let (mut p, mut s) = (0, 0);
        for seg in &segments {
            let ok_kind = !seg.pivot.is_empty()
                && !seg.source.is_empty()
                && (seg.pivot.len() == 1 || seg.source.len() == 1);
            if !ok_kind || seg.pivot.start != p || seg.source.start != s {
                return Err(AlignError::InvalidAlignment(format!(
                    "segment {:?}/{:?} breaks the partition at pivot {p}, source {s}",
                    seg.pivot, seg.source
                )));
            }
            p = seg.pivot.end;
            s = seg.source.end;
        }
        if p != pivot_len || s != source_len {
            return Err(AlignError::InvalidAlignment(format!(
                "segments cover {p}/{s} of {pivot_len}/{source_len} tokens"
            )));
        }
        Ok(Self {
            segments,
            pivot_len,
            source_len,
            cost,
        })
    }

    /// One-to-one map over two sequences of equal length.
    pub fn identity(len: usize) -> Self {
        Self {
            segments: (0..len)
                .map(|i| AlignmentSegment {
                    pivot: i..i + 1,
                    source: i..i + 1,
                })
                .collect(),
            pivot_len: len,
            source_len: len,
            cost: 0.0,
        }
    }

    pub fn segments(&self) -> &[AlignmentSegment] {
        &self.segments
    }

    pub fn pivot_len(&self) -> usize {
        self.pivot_len
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Total segment cost found by the aligner.
    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn kind_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.segments {
            c[s.kind() as usize] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AlignConfig {
    /// Largest group on the "many" side of a segment. If no segmentation
    /// fits within the bound the search is repeated without it.
    pub max_span: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            max_span: DEFAULT_MAX_SPAN,
        }
    }
}

/// Levenshtein distance divided by the longer length; 0 for two empty strings.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let longest = la.max(lb);
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

/// Cost of pairing the concatenation of `pivot` surfaces with that of `source`.
pub fn segment_cost(pivot: &[&str], source: &[&str]) -> f64 {
    let p: String = pivot.concat();
    let s: String = source.concat();
    normalized_edit_distance(&p, &s)
}

pub fn align_sequences(
    pivot: &[u32],
    source: &[u32],
    pivot_vocab: &Vocabulary,
    source_vocab: &Vocabulary,
) -> Result<AlignmentMap, AlignError> {
    align_sequences_with(
        pivot,
        source,
        pivot_vocab,
        source_vocab,
        AlignConfig::default(),
    )
}

pub fn align_sequences_with(
    pivot: &[u32],
    source: &[u32],
    pivot_vocab: &Vocabulary,
    source_vocab: &Vocabulary,
    config: AlignConfig,
) -> Result<AlignmentMap, AlignError> {
    if pivot.is_empty() || source.is_empty() {
        return Err(AlignError::EmptySequence);
    }
    pivot_vocab.check_ids(pivot)?;
    source_vocab.check_ids(source)?;
    let ps: Vec<&str> = pivot.iter().map(|&id| pivot_vocab.surface(id)).collect();
    let ss: Vec<&str> = source.iter().map(|&id| source_vocab.surface(id)).collect();
    let pivot_text = ps.concat();
    let source_text = ss.concat();
    if pivot_text != source_text {
        return Err(AlignError::Infeasible {
            pivot_text,
            source_text,
        });
    }
    let span = config.max_span.max(1);
    Ok(segment_dp(&ps, &ss, span)
        .or_else(|| segment_dp(&ps, &ss, usize::MAX))
        .expect("unbounded segmentation always exists for non-empty sequences"))
}

#[derive(Clone, Copy)]
struct Cell {
    cost: f64,
    // predecessor prefix lengths
    from: (usize, usize),
}

fn segment_dp(ps: &[&str], ss: &[&str], max_span: usize) -> Option<AlignmentMap> {
    let (np, ns) = (ps.len(), ss.len());
    let width = ns + 1;
    let mut table: Vec<Option<Cell>> = vec![None; (np + 1) * width];
    table[0] = Some(Cell {
        cost: 0.0,
        from: (0, 0),
    });
    for i in 1..=np {
        for j in 1..=ns {
            let mut best: Option<Cell> = None;
            let mut consider = |pi: usize, pj: usize, seg_cost: f64| {
                if let Some(prev) = table[pi * width + pj] {
                    let c = prev.cost + seg_cost;
                    if best.is_none_or(|b| c < b.cost) {
                        best = Some(Cell {
                            cost: c,
                            from: (pi, pj),
                        });
                    }
                }
            };
            // 1-1
            consider(i - 1, j - 1, normalized_edit_distance(ps[i - 1], ss[j - 1]));
            // 1-n: pivot token i-1 against source tokens j-n..j
            for n in 2..=j.min(max_span) {
                if table[(i - 1) * width + (j - n)].is_some() {
                    consider(i - 1, j - n, segment_cost(&ps[i - 1..i], &ss[j - n..j]));
                }
            }
            // n-1: pivot tokens i-n..i against source token j-1
            for n in 2..=i.min(max_span) {
                if table[(i - n) * width + (j - 1)].is_some() {
                    consider(i - n, j - 1, segment_cost(&ps[i - n..i], &ss[j - 1..j]));
                }
            }
            table[i * width + j] = best;
        }
    }
    let end = table[np * width + ns]?;
    let mut segments = Vec::new();
    let (mut i, mut j) = (np, ns);
    while i > 0 || j > 0 {
        let cell = table[i * width + j].expect("reachable cell on traceback");
        let (pi, pj) = cell.from;
        segments.push(AlignmentSegment {
            pivot: pi..i,
            source: pj..j,
        });
        i = pi;
        j = pj;
    }
    segments.reverse();
    Some(AlignmentMap {
        segments,
        pivot_len: np,
        source_len: ns,
        cost: end.cost,
    })
}
