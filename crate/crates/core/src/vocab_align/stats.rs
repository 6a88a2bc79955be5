//! Corpus-level pivot→source mapping frequencies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AlignError, AlignmentMap};
use crate::canonical::to_canonical_json;

const FORMAT_TAG: &str = "mapping-stats";

/// Sparse `[pivot id][source id] -> count` matrix with per-pivot totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingStatistics {
    pivot_vocab_size: usize,
    source_vocab_size: usize,
    counts: BTreeMap<u32, BTreeMap<u32, u64>>,
    totals: BTreeMap<u32, u64>,
}

#[derive(Serialize, Deserialize)]
struct StatsHeader {
    entries: usize,
    format: String,
    format_version: u32,
    pivot_vocab_size: usize,
    source_vocab_size: usize,
}

impl MappingStatistics {
    pub fn new(pivot_vocab_size: usize, source_vocab_size: usize) -> Self {
        Self {
            pivot_vocab_size,
            source_vocab_size,
            ..Default::default()
        }
    }

    pub fn pivot_vocab_size(&self) -> usize {
        self.pivot_vocab_size
    }

    pub fn source_vocab_size(&self) -> usize {
        self.source_vocab_size
    }

    pub fn add(&mut self, pivot: u32, source: u32, n: u64) {
        if n == 0 {
            return;
        }
        *self
            .counts
            .entry(pivot)
            .or_default()
            .entry(source)
            .or_default() += n;
        *self.totals.entry(pivot).or_default() += n;
    }

    pub fn count(&self, pivot: u32, source: u32) -> u64 {
        self.counts
            .get(&pivot)
            .and_then(|row| row.get(&source))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, pivot: u32) -> u64 {
        self.totals.get(&pivot).copied().unwrap_or(0)
    }

    /// Source counts observed for `pivot`, ascending by source id.
    pub fn row(&self, pivot: u32) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts
            .get(&pivot)
            .into_iter()
            .flat_map(|r| r.iter().map(|(&s, &c)| (s, c)))
    }

    /// All `(pivot, source, count)` entries in ascending `(pivot, source)` order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, u64)> + '_ {
        self.counts
            .iter()
            .flat_map(|(&p, r)| r.iter().map(move |(&s, &c)| (p, s, c)))
    }

    pub fn num_entries(&self) -> usize {
        self.counts.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn merge(&mut self, other: &MappingStatistics) {
        for (p, s, c) in other.entries() {
            self.add(p, s, c);
        }
    }

    /// Adds the pairs of one aligned instruction.
    pub fn observe(
        &mut self,
        map: &AlignmentMap,
        pivot: &[u32],
        source: &[u32],
    ) -> Result<(), AlignError> {
        if map.pivot_len() != pivot.len() || map.source_len() != source.len() {
            return Err(AlignError::InvalidAlignment(format!(
                "map covers {}/{} tokens but sequences have {}/{}",
                map.pivot_len(),
                map.source_len(),
                pivot.len(),
                source.len()
            )));
        }
        for id in pivot {
            if *id as usize >= self.pivot_vocab_size {
                return Err(AlignError::TokenOutOfRange {
                    id: *id,
                    vocab_size: self.pivot_vocab_size,
                });
            }
        }
        for id in source {
            if *id as usize >= self.source_vocab_size {
                return Err(AlignError::TokenOutOfRange {
                    id: *id,
                    vocab_size: self.source_vocab_size,
                });
            }
        }
        // Every segment has a single token on at least one side, so pairing
        // each member with that token gives one count per member.
        for seg in map.segments() {
            for p in &pivot[seg.pivot.clone()] {
                for s in &source[seg.source.clone()] {
                    self.add(*p, *s, 1);
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let header = StatsHeader {
            entries: self.num_entries(),
            format: FORMAT_TAG.into(),
            format_version: 1,
            pivot_vocab_size: self.pivot_vocab_size,
            source_vocab_size: self.source_vocab_size,
        };
        let mut out = to_canonical_json(&header).expect("header serializes");
        out.push('\n');
        for (p, s, c) in self.entries() {
            out.push_str(&format!("{p}\t{s}\t{c}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, AlignError> {
        let bad = |m: String| AlignError::InvalidStatistics(m);
        let mut lines = text.lines();
        let header: StatsHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG || header.format_version != 1 {
            return Err(bad(format!("unexpected format `{}`", header.format)));
        }
        let mut stats = Self::new(header.pivot_vocab_size, header.source_vocab_size);
        let mut last: Option<(u32, u32)> = None;
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed = match fields.as_slice() {
                [p, s, c] => p
                    .parse::<u32>()
                    .ok()
                    .zip(s.parse::<u32>().ok())
                    .zip(c.parse::<u64>().ok()),
                _ => None,
            };
            let ((p, s), c) = parsed.ok_or_else(|| bad(format!("bad entry line {}", i + 2)))?;
            if p as usize >= stats.pivot_vocab_size
                || s as usize >= stats.source_vocab_size
                || c == 0
            {
                return Err(bad(format!("entry out of range on line {}", i + 2)));
            }
            if last.is_some_and(|l| l >= (p, s)) {
                return Err(bad(format!(
                    "entries not strictly ascending at line {}",
                    i + 2
                )));
            }
            last = Some((p, s));
            stats.add(p, s, c);
        }
        if stats.num_entries() != header.entries {
            return Err(bad(format!(
                "header declares {} entries, found {}",
                header.entries,
                stats.num_entries()
            )));
        }
        Ok(stats)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| AlignError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_text(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), AlignError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| AlignError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// One aligned instruction: the map plus both token sequences.
pub type AlignedInstruction<'a> = (&'a AlignmentMap, &'a [u32], &'a [u32]);

/// Accumulates corpus statistics. Instructions are processed in parallel and
/// reduced by integer addition, so the result is independent of order and
/// worker count.
pub fn accumulate_statistics(
    corpus: &[AlignedInstruction<'_>],
    pivot_vocab_size: usize,
    source_vocab_size: usize,
) -> Result<MappingStatistics, AlignError> {
    corpus
        .par_iter()
        .map(|(map, p, s)| {
            let mut local = MappingStatistics::new(pivot_vocab_size, source_vocab_size);
            local.observe(map, p, s)?;
            Ok(local)
        })
        .try_reduce(
            || MappingStatistics::new(pivot_vocab_size, source_vocab_size),
            |mut a, b| {
                a.merge(&b);
                Ok(a)
            },
        )
}
