//! Cross-tokenizer token alignment.
//!
//! [`align_sequences`] pairs up two tokenizations of one response,
//! [`accumulate_statistics`] counts pivot/source token pairings over a corpus,
//! and [`project_distribution`] moves a source model's distribution matrix
//! into the pivot vocabulary using one of three [`Strategy`] tables.

mod projection;
mod sequence;
mod stats;
mod vocab;

use thiserror::Error;

pub use projection::{
    build_projection_table, project_distribution, token_edit_distance, Projected, ProjectionTable,
    Strategy,
};
pub use sequence::{
    align_sequences, align_sequences_with, normalized_edit_distance, segment_cost, AlignConfig,
    AlignmentMap, AlignmentSegment, SegmentKind, DEFAULT_MAX_SPAN,
};
pub use stats::{accumulate_statistics, AlignedInstruction, MappingStatistics};
pub use vocab::{Vocabulary, DEFAULT_SPACE_MARKER};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid statistics file: {0}")]
    InvalidStatistics(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("cannot align an empty token sequence")]
    EmptySequence,
    #[error(
        "tokenizations detokenize differently: pivot {pivot_text:?} vs source {source_text:?}"
    )]
    Infeasible {
        pivot_text: String,
        source_text: String,
    },
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("strategy/statistics mismatch: {0}")]
    StrategyMismatch(String),
    #[error("projection failed: {0}")]
    Projection(String),
}
