//! Desk-scale knowledge fusion of language models.
//!
//! The pipeline has three stages:
//!
//! 1. [`vocab_align`]: align two tokenizations of the same responses, collect
//!    token mapping statistics and project a source model's top-k
//!    distributions into the pivot vocabulary.
//! 2. [`distill`]: pick, per instruction, the pivot or projected source
//!    distribution with the lower cross-entropy against the gold response
//!    and fine-tune a copy of the pivot toward it alongside the usual
//!    supervised objective.
//! 3. [`merge`]: combine the fine-tuned targets in parameter space with
//!    select/calculate/erase merging or one of the Linear, Task Arithmetic,
//!    TIES and DARE baselines.
//!
//! Models are exchanged as [`tensorio`] checkpoints and distributions as
//! [`dump`] files.

pub mod canonical;
pub mod distill;
pub mod distribution;
pub mod dump;
pub mod merge;
pub mod tensorio;
pub mod vocab_align;

pub use distribution::{DistributionMatrix, SparseRow};
pub use tensorio::{NamedTensorMap, Tensor};
