//! Teacher distribution dump files.
//!
//! ```text
//! {canonical JSON header}\n
//! per instruction:
//!     u32 LE  number of positions N
//!     N * k records of (u32 LE token id, f32 LE log-probability)
//! ```
//!
//! Rows with fewer than `k` entries are padded with id `u32::MAX` and
//! log-probability `-inf`. Rows whose mass differs from 1 by more than the
//! row tolerance (e.g. top-k truncations of a full softmax) are renormalized
//! on load; rows already within tolerance are kept bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json;
use crate::distribution::{DistError, DistributionMatrix, SparseRow};

pub const PAD_ID: u32 = u32::MAX;
const FORMAT_TAG: &str = "distribution-dump";

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dump header: {0}")]
    Header(String),
    #[error("instruction {instruction}: {reason}")]
    Instruction { instruction: usize, reason: String },
    #[error("dump truncated in instruction {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last instruction")]
    TrailingBytes(usize),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DumpHeader {
    pub format: String,
    pub format_version: u32,
    pub instructions: usize,
    pub k: usize,
    pub model_id: String,
    pub vocab_size: usize,
}

/// A model's distribution matrices for every instruction of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionDump {
    pub model_id: String,
    pub vocab_size: usize,
    pub k: usize,
    pub matrices: Vec<DistributionMatrix>,
}

impl DistributionDump {
    pub fn new(
        model_id: impl Into<String>,
        vocab_size: usize,
        k: usize,
        matrices: Vec<DistributionMatrix>,
    ) -> Result<Self, DumpError> {
        for (i, m) in matrices.iter().enumerate() {
            if m.vocab_size() != vocab_size || m.k() != k {
                return Err(DumpError::Instruction {
                    instruction: i,
                    reason: format!(
                        "matrix is V={} k={}, dump is V={vocab_size} k={k}",
                        m.vocab_size(),
                        m.k()
                    ),
                });
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            vocab_size,
            k,
            matrices,
        })
    }

    pub fn header(&self) -> DumpHeader {
        DumpHeader {
            format: FORMAT_TAG.into(),
            format_version: 1,
            instructions: self.matrices.len(),
            k: self.k,
            model_id: self.model_id.clone(),
            vocab_size: self.vocab_size,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = to_canonical_json(&self.header())
            .expect("header serializes")
            .into_bytes();
        out.push(b'\n');
        for m in &self.matrices {
            out.extend_from_slice(&(m.num_rows() as u32).to_le_bytes());
            for row in m.rows() {
                for (&id, &lp) in row.ids().iter().zip(row.log_probs()) {
                    out.extend_from_slice(&id.to_le_bytes());
                    out.extend_from_slice(&(lp as f32).to_le_bytes());
                }
                for _ in row.len()..self.k {
                    out.extend_from_slice(&PAD_ID.to_le_bytes());
                    out.extend_from_slice(&f32::NEG_INFINITY.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DumpError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DumpError::Header("missing header line".into()))?;
        let header = parse_header(&bytes[..nl])?;
        let mut pos = nl + 1;
        let mut matrices = Vec::with_capacity(header.instructions);
        for inst in 0..header.instructions {
            let n = read_u32(bytes, &mut pos).ok_or(DumpError::Truncated(inst))? as usize;
            let need = n
                .checked_mul(header.k * 8)
                .ok_or(DumpError::Truncated(inst))?;
            if bytes.len() - pos < need {
                return Err(DumpError::Truncated(inst));
            }
            let mut rows = Vec::with_capacity(n);
            for t in 0..n {
                let mut entries = Vec::with_capacity(header.k);
                let mut padded = false;
                for _ in 0..header.k {
                    let id = read_u32(bytes, &mut pos).expect("length checked");
                    let lp = f32::from_bits(read_u32(bytes, &mut pos).expect("length checked"));
                    if id == PAD_ID {
                        padded = true;
                        continue;
                    }
                    if padded {
                        return Err(DumpError::Instruction {
                            instruction: inst,
                            reason: format!("position {t}: entry after padding"),
                        });
                    }
                    entries.push((id, lp as f64));
                }
                let row = SparseRow::from_log_probs(entries)
                    .map_err(|reason| DumpError::Instruction {
                        instruction: inst,
                        reason: format!("position {t}: {reason}"),
                    })?
                    .normalized();
                rows.push(row);
            }
            matrices.push(
                DistributionMatrix::new(rows, header.vocab_size, header.k).map_err(|e| {
                    DumpError::Instruction {
                        instruction: inst,
                        reason: e.to_string(),
                    }
                })?,
            );
        }
        if pos != bytes.len() {
            return Err(DumpError::TrailingBytes(bytes.len() - pos));
        }
        Ok(Self {
            model_id: header.model_id,
            vocab_size: header.vocab_size,
            k: header.k,
            matrices,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DumpError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| DumpError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DumpError> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|source| DumpError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn parse_header(line: &[u8]) -> Result<DumpHeader, DumpError> {
    let header: DumpHeader =
        serde_json::from_slice(line).map_err(|e| DumpError::Header(e.to_string()))?;
    if header.format != FORMAT_TAG || header.format_version != 1 {
        return Err(DumpError::Header(format!(
            "not a version-1 dump (format `{}`)",
            header.format
        )));
    }
    if header.k == 0 || header.vocab_size == 0 {
        return Err(DumpError::Header(
            "k and vocab_size must be positive".into(),
        ));
    }
    Ok(header)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let b = bytes.get(*pos..*pos + 4)?;
    *pos += 4;
    Some(u32::from_le_bytes(b.try_into().unwrap()))
}
