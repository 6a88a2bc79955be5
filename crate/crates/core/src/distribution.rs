//! Top-k sparse token distribution matrices.
//!
//! Rows keep log-probabilities so that values read from a dump are carried
//! through untouched operations without a lossy exp/ln round trip.

use std::collections::HashSet;

use thiserror::Error;

/// Row sums must lie within this distance of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
/// Probability floor used when a cross-entropy target has support where the
/// prediction row has none.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// A sparse probability row: distinct token ids with positive probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    ids: Vec<u32>,
    log_probs: Vec<f64>,
}

impl SparseRow {
    /// Builds a row from `(id, log-probability)` pairs, in the given order.
    pub fn from_log_probs(entries: Vec<(u32, f64)>) -> Result<Self, String> {
        let mut seen = HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut log_probs = Vec::with_capacity(entries.len());
        for (id, lp) in entries {
            if !lp.is_finite() {
                return Err(format!("token {id} has non-finite log-probability {lp}"));
            }
            if lp > ROW_SUM_TOLERANCE {
                return Err(format!("token {id} has probability above 1"));
            }
            if !seen.insert(id) {
                return Err(format!("duplicate token {id}"));
            }
            ids.push(id);
            log_probs.push(lp);
        }
        if ids.is_empty() {
            return Err("row is empty".into());
        }
        Ok(Self { ids, log_probs })
    }

    /// Builds a row from `(id, probability)` pairs; zero entries are dropped.
    pub fn from_probs(entries: Vec<(u32, f64)>) -> Result<Self, String> {
        if let Some((id, p)) = entries.iter().find(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(format!("token {id} has invalid probability {p}"));
        }
        Self::from_log_probs(
            entries
                .into_iter()
                .filter(|(_, p)| *p > 0.0)
                .map(|(id, p)| (id, p.ln()))
                .collect(),
        )
    }

    pub fn one_hot(id: u32) -> Self {
        Self {
            ids: vec![id],
            log_probs: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// `(id, probability)` pairs in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.ids
            .iter()
            .zip(&self.log_probs)
            .map(|(&id, &lp)| (id, lp.exp()))
    }

    pub fn prob(&self, id: u32) -> f64 {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map_or(0.0, |i| self.log_probs[i].exp())
    }

    pub fn log_prob(&self, id: u32) -> Option<f64> {
        self.ids
            .iter()
            .position(|&x| x == id)
            .map(|i| self.log_probs[i])
    }

    pub fn sum(&self) -> f64 {
        self.log_probs.iter().map(|lp| lp.exp()).sum()
    }

    pub fn is_stochastic(&self) -> bool {
        (self.sum() - 1.0).abs() <= ROW_SUM_TOLERANCE
    }

    /// Rescales to unit mass. Rows already within tolerance are left as-is.
    pub fn normalized(self) -> Self {
        let total = self.sum();
        if (total - 1.0).abs() <= ROW_SUM_TOLERANCE {
            return self;
        }
        let shift = total.ln();
        Self {
            ids: self.ids,
            log_probs: self.log_probs.into_iter().map(|lp| lp - shift).collect(),
        }
    }

    /// Keeps the `k` most probable entries (ties by lower id), renormalizing
    /// if anything was dropped.
    pub fn truncated(self, k: usize) -> Self {
        if self.len() <= k {
            return self;
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.log_probs[b]
                .total_cmp(&self.log_probs[a])
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        order.truncate(k);
        let ids: Vec<u32> = order.iter().map(|&i| self.ids[i]).collect();
        let log_probs: Vec<f64> = order.iter().map(|&i| self.log_probs[i]).collect();
        let total: f64 = log_probs.iter().map(|lp| lp.exp()).sum();
        let shift = total.ln();
        Self {
            ids,
            log_probs: log_probs.into_iter().map(|lp| lp - shift).collect(),
        }
    }

    /// Entropy `-Σ p ln p` of the stored entries.
    pub fn entropy(&self) -> f64 {
        self.log_probs.iter().map(|&lp| -lp.exp() * lp).sum()
    }
}

/// An `N x V` distribution matrix with top-k sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMatrix {
    rows: Vec<SparseRow>,
    vocab_size: usize,
    k: usize,
}

impl DistributionMatrix {
    pub fn new(rows: Vec<SparseRow>, vocab_size: usize, k: usize) -> Result<Self, DistError> {
        if k == 0 {
            return Err(DistError::Shape("k must be at least 1".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            let bad = |reason: String| DistError::BadRow { row: i, reason };
            if row.len() > k {
                return Err(bad(format!("{} entries exceed k = {k}", row.len())));
            }
            if let Some(&id) = row.ids.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(bad(format!("token {id} out of range for V = {vocab_size}")));
            }
            if !row.is_stochastic() {
                return Err(bad(format!("sums to {} instead of 1", row.sum())));
            }
        }
        Ok(Self {
            rows,
            vocab_size,
            k,
        })
    }

    /// Builds a matrix of one-hot rows, e.g. the gold response.
    pub fn one_hot(ids: &[u32], vocab_size: usize, k: usize) -> Result<Self, DistError> {
        Self::new(
            ids.iter().map(|&id| SparseRow::one_hot(id)).collect(),
            vocab_size,
            k,
        )
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Mean row entropy.
    pub fn mean_entropy(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(SparseRow::entropy).sum::<f64>() / self.rows.len() as f64
    }
}

/// Mean over rows of `-Σ_{v ∈ supp P_t} P_t[v] ln Q_t[v]`, with missing `Q`
/// mass floored at [`PROB_FLOOR`].
pub fn matrix_cross_entropy(
    p: &DistributionMatrix,
    q: &DistributionMatrix,
) -> Result<f64, DistError> {
    if p.num_rows() != q.num_rows() || p.vocab_size != q.vocab_size {
        return Err(DistError::Shape(format!(
            "P is {}x{} but Q is {}x{}",
            p.num_rows(),
            p.vocab_size,
            q.num_rows(),
            q.vocab_size
        )));
    }
    if p.rows.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = p
        .rows
        .iter()
        .zip(&q.rows)
        .map(|(pr, qr)| {
            pr.iter()
                .map(|(id, prob)| {
                    let lq = qr.log_prob(id).unwrap_or(f64::NEG_INFINITY);
                    -prob * lq.max(PROB_FLOOR.ln())
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / p.num_rows() as f64)
}

/// Cross-entropy of a matrix against the gold one-hot response,
/// `-(1/N) Σ_t ln P_t[gold_t]`, floored like [`matrix_cross_entropy`].
pub fn gold_cross_entropy(p: &DistributionMatrix, gold: &[u32]) -> Result<f64, DistError> {
    if p.num_rows() != gold.len() {
        return Err(DistError::Shape(format!(
            "{} rows for a {}-token response",
            p.num_rows(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = p
        .rows
        .iter()
        .zip(gold)
        .map(|(row, &g)| {
            -row.log_prob(g)
                .unwrap_or(f64::NEG_INFINITY)
                .max(PROB_FLOOR.ln())
        })
        .sum();
    Ok(total / gold.len() as f64)
}
