//! Merge report written alongside every merged checkpoint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::MergedParams;
use crate::canonical::to_canonical_json_pretty;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub numel: usize,
    /// Per-target coefficients in canonical target order.
    pub eta: Option<Vec<f64>>,
    pub selected: Option<usize>,
    pub erased: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: String,
    pub targets: usize,
    pub hyperparameters: BTreeMap<String, Value>,
    pub select_applied: bool,
    pub erase_applied: bool,
    pub single_target_bypass: bool,
    pub tensors: BTreeMap<String, TensorReport>,
}

impl MergeReport {
    pub(crate) fn baseline(
        method: &str,
        targets: usize,
        merged: &MergedParams,
        hyper: Vec<(&str, Value)>,
    ) -> Self {
        Self {
            method: method.into(),
            targets,
            hyperparameters: hyper.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            select_applied: false,
            erase_applied: false,
            single_target_bypass: false,
            tensors: merged
                .tensors
                .iter()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        TensorReport {
                            numel: t.numel(),
                            eta: None,
                            selected: None,
                            erased: None,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = to_canonical_json_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `Σ_j η_j` per tensor, for tensors that carry coefficients.
    pub fn eta_sums(&self) -> BTreeMap<String, f64> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| t.eta.as_ref().map(|e| (n.clone(), e.iter().sum())))
            .collect()
    }

    pub fn total_selected(&self) -> Option<usize> {
        self.tensors.values().map(|t| t.selected).sum()
    }

    pub fn total_erased(&self) -> Option<usize> {
        self.tensors.values().map(|t| t.erased).sum()
    }
}
