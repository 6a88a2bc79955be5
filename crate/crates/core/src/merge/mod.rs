//! Parameter-space merging of fine-tuned targets that share a pivot.
//!
//! Every method works per named tensor, in `f64`, on targets placed in a
//! canonical content order so the result does not depend on the order in
//! which targets are supplied. Results are [`MergedParams`] and are rounded
//! to `f32` only when turned into a checkpoint.

mod baselines;
mod report;
mod sce;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::{validate_same_geometry, GeometryError, NamedTensorMap, Tensor};

pub use baselines::{dare_rng, merge_dare, merge_linear, merge_task_arithmetic, merge_ties};
pub use report::{MergeReport, TensorReport};
pub use sce::{
    sce_calculate, sce_erase, sce_merge, sce_select, select_count, Ablation, CoefficientTable,
    ErasedVectors, SelectMask,
};

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_TA_SCALE: f64 = 0.3;
pub const DEFAULT_TRIM_RATE: f64 = 0.4;
pub const DEFAULT_DROP_RATE: f64 = 0.4;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("at least one target is required")]
    NoTargets,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("tau must lie in (0, 100], got {0}")]
    InvalidTau(f64),
    #[error("{name} must lie in {range}, got {value}")]
    InvalidRate {
        name: &'static str,
        range: &'static str,
        value: f64,
    },
}

/// A tensor in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub type ParamMap = BTreeMap<String, ParamTensor>;

pub fn to_param_map(map: &NamedTensorMap) -> ParamMap {
    map.iter()
        .map(|(n, t)| (n.clone(), ParamTensor::from_tensor(t)))
        .collect()
}

/// Merge output kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedParams {
    pub tensors: ParamMap,
}

impl MergedParams {
    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn to_checkpoint(&self) -> NamedTensorMap {
        self.tensors
            .iter()
            .map(|(n, t)| {
                let data = t.data.iter().map(|&x| x as f32).collect();
                (
                    n.clone(),
                    Tensor::new(t.shape.clone(), data).expect("shape carried from inputs"),
                )
            })
            .collect()
    }

    /// Largest absolute elementwise difference; `inf` on differing geometry.
    pub fn max_abs_diff(&self, other: &ParamMap) -> f64 {
        if self.tensors.len() != other.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (n, t) in &self.tensors {
            let Some(o) = other.get(n) else {
                return f64::INFINITY;
            };
            if o.shape != t.shape {
                return f64::INFINITY;
            }
            for (a, b) in t.data.iter().zip(&o.data) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Per-target deltas `δ_j = φ_j − θ`, in canonical target order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionVectorSet {
    pub deltas: Vec<ParamMap>,
}

impl FusionVectorSet {
    pub fn num_targets(&self) -> usize {
        self.deltas.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.deltas
            .first()
            .map(|d| d.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub(crate) fn slices(&self, name: &str) -> Vec<&[f64]> {
        self.deltas
            .iter()
            .map(|d| d[name].data.as_slice())
            .collect()
    }
}

/// Orders targets by content (tensors in name order, elements by `f32`
/// total order) and returns the permutation of input indices.
pub fn canonical_order(targets: &[NamedTensorMap]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..targets.len()).collect();
    idx.sort_by(|&a, &b| compare_maps(&targets[a], &targets[b]).then(a.cmp(&b)));
    idx
}

fn compare_maps(a: &NamedTensorMap, b: &NamedTensorMap) -> Ordering {
    for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
        let o = na.cmp(nb).then_with(|| {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        });
        if o.is_ne() {
            return o;
        }
    }
    Ordering::Equal
}

/// Validates geometry and returns references to the targets in canonical
/// order.
pub(crate) fn prepare<'a>(
    pivot: Option<&NamedTensorMap>,
    targets: &'a [NamedTensorMap],
) -> Result<Vec<&'a NamedTensorMap>, MergeError> {
    if targets.is_empty() {
        return Err(MergeError::NoTargets);
    }
    let all: Vec<&NamedTensorMap> = pivot.into_iter().chain(targets.iter()).collect();
    validate_same_geometry(&all)?;
    Ok(canonical_order(targets)
        .into_iter()
        .map(|i| &targets[i])
        .collect())
}

pub fn compute_fusion_vectors(
    pivot: &NamedTensorMap,
    targets: &[NamedTensorMap],
) -> Result<FusionVectorSet, MergeError> {
    let ordered = prepare(Some(pivot), targets)?;
    Ok(deltas_of(pivot, &ordered))
}

pub(crate) fn deltas_of(pivot: &NamedTensorMap, ordered: &[&NamedTensorMap]) -> FusionVectorSet {
    let deltas = ordered
        .iter()
        .map(|t| {
            pivot
                .iter()
                .map(|(name, p)| {
                    let data = t
                        .get(name)
                        .expect("geometry validated")
                        .data()
                        .iter()
                        .zip(p.data())
                        .map(|(&x, &y)| x as f64 - y as f64)
                        .collect();
                    (
                        name.clone(),
                        ParamTensor {
                            shape: p.shape().to_vec(),
                            data,
                        },
                    )
                })
                .collect()
        })
        .collect();
    FusionVectorSet { deltas }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMethod {
    #[serde(rename = "sce")]
    Sce,
    #[serde(rename = "sce-ce")]
    SceCe,
    #[serde(rename = "sce-c")]
    SceC,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "ta")]
    TaskArithmetic,
    #[serde(rename = "ties")]
    Ties,
    #[serde(rename = "dare")]
    Dare,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 7] = [
        MergeMethod::Sce,
        MergeMethod::SceCe,
        MergeMethod::SceC,
        MergeMethod::Linear,
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::Dare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Sce => "sce",
            MergeMethod::SceCe => "sce-ce",
            MergeMethod::SceC => "sce-c",
            MergeMethod::Linear => "linear",
            MergeMethod::TaskArithmetic => "ta",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        }
    }
}

impl FromStr for MergeMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown merge method `{s}`"))
    }
}

/// Hyperparameters for every method; each method reads only its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeSettings {
    pub tau: f64,
    pub scale: f64,
    pub trim_rate: f64,
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            scale: DEFAULT_TA_SCALE,
            trim_rate: DEFAULT_TRIM_RATE,
            drop_rate: DEFAULT_DROP_RATE,
            seed: 0,
        }
    }
}

pub fn run_merge(
    method: MergeMethod,
    pivot: &NamedTensorMap,
    targets: &[NamedTensorMap],
    settings: &MergeSettings,
) -> Result<(MergedParams, MergeReport), MergeError> {
    let s = settings;
    let baseline = |merged: MergedParams, hyper: Vec<(&str, serde_json::Value)>| {
        let report = MergeReport::baseline(method.name(), targets.len(), &merged, hyper);
        (merged, report)
    };
    Ok(match method {
        MergeMethod::Sce => sce_merge(pivot, targets, s.tau, Ablation::Full)?,
        MergeMethod::SceCe => sce_merge(pivot, targets, s.tau, Ablation::CalculateErase)?,
        MergeMethod::SceC => sce_merge(pivot, targets, s.tau, Ablation::CalculateOnly)?,
        MergeMethod::Linear => {
            prepare(Some(pivot), targets)?;
            baseline(merge_linear(targets)?, vec![])
        }
        MergeMethod::TaskArithmetic => baseline(
            merge_task_arithmetic(pivot, targets, s.scale)?,
            vec![("scale", s.scale.into())],
        ),
        MergeMethod::Ties => baseline(
            merge_ties(pivot, targets, s.trim_rate)?,
            vec![("trim_rate", s.trim_rate.into())],
        ),
        MergeMethod::Dare => baseline(
            merge_dare(pivot, targets, s.drop_rate, s.seed)?,
            vec![("drop_rate", s.drop_rate.into()), ("seed", s.seed.into())],
        ),
    })
}

/// Maps each tensor name of `pivot` through `f`, in parallel.
pub(crate) fn per_tensor<T, F>(pivot: &NamedTensorMap, f: F) -> BTreeMap<String, T>
where
    T: Send,
    F: Fn(&str, &Tensor) -> T + Sync,
{
    use rayon::prelude::*;
    let entries: Vec<(&String, &Tensor)> = pivot.iter().collect();
    entries
        .into_par_iter()
        .map(|(n, t)| (n.clone(), f(n, t)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn map1(name: &str, data: Vec<f32>) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        m.insert(name, Tensor::new(vec![data.len()], data).unwrap());
        m
    }

    #[test]
    fn fusion_vectors_are_differences() {
        let pivot = map1("w", vec![1.0, 2.0, 3.0]);
        let t = map1("w", vec![1.5, 2.0, 2.0]);
        let v = compute_fusion_vectors(&pivot, &[t, pivot.clone()]).unwrap();
        assert_eq!(v.num_targets(), 2);
        let all: Vec<&[f64]> = v.slices("w");
        assert!(all.contains(&[0.5, 0.0, -1.0].as_slice()));
        assert!(all.contains(&[0.0, 0.0, 0.0].as_slice()));
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let pivot = map1("w", vec![1.0, 2.0]);
        let t = map1("v", vec![1.0, 2.0]);
        assert!(matches!(
            compute_fusion_vectors(&pivot, &[t]),
            Err(MergeError::Geometry(_))
        ));
        assert!(matches!(
            compute_fusion_vectors(&pivot, &[]),
            Err(MergeError::NoTargets)
        ));
    }

    #[test]
    fn canonical_order_is_content_based() {
        let a = map1("w", vec![2.0]);
        let b = map1("w", vec![1.0]);
        assert_eq!(canonical_order(&[a.clone(), b.clone()]), vec![1, 0]);
        assert_eq!(canonical_order(&[b, a]), vec![0, 1]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in MergeMethod::ALL {
            assert_eq!(m.name().parse::<MergeMethod>().unwrap(), m);
        }
        assert!("fisher".parse::<MergeMethod>().is_err());
    }

    #[test]
    fn shipped_defaults() {
        let s = MergeSettings::default();
        assert_eq!(
            (s.tau, s.scale, s.trim_rate, s.drop_rate),
            (10.0, 0.3, 0.4, 0.4)
        );
    }
}
