//! Select, calculate, erase.
//!
//! For each tensor `m` with deltas `δ_j` over `K` targets:
//!
//! ```text
//! select     keep the top ⌈τ%·numel⌉ elements by variance across j (ties kept)
//! calculate  η_j = Σ δ̂_j² / Σ_j' Σ δ̂_j'²          (uniform when all zero)
//! erase      zero δ̂_j[e] whose sign differs from sign(Σ_j δ̂_j[e])
//! merge      Φ = θ + Σ_j η_j δ′_j
//! ```

use std::collections::BTreeMap;

use serde_json::Value;

use super::report::{MergeReport, TensorReport};
use super::{
    deltas_of, per_tensor, prepare, FusionVectorSet, MergeError, MergedParams, ParamTensor,
};
use crate::tensorio::NamedTensorMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Select, calculate and erase.
    Full,
    /// Skip selection (all-true mask).
    CalculateErase,
    /// Skip selection and erasure.
    CalculateOnly,
}

impl Ablation {
    pub fn method_name(self) -> &'static str {
        match self {
            Ablation::Full => "sce",
            Ablation::CalculateErase => "sce-ce",
            Ablation::CalculateOnly => "sce-c",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectMask {
    pub tau: f64,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl SelectMask {
    pub fn selected(&self, name: &str) -> Option<usize> {
        self.masks
            .get(name)
            .map(|m| m.iter().filter(|&&b| b).count())
    }
}

/// `η_{j,m}` indexed by tensor name, then canonical target index.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub eta: BTreeMap<String, Vec<f64>>,
}

impl CoefficientTable {
    pub fn get(&self, target: usize, name: &str) -> Option<f64> {
        self.eta.get(name).and_then(|e| e.get(target).copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErasedVectors {
    pub vectors: FusionVectorSet,
    /// Nonzero entries zeroed per tensor, summed over targets.
    pub erased: BTreeMap<String, usize>,
}

pub(crate) fn check_tau(tau: f64) -> Result<(), MergeError> {
    if tau > 0.0 && tau <= 100.0 {
        Ok(())
    } else {
        Err(MergeError::InvalidTau(tau))
    }
}

/// Number of elements the top-`τ%` selection keeps before ties.
pub fn select_count(tau: f64, numel: usize) -> usize {
    let c = (tau * numel as f64 / 100.0 - 1e-9).ceil();
    (c.max(1.0) as usize).min(numel)
}

pub(crate) fn variance_mask(deltas: &[&[f64]], tau: f64) -> Vec<bool> {
    let n = deltas.first().map_or(0, |d| d.len());
    if n == 0 {
        return Vec::new();
    }
    let k = deltas.len() as f64;
    let var: Vec<f64> = (0..n)
        .map(|e| {
            let mean = deltas.iter().map(|d| d[e]).sum::<f64>() / k;
            deltas.iter().map(|d| (d[e] - mean).powi(2)).sum::<f64>() / k
        })
        .collect();
    let mut sorted = var.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[select_count(tau, n) - 1];
    var.iter().map(|&v| v >= threshold).collect()
}

pub(crate) fn coefficients(deltas: &[&[f64]]) -> Vec<f64> {
    let energy: Vec<f64> = deltas
        .iter()
        .map(|d| d.iter().map(|x| x * x).sum())
        .collect();
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        vec![1.0 / deltas.len() as f64; deltas.len()]
    } else {
        energy.iter().map(|e| e / total).collect()
    }
}

pub(crate) fn erase_minority(deltas: &[&[f64]]) -> (Vec<Vec<f64>>, usize) {
    let n = deltas.first().map_or(0, |d| d.len());
    let mut out: Vec<Vec<f64>> = deltas.iter().map(|d| d.to_vec()).collect();
    let mut erased = 0;
    for e in 0..n {
        let s = sign(deltas.iter().map(|d| d[e]).sum());
        for d in &mut out {
            if d[e] != 0.0 && sign(d[e]) != s {
                d[e] = 0.0;
                erased += 1;
            }
        }
    }
    (out, erased)
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn apply_mask(d: &[f64], mask: &[bool]) -> Vec<f64> {
    d.iter()
        .zip(mask)
        .map(|(&x, &m)| if m { x } else { 0.0 })
        .collect()
}

fn map_vectors(
    vectors: &FusionVectorSet,
    mut f: impl FnMut(&str, &[&[f64]]) -> Vec<Vec<f64>>,
) -> FusionVectorSet {
    let mut deltas: Vec<super::ParamMap> = vec![BTreeMap::new(); vectors.num_targets()];
    for name in vectors.names() {
        let shape = vectors.deltas[0][&name].shape.clone();
        for (j, data) in f(&name, &vectors.slices(&name)).into_iter().enumerate() {
            deltas[j].insert(
                name.clone(),
                ParamTensor {
                    shape: shape.clone(),
                    data,
                },
            );
        }
    }
    FusionVectorSet { deltas }
}

pub fn sce_select(
    vectors: &FusionVectorSet,
    tau: f64,
) -> Result<(FusionVectorSet, SelectMask), MergeError> {
    check_tau(tau)?;
    let mut masks = BTreeMap::new();
    let masked = map_vectors(vectors, |name, d| {
        let mask = variance_mask(d, tau);
        let out = d.iter().map(|x| apply_mask(x, &mask)).collect();
        masks.insert(name.to_string(), mask);
        out
    });
    Ok((masked, SelectMask { tau, masks }))
}

pub fn sce_calculate(masked: &FusionVectorSet) -> CoefficientTable {
    CoefficientTable {
        eta: masked
            .names()
            .into_iter()
            .map(|n| {
                let c = coefficients(&masked.slices(&n));
                (n, c)
            })
            .collect(),
    }
}

pub fn sce_erase(masked: &FusionVectorSet) -> ErasedVectors {
    let mut erased = BTreeMap::new();
    let vectors = map_vectors(masked, |name, d| {
        let (out, count) = erase_minority(d);
        erased.insert(name.to_string(), count);
        out
    });
    ErasedVectors { vectors, erased }
}

/// Full SCE merge or one of its ablations. A single target is returned
/// unchanged.
pub fn sce_merge(
    pivot: &NamedTensorMap,
    targets: &[NamedTensorMap],
    tau: f64,
    ablation: Ablation,
) -> Result<(MergedParams, MergeReport), MergeError> {
    check_tau(tau)?;
    let ordered = prepare(Some(pivot), targets)?;
    let k = ordered.len();
    let select = ablation == Ablation::Full;
    let erase = ablation != Ablation::CalculateOnly;
    let mut hyper = BTreeMap::new();
    hyper.insert("tau".to_string(), Value::from(tau));
    let mut report = MergeReport {
        method: ablation.method_name().into(),
        targets: k,
        hyperparameters: hyper,
        select_applied: select && k > 1,
        erase_applied: erase && k > 1,
        single_target_bypass: k == 1,
        tensors: BTreeMap::new(),
    };

    if k == 1 {
        let tensors = super::to_param_map(ordered[0]);
        for (n, t) in &tensors {
            report.tensors.insert(
                n.clone(),
                TensorReport {
                    numel: t.numel(),
                    eta: Some(vec![1.0]),
                    selected: None,
                    erased: None,
                },
            );
        }
        return Ok((MergedParams { tensors }, report));
    }

    let vectors = deltas_of(pivot, &ordered);
    let results = per_tensor(pivot, |name, p| {
        let d = vectors.slices(name);
        let n = p.numel();
        let mask = if select {
            variance_mask(&d, tau)
        } else {
            vec![true; n]
        };
        let masked: Vec<Vec<f64>> = d.iter().map(|x| apply_mask(x, &mask)).collect();
        let masked_refs: Vec<&[f64]> = masked.iter().map(Vec::as_slice).collect();
        let eta = coefficients(&masked_refs);
        let (fused, erased) = if erase {
            let (v, c) = erase_minority(&masked_refs);
            (v, Some(c))
        } else {
            (masked.clone(), None)
        };
        let data: Vec<f64> = (0..n)
            .map(|e| {
                let mut acc = 0.0;
                for (j, v) in fused.iter().enumerate() {
                    acc += eta[j] * v[e];
                }
                p.data()[e] as f64 + acc
            })
            .collect();
        let tr = TensorReport {
            numel: n,
            eta: Some(eta),
            selected: select
                .then(|| mask.iter().filter(|&&b| b).count())
                .or((erase).then_some(n)),
            erased,
        };
        (
            ParamTensor {
                shape: p.shape().to_vec(),
                data,
            },
            tr,
        )
    });
    let mut tensors = BTreeMap::new();
    for (name, (t, tr)) in results {
        report.tensors.insert(name.clone(), tr);
        tensors.insert(name, t);
    }
    Ok((MergedParams { tensors }, report))
}
