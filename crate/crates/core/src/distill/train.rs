//! Full-batch gradient descent for pairwise fusion and plain SFT.
//!
//! Per-example gradients are computed in parallel over fixed-size chunks and
//! summed chunk by chunk in dataset order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{check_fused, fuse_mince, objective, FusedSide};
use super::model::{SupervisedExample, ToyLm};
use super::{FusionError, FusionWeight};
use crate::distribution::DistributionMatrix;

pub const DEFAULT_LEARNING_RATE: f64 = 0.5;
pub const DEFAULT_EPOCHS: usize = 50;
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: FusionWeight,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: FusionWeight::DEFAULT,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), FusionError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FusionError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Dataset-mean losses at the start of an epoch, before its update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub sft_loss: f64,
    pub fusion_loss: f64,
    pub combined_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyLm,
    pub trace: Vec<EpochLoss>,
}

/// Per-instruction MinCE winners, owned.
#[derive(Debug, Clone)]
pub struct FusedTargets {
    pub matrices: Vec<DistributionMatrix>,
    pub sides: Vec<FusedSide>,
}

impl FusedTargets {
    pub fn source_count(&self) -> usize {
        self.sides
            .iter()
            .filter(|s| **s == FusedSide::Source)
            .count()
    }
}

pub fn select_fused_targets(
    pivot: &[DistributionMatrix],
    source: &[DistributionMatrix],
    dataset: &[SupervisedExample],
) -> Result<FusedTargets, FusionError> {
    if pivot.len() != dataset.len() || source.len() != dataset.len() {
        return Err(FusionError::Shape(format!(
            "{} examples but {} pivot and {} source matrices",
            dataset.len(),
            pivot.len(),
            source.len()
        )));
    }
    let mut matrices = Vec::with_capacity(dataset.len());
    let mut sides = Vec::with_capacity(dataset.len());
    for (i, ((p, s), ex)) in pivot.iter().zip(source).zip(dataset).enumerate() {
        let pick = fuse_mince(p, s, ex)
            .map_err(|e| FusionError::Shape(format!("instruction {i}: {e}")))?;
        matrices.push(pick.matrix.clone());
        sides.push(pick.side);
    }
    Ok(FusedTargets { matrices, sides })
}

/// Fine-tunes a copy of `init` on `λ·L_sft + (1−λ)·L_fusion`.
pub fn train_pairwise_fusion(
    init: &ToyLm,
    dataset: &[SupervisedExample],
    fused: &[DistributionMatrix],
    config: &TrainConfig,
) -> Result<TrainOutcome, FusionError> {
    config.validate()?;
    if fused.len() != dataset.len() {
        return Err(FusionError::Shape(format!(
            "{} examples but {} fused matrices",
            dataset.len(),
            fused.len()
        )));
    }
    for (i, (ex, f)) in dataset.iter().zip(fused).enumerate() {
        ex.check_vocab(init.dims().vocab)?;
        check_fused(init, ex, f)
            .map_err(|e| FusionError::Shape(format!("instruction {i}: {e}")))?;
    }
    let l = config.lambda.value();
    descend(
        init,
        dataset,
        config.learning_rate,
        config.epochs,
        |m, i| {
            let (sft, fusion, grad) = objective(m, &dataset[i], Some(&fused[i]), l, 1.0 - l)?;
            Ok((sft, fusion, grad))
        },
    )
    .map(|(model, raw)| TrainOutcome {
        model,
        trace: raw
            .into_iter()
            .map(|(epoch, sft, fusion)| EpochLoss {
                epoch,
                sft_loss: sft,
                fusion_loss: fusion,
                combined_loss: super::combined_loss(config.lambda, sft, fusion),
            })
            .collect(),
    })
}

/// Plain supervised fine-tuning; returns the model and per-epoch SFT loss.
pub fn train_sft(
    init: &ToyLm,
    dataset: &[SupervisedExample],
    learning_rate: f64,
    epochs: usize,
) -> Result<(ToyLm, Vec<f64>), FusionError> {
    TrainConfig {
        lambda: FusionWeight::DEFAULT,
        learning_rate,
        epochs,
    }
    .validate()?;
    for ex in dataset {
        ex.check_vocab(init.dims().vocab)?;
    }
    let (model, raw) = descend(init, dataset, learning_rate, epochs, |m, i| {
        objective(m, &dataset[i], None, 1.0, 0.0)
    })?;
    Ok((model, raw.into_iter().map(|(_, sft, _)| sft).collect()))
}

type Objective<'a> = dyn Fn(&ToyLm, usize) -> Result<(f64, f64, Vec<f64>), FusionError> + Sync + 'a;

#[allow(clippy::type_complexity)]
fn descend<F>(
    init: &ToyLm,
    dataset: &[SupervisedExample],
    lr: f64,
    epochs: usize,
    f: F,
) -> Result<(ToyLm, Vec<(usize, f64, f64)>), FusionError>
where
    F: Fn(&ToyLm, usize) -> Result<(f64, f64, Vec<f64>), FusionError> + Sync,
{
    let f: &Objective = &f;
    let mut model = init.clone();
    let mut trace = Vec::with_capacity(epochs);
    if dataset.is_empty() {
        return Ok((model, trace));
    }
    let m = dataset.len() as f64;
    for epoch in 0..epochs {
        let (sft, fusion, grad) = dataset_sum(&model, dataset.len(), f)?;
        let (sft, fusion) = (sft / m, fusion / m);
        if !(sft.is_finite() && fusion.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
            return Err(FusionError::Diverged { epoch });
        }
        trace.push((epoch, sft, fusion));
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= lr * (g / m);
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(FusionError::Diverged { epoch });
        }
    }
    Ok((model, trace))
}

fn dataset_sum(
    model: &ToyLm,
    len: usize,
    f: &Objective,
) -> Result<(f64, f64, Vec<f64>), FusionError> {
    let idx: Vec<usize> = (0..len).collect();
    let partials = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = (0.0, 0.0, vec![0.0; model.params().len()]);
            for &i in chunk {
                let (s, fu, g) = f(model, i)?;
                acc.0 += s;
                acc.1 += fu;
                for (a, b) in acc.2.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, FusionError>>()?;
    let mut total = (0.0, 0.0, vec![0.0; model.params().len()]);
    for (s, fu, g) in partials {
        total.0 += s;
        total.1 += fu;
        for (a, b) in total.2.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(total)
}

/// Teacher-forced top-`k` matrices of `model` over every example.
pub fn model_distributions(
    model: &ToyLm,
    dataset: &[SupervisedExample],
    k: usize,
) -> Result<Vec<DistributionMatrix>, FusionError> {
    dataset
        .par_iter()
        .map(|ex| model.predict_matrix(ex, k))
        .collect()
}

/// Mean over examples of `H(target || model)` using the model's dense rows.
pub fn mean_fusion_cross_entropy(
    model: &ToyLm,
    dataset: &[SupervisedExample],
    targets: &[DistributionMatrix],
) -> Result<f64, FusionError> {
    if targets.len() != dataset.len() {
        return Err(FusionError::Shape(format!(
            "{} examples but {} target matrices",
            dataset.len(),
            targets.len()
        )));
    }
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (ex, t) in dataset.iter().zip(targets) {
        total += objective(model, ex, Some(t), 0.0, 0.0)?.1;
    }
    Ok(total / dataset.len() as f64)
}
