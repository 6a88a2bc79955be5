//! Supervised, fusion and combined objectives with analytic gradients.
//!
//! All losses are means over response positions. Given the model's row
//! `p = softmax(z)` the logit gradients are
//!
//! ```text
//! supervised:  (p − onehot(gold)) / N
//! fusion:      (p · Σ_v P[v] − P) / N
//! ```

use super::model::{SupervisedExample, ToyLm};
use super::{FusionError, FusionWeight};
use crate::distribution::{gold_cross_entropy, DistributionMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub sft: f64,
    pub fusion: f64,
    pub combined: f64,
    pub grad: Vec<f64>,
}

/// `λ·sft + (1−λ)·fusion`.
pub fn combined_loss(lambda: FusionWeight, sft: f64, fusion: f64) -> f64 {
    let l = lambda.value();
    l * sft + (1.0 - l) * fusion
}

pub fn sft_loss(model: &ToyLm, example: &SupervisedExample) -> Result<LossGrad, FusionError> {
    let (sft, _, grad) = objective(model, example, None, 1.0, 0.0)?;
    Ok(LossGrad { loss: sft, grad })
}

/// Cross-entropy `H(fused || model)` against the model's dense rows.
pub fn fusion_loss(
    model: &ToyLm,
    example: &SupervisedExample,
    fused: &DistributionMatrix,
) -> Result<LossGrad, FusionError> {
    let (_, fusion, grad) = objective(model, example, Some(fused), 0.0, 1.0)?;
    Ok(LossGrad { loss: fusion, grad })
}

/// Both losses and the gradient of their `λ`-mix. With `λ = 1` the fusion
/// term contributes no gradient arithmetic at all.
pub fn combined_objective(
    model: &ToyLm,
    example: &SupervisedExample,
    fused: &DistributionMatrix,
    lambda: FusionWeight,
) -> Result<CombinedLoss, FusionError> {
    let l = lambda.value();
    let (sft, fusion, grad) = objective(model, example, Some(fused), l, 1.0 - l)?;
    Ok(CombinedLoss {
        sft,
        fusion,
        combined: combined_loss(lambda, sft, fusion),
        grad,
    })
}

pub(crate) fn check_fused(
    model: &ToyLm,
    example: &SupervisedExample,
    fused: &DistributionMatrix,
) -> Result<(), FusionError> {
    if fused.num_rows() != example.response.len() || fused.vocab_size() != model.dims().vocab {
        return Err(FusionError::Shape(format!(
            "fused matrix is {}x{}, expected {}x{}",
            fused.num_rows(),
            fused.vocab_size(),
            example.response.len(),
            model.dims().vocab
        )));
    }
    Ok(())
}

/// Returns `(sft, fusion, grad)`; a zero weight skips that term's gradient.
pub(crate) fn objective(
    model: &ToyLm,
    example: &SupervisedExample,
    fused: Option<&DistributionMatrix>,
    w_sft: f64,
    w_fusion: f64,
) -> Result<(f64, f64, Vec<f64>), FusionError> {
    let v = model.dims().vocab;
    example.check_vocab(v)?;
    if let Some(f) = fused {
        check_fused(model, example, f)?;
    }
    let n = example.response.len() as f64;
    let mut grad = vec![0.0; model.params().len()];
    let mut sft = 0.0;
    let mut fusion = 0.0;
    let mut dz = vec![0.0; v];
    for (t, ctx) in example.contexts().into_iter().enumerate() {
        let act = model.forward(ctx);
        let gold = example.response[t] as usize;
        let probs: Vec<f64> = act.log_probs.iter().map(|lp| lp.exp()).collect();
        dz.iter_mut().for_each(|x| *x = 0.0);
        sft -= act.log_probs[gold];
        if w_sft != 0.0 {
            for (i, (d, p)) in dz.iter_mut().zip(&probs).enumerate() {
                let y = if i == gold { 1.0 } else { 0.0 };
                *d += w_sft * ((p - y) / n);
            }
        }
        if let Some(f) = fused {
            let row = &f.rows()[t];
            let mass = row.sum();
            for (id, pv) in row.iter() {
                fusion -= pv * act.log_probs[id as usize];
            }
            if w_fusion != 0.0 {
                let mut target = vec![0.0; v];
                for (id, pv) in row.iter() {
                    target[id as usize] = pv;
                }
                for ((d, p), q) in dz.iter_mut().zip(&probs).zip(&target) {
                    *d += w_fusion * ((p * mass - q) / n);
                }
            }
        }
        model.backward(ctx, &act, &dz, &mut grad);
    }
    Ok((sft / n, fusion / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusedSide {
    Pivot,
    Source,
}

impl FusedSide {
    pub fn name(self) -> &'static str {
        match self {
            FusedSide::Pivot => "pivot",
            FusedSide::Source => "source",
        }
    }
}

/// Outcome of [`fuse_mince`]; `matrix` borrows the chosen input.
#[derive(Debug, Clone, Copy)]
pub struct MinCe<'a> {
    pub side: FusedSide,
    pub matrix: &'a DistributionMatrix,
    pub pivot_ce: f64,
    pub source_ce: f64,
}

/// Picks the matrix with the lower cross-entropy against the gold response,
/// preferring the pivot on ties.
pub fn fuse_mince<'a>(
    pivot: &'a DistributionMatrix,
    source: &'a DistributionMatrix,
    gold: &SupervisedExample,
) -> Result<MinCe<'a>, FusionError> {
    if pivot.num_rows() != source.num_rows() || pivot.vocab_size() != source.vocab_size() {
        return Err(FusionError::Shape(format!(
            "pivot matrix is {}x{}, source matrix is {}x{}",
            pivot.num_rows(),
            pivot.vocab_size(),
            source.num_rows(),
            source.vocab_size()
        )));
    }
    let pivot_ce = gold_cross_entropy(pivot, &gold.response)?;
    let source_ce = gold_cross_entropy(source, &gold.response)?;
    let (side, matrix) = if source_ce < pivot_ce {
        (FusedSide::Source, source)
    } else {
        (FusedSide::Pivot, pivot)
    };
    Ok(MinCe {
        side,
        matrix,
        pivot_ce,
        source_ce,
    })
}
