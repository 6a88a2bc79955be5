//! Linear, Task Arithmetic, TIES and DARE merging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{deltas_of, per_tensor, prepare, MergeError, MergedParams, ParamTensor};
use crate::tensorio::NamedTensorMap;

fn check_rate(name: &'static str, value: f64, upper_inclusive: bool) -> Result<(), MergeError> {
    let ok = value >= 0.0
        && if upper_inclusive {
            value <= 1.0
        } else {
            value < 1.0
        };
    if ok {
        Ok(())
    } else {
        Err(MergeError::InvalidRate {
            name,
            range: if upper_inclusive { "[0, 1]" } else { "[0, 1)" },
            value,
        })
    }
}

/// Elementwise mean of the targets.
pub fn merge_linear(targets: &[NamedTensorMap]) -> Result<MergedParams, MergeError> {
    let ordered = prepare(None, targets)?;
    let k = ordered.len() as f64;
    let tensors = per_tensor(ordered[0], |name, t| {
        let data = (0..t.numel())
            .map(|e| {
                let mut acc = 0.0;
                for m in &ordered {
                    acc += m.get(name).expect("geometry validated").data()[e] as f64;
                }
                acc / k
            })
            .collect();
        ParamTensor {
            shape: t.shape().to_vec(),
            data,
        }
    });
    Ok(MergedParams { tensors })
}

/// `θ + scale · Σ_j δ_j`.
pub fn merge_task_arithmetic(
    pivot: &NamedTensorMap,
    targets: &[NamedTensorMap],
    scale: f64,
) -> Result<MergedParams, MergeError> {
    if !scale.is_finite() {
        return Err(MergeError::InvalidRate {
            name: "scale",
            range: "finite reals",
            value: scale,
        });
    }
    let ordered = prepare(Some(pivot), targets)?;
    let vectors = deltas_of(pivot, &ordered);
    let tensors = per_tensor(pivot, |name, p| {
        let d = vectors.slices(name);
        let data = (0..p.numel())
            .map(|e| {
                let mut acc = 0.0;
                for v in &d {
                    acc += v[e];
                }
                p.data()[e] as f64 + scale * acc
            })
            .collect();
        ParamTensor {
            shape: p.shape().to_vec(),
            data,
        }
    });
    Ok(MergedParams { tensors })
}

/// Zeroes all but the `numel − ⌊trim·numel⌋` largest magnitudes (ties at the
/// threshold kept).
pub(crate) fn trim(d: &[f64], trim_rate: f64) -> Vec<f64> {
    let n = d.len();
    let drop = ((trim_rate * n as f64 + 1e-9).floor() as usize).min(n);
    let keep = n - drop;
    if keep == 0 {
        return vec![0.0; n];
    }
    let mut mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let threshold = mags[keep - 1];
    d.iter()
        .map(|&x| if x.abs() >= threshold { x } else { 0.0 })
        .collect()
}

/// Trim, elect sign by summed value, then average sign-agreeing survivors.
pub fn merge_ties(
    pivot: &NamedTensorMap,
    targets: &[NamedTensorMap],
    trim_rate: f64,
) -> Result<MergedParams, MergeError> {
    check_rate("trim_rate", trim_rate, true)?;
    let ordered = prepare(Some(pivot), targets)?;
    let vectors = deltas_of(pivot, &ordered);
    let tensors = per_tensor(pivot, |name, p| {
        let trimmed: Vec<Vec<f64>> = vectors
            .slices(name)
            .into_iter()
            .map(|d| trim(d, trim_rate))
            .collect();
        let data = (0..p.numel())
            .map(|e| {
                let total: f64 = trimmed.iter().map(|t| t[e]).sum();
                let mut acc = 0.0;
                let mut count = 0usize;
                for t in &trimmed {
                    let x = t[e];
                    if x != 0.0 && (x > 0.0) == (total > 0.0) && total != 0.0 {
                        acc += x;
                        count += 1;
                    }
                }
                let merged = if count == 0 { 0.0 } else { acc / count as f64 };
                p.data()[e] as f64 + merged
            })
            .collect();
        ParamTensor {
            shape: p.shape().to_vec(),
            data,
        }
    });
    Ok(MergedParams { tensors })
}

/// Generator for target `j` (canonical order) and one tensor.
pub fn dare_rng(seed: u64, target: usize, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((target as u64).to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Drop each delta element with probability `drop_rate`, rescale survivors
/// by `1/(1−drop_rate)` and average over targets.
pub fn merge_dare(
    pivot: &NamedTensorMap,
    targets: &[NamedTensorMap],
    drop_rate: f64,
    seed: u64,
) -> Result<MergedParams, MergeError> {
    check_rate("drop_rate", drop_rate, false)?;
    let ordered = prepare(Some(pivot), targets)?;
    let vectors = deltas_of(pivot, &ordered);
    let k = ordered.len() as f64;
    let tensors = per_tensor(pivot, |name, p| {
        let rescale = 1.0 / (1.0 - drop_rate);
        let dropped: Vec<Vec<f64>> = vectors
            .slices(name)
            .into_iter()
            .enumerate()
            .map(|(j, d)| {
                let mut rng = dare_rng(seed, j, name);
                d.iter()
                    .map(|&x| {
                        let u: f64 = rng.gen();
                        if u < drop_rate {
                            0.0
                        } else {
                            x * rescale
                        }
                    })
                    .collect()
            })
            .collect();
        let data = (0..p.numel())
            .map(|e| {
                let mut acc = 0.0;
                for d in &dropped {
                    acc += d[e];
                }
                p.data()[e] as f64 + acc / k
            })
            .collect();
        ParamTensor {
            shape: p.shape().to_vec(),
            data,
        }
    });
    Ok(MergedParams { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::Tensor;

    fn map(data: Vec<f32>) -> NamedTensorMap {
        let mut m = NamedTensorMap::new();
        m.insert("w", Tensor::new(vec![data.len()], data).unwrap());
        m
    }

    fn data(m: &MergedParams) -> Vec<f64> {
        m.get("w").unwrap().data.clone()
    }

    #[test]
    fn linear_mean() {
        let m = merge_linear(&[map(vec![0.0, 2.0]), map(vec![2.0, 0.0])]).unwrap();
        assert_eq!(data(&m), vec![1.0, 1.0]);
        let t = map(vec![0.5, -1.5]);
        assert!(merge_linear(&[t.clone(), t.clone()])
            .unwrap()
            .to_checkpoint()
            .bit_eq(&t));
    }

    #[test]
    fn task_arithmetic_endpoints() {
        let pivot = map(vec![1.0, 1.0]);
        let t = map(vec![3.0, 0.0]);
        let m = merge_task_arithmetic(&pivot, std::slice::from_ref(&t), 0.0).unwrap();
        assert!(m.to_checkpoint().bit_eq(&pivot));
        let m = merge_task_arithmetic(&pivot, std::slice::from_ref(&t), 1.0).unwrap();
        assert!(m.to_checkpoint().bit_eq(&t));
        let m = merge_task_arithmetic(&pivot, &[t.clone(), t], 0.3).unwrap();
        assert!((data(&m)[0] - 2.2).abs() < 1e-12);
    }

    #[test]
    fn trim_keeps_ties() {
        assert_eq!(
            trim(&[1.0, -3.0, 2.0, 0.5, 2.0], 0.4),
            vec![0.0, -3.0, 2.0, 0.0, 2.0]
        );
        assert_eq!(trim(&[1.0, -1.0, 1.0], 0.4), vec![1.0, -1.0, 1.0]);
        assert_eq!(trim(&[1.0, 2.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn ties_equal_targets_and_disagreement() {
        let pivot = map(vec![0.0; 3]);
        let t = map(vec![1.0, -2.0, 0.5]);
        let m = merge_ties(&pivot, &[t.clone(), t.clone()], 0.0).unwrap();
        assert!(m.to_checkpoint().bit_eq(&t));
        let m = merge_ties(
            &pivot,
            &[map(vec![3.0, 0.0, 1.0]), map(vec![-1.0, 0.0, -1.0])],
            0.0,
        )
        .unwrap();
        assert_eq!(data(&m), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn dare_is_seeded_and_reduces_to_mean() {
        let pivot = map(vec![0.0; 4]);
        let ts = [
            map(vec![1.0, 2.0, 3.0, 4.0]),
            map(vec![-1.0, 0.0, 1.0, 2.0]),
        ];
        let a = merge_dare(&pivot, &ts, 0.4, 7).unwrap();
        assert_eq!(a, merge_dare(&pivot, &ts, 0.4, 7).unwrap());
        let plain = merge_dare(&pivot, &ts, 0.0, 7).unwrap();
        assert_eq!(data(&plain), vec![0.0, 1.0, 2.0, 3.0]);
        assert!(merge_dare(&pivot, &ts, 1.0, 7).is_err());
    }
}
