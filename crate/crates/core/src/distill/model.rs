//! A neural bigram language model small enough for exact gradient checks.
//!
//! ```text
//! x = E[prev]                 (d)
//! a = x · W_h + b_h           (h)
//! z = tanh(a) · W_o + b_o     (V)
//! p = softmax(z)
//! ```
//!
//! Parameters live in one flat `f64` buffer in the order
//! embedding, hidden.weight, hidden.bias, output.weight, output.bias, so
//! gradients and optimizer updates are plain slice arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FusionError;
use crate::distribution::{DistributionMatrix, SparseRow};
use crate::tensorio::{NamedTensorMap, Tensor};

pub const EMBEDDING: &str = "embedding";
pub const HIDDEN_WEIGHT: &str = "hidden.weight";
pub const HIDDEN_BIAS: &str = "hidden.bias";
pub const OUTPUT_WEIGHT: &str = "output.weight";
pub const OUTPUT_BIAS: &str = "output.bias";

/// Context token used before the first response token when the instruction
/// is empty.
pub const EMPTY_CONTEXT: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyLmDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub embedding: usize,
    pub hidden_weight: usize,
    pub hidden_bias: usize,
    pub output_weight: usize,
    pub output_bias: usize,
    pub total: usize,
}

impl ToyLmDims {
    pub fn new(vocab: usize, embed: usize, hidden: usize) -> Result<Self, FusionError> {
        if vocab == 0 || embed == 0 || hidden == 0 {
            return Err(FusionError::InvalidModel(format!(
                "dimensions must be positive, got V={vocab} d={embed} h={hidden}"
            )));
        }
        Ok(Self {
            vocab,
            embed,
            hidden,
        })
    }

    pub(crate) fn layout(&self) -> Layout {
        let (v, d, h) = (self.vocab, self.embed, self.hidden);
        let embedding = 0;
        let hidden_weight = embedding + v * d;
        let hidden_bias = hidden_weight + d * h;
        let output_weight = hidden_bias + h;
        let output_bias = output_weight + h * v;
        Layout {
            embedding,
            hidden_weight,
            hidden_bias,
            output_weight,
            output_bias,
            total: output_bias + v,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

/// A supervised pair: instruction tokens and a non-empty gold response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisedExample {
    pub instruction: Vec<u32>,
    pub response: Vec<u32>,
}

impl SupervisedExample {
    pub fn new(instruction: Vec<u32>, response: Vec<u32>) -> Result<Self, FusionError> {
        if response.is_empty() {
            return Err(FusionError::InvalidExample("empty response".into()));
        }
        Ok(Self {
            instruction,
            response,
        })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<(), FusionError> {
        match self
            .instruction
            .iter()
            .chain(&self.response)
            .find(|&&id| id as usize >= vocab)
        {
            Some(&id) => Err(FusionError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Context token for each response position: the preceding token, with
    /// the last instruction token standing in before the first one.
    pub fn contexts(&self) -> Vec<u32> {
        let first = self.instruction.last().copied().unwrap_or(EMPTY_CONTEXT);
        std::iter::once(first)
            .chain(self.response[..self.response.len() - 1].iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    dims: ToyLmDims,
    params: Vec<f64>,
}

/// Forward activations kept for the backward pass.
pub(crate) struct Activations {
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ToyLm {
    pub fn zeros(dims: ToyLmDims) -> Self {
        Self {
            dims,
            params: vec![0.0; dims.num_params()],
        }
    }

    /// Uniform init in `±1/sqrt(fan_in)` for weights, zero biases.
    pub fn init(dims: ToyLmDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(dims);
        let l = dims.layout();
        let mut fill = |range: std::ops::Range<usize>, scale: f64, params: &mut [f64]| {
            for p in &mut params[range] {
                *p = rng.gen_range(-scale..scale);
            }
        };
        fill(l.embedding..l.hidden_weight, 1.0, &mut m.params);
        fill(
            l.hidden_weight..l.hidden_bias,
            1.0 / (dims.embed as f64).sqrt(),
            &mut m.params,
        );
        fill(
            l.output_weight..l.output_bias,
            1.0 / (dims.hidden as f64).sqrt(),
            &mut m.params,
        );
        m
    }

    pub fn from_params(dims: ToyLmDims, params: Vec<f64>) -> Result<Self, FusionError> {
        if params.len() != dims.num_params() {
            return Err(FusionError::InvalidModel(format!(
                "expected {} parameters, got {}",
                dims.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FusionError::InvalidModel("non-finite parameter".into()));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> ToyLmDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn forward(&self, ctx: u32) -> Activations {
        let ToyLmDims {
            vocab: v,
            embed: d,
            hidden: h,
        } = self.dims;
        let l = self.dims.layout();
        let p = &self.params;
        let x = &p[l.embedding + ctx as usize * d..l.embedding + (ctx as usize + 1) * d];
        let mut hidden = p[l.hidden_bias..l.hidden_bias + h].to_vec();
        for (i, xi) in x.iter().enumerate() {
            let row = &p[l.hidden_weight + i * h..l.hidden_weight + (i + 1) * h];
            for (a, w) in hidden.iter_mut().zip(row) {
                *a += xi * w;
            }
        }
        for a in &mut hidden {
            *a = a.tanh();
        }
        let mut logits = p[l.output_bias..l.output_bias + v].to_vec();
        for (j, hj) in hidden.iter().enumerate() {
            let row = &p[l.output_weight + j * v..l.output_weight + (j + 1) * v];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += hj * w;
            }
        }
        Activations {
            hidden,
            log_probs: log_softmax(&logits),
        }
    }

    /// Accumulates into `grad` the parameter gradient for one position given
    /// the gradient `dz` of the loss w.r.t. that position's logits.
    pub(crate) fn backward(&self, ctx: u32, act: &Activations, dz: &[f64], grad: &mut [f64]) {
        let ToyLmDims {
            vocab: v,
            embed: d,
            hidden: h,
        } = self.dims;
        let l = self.dims.layout();
        let p = &self.params;
        for (g, dzv) in grad[l.output_bias..l.output_bias + v].iter_mut().zip(dz) {
            *g += dzv;
        }
        let mut da = vec![0.0; h];
        for j in 0..h {
            let w_row = &p[l.output_weight + j * v..l.output_weight + (j + 1) * v];
            let g_row = &mut grad[l.output_weight + j * v..l.output_weight + (j + 1) * v];
            let hj = act.hidden[j];
            let mut dh = 0.0;
            for ((g, w), dzv) in g_row.iter_mut().zip(w_row).zip(dz) {
                *g += hj * dzv;
                dh += w * dzv;
            }
            da[j] = dh * (1.0 - hj * hj);
        }
        for (g, dav) in grad[l.hidden_bias..l.hidden_bias + h].iter_mut().zip(&da) {
            *g += dav;
        }
        let e0 = l.embedding + ctx as usize * d;
        for i in 0..d {
            let xi = p[e0 + i];
            let w_row = &p[l.hidden_weight + i * h..l.hidden_weight + (i + 1) * h];
            let mut dx = 0.0;
            for (k, (w, dav)) in w_row.iter().zip(&da).enumerate() {
                grad[l.hidden_weight + i * h + k] += xi * dav;
                dx += w * dav;
            }
            grad[e0 + i] += dx;
        }
    }

    /// Log-probabilities of the next token after `ctx`.
    pub fn log_probs(&self, ctx: u32) -> Vec<f64> {
        self.forward(ctx).log_probs
    }

    /// Teacher-forced top-`k` distribution matrix over the response.
    pub fn predict_matrix(
        &self,
        example: &SupervisedExample,
        k: usize,
    ) -> Result<DistributionMatrix, FusionError> {
        example.check_vocab(self.dims.vocab)?;
        let k = k.min(self.dims.vocab).max(1);
        let rows = example
            .contexts()
            .into_iter()
            .map(|ctx| {
                let lp = self.log_probs(ctx);
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                order.truncate(k);
                let row =
                    SparseRow::from_log_probs(order.iter().map(|&i| (i as u32, lp[i])).collect())
                        .expect("softmax entries are finite and distinct");
                row.normalized()
            })
            .collect();
        DistributionMatrix::new(rows, self.dims.vocab, k).map_err(FusionError::from)
    }

    pub fn to_checkpoint(&self) -> NamedTensorMap {
        let ToyLmDims {
            vocab: v,
            embed: d,
            hidden: h,
        } = self.dims;
        let l = self.dims.layout();
        let f32s = |r: std::ops::Range<usize>| self.params[r].iter().map(|&x| x as f32).collect();
        let mut m = NamedTensorMap::new();
        let mut put = |name: &str, shape: Vec<usize>, data: Vec<f32>| {
            m.insert(
                name,
                Tensor::new(shape, data).expect("layout matches shapes"),
            );
        };
        put(EMBEDDING, vec![v, d], f32s(l.embedding..l.hidden_weight));
        put(
            HIDDEN_WEIGHT,
            vec![d, h],
            f32s(l.hidden_weight..l.hidden_bias),
        );
        put(HIDDEN_BIAS, vec![h], f32s(l.hidden_bias..l.output_weight));
        put(
            OUTPUT_WEIGHT,
            vec![h, v],
            f32s(l.output_weight..l.output_bias),
        );
        put(OUTPUT_BIAS, vec![v], f32s(l.output_bias..l.total));
        m.set_metadata("architecture", "bigram-tanh");
        m.set_metadata("vocab_size", v.to_string());
        m
    }

    pub fn from_checkpoint(map: &NamedTensorMap) -> Result<Self, FusionError> {
        let get = |name: &str| {
            map.get(name)
                .ok_or_else(|| FusionError::InvalidModel(format!("missing tensor `{name}`")))
        };
        let emb = get(EMBEDDING)?;
        let hw = get(HIDDEN_WEIGHT)?;
        let (v, d, h) = match (emb.shape(), hw.shape()) {
            ([v, d], [d2, h]) if d == d2 => (*v, *d, *h),
            _ => {
                return Err(FusionError::InvalidModel(format!(
                    "inconsistent shapes {:?} and {:?}",
                    emb.shape(),
                    hw.shape()
                )))
            }
        };
        let dims = ToyLmDims::new(v, d, h)?;
        let expected: [(&str, Vec<usize>); 5] = [
            (EMBEDDING, vec![v, d]),
            (HIDDEN_WEIGHT, vec![d, h]),
            (HIDDEN_BIAS, vec![h]),
            (OUTPUT_WEIGHT, vec![h, v]),
            (OUTPUT_BIAS, vec![v]),
        ];
        let mut params = Vec::with_capacity(dims.num_params());
        for (name, shape) in &expected {
            let t = get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(FusionError::InvalidModel(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.extend(t.data().iter().map(|&x| x as f64));
        }
        if map.len() != expected.len() {
            return Err(FusionError::InvalidModel(format!(
                "expected {} tensors, found {}",
                expected.len(),
                map.len()
            )));
        }
        Self::from_params(dims, params)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|z| z - lse).collect()
}
