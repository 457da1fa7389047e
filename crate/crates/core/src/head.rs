//! The affine unembedding head `z(h) = W h + b` and its softmax.
//!
//! Parameters are stored in `f32`, the dtype of the trajectory format and the
//! toy model. Analysis routines take `f64` hidden states and evaluate the head
//! in `f64`; the toy model uses [`UnembeddingHead::logits_f32`] so recorded
//! logits equal `W h + b` bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::check_dim;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnembeddingHead {
    /// Row-major `V x d`; row `j` is the decoder vector of token `j`.
    weights: Vec<f32>,
    bias: Vec<f32>,
    vocab_size: usize,
    hidden_dim: usize,
}

impl UnembeddingHead {
    pub fn new(weights: Vec<f32>, bias: Vec<f32>, vocab_size: usize, hidden_dim: usize) -> Result<Self> {
        if vocab_size == 0 || hidden_dim == 0 {
            return Err(Error::InvalidHead(format!(
                "vocab_size ({vocab_size}) and hidden_dim ({hidden_dim}) must be positive"
            )));
        }
        if weights.len() != vocab_size * hidden_dim {
            return Err(Error::InvalidHead(format!(
                "weights hold {} entries, expected {vocab_size} x {hidden_dim}",
                weights.len()
            )));
        }
        if bias.len() != vocab_size {
            return Err(Error::InvalidHead(format!(
                "bias has length {}, expected {vocab_size}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("unembedding head"));
        }
        Ok(Self {
            weights,
            bias,
            vocab_size,
            hidden_dim,
        })
    }

    /// Builds a head from `f64` rows, rounding to `f32`.
    pub fn from_rows(rows: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let vocab = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidHead("ragged weight rows".into()));
        }
        let weights = rows.iter().flatten().map(|&x| x as f32).collect();
        let bias = bias.iter().map(|&x| x as f32).collect();
        Self::new(weights, bias, vocab, d)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.weights[j * self.hidden_dim..(j + 1) * self.hidden_dim]
    }

    pub fn row_f64(&self, j: usize) -> Vec<f64> {
        self.row(j).iter().map(|&x| f64::from(x)).collect()
    }

    pub(crate) fn check_token(&self, j: usize) -> Result<()> {
        if j < self.vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id: u32::try_from(j).unwrap_or(u32::MAX),
                vocab: self.vocab_size,
            })
        }
    }

    /// `W h + b` in `f32`, accumulating each row sequentially and adding the
    /// bias last.
    pub fn logits_f32(&self, h: &[f32]) -> Vec<f32> {
        debug_assert_eq!(h.len(), self.hidden_dim);
        (0..self.vocab_size)
            .map(|j| {
                let dot = self.row(j).iter().zip(h).fold(0.0f32, |acc, (w, x)| acc + w * x);
                dot + self.bias[j]
            })
            .collect()
    }

    /// `W h + b` in `f64`.
    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.hidden_dim, h.len())?;
        Ok((0..self.vocab_size)
            .map(|j| {
                let dot = self
                    .row(j)
                    .iter()
                    .zip(h)
                    .fold(0.0f64, |acc, (&w, x)| acc + f64::from(w) * x);
                dot + f64::from(self.bias[j])
            })
            .collect())
    }

    /// Token with the largest logit at `h`; ties go to the lowest id.
    pub fn argmax(&self, h: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(h)?))
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln softmax(logits)`, via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `softmax(W h + b)`.
///
/// Entries sum to one up to round-off. Tokens whose logit trails the maximum
/// by more than ~745 nats underflow to zero.
pub fn head_probs(head: &UnembeddingHead, h: &[f64]) -> Result<Vec<f64>> {
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hidden state"));
    }
    Ok(softmax(&head.logits(h)?))
}
