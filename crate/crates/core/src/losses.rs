//! Training criteria: cross-entropy, label smoothing, confidence penalty and
//! the feature-entropy regularized total loss.
//!
//! Every loss is a tape function so that it can be differentiated; the
//! value-level helpers build a scratch tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-stochastic class probabilities `q(y|x)` with the temperature used.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputDistribution {
    pub probs: Tensor,
    pub temperature: f64,
}

impl OutputDistribution {
    pub fn from_logits(logits: &Tensor, temperature: f64) -> Result<Self> {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone())?;
        let q = softmax_probs(&mut tape, l, temperature)?;
        Ok(Self {
            probs: tape.value(q).clone(),
            temperature,
        })
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }
}

/// `exp(l_i / τ) / Σ_j exp(l_j / τ)` per row.
pub fn softmax_probs(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "output temperature must be positive, got {temperature}"
        )));
    }
    let scaled = if temperature == 1.0 {
        logits
    } else {
        tape.scale(logits, 1.0 / temperature)?
    };
    tape.row_softmax(scaled)
}

/// `-(1/N) Σ_n Σ_i t_{n,i} log q_{n,i}` against arbitrary soft targets.
fn soft_cross_entropy(tape: &mut Tape, q: Var, targets: Var) -> Result<Var> {
    let log_q = tape.log(q)?;
    let weighted = tape.mul(log_q, targets)?;
    let total = tape.sum(weighted)?;
    let n = tape.value(q).rows() as f64;
    tape.scale(total, -1.0 / n)
}

/// Negative log-likelihood of one-hot labels.
pub fn cross_entropy(tape: &mut Tape, q: Var, y: Var) -> Result<Var> {
    soft_cross_entropy(tape, q, y)
}

/// Where the smoothing mass goes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SmoothingForm {
    /// Correct class `1 - σ`, every other class `σ / (c - 1)`.
    #[default]
    SpreadOthers,
    /// `(1 - σ) y + σ` on every entry; rows then sum to `1 + (c - 1) σ`.
    AddUniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedTargets {
    pub targets: Tensor,
    pub sigma: f64,
}

pub fn smooth_labels(y: &Tensor, sigma: f64, form: SmoothingForm) -> Result<SmoothedTargets> {
    if !(0.0..0.5).contains(&sigma) {
        return Err(Error::InvalidParameter(format!(
            "smoothing coefficient must be in [0, 0.5), got {sigma}"
        )));
    }
    let c = y.cols();
    let targets = match form {
        SmoothingForm::SpreadOthers => {
            let off = if c > 1 { sigma / (c - 1) as f64 } else { 0.0 };
            y.map(|v| if v == 1.0 { 1.0 - sigma } else { off })
        }
        SmoothingForm::AddUniform => y.map(|v| (1.0 - sigma) * v + sigma),
    };
    Ok(SmoothedTargets { targets, sigma })
}

/// Cross-entropy against smoothed targets.
pub fn label_smoothing_loss(tape: &mut Tape, q: Var, targets: Var) -> Result<Var> {
    soft_cross_entropy(tape, q, targets)
}

/// `-(1/N) Σ_n H(q_n)`, the negative mean output entropy.
pub fn confidence_penalty(tape: &mut Tape, q: Var) -> Result<Var> {
    let log_q = tape.log(q)?;
    let plogp = tape.mul(q, log_q)?;
    let total = tape.sum(plogp)?;
    let n = tape.value(q).rows() as f64;
    tape.scale(total, 1.0 / n)
}

/// `ce - λ H`.
pub fn fierce_loss(tape: &mut Tape, ce: Var, feature_entropy: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!("λ must be >= 0, got {lambda}")));
    }
    let reg = tape.scale(feature_entropy, lambda)?;
    tape.sub(ce, reg)
}
