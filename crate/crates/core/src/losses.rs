//! Training objectives: masked multi-label BCE with soft targets for
//! uncertain labels, the off-diagonal cosine penalty, selector cross-entropy
//! and prototype consistency. Every loss returns its value together with the
//! gradient with respect to its first argument.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{LabelCode, LabelMatrix};
use crate::diffnet::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleMode {
    PerBatch,
    PerEpoch,
    Fixed,
}

impl fmt::Display for ResampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResampleMode::PerBatch => "per-batch",
            ResampleMode::PerEpoch => "per-epoch",
            ResampleMode::Fixed => "fixed",
        })
    }
}

impl FromStr for ResampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch" => Ok(ResampleMode::PerBatch),
            "per-epoch" => Ok(ResampleMode::PerEpoch),
            "fixed" => Ok(ResampleMode::Fixed),
            other => Err(Error::config("soft_resample", format!("unknown mode `{other}`"))),
        }
    }
}

/// Uncertain labels train against `t ~ U(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftTargetPolicy {
    pub alpha: f64,
    pub beta: f64,
    pub resample: ResampleMode,
}

impl Default for SoftTargetPolicy {
    fn default() -> Self {
        SoftTargetPolicy {
            alpha: 0.55,
            beta: 0.85,
            resample: ResampleMode::PerBatch,
        }
    }
}

impl SoftTargetPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha && self.alpha < self.beta && self.beta < 1.0) {
            return Err(Error::config(
                "soft_alpha",
                format!("need 0 < alpha < beta < 1, got ({}, {})", self.alpha, self.beta),
            ));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.alpha + (self.beta - self.alpha) * rng.random::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ortho: f64,
    pub lambda_mem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ortho: 0.05,
            lambda_mem: 0.5,
        }
    }
}

/// Resolved BCE targets; cells with `valid == false` are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTargets {
    pub targets: Array2<f64>,
    pub valid: Array2<bool>,
}

impl MaskedTargets {
    /// Draws one soft target per Uncertain cell, row-major.
    pub fn resolve(labels: &LabelMatrix, policy: &SoftTargetPolicy, rng: &mut Rng) -> Self {
        let mut targets = Array2::zeros(labels.raw_dim());
        let mut valid = Array2::from_elem(labels.raw_dim(), true);
        for ((idx, &label), t) in labels.indexed_iter().zip(targets.iter_mut()) {
            match label {
                LabelCode::Negative => *t = 0.0,
                LabelCode::Positive => *t = 1.0,
                LabelCode::Uncertain => *t = policy.sample(rng),
                LabelCode::Missing => valid[idx] = false,
            }
        }
        MaskedTargets { targets, valid }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        MaskedTargets {
            targets: self.targets.select(Axis(0), rows),
            valid: self.valid.select(Axis(0), rows),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) − x·t + ln(1 + e^{−|x|})`
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn masked_bce_targets(logits: &Array2<f64>, targets: &MaskedTargets) -> Result<LossGrad> {
    if logits.dim() != targets.targets.dim() {
        return Err(Error::dims("masked BCE logits", targets.targets.len(), logits.len()));
    }
    let count = targets.valid_count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = count as f64;
    let mut sum = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (((&x, &t), &ok), g) in logits
        .iter()
        .zip(targets.targets.iter())
        .zip(targets.valid.iter())
        .zip(grad.iter_mut())
    {
        if ok {
            sum += bce_with_logits(x, t);
            *g = (sigmoid(x) - t) / n;
        }
    }
    Ok(LossGrad { value: sum / n, grad })
}

/// Mean BCE-with-logits over non-missing cells.
pub fn masked_bce(
    logits: &Array2<f64>,
    labels: &LabelMatrix,
    policy: &SoftTargetPolicy,
    rng: &mut Rng,
) -> Result<LossGrad> {
    masked_bce_targets(logits, &MaskedTargets::resolve(labels, policy, rng))
}

/// Mean off-diagonal cosine similarity of the rows of `features`.
pub fn ortho_penalty(features: &Array2<f64>) -> Result<LossGrad> {
    let b = features.nrows();
    if b < 2 {
        return Err(Error::TooFewRows(b));
    }
    let norms: Array1<f64> = features.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNormRow(i));
    }
    let unit = features / &norms.view().insert_axis(Axis(1));
    let total = unit.sum_axis(Axis(0));
    let scale = 1.0 / (b as f64 * (b as f64 - 1.0));
    let diag: f64 = unit.rows().into_iter().map(|r| r.dot(&r)).sum();
    let value = (total.dot(&total) - diag) * scale;

    // d/du_i Σ_{i≠j} u_i·u_j = 2(Σu − u_i); then project through normalisation.
    let mut grad = Array2::zeros(features.raw_dim());
    for i in 0..b {
        let u = unit.row(i);
        let g_u = (&total - &u) * (2.0 * scale);
        let radial = g_u.dot(&u);
        let g_z = (&g_u - &(&u * radial)) / norms[i];
        grad.row_mut(i).assign(&g_z);
    }
    Ok(LossGrad { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    pub value: f64,
    pub bce: f64,
    pub ortho: f64,
    pub grad_logits: Array2<f64>,
    pub grad_features: Array2<f64>,
}

/// `L_BCE + λ_ortho · L_ortho`.
pub fn task_loss(
    logits: &Array2<f64>,
    targets: &MaskedTargets,
    adapted: &Array2<f64>,
    weights: &LossWeights,
) -> Result<TaskLoss> {
    let bce = masked_bce_targets(logits, targets)?;
    let (ortho, grad_features) = if weights.lambda_ortho == 0.0 {
        (0.0, Array2::zeros(adapted.raw_dim()))
    } else {
        let o = ortho_penalty(adapted)?;
        (o.value, o.grad * weights.lambda_ortho)
    };
    Ok(TaskLoss {
        value: bce.value + weights.lambda_ortho * ortho,
        bce: bce.value,
        ortho,
        grad_logits: bce.grad,
        grad_features,
    })
}

pub fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.mapv(|x| x - lse)
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lsm = log_softmax_row(row.view());
        row.assign(&lsm.mapv(f64::exp));
    }
    out
}

/// Mean cross-entropy of softmax(logits) against task labels.
pub fn selector_ce(logits: &Array2<f64>, labels: &[usize]) -> Result<LossGrad> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::LengthMismatch(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::TaskOutOfRange {
            label: bad,
            num_tasks: k,
        });
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros((b, k));
    for (i, &label) in labels.iter().enumerate() {
        let lsm = log_softmax_row(logits.row(i));
        value -= lsm[label];
        let mut g = grad.row_mut(i);
        g.assign(&lsm.mapv(f64::exp));
        g[label] -= 1.0;
    }
    let bf = b.max(1) as f64;
    grad /= bf;
    Ok(LossGrad {
        value: value / bf,
        grad,
    })
}

/// Mean squared distance of each row to `prototype`.
pub fn prototype_loss(features: ArrayView2<f64>, prototype: ArrayView1<f64>) -> Result<LossGrad> {
    if features.ncols() != prototype.len() {
        return Err(Error::dims("prototype loss", prototype.len(), features.ncols()));
    }
    let b = features.nrows().max(1) as f64;
    let diff = &features - &prototype.insert_axis(Axis(0));
    let value = diff.iter().map(|v| v * v).sum::<f64>() / b;
    Ok(LossGrad {
        value,
        grad: diff * (2.0 / b),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorLoss {
    pub value: f64,
    pub ce: f64,
    pub mem: f64,
    pub grad_logits: Array2<f64>,
    /// Gradient with respect to the selector's input rows; rows outside the
    /// current-task range only carry the cross-entropy term.
    pub grad_features: Array2<f64>,
}

/// `CE(all rows) + λ_mem · ‖z̃ − M_k‖²` over the current-task rows only.
///
/// `grad_features` holds only the prototype term; the cross-entropy part of
/// the input gradient comes from backpropagating `grad_logits`.
pub fn selector_loss(
    logits: &Array2<f64>,
    task_labels: &[usize],
    features: &Array2<f64>,
    current_rows: Range<usize>,
    prototype: ArrayView1<f64>,
    lambda_mem: f64,
) -> Result<SelectorLoss> {
    if current_rows.end > features.nrows() {
        return Err(Error::dims("current-task rows", features.nrows(), current_rows.end));
    }
    let ce = selector_ce(logits, task_labels)?;
    let mut grad_features = Array2::zeros(features.raw_dim());
    let mem = if current_rows.is_empty() {
        0.0
    } else {
        let slice = features.slice(ndarray::s![current_rows.clone(), ..]);
        let m = prototype_loss(slice, prototype)?;
        grad_features
            .slice_mut(ndarray::s![current_rows, ..])
            .assign(&(m.grad * lambda_mem));
        m.value
    };
    Ok(SelectorLoss {
        value: ce.value + lambda_mem * mem,
        ce: ce.value,
        mem,
        grad_logits: ce.grad,
        grad_features,
    })
}
