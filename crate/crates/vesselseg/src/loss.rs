//! Task losses and their multi-task combination with homoscedastic
//! uncertainty weighting:
//!
//! `L(W, s_S, s_T) = 1/(2*s_S^2) L_S + 1/(2*s_T^2) L_T + log(s_S) + log(s_T)`
//!
//! Learned mode stores `s = log sigma^2`, which keeps sigma positive and is
//! algebraically identical: `0.5 e^{-s_S} L_S + 0.5 e^{-s_T} L_T + 0.5 s_S +
//! 0.5 s_T`. Lower sigma raises a task's weight.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::Feat;
use crate::nn::Scalar;

/// Per-task noise scales, either learned (as log sigma^2) or fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SigmaState {
    Learned { s_s: f64, s_t: f64 },
    Fixed { sigma_s: f64, sigma_t: f64 },
}

impl SigmaState {
    /// Learned mode initialized at sigma = 1 (s = 0).
    pub fn learned_default() -> Self {
        SigmaState::Learned { s_s: 0.0, s_t: 0.0 }
    }

    pub fn fixed(sigma_s: f64, sigma_t: f64) -> Result<Self> {
        if sigma_s <= 0.0 || sigma_t <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fixed sigmas must be positive, got ({sigma_s}, {sigma_t})"
            )));
        }
        Ok(SigmaState::Fixed { sigma_s, sigma_t })
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, SigmaState::Learned { .. })
    }

    pub fn sigma_s(&self) -> f64 {
        match *self {
            SigmaState::Learned { s_s, .. } => (0.5 * s_s).exp(),
            SigmaState::Fixed { sigma_s, .. } => sigma_s,
        }
    }

    pub fn sigma_t(&self) -> f64 {
        match *self {
            SigmaState::Learned { s_t, .. } => (0.5 * s_t).exp(),
            SigmaState::Fixed { sigma_t, .. } => sigma_t,
        }
    }

    /// Weight of the segmentation loss, `1/(2 sigma_S^2)`.
    pub fn weight_s(&self) -> f64 {
        match *self {
            SigmaState::Learned { s_s, .. } => 0.5 * (-s_s).exp(),
            SigmaState::Fixed { sigma_s, .. } => 0.5 / (sigma_s * sigma_s),
        }
    }

    /// Weight of the translation loss, `1/(2 sigma_T^2)`.
    pub fn weight_t(&self) -> f64 {
        match *self {
            SigmaState::Learned { s_t, .. } => 0.5 * (-s_t).exp(),
            SigmaState::Fixed { sigma_t, .. } => 0.5 / (sigma_t * sigma_t),
        }
    }

    /// Regularizer `log sigma_S + log sigma_T`.
    pub fn log_term(&self) -> f64 {
        match *self {
            SigmaState::Learned { s_s, s_t } => 0.5 * s_s + 0.5 * s_t,
            SigmaState::Fixed { sigma_s, sigma_t } => sigma_s.ln() + sigma_t.ln(),
        }
    }
}

/// Combined multi-task loss.
pub fn mtl_loss(l_s: f64, l_t: f64, sigma: &SigmaState) -> f64 {
    sigma.weight_s() * l_s + sigma.weight_t() * l_t + sigma.log_term()
}

/// Gradient of [`mtl_loss`] w.r.t. the learned log-variances (s_S, s_T).
pub fn mtl_loss_sigma_grad(l_s: f64, l_t: f64, sigma: &SigmaState) -> (f64, f64) {
    match *sigma {
        SigmaState::Learned { s_s, s_t } => (
            -0.5 * (-s_s).exp() * l_s + 0.5,
            -0.5 * (-s_t).exp() * l_t + 0.5,
        ),
        SigmaState::Fixed { .. } => (0.0, 0.0),
    }
}

fn check_spatial<F: Scalar>(feat: &Feat<F>, target: &Array3<F>) -> Result<()> {
    let (_, nx, ny, nz) = feat.dim();
    if (nx, ny, nz) != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction spatial dims {:?} vs target {:?}",
            (nx, ny, nz),
            target.dim()
        )));
    }
    Ok(())
}

/// Two-class softmax cross entropy, averaged over voxels, with the logit
/// gradient. Labels are binary {0, 1}; loss accumulates in f64.
pub fn cross_entropy_with_grad<F: Scalar>(
    logits: &Feat<F>,
    label: &Array3<F>,
) -> Result<(f64, Feat<F>)> {
    let (classes, nx, ny, nz) = logits.dim();
    if classes != 2 {
        return Err(Error::InvalidArgument(format!(
            "cross entropy expects 2-class logits, got {classes}"
        )));
    }
    check_spatial(logits, label)?;
    let n = nx * ny * nz;
    let inv_n = 1.0 / n as f64;
    let ls = logits.as_slice().expect("standard layout");
    let mut grad = Feat::<F>::zeros((2, nx, ny, nz));
    let gs = grad.as_slice_mut().unwrap();
    let mut loss = 0.0f64;
    for (i, &t) in label.iter().enumerate() {
        let l0 = ls[i].as_f64();
        let l1 = ls[n + i].as_f64();
        let m = l0.max(l1);
        let e0 = (l0 - m).exp();
        let e1 = (l1 - m).exp();
        let z = e0 + e1;
        let p1 = e1 / z;
        let t1 = t.as_f64();
        // -log p(true class), numerically via log-sum-exp
        let lse = m + z.ln();
        let true_logit = if t1 > 0.5 { l1 } else { l0 };
        loss += lse - true_logit;
        gs[i] = F::from_f64(((1.0 - p1) - (1.0 - t1)) * inv_n);
        gs[n + i] = F::from_f64((p1 - t1) * inv_n);
    }
    Ok((loss * inv_n, grad))
}

/// Two-class softmax cross entropy, averaged over voxels.
pub fn cross_entropy<F: Scalar>(logits: &Feat<F>, label: &Array3<F>) -> Result<f64> {
    cross_entropy_with_grad(logits, label).map(|(l, _)| l)
}

/// Mean squared error over voxels with the prediction gradient.
pub fn mse_with_grad<F: Scalar>(pred: &Feat<F>, target: &Array3<F>) -> Result<(f64, Feat<F>)> {
    let (channels, nx, ny, nz) = pred.dim();
    if channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "mse expects a single-channel prediction, got {channels}"
        )));
    }
    check_spatial(pred, target)?;
    let n = (nx * ny * nz) as f64;
    let ps = pred.as_slice().expect("standard layout");
    let mut grad = Feat::<F>::zeros((1, nx, ny, nz));
    let gs = grad.as_slice_mut().unwrap();
    let mut loss = 0.0f64;
    for (i, &t) in target.iter().enumerate() {
        let d = ps[i].as_f64() - t.as_f64();
        loss += d * d;
        gs[i] = F::from_f64(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

/// Mean squared error over voxels.
pub fn mse<F: Scalar>(pred: &Feat<F>, target: &Array3<F>) -> Result<f64> {
    mse_with_grad(pred, target).map(|(l, _)| l)
}
