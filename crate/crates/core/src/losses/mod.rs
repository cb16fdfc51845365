//! Training objectives: masked forecast error, view contrast, grouping
//! entropy and the LWR physics penalty.

mod physics;

pub use physics::{
    calibrate_delta, huber_loss, physics_loss, physics_residual, PhysicsConfig, PhysicsPenalty,
    ResidualGrads,
};

use std::sync::Arc;

use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Unary, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no masked nodes to score")]
    EmptyMask,
    #[error("contrastive loss needs at least 2 windows, got {0}")]
    BatchTooSmall(usize),
    #[error("no residuals to calibrate from")]
    EmptyResiduals,
    #[error("Huber threshold must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("quantile must lie in (0, 1], got {0}")]
    BadQuantile(f64),
    #[error("loss term {0} is not finite")]
    NonFiniteTerm(&'static str),
    #[error("embedding gradients unavailable: {0}")]
    GradUnavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl From<DiffError> for LossError {
    fn from(e: DiffError) -> Self {
        LossError::GradUnavailable(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub theta: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            mu: 1.0,
            theta: 0.05,
            omega: 0.5,
        }
    }
}

/// RMSE over every horizon step and channel of the `masked` nodes.
pub fn pred_loss(tape: &mut Tape, x_hat: Var, truth: &Tensor, masked: &[usize]) -> Result<Var, LossError> {
    if masked.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let shape = tape.shape(x_hat).to_vec();
    if shape != truth.shape() || shape.len() != 3 {
        return Err(LossError::ShapeMismatch(format!("{shape:?} vs {:?}", truth.shape())));
    }
    let (t, n, c) = (shape[0], shape[1], shape[2]);
    let mut weight = Tensor::zeros(&shape);
    for s in 0..t {
        for &i in masked {
            for ch in 0..c {
                weight.data_mut()[(s * n + i) * c + ch] = 1.0;
            }
        }
    }
    let count = (t * masked.len() * c) as f64;
    let y = tape.constant(truth.clone());
    let w = tape.constant(weight);
    let diff = tape.sub(x_hat, y);
    let diff = tape.mul(diff, w);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let mse = tape.scale(total, 1.0 / count);
    Ok(tape.sqrt(mse))
}

/// Row-normalises `z` to unit length.
fn unit_rows(tape: &mut Tape, z: Var) -> Var {
    let sq = tape.square(z);
    let norm2 = tape.sum_cols(sq);
    let norm2 = tape.add_scalar(norm2, 1e-24);
    let norm = tape.sqrt(norm2);
    let inv = tape.unary(norm, Unary::Recip);
    tape.mul_row_scalar(z, inv)
}

/// Cosine-similarity contrast between paired window representations.
///
/// `z` and `z_m` are `[B, D]`; row `t` of each forms the positive pair and
/// the denominator sums over the other windows of `z_m` only.
pub fn contrastive_loss(tape: &mut Tape, z: Var, z_m: Var, omega: f64) -> Result<Var, LossError> {
    let b = tape.value(z).rows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    if tape.shape(z) != tape.shape(z_m) {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            tape.shape(z),
            tape.shape(z_m)
        )));
    }
    let a = unit_rows(tape, z);
    let m = unit_rows(tape, z_m);
    let mt = tape.transpose(m);
    let sim = tape.matmul(a, mt);
    let sim = tape.scale(sim, 1.0 / omega);
    let eye = tape.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { 1.0 } else { 0.0 }));
    let off = tape.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { 0.0 } else { 1.0 }));
    let pos = tape.mul(sim, eye);
    let pos = tape.sum_cols(pos);
    let e = tape.exp(sim);
    let neg = tape.mul(e, off);
    let neg = tape.sum_cols(neg);
    let log_neg = tape.ln(neg);
    let per = tape.sub(log_neg, pos);
    Ok(tape.mean(per))
}

/// Mean over windows of the node-pooled representation: `[N, D]` per
/// window stacked into `[B, D]`.
pub fn pool_nodes(tape: &mut Tape, z: Var, windows: usize) -> Var {
    let rows = tape.value(z).rows();
    let n = rows / windows;
    let pool = Arc::new(Tensor::full(&[1, n], 1.0 / n as f64));
    tape.block_left_mul(pool, z)
}

pub const ENTROPY_EPS: f64 = 1e-8;

/// Mean row entropy `−Σ p·ln(p + ε)`, averaged over layers.
pub fn grouping_entropy_loss(tape: &mut Tape, assignments: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for &w in assignments {
        let rows = tape.value(w).rows() as f64;
        let shifted = tape.add_scalar(w, ENTROPY_EPS);
        let l = tape.ln(shifted);
        let pl = tape.mul(w, l);
        let s = tape.sum(pl);
        let h = tape.scale(s, -1.0 / rows);
        total = Some(match total {
            Some(t) => tape.add(t, h),
            None => h,
        });
    }
    match total {
        Some(t) => tape.scale(t, 1.0 / assignments.len() as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

/// `l_pred + λ·l_cl + μ·l_spg + θ·l_phy`.
pub fn total_loss(l_pred: f64, l_cl: f64, l_spg: f64, l_phy: f64, w: &LossWeights) -> Result<f64, LossError> {
    for (name, v) in [("pred", l_pred), ("cl", l_cl), ("spg", l_spg), ("phy", l_phy)] {
        if !v.is_finite() {
            return Err(LossError::NonFiniteTerm(name));
        }
    }
    Ok(l_pred + w.lambda * l_cl + w.mu * l_spg + w.theta * l_phy)
}

/// Tape version of [`total_loss`]; absent terms contribute nothing.
pub fn combine(
    tape: &mut Tape,
    l_pred: Var,
    l_cl: Option<Var>,
    l_spg: Option<Var>,
    l_phy: Option<Var>,
    w: &LossWeights,
) -> Var {
    let mut total = l_pred;
    for (term, k) in [(l_cl, w.lambda), (l_spg, w.mu), (l_phy, w.theta)] {
        if let Some(v) = term {
            if k != 0.0 {
                let s = tape.scale(v, k);
                total = tape.add(total, s);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests;
