use super::LossError;
use crate::diffcore::{huber_scalar, Tape, Tensor, Var};
use crate::geo::nearest_rank;

/// Smallest threshold handed out by calibration.
const MIN_DELTA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhysicsConfig {
    /// Free-flow speed per node, in observation units.
    pub x_fspd: Vec<f64>,
    /// Huber threshold; `None` until calibrated.
    pub delta: Option<f64>,
    pub tau: f64,
    /// Channel of the spatial embedding used as the location coordinate.
    pub spatial_channel: usize,
}

impl PhysicsConfig {
    pub fn new(x_fspd: Vec<f64>) -> Self {
        Self {
            x_fspd,
            delta: None,
            tau: 1.0,
            spatial_channel: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhysicsPenalty {
    /// `½·mean(R²)`, used before δ is known.
    Quadratic,
    Huber(f64),
}

/// Input gradients of the speed forecast, `[T', N]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualGrads {
    pub g_time: Tensor,
    pub g_space: Tensor,
    /// Forecast speed (normalised units) the gradients were taken at.
    pub x_hat: Tensor,
}

/// LWR residual `∂x/∂t + (2x − x_fspd)·∂x/∂l` of the speed forecast.
///
/// One seeded backward pass per horizon step `h` with seed ones over all
/// nodes at that step. The time gradient for node `n` is the adjoint of its
/// time coordinate at input step `h`; the space gradient is the adjoint of
/// channel `spatial_channel` of its spatial embedding row.
///
/// Forecasts are in normalised units `x = scale·x̂ + offset`; `x_fspd` and
/// the returned residual are in observation units.
#[allow(clippy::too_many_arguments)]
pub fn physics_residual(
    tape: &Tape,
    x_hat: Var,
    time_coord: Var,
    l_enc: Var,
    spatial_channel: usize,
    x_fspd: &[f64],
    scale: f64,
    offset: f64,
) -> Result<(Tensor, ResidualGrads), LossError> {
    let shape = tape.shape(x_hat).to_vec();
    if shape.len() != 3 {
        return Err(LossError::ShapeMismatch(format!("forecast {shape:?}")));
    }
    let (h_len, n, c) = (shape[0], shape[1], shape[2]);
    let coord_rows = tape.value(time_coord).rows();
    if coord_rows % n != 0 || coord_rows / n < h_len {
        return Err(LossError::ShapeMismatch(format!(
            "time coordinate has {coord_rows} rows for {h_len} steps of {n} nodes"
        )));
    }
    let d = tape.value(l_enc).cols();
    if tape.value(l_enc).rows() != n || spatial_channel >= d || x_fspd.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "spatial embedding {:?}, channel {spatial_channel}, {} free-flow speeds",
            tape.shape(l_enc),
            x_fspd.len()
        )));
    }
    if !tape.requires_grad(time_coord) || !tape.requires_grad(l_enc) {
        return Err(LossError::GradUnavailable("embeddings are detached".into()));
    }
    let mut g_time = Tensor::zeros(&[h_len, n]);
    let mut g_space = Tensor::zeros(&[h_len, n]);
    let mut xv = Tensor::zeros(&[h_len, n]);
    let mut resid = Tensor::zeros(&[h_len, n]);
    for h in 0..h_len {
        let mut seed = Tensor::zeros(&shape);
        for i in 0..n {
            seed.data_mut()[(h * n + i) * c] = 1.0;
        }
        let g = tape.seeded_grad(x_hat, &seed, &[time_coord, l_enc])?;
        for i in 0..n {
            let gt = g[0].data()[h * n + i];
            let gs = g[1].data()[i * d + spatial_channel];
            let xh = tape.value(x_hat).data()[(h * n + i) * c];
            let x = scale * xh + offset;
            g_time.data_mut()[h * n + i] = gt;
            g_space.data_mut()[h * n + i] = gs;
            xv.data_mut()[h * n + i] = xh;
            resid.data_mut()[h * n + i] = scale * gt + (2.0 * x - x_fspd[i]) * scale * gs;
        }
    }
    Ok((
        resid,
        ResidualGrads {
            g_time,
            g_space,
            x_hat: xv,
        },
    ))
}

/// Physics penalty with the input gradients held fixed, so only the
/// forecast value carries a gradient back into the parameters.
pub fn physics_loss(
    tape: &mut Tape,
    x_hat: Var,
    grads: &ResidualGrads,
    x_fspd: &[f64],
    scale: f64,
    offset: f64,
    penalty: PhysicsPenalty,
) -> Result<Var, LossError> {
    let shape = tape.shape(x_hat).to_vec();
    let (h_len, n, c) = (shape[0], shape[1], shape[2]);
    if grads.g_time.shape() != [h_len, n] {
        return Err(LossError::ShapeMismatch(format!(
            "gradients {:?} for forecast {shape:?}",
            grads.g_time.shape()
        )));
    }
    let mut c0 = Tensor::zeros(&[h_len * n, 1]);
    let mut c1 = Tensor::zeros(&[h_len * n, 1]);
    for r in 0..h_len * n {
        let (gt, gs) = (grads.g_time.data()[r], grads.g_space.data()[r]);
        c0.data_mut()[r] = scale * gt + (2.0 * offset - x_fspd[r % n]) * scale * gs;
        c1.data_mut()[r] = 2.0 * scale * scale * gs;
    }
    let flat = tape.reshape(x_hat, &[h_len * n, c]);
    let speed = if c == 1 {
        flat
    } else {
        let sel = tape.constant(Tensor::from_fn(&[c, 1], |i| if i == 0 { 1.0 } else { 0.0 }));
        tape.matmul(flat, sel)
    };
    let c0 = tape.constant(c0);
    let c1 = tape.constant(c1);
    let lin = tape.mul(c1, speed);
    let r = tape.add(lin, c0);
    Ok(match penalty {
        PhysicsPenalty::Quadratic => {
            let sq = tape.square(r);
            let m = tape.mean(sq);
            tape.scale(m, 0.5)
        }
        PhysicsPenalty::Huber(delta) => {
            if delta <= 0.0 {
                return Err(LossError::NonPositiveDelta(delta));
            }
            let hu = tape.huber(r, delta);
            tape.mean(hu)
        }
    })
}

/// Nearest-rank `tau`-quantile of `|residuals|`.
pub fn calibrate_delta(residuals: &[f64], tau: f64) -> Result<f64, LossError> {
    if residuals.is_empty() {
        return Err(LossError::EmptyResiduals);
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LossError::BadQuantile(tau));
    }
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let q = nearest_rank(&abs, tau).ok_or(LossError::EmptyResiduals)?;
    Ok(q.max(MIN_DELTA))
}

/// Mean Huber penalty of plain residuals.
pub fn huber_loss(residuals: &[f64], delta: f64) -> Result<f64, LossError> {
    if delta <= 0.0 || !delta.is_finite() {
        return Err(LossError::NonPositiveDelta(delta));
    }
    if residuals.is_empty() {
        return Ok(0.0);
    }
    Ok(residuals.iter().map(|&r| huber_scalar(r, delta)).sum::<f64>() / residuals.len() as f64)
}
