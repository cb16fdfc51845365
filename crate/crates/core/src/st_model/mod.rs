//! Stacked spatial-temporal layers, spatial grouping and the forecast head.
//!
//! Hidden states are `[T, N, D]` tensors flattened time-major, so row
//! `t·N + n` holds node `n` at step `t`. Graph aggregation applies a
//! row-normalised adjacency to each block of `N` rows.

mod grouping;

pub use grouping::SpatialGrouping;

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{Tape, Tensor, Var};
use crate::layout::swap_major;
use crate::params::{glorot, Bound, Linear, ParamId, ParamStore};
use crate::region_graph::Adjacency;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("hidden width {hidden} is not divisible by {cg} channel groups")]
    DivisibilityError { hidden: usize, cg: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StConfig {
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub sg: usize,
    pub cg: usize,
    pub head_hidden: usize,
    pub d_z: usize,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            kernel: 3,
            dilations: vec![1, 2],
            sg: 5,
            cg: 2,
            head_hidden: 64,
            d_z: 32,
        }
    }
}

/// Row-normalised adjacencies for one graph view.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub a_dtw: Arc<Tensor>,
    pub a_sg: Arc<Tensor>,
}

impl GraphOperators {
    pub fn new(a_dtw: &Adjacency, a_sg: &Adjacency) -> Self {
        Self {
            a_dtw: Arc::new(a_dtw.row_normalised()),
            a_sg: Arc::new(a_sg.row_normalised()),
        }
    }

    pub fn nodes(&self) -> usize {
        self.a_sg.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Tcn {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Tcn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, k: usize, dilation: usize) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), glorot(rng, &[k, d, d], k * d, d), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true),
            dilation,
        }
    }

    /// Causal dilated convolution along time with left zero padding.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Var {
        let shape = tape.shape(h).to_vec();
        let y = tape.causal_conv(h, p.var(self.kernel), self.dilation);
        let y = tape.reshape(y, &[shape[0] * shape[1], shape[2]]);
        let y = tape.add_row(y, p.var(self.bias));
        tape.reshape(y, &shape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DualGcn {
    pub w_dtw: ParamId,
    pub w_sg: ParamId,
}

impl DualGcn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            w_dtw: store.add(format!("{name}.w_dtw"), glorot(rng, &[d, d], d, d), true),
            w_sg: store.add(format!("{name}.w_sg"), glorot(rng, &[d, d], d, d), true),
        }
    }

    /// `max(Â_dtw·H·W_a, Â_sg·H·W_b)` at every step.
    ///
    /// The node axis may hold several stacked copies of the graph; each
    /// consecutive block of `g.nodes()` rows is aggregated separately.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, g: &GraphOperators) -> Result<Var, ModelError> {
        let shape = tape.shape(h).to_vec();
        let n = g.nodes();
        if shape.len() != 3 || n == 0 || shape[1] % n != 0 || g.a_dtw.rows() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "features {shape:?} on a {}-node graph",
                g.nodes()
            )));
        }
        let flat = tape.reshape(h, &[shape[0] * shape[1], shape[2]]);
        let a = tape.block_left_mul(g.a_dtw.clone(), flat);
        let a = tape.matmul(a, p.var(self.w_dtw));
        let b = tape.block_left_mul(g.a_sg.clone(), flat);
        let b = tape.matmul(b, p.var(self.w_sg));
        let m = tape.maximum(a, b);
        Ok(tape.reshape(m, &shape))
    }
}

#[derive(Clone, Debug)]
pub struct StLayer {
    pub tcn: Tcn,
    pub gcn: DualGcn,
    pub grouping: SpatialGrouping,
}

impl StLayer {
    /// `H_next = tcn(H) + gcn(H)`, plus the grouping assignments of `H_next`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, g: &GraphOperators) -> Result<(Var, Var), ModelError> {
        let a = self.tcn.forward(tape, p, h);
        let b = self.gcn.forward(tape, p, h, g)?;
        let next = tape.add(a, b);
        let w_s = self.grouping.forward(tape, p, next)?;
        Ok((next, w_s))
    }
}

/// Node-major head over the flattened history.
#[derive(Clone, Copy, Debug)]
pub struct ForecastHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub repr: Linear,
    pub horizon: usize,
    pub channels: usize,
}

impl ForecastHead {
    /// `X_hat` as `[T', N, C]` and `Z` as `[N, D_z]` (from the last step).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> (Var, Var) {
        let shape = tape.shape(h).to_vec();
        let (t, n, d) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(h, &[t * n, d]);
        let node_major = tape.gather_rows(flat, swap_major(t, n));
        let per_node = tape.reshape(node_major, &[n, t * d]);
        let z1 = self.fc1.forward(tape, p, per_node);
        let z1 = tape.relu(z1);
        let out = self.fc2.forward(tape, p, z1);
        let out = tape.reshape(out, &[n * self.horizon, self.channels]);
        let out = tape.gather_rows(out, swap_major(n, self.horizon));
        let x_hat = tape.reshape(out, &[self.horizon, n, self.channels]);

        let last_rows: Vec<Option<usize>> = (0..n).map(|i| Some((t - 1) * n + i)).collect();
        let last = tape.gather_rows(flat, Arc::new(last_rows));
        let z = self.repr.forward(tape, p, last);
        (x_hat, z)
    }
}

/// Outputs of one pass through the stack.
#[derive(Clone, Debug)]
pub struct StOutput {
    pub x_hat: Var,
    pub z: Var,
    pub hidden: Var,
    pub assignments: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct StModel {
    pub config: StConfig,
    pub layers: Vec<StLayer>,
    pub head: ForecastHead,
}

impl StModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        config: StConfig,
        steps: usize,
        horizon: usize,
        channels: usize,
    ) -> Result<Self, ModelError> {
        let d = config.hidden;
        if config.cg == 0 || d % config.cg != 0 {
            return Err(ModelError::DivisibilityError { hidden: d, cg: config.cg });
        }
        let layers = (0..config.layers)
            .map(|l| {
                let dil = config.dilations.get(l).copied().unwrap_or(1).max(1);
                let name = format!("st{l}");
                Ok(StLayer {
                    tcn: Tcn::new(store, rng, &format!("{name}.tcn"), d, config.kernel, dil),
                    gcn: DualGcn::new(store, rng, &format!("{name}.gcn"), d),
                    grouping: SpatialGrouping::new(store, rng, &format!("{name}.group"), d, config.sg, config.cg)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let head = ForecastHead {
            fc1: Linear::new(store, rng, "head.fc1", steps * d, config.head_hidden, true),
            fc2: Linear::new(store, rng, "head.fc2", config.head_hidden, horizon * channels, true),
            repr: Linear::new(store, rng, "head.repr", d, config.d_z, true),
            horizon,
            channels,
        };
        Ok(Self { config, layers, head })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h0: Var, g: &GraphOperators) -> Result<StOutput, ModelError> {
        let mut h = h0;
        let mut assignments = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, w_s) = layer.forward(tape, p, h, g)?;
            h = next;
            assignments.push(w_s);
        }
        let (x_hat, z) = self.head.forward(tape, p, h);
        Ok(StOutput {
            x_hat,
            z,
            hidden: h,
            assignments,
        })
    }
}
