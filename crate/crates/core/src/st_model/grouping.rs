use std::sync::Arc;

use rand::Rng;

use super::ModelError;
use crate::diffcore::{Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamStore};

/// Soft assignment of `(node, channel group)` slices to learned centres.
#[derive(Clone, Copy, Debug)]
pub struct SpatialGrouping {
    pub proj: Linear,
    pub sg: usize,
    pub cg: usize,
    pub hidden: usize,
}

impl SpatialGrouping {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        hidden: usize,
        sg: usize,
        cg: usize,
    ) -> Result<Self, ModelError> {
        if cg == 0 || hidden % cg != 0 {
            return Err(ModelError::DivisibilityError { hidden, cg });
        }
        Ok(Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), hidden, sg * cg * cg, true),
            sg,
            cg,
            hidden,
        })
    }

    pub fn centres(&self) -> usize {
        self.sg * self.cg
    }

    /// Assignment matrix `W_s`, shaped `[N·cg, sg·cg]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.hidden {
            return Err(ModelError::ShapeMismatch(format!("grouping input {shape:?}")));
        }
        let (t, n, d) = (shape[0], shape[1], shape[2]);
        let (cg, k) = (self.cg, self.centres());
        let dp = d / cg;

        let wide = tape.reshape(h, &[t, n * d]);
        let pool = Arc::new(Tensor::full(&[1, t], 1.0 / t as f64));
        let pooled = tape.block_left_mul(pool, wide);
        let pooled = tape.reshape(pooled, &[n, d]);
        let z = tape.reshape(pooled, &[n * cg, dp]);

        // [N, K·cg] -> rows (n, k) -> rows (k, n) -> [K, N·cg]
        let proj = self.proj.forward(tape, p, pooled);
        let proj = tape.reshape(proj, &[n * k, cg]);
        let idx: Vec<Option<usize>> = (0..k * n).map(|r| Some((r % n) * k + r / n)).collect();
        let proj = tape.gather_rows(proj, Arc::new(idx));
        let w_c = tape.reshape(proj, &[k, n * cg]);

        let mix = tape.softmax_rows(w_c);
        let centres = tape.matmul(mix, z);
        let dist = tape.cdist(z, centres);
        let neg = tape.scale(dist, -1.0);
        Ok(tape.softmax_rows(neg))
    }
}
