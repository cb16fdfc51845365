use crate::diffcore::{Gradients, Tensor};
use crate::params::{Bound, ParamStore};

/// Adam with the usual moment coefficients and no schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of every trainable entry that received a gradient.
    /// Returns the global gradient norm before clipping.
    pub fn update(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, clip: Option<f64>) -> f64 {
        let vars = bound.vars();
        let norm = store
            .entries()
            .iter()
            .zip(vars)
            .filter(|(e, _)| e.trainable)
            .filter_map(|(_, &v)| grads.get(v))
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let factor = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (entry, &var)) in store.entries_mut().iter_mut().zip(vars).enumerate() {
            if !entry.trainable {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in entry.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * factor;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0, -2.0]), true);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let sq = tape.square(p.var(id));
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            opt.update(&mut store, &p, &g, None);
        }
        assert!(store.get(id).max_abs() < 1e-2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 1.0]), true);
        let frozen = store.add("f", Tensor::vector(vec![1.0]), false);
        let mut opt = Adam::new(&store, 0.01);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let w = tape.scale(p.var(id), 7.0);
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        opt.update(&mut store, &p, &g, None);
        for &v in store.get(id).data() {
            assert!((v - 0.99).abs() < 1e-9);
        }
        assert_eq!(store.get(frozen).data(), &[1.0]);
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.0]), true);
        let mut opt = Adam::new(&store, 0.01);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let w = tape.scale(p.var(id), 10.0);
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(opt.update(&mut store, &p, &g, Some(1.0)), 10.0);
    }
}
