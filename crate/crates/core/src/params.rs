//! Named trainable tensors and their binding onto a tape.

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "parameter shape");
        self.entries[id.0].value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Records every tensor on `tape`; frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable))
            .collect();
        Bound { vars }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

/// Dense layer `x · W + b` over the trailing axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            glorot(rng, &[fan_in, fan_out], fan_in, fan_out),
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }

    /// Overwrites weight (and bias, if any) with zeros.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Sets the weight to the identity (square layers) and zeroes the bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        assert_eq!(self.fan_in, self.fan_out, "identity needs a square layer");
        self.zero(store);
        let n = self.fan_in;
        let w = store.get_mut(self.w).data_mut();
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
    }
}
