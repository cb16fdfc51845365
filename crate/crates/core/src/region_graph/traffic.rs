use chrono::{NaiveDateTime, Timelike};

use crate::diffcore::Tensor;

/// Observations shaped `[T, N, C]` with a per-(time, node) observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficTensor {
    pub timestamps: Vec<NaiveDateTime>,
    pub node_ids: Vec<String>,
    pub channels: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub interval_minutes: u32,
}

impl TrafficTensor {
    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.interval_minutes.max(1)) as usize
    }

    pub fn get(&self, t: usize, n: usize, c: usize) -> f64 {
        self.values[(t * self.nodes() + n) * self.channels + c]
    }

    pub fn observed(&self, t: usize, n: usize) -> bool {
        self.mask[t * self.nodes() + n]
    }

    pub fn series(&self, n: usize, c: usize) -> Vec<f64> {
        (0..self.steps()).map(|t| self.get(t, n, c)).collect()
    }

    pub fn minute_of_day(&self, t: usize) -> u32 {
        let ts = self.timestamps[t];
        ts.hour() * 60 + ts.minute()
    }

    /// Index of the step within its day.
    pub fn step_of_day(&self, t: usize) -> usize {
        (self.minute_of_day(t) / self.interval_minutes.max(1)) as usize
    }

    /// Values for steps `[start, end)` of `nodes`, as a `[T, |nodes|, C]` tensor.
    pub fn window(&self, start: usize, end: usize, nodes: &[usize]) -> Tensor {
        let c = self.channels;
        let mut data = Vec::with_capacity((end - start) * nodes.len() * c);
        for t in start..end {
            for &n in nodes {
                for ch in 0..c {
                    data.push(self.get(t, n, ch));
                }
            }
        }
        Tensor::new(vec![end - start, nodes.len(), c], data).expect("window shape")
    }

    /// Restricts to a subset of nodes, keeping their order.
    pub fn select_nodes(&self, nodes: &[usize]) -> Self {
        let c = self.channels;
        let mut values = Vec::with_capacity(self.steps() * nodes.len() * c);
        let mut mask = Vec::with_capacity(self.steps() * nodes.len());
        for t in 0..self.steps() {
            for &n in nodes {
                for ch in 0..c {
                    values.push(self.get(t, n, ch));
                }
                mask.push(self.observed(t, n));
            }
        }
        Self {
            timestamps: self.timestamps.clone(),
            node_ids: nodes.iter().map(|&n| self.node_ids[n].clone()).collect(),
            channels: c,
            values,
            mask,
            interval_minutes: self.interval_minutes,
        }
    }

    /// Clears the mask of `nodes` at every step.
    pub fn hide_nodes(&mut self, nodes: &[usize]) {
        let n = self.nodes();
        for t in 0..self.steps() {
            for &i in nodes {
                self.mask[t * n + i] = false;
            }
        }
    }
}
