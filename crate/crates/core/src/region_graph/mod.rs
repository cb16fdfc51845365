//! Region graph construction: splits, adjacencies, masking,
//! pseudo-observations and free-flow speeds.

mod adjacency;
mod free_flow;
pub mod io;
mod masking;
mod split;
mod traffic;

pub use adjacency::{
    build_spatial_adjacency, build_temporal_adjacency, build_temporal_adjacency_from_costs,
    default_bandwidth, dtw_distance, Adjacency,
};
pub use free_flow::{estimate_free_flow_speed, is_non_peak, propagate_free_flow};
pub use masking::{pseudo_observations, random_subgraph_mask, IdwOptions};
pub use split::{split_region, split_region_oriented, SplitLabel, SplitMode, SplitSpec};
pub use traffic::TrafficTensor;

use thiserror::Error;

use crate::geo::{LatLon, Projection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegionError {
    #[error("at least 3 nodes are required, got {0}")]
    TooFewNodes(usize),
    #[error("split ratios must be positive")]
    BadRatios,
    #[error("DTW requires non-empty series")]
    EmptySeries,
    #[error("need more observed nodes: q = {q} but only {available} candidates")]
    InsufficientObserved { q: usize, available: usize },
    #[error("no unmasked observed nodes to draw pseudo-observations from")]
    NoObservedNodes,
    #[error("node {0} has no non-peak samples for free-flow estimation")]
    NoNonPeakSamples(String),
    #[error("{0}")]
    Data(String),
}

/// Default neighbour counts and kernel threshold for the adjacencies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphParams {
    pub epsilon_sg: f64,
    /// Kernel bandwidth in km; `None` uses the standard deviation of
    /// pairwise distances.
    pub sigma: Option<f64>,
    pub q_kk: usize,
    pub q_ku: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            epsilon_sg: 0.1,
            sigma: None,
            q_kk: 3,
            q_ku: 3,
        }
    }
}

/// Sensor nodes with coordinates, split labels and the spatial adjacency.
#[derive(Clone, Debug)]
pub struct RegionGraph {
    pub node_ids: Vec<String>,
    pub coords: Vec<LatLon>,
    /// Planar positions (km) under a projection centred on the region.
    pub positions: Vec<[f64; 2]>,
    pub split: Vec<SplitLabel>,
    pub a_sg: Adjacency,
    pub sigma: f64,
}

impl RegionGraph {
    pub fn new(
        node_ids: Vec<String>,
        coords: Vec<LatLon>,
        split: Vec<SplitLabel>,
        params: &GraphParams,
    ) -> Self {
        let positions = Projection::centred(&coords).project_all(&coords);
        let sigma = params
            .sigma
            .unwrap_or_else(|| default_bandwidth(&positions));
        let a_sg = build_spatial_adjacency(&positions, sigma, params.epsilon_sg);
        Self {
            node_ids,
            coords,
            positions,
            split,
            a_sg,
            sigma,
        }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn nodes_with(&self, label: SplitLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == label).collect()
    }

    /// Train and validation nodes.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] != SplitLabel::Test)
            .collect()
    }

    pub fn unobserved(&self) -> Vec<usize> {
        self.nodes_with(SplitLabel::Test)
    }
}
