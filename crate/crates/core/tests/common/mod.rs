#![allow(dead_code)]

pub mod primitives;

use gencast::lwr_sim::{synth_dataset, SynthConfig, SynthData};
use gencast::pipeline::{Dataset, TrainConfig};
use gencast::region_graph::{split_region_oriented, GraphParams, SplitMode};

pub fn corridor(sensors: usize, days: usize) -> SynthData {
    synth_dataset(&SynthConfig::corridor(sensors, days, 15)).expect("simulation")
}

pub fn dataset(data: &SynthData, mode: SplitMode, ratios: (f64, f64, f64), mirrored: bool) -> Dataset {
    let coords: Vec<_> = data.sensors.iter().map(|s| s.coord).collect();
    let split = split_region_oriented(&coords, mode, ratios, mirrored).expect("split");
    Dataset::new(
        data.traffic.clone(),
        &data.sensors,
        Some(data.weather.clone()),
        split.labels,
        &GraphParams::default(),
    )
    .expect("dataset")
}

/// A narrow network and short windows so a run takes seconds.
pub fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.steps = 4;
    c.model.horizon = 4;
    c.model.t_w = 4;
    c.model.d_ste = 8;
    c.model.hash.width = 8;
    c.model.hash.layers = 1;
    c.model.st.hidden = 8;
    c.model.st.head_hidden = 16;
    c.model.st.d_z = 8;
    c.model.st.sg = 3;
    c.batch_size = 4;
    c.epochs = 3;
    c.max_batches = Some(2);
    c.val_windows = 4;
    c.learning_rate = 0.003;
    c.weights.theta = 1e-6;
    c
}
