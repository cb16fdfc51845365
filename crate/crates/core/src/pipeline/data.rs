use std::collections::BTreeSet;

use super::{PipelineError, TrainConfig};
use crate::diffcore::Tensor;
use crate::embeddings::geohash_encode;
use crate::external_signals::{match_weather, WeatherStats, WeatherTable};
use crate::region_graph::io::Sensor;
use crate::region_graph::{
    build_temporal_adjacency, estimate_free_flow_speed, propagate_free_flow, pseudo_observations, Adjacency,
    GraphParams, IdwOptions, RegionGraph, SplitLabel, TrafficTensor,
};
use crate::st_model::GraphOperators;

/// Raw inputs of one experiment: graph with split labels, observations and
/// optional side information.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: RegionGraph,
    pub traffic: TrafficTensor,
    pub weather: Option<WeatherTable>,
    /// Precomputed spatial embeddings, one row per graph node.
    pub embeddings: Option<Tensor>,
}

impl Dataset {
    /// Aligns `sensors` to the observation columns and builds the graph.
    pub fn new(
        traffic: TrafficTensor,
        sensors: &[Sensor],
        weather: Option<WeatherTable>,
        split: Vec<SplitLabel>,
        params: &GraphParams,
    ) -> Result<Self, PipelineError> {
        let coords = traffic
            .node_ids
            .iter()
            .map(|id| {
                sensors
                    .iter()
                    .find(|s| &s.node_id == id)
                    .map(|s| s.coord)
                    .ok_or_else(|| PipelineError::Data(format!("node {id} has no sensor coordinates")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if split.len() != coords.len() {
            return Err(PipelineError::Data(format!(
                "{} split labels for {} nodes",
                split.len(),
                coords.len()
            )));
        }
        let graph = RegionGraph::new(traffic.node_ids.clone(), coords, split, params);
        Ok(Self {
            graph,
            traffic,
            weather,
            embeddings: None,
        })
    }

    /// Same data under different split labels.
    pub fn relabel(&self, split: Vec<SplitLabel>) -> Self {
        let mut out = self.clone();
        out.graph.split = split;
        out
    }
}

/// Global z-score over training-period entries of training nodes.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normaliser {
    pub mean: f64,
    pub std: f64,
}

impl Normaliser {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        let std = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Clone, Debug)]
pub struct WeatherInputs {
    pub table: WeatherTable,
    /// Matched station per node.
    pub index_map: Vec<usize>,
    pub stats: WeatherStats,
    /// Weather hour in force at each traffic step.
    pub hour_of_step: Vec<usize>,
}

/// Deterministic preprocessing shared by training and inference.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub node_ids: Vec<String>,
    pub positions: Vec<[f64; 2]>,
    pub a_sg: Adjacency,
    pub train_nodes: Vec<usize>,
    pub val_nodes: Vec<usize>,
    pub test_nodes: Vec<usize>,
    /// First step after the training time range.
    pub train_end: usize,
    pub norm: Normaliser,
    /// Normalised observations of every node, `[T_all, N, C]`.
    pub values: Tensor,
    /// The same in observation units.
    pub raw: Tensor,
    pub step_of_day: Vec<usize>,
    pub steps_per_day: usize,
    /// Free-flow speed per node in observation units.
    pub x_fspd: Vec<f64>,
    pub geohashes: Vec<String>,
    pub embeddings: Option<Tensor>,
    pub weather: Option<WeatherInputs>,
    pub idw: IdwOptions,
    pub q_kk: usize,
    pub q_ku: usize,
    /// Full graph with observed inputs and unobserved nodes filled in.
    pub inference: View,
}

impl Prepared {
    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn observed_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train_nodes.iter().chain(&self.val_nodes).copied().collect();
        v.sort_unstable();
        v
    }
}

/// One graph the network runs on: a node subset, which of them carry
/// pseudo-observations, and the matching operators.
#[derive(Clone, Debug)]
pub struct View {
    /// Global node indices in view order.
    pub nodes: Vec<usize>,
    /// Local indices whose inputs are pseudo-observations.
    pub hidden: Vec<usize>,
    /// Normalised inputs, `[T_all, n, C]`.
    pub inputs: Tensor,
    pub a_dtw: Adjacency,
    pub ops: GraphOperators,
    pub x_fspd: Vec<f64>,
}

/// Mean value at each step of the day over steps `[0, end)`.
pub fn daily_profile(series: &[f64], step_of_day: &[usize], steps_per_day: usize, end: usize) -> Vec<f64> {
    let mut sum = vec![0.0; steps_per_day];
    let mut count = vec![0usize; steps_per_day];
    for t in 0..end.min(series.len()) {
        sum[step_of_day[t]] += series[t];
        count[step_of_day[t]] += 1;
    }
    sum.iter()
        .zip(&count)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect()
}

/// Builds the view over `nodes` whose `hidden` members (local indices) are
/// replaced by pseudo-observations from the remaining ones.
///
/// Hidden inputs never read the hidden nodes' own values. The DTW
/// adjacency links visible nodes among themselves and points from visible
/// to hidden nodes only. Neighbour counts shrink when fewer visible nodes
/// are available.
pub fn build_view(
    prep: &Prepared,
    nodes: Vec<usize>,
    hidden: Vec<usize>,
    a_sg: Option<&Adjacency>,
) -> Result<View, PipelineError> {
    build_view_from(
        &prep.values,
        &prep.positions,
        &prep.step_of_day,
        prep.steps_per_day,
        prep.train_end,
        &prep.x_fspd,
        &prep.idw,
        (prep.q_kk, prep.q_ku),
        a_sg.cloned().unwrap_or_else(|| prep.a_sg.restrict(&nodes)),
        nodes,
        hidden,
    )
}

#[allow(clippy::too_many_arguments)]
fn build_view_from(
    values: &Tensor,
    positions: &[[f64; 2]],
    step_of_day: &[usize],
    steps_per_day: usize,
    train_end: usize,
    x_fspd: &[f64],
    idw: &IdwOptions,
    (q_kk, q_ku): (usize, usize),
    a_sg: Adjacency,
    nodes: Vec<usize>,
    hidden: Vec<usize>,
) -> Result<View, PipelineError> {
    let shape = values.shape();
    let (t_all, c) = (shape[0], shape[2]);
    let n = nodes.len();
    let hidden_set: BTreeSet<usize> = hidden.iter().copied().collect();
    let sources: Vec<usize> = (0..n).filter(|i| !hidden_set.contains(i)).collect();
    if sources.is_empty() {
        return Err(PipelineError::Data("a graph view needs at least one visible node".into()));
    }
    let mut sub = Tensor::zeros(&[t_all, n, c]);
    for t in 0..t_all {
        for (li, &g) in nodes.iter().enumerate() {
            if hidden_set.contains(&li) {
                continue;
            }
            for ch in 0..c {
                sub.data_mut()[(t * n + li) * c + ch] = values.data()[(t * shape[1] + g) * c + ch];
            }
        }
    }
    let local_pos: Vec<[f64; 2]> = nodes.iter().map(|&g| positions[g]).collect();
    let inputs = pseudo_observations(&sub, &local_pos, &hidden, &sources, idw)?;
    let profiles: Vec<Vec<f64>> = (0..n)
        .map(|li| {
            let s: Vec<f64> = (0..t_all).map(|t| inputs.data()[(t * n + li) * c]).collect();
            daily_profile(&s, step_of_day, steps_per_day, train_end)
        })
        .collect();
    let q_kk = q_kk.min(sources.len().saturating_sub(1));
    let q_ku = q_ku.min(sources.len());
    let a_dtw = build_temporal_adjacency(&profiles, &sources, &hidden, q_kk, q_ku)?;
    let ops = GraphOperators::new(&a_dtw, &a_sg);
    Ok(View {
        x_fspd: nodes.iter().map(|&g| x_fspd[g]).collect(),
        nodes,
        hidden,
        inputs,
        a_dtw,
        ops,
    })
}

/// Window starts `s` with `[s, s + span)` inside `[from, to)`.
pub fn window_starts(from: usize, to: usize, span: usize) -> Vec<usize> {
    if to < from + span {
        return Vec::new();
    }
    (from..=to - span).collect()
}

/// Windows stacked along the node axis: row `(t, b, i)` holds node `i` of
/// window `b` at step `t`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub starts: Vec<usize>,
    /// Nodes per window.
    pub nodes: usize,
    /// Normalised inputs, `[T, B·n, C]`.
    pub x: Tensor,
    /// Normalised targets, `[T', B·n, C]`.
    pub truth: Tensor,
    /// Step of day per `(t, b)`.
    pub step_of_day: Vec<usize>,
    /// Standardised weather, `[T_w, B·n, 4]`.
    pub weather: Option<Tensor>,
    pub x_fspd: Vec<f64>,
    /// Stacked rows of hidden nodes.
    pub hidden_rows: Vec<usize>,
}

impl Batch {
    pub fn windows(&self) -> usize {
        self.starts.len()
    }
}

pub fn make_batch(prep: &Prepared, view: &View, starts: &[usize], steps: usize, horizon: usize, t_w: usize) -> Batch {
    let n = view.nodes.len();
    let b = starts.len();
    let c = prep.channels();
    let total = prep.nodes();
    let mut x = Vec::with_capacity(steps * b * n * c);
    let mut step_of_day = Vec::with_capacity(steps * b);
    for t in 0..steps {
        for &s in starts {
            step_of_day.push(prep.step_of_day[s + t]);
            x.extend_from_slice(&view.inputs.data()[((s + t) * n) * c..((s + t + 1) * n) * c]);
        }
    }
    let mut truth = Vec::with_capacity(horizon * b * n * c);
    for h in 0..horizon {
        for &s in starts {
            let t = s + steps + h;
            for &g in &view.nodes {
                truth.extend_from_slice(&prep.values.data()[(t * total + g) * c..(t * total + g + 1) * c]);
            }
        }
    }
    let weather = prep.weather.as_ref().map(|w| {
        let map: Vec<usize> = view.nodes.iter().map(|&g| w.index_map[g]).collect();
        let per: Vec<Tensor> = starts
            .iter()
            .map(|&s| w.table.window(&map, w.hour_of_step[s + steps - 1], t_w, &w.stats))
            .collect();
        let mut data = Vec::with_capacity(t_w * b * n * 4);
        for k in 0..t_w {
            for p in &per {
                data.extend_from_slice(&p.data()[k * n * 4..(k + 1) * n * 4]);
            }
        }
        Tensor::new(vec![t_w, b * n, 4], data).expect("shape")
    });
    let x_fspd = (0..b).flat_map(|_| view.x_fspd.iter().copied()).collect();
    let hidden_rows = (0..b).flat_map(|w| view.hidden.iter().map(move |&i| w * n + i)).collect();
    Batch {
        starts: starts.to_vec(),
        nodes: n,
        x: Tensor::new(vec![steps, b * n, c], x).expect("shape"),
        truth: Tensor::new(vec![horizon, b * n, c], truth).expect("shape"),
        step_of_day,
        weather,
        x_fspd,
        hidden_rows,
    }
}

/// Normalisation, free-flow speeds, weather matching and the inference view.
pub fn prepare(ds: &Dataset, cfg: &TrainConfig) -> Result<Prepared, PipelineError> {
    cfg.validate()?;
    let g = &ds.graph;
    let x = &ds.traffic;
    let (t_all, n, c) = (x.steps(), x.nodes(), x.channels);
    if g.len() != n {
        return Err(PipelineError::Data(format!("graph has {} nodes, observations {n}", g.len())));
    }
    let train_nodes = g.nodes_with(SplitLabel::Train);
    let val_nodes = g.nodes_with(SplitLabel::Val);
    let test_nodes = g.nodes_with(SplitLabel::Test);
    if train_nodes.len() < 3 {
        return Err(PipelineError::Data(format!(
            "need at least 3 training nodes, got {}",
            train_nodes.len()
        )));
    }
    let train_end = ((t_all as f64) * cfg.train_fraction).floor() as usize;
    let span = cfg.model.steps + cfg.model.horizon;
    if train_end < span + 1 {
        return Err(PipelineError::Data(format!(
            "training range of {train_end} steps is shorter than one window of {span}"
        )));
    }
    let norm = Normaliser::fit(
        (0..train_end).flat_map(|t| train_nodes.iter().flat_map(move |&i| (0..c).map(move |ch| (t, i, ch))))
            .filter(|&(t, i, _)| x.observed(t, i))
            .map(|(t, i, ch)| x.get(t, i, ch)),
    );
    let raw = Tensor::new(vec![t_all, n, c], x.values.clone()).expect("shape");
    let values = raw.map(|v| norm.apply(v));
    let step_of_day: Vec<usize> = (0..t_all).map(|t| x.step_of_day(t)).collect();
    let steps_per_day = x.steps_per_day();
    if cfg.model.steps_per_day != steps_per_day {
        return Err(PipelineError::Config(format!(
            "model expects {} steps per day, data has {steps_per_day}",
            cfg.model.steps_per_day
        )));
    }

    let minutes: Vec<u32> = (0..train_end).map(|t| x.minute_of_day(t)).collect();
    let mut x_fspd = vec![0.0; n];
    let observed: Vec<usize> = {
        let mut v: Vec<usize> = train_nodes.iter().chain(&val_nodes).copied().collect();
        v.sort_unstable();
        v
    };
    for &i in &observed {
        let speeds: Vec<f64> = (0..train_end).map(|t| x.get(t, i, 0)).collect();
        x_fspd[i] = estimate_free_flow_speed(&g.node_ids[i], &speeds, &minutes)?;
    }

    let geohashes = g
        .coords
        .iter()
        .map(|p| geohash_encode(p.lat, p.lon, cfg.model.hash.length))
        .collect::<Result<Vec<_>, _>>()?;
    let embeddings = match (&cfg.model.spatial, &ds.embeddings) {
        (super::SpatialKind::Llm, None) => {
            return Err(PipelineError::MissingEmbedding(
                g.node_ids.first().cloned().unwrap_or_default(),
            ))
        }
        (_, e) => e.clone(),
    };
    if let Some(e) = &embeddings {
        if e.rows() != n {
            return Err(PipelineError::Data(format!("{} embedding rows for {n} nodes", e.rows())));
        }
    }

    let weather = match (&ds.weather, cfg.model.use_weather) {
        (Some(table), true) => {
            let index_map = match_weather(&g.coords, &table.coords())?;
            let hour_of_step: Vec<usize> = x.timestamps.iter().map(|&ts| table.hour_at(ts)).collect();
            let stats = table.stats(hour_of_step[train_end - 1] + 1);
            Some(WeatherInputs {
                table: table.clone(),
                index_map,
                stats,
                hour_of_step,
            })
        }
        (None, true) => return Err(PipelineError::Config("weather fusion enabled but no weather data".into())),
        _ => None,
    };

    let idw = IdwOptions {
        k: cfg.idw_k,
        power: cfg.idw_power,
        radius: None,
    };
    let all: Vec<usize> = (0..n).collect();
    let hidden = test_nodes.clone();
    let mut inference = build_view_from(
        &values,
        &g.positions,
        &step_of_day,
        steps_per_day,
        train_end,
        &x_fspd,
        &idw,
        (cfg.q_kk, cfg.q_ku),
        g.a_sg.clone(),
        all,
        hidden,
    )?;
    propagate_free_flow(&mut x_fspd, &inference.a_dtw, &test_nodes);
    inference.x_fspd = x_fspd.clone();

    Ok(Prepared {
        node_ids: g.node_ids.clone(),
        positions: g.positions.clone(),
        a_sg: g.a_sg.clone(),
        train_nodes,
        val_nodes,
        test_nodes,
        train_end,
        norm,
        values,
        raw,
        step_of_day,
        steps_per_day,
        x_fspd,
        geohashes,
        embeddings,
        weather,
        idw,
        q_kk: cfg.q_kk,
        q_ku: cfg.q_ku,
        inference,
    })
}
