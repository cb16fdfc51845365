//! Metrics, reference baselines, configuration and the experiment runner.

mod baselines;
mod config;
mod metrics;
mod runner;

pub use baselines::{HistoricalAverage, IdwPersistence};
pub use config::{ExperimentConfig, SplitChoice};
pub use metrics::{metrics, r_squared, Metrics};
pub use runner::{
    apply_split, attention_csv, average_metrics, load_dataset, report_csv, resolve_train_config, run_experiment,
    run_experiment_file, run_split, sweep_ratios, train_split, write_report_set, ExperimentReport, SplitOutcome,
    REPORT_HEADER,
};

use thiserror::Error;

use crate::diffcore::Tensor;
use crate::pipeline::{forecast_unobserved, window_starts, ModelState, PipelineError, Prepared};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truth has zero variance; R² is undefined")]
    ZeroVarianceTruth,
    #[error("no observed nodes to build a baseline from")]
    NoObservedNodes,
    #[error("config line {line}: {field}: {message}")]
    Config { line: usize, field: String, message: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl EvalError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::Config { .. } | EvalError::Pipeline(PipelineError::Config(_)) => 2,
            EvalError::Pipeline(PipelineError::DivergenceDetected { .. }) => 4,
            _ => 3,
        }
    }
}

/// Metrics per horizon step and over all steps pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub per_step: Vec<Metrics>,
    pub pooled: Metrics,
}

impl ScoreTable {
    /// Scores `[T', m, C]` forecasts against matching truth tensors.
    pub fn score(preds: &[Tensor], truths: &[Tensor]) -> Result<Self, EvalError> {
        let Some(first) = truths.first() else {
            return Err(EvalError::Data("no test windows to score".into()));
        };
        let horizon = first.shape()[0];
        let per = first.len() / horizon;
        let mut steps: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); horizon];
        for (p, t) in preds.iter().zip(truths) {
            if p.shape() != t.shape() {
                return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), t.shape())));
            }
            for (h, s) in steps.iter_mut().enumerate() {
                s.0.extend_from_slice(&p.data()[h * per..(h + 1) * per]);
                s.1.extend_from_slice(&t.data()[h * per..(h + 1) * per]);
            }
        }
        let per_step = steps.iter().map(|(p, t)| metrics(p, t)).collect::<Result<Vec<_>, _>>()?;
        let all_p: Vec<f64> = steps.iter().flat_map(|s| s.0.iter().copied()).collect();
        let all_t: Vec<f64> = steps.iter().flat_map(|s| s.1.iter().copied()).collect();
        Ok(Self {
            per_step,
            pooled: metrics(&all_p, &all_t)?,
        })
    }
}

/// Model and baseline scores on the unobserved nodes of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitScores {
    pub model: ScoreTable,
    pub historical: ScoreTable,
    pub idw: ScoreTable,
}

/// Window starts whose inputs and targets lie after the training range.
pub fn test_windows(prep: &Prepared, steps: usize, horizon: usize) -> Vec<usize> {
    window_starts(prep.train_end, prep.steps(), steps + horizon)
}

/// Truth `[T', N_u, C]` in observation units for a window start.
pub fn unobserved_truth(prep: &Prepared, start: usize, steps: usize, horizon: usize) -> Tensor {
    let (n, c) = (prep.nodes(), prep.channels());
    let m = prep.test_nodes.len();
    let mut data = Vec::with_capacity(horizon * m * c);
    for h in 0..horizon {
        let t = start + steps + h;
        for &g in &prep.test_nodes {
            data.extend_from_slice(&prep.raw.data()[(t * n + g) * c..(t * n + g + 1) * c]);
        }
    }
    Tensor::new(vec![horizon, m, c], data).expect("shape")
}

/// Scores the model and both baselines on the test windows.
pub fn evaluate(state: &ModelState, prep: &Prepared) -> Result<SplitScores, EvalError> {
    let (steps, horizon) = (state.config.model.steps, state.config.model.horizon);
    let starts = test_windows(prep, steps, horizon);
    if starts.is_empty() || prep.test_nodes.is_empty() {
        return Err(EvalError::Data("no unobserved nodes or test windows".into()));
    }
    let truths: Vec<Tensor> = starts.iter().map(|&s| unobserved_truth(prep, s, steps, horizon)).collect();
    let model = forecast_unobserved(state, prep, &starts)?;

    let observed = prep.observed_nodes();
    let ha = HistoricalAverage::fit(
        &prep.raw,
        &prep.step_of_day,
        prep.steps_per_day,
        prep.train_end,
        &prep.positions,
        &observed,
        &prep.test_nodes,
        &prep.idw,
    )?;
    let ha_preds: Vec<Tensor> = starts.iter().map(|&s| ha.forecast(&prep.step_of_day, s + steps, horizon)).collect();
    let idw = IdwPersistence::new(&prep.positions, &observed, &prep.test_nodes, &prep.idw)?;
    let idw_preds: Vec<Tensor> = starts.iter().map(|&s| idw.forecast(&prep.raw, s + steps - 1, horizon)).collect();

    Ok(SplitScores {
        model: ScoreTable::score(&model, &truths)?,
        historical: ScoreTable::score(&ha_preds, &truths)?,
        idw: ScoreTable::score(&idw_preds, &truths)?,
    })
}
