//! Split construction, per-split train and score, and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, SplitChoice};
use super::{evaluate, test_windows, EvalError, Metrics, ScoreTable, SplitScores};
use crate::diffcore::Tensor;
use crate::embeddings::{load_precomputed_spatial_embeddings, EmbeddingError};
use crate::external_signals::read_weather;
use crate::pipeline::{attention_map, prepare, train_prepared, Dataset, ModelState, PipelineError, Prepared, TrainConfig, TrainingLog};
use crate::region_graph::io::{read_observations, read_sensors};
use crate::region_graph::{split_region_oriented, SplitLabel};

pub const REPORT_HEADER: &str = "split,horizon_step,rmse,mae,mape,r2,mape_excluded_count";

/// Reads the configured files into a dataset with every node labelled train.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, EvalError> {
    let data = |e: &dyn std::fmt::Display| EvalError::Data(e.to_string());
    let sensors = read_sensors(&cfg.sensors).map_err(|e| data(&e))?;
    let traffic = read_observations(&cfg.observations).map_err(|e| data(&e))?;
    let weather = match &cfg.weather {
        Some(p) => Some(read_weather(p).map_err(|e| data(&e))?),
        None => None,
    };
    let labels = vec![SplitLabel::Train; traffic.nodes()];
    let mut ds = Dataset::new(traffic, &sensors, weather, labels, &cfg.graph_params())?;
    if let Some(p) = &cfg.embeddings {
        let table = load_precomputed_spatial_embeddings(p, &ds.graph.node_ids).map_err(|e| match e {
            EmbeddingError::MissingNode(id) => EvalError::Pipeline(PipelineError::MissingEmbedding(id)),
            other => data(&other),
        })?;
        ds.embeddings = Some(table);
    }
    Ok(ds)
}

/// The training config with the data-dependent fields filled in.
pub fn resolve_train_config(cfg: &ExperimentConfig, ds: &Dataset) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.model.steps_per_day = ds.traffic.steps_per_day();
    t.model.use_weather &= ds.weather.is_some();
    t
}

/// Train, validation and test proportions for an unobserved fraction,
/// keeping the configured train:val proportion.
pub fn sweep_ratios(base: (f64, f64, f64), unobserved: f64) -> (f64, f64, f64) {
    let observed = 1.0 - unobserved;
    let share = base.0 / (base.0 + base.1);
    (observed * share, observed * (1.0 - share), unobserved)
}

/// Relabels `ds` for one split.
pub fn apply_split(ds: &Dataset, choice: SplitChoice, ratios: (f64, f64, f64)) -> Result<Dataset, EvalError> {
    let spec = split_region_oriented(&ds.graph.coords, choice.mode, ratios, choice.mirrored)
        .map_err(PipelineError::from)?;
    Ok(ds.relabel(spec.labels))
}

/// Everything produced for one split.
#[derive(Clone, Debug)]
pub struct SplitOutcome {
    pub name: String,
    pub scores: SplitScores,
    pub log: TrainingLog,
    /// Mean weather attention over the test windows, `[T, T_w]`.
    pub attention: Option<Tensor>,
}

/// Trains on one split and returns the prepared data and trained state.
pub fn train_split(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    choice: SplitChoice,
    ratios: (f64, f64, f64),
) -> Result<(Prepared, ModelState, TrainingLog), EvalError> {
    let ds = apply_split(ds, choice, ratios)?;
    let tc = resolve_train_config(cfg, &ds);
    let prep = prepare(&ds, &tc)?;
    let (state, log) = train_prepared(&prep, &tc)?;
    Ok((prep, state, log))
}

pub fn run_split(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    choice: SplitChoice,
    ratios: (f64, f64, f64),
) -> Result<SplitOutcome, EvalError> {
    let (prep, state, log) = train_split(ds, cfg, choice, ratios)?;
    let scores = evaluate(&state, &prep)?;
    let attention = if cfg.attention {
        let m = &state.config.model;
        attention_map(&state, &prep, &test_windows(&prep, m.steps, m.horizon))?
    } else {
        None
    };
    Ok(SplitOutcome {
        name: choice.name(),
        scores,
        log,
        attention,
    })
}

/// One report set: every configured split at one unobserved fraction.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    /// Unobserved fraction in sweep mode.
    pub ratio: Option<f64>,
    pub dir: PathBuf,
    pub splits: Vec<SplitOutcome>,
}

impl ExperimentReport {
    /// Arithmetic mean of the per-split pooled model RMSE.
    pub fn mean_rmse(&self) -> f64 {
        self.splits.iter().map(|s| s.scores.model.pooled.rmse).sum::<f64>() / self.splits.len() as f64
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn row(out: &mut String, split: &str, step: &str, m: &Metrics) {
    writeln!(
        out,
        "{split},{step},{},{},{},{},{}",
        m.rmse,
        m.mae,
        fmt_opt(m.mape),
        fmt_opt(m.r2),
        m.mape_excluded
    )
    .expect("string write");
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Arithmetic mean of per-split metrics; exclusion counts are summed.
pub fn average_metrics(ms: &[&Metrics]) -> Metrics {
    let k = ms.len() as f64;
    Metrics {
        rmse: ms.iter().map(|m| m.rmse).sum::<f64>() / k,
        mae: ms.iter().map(|m| m.mae).sum::<f64>() / k,
        mape: mean_opt(ms.iter().map(|m| m.mape)),
        r2: mean_opt(ms.iter().map(|m| m.r2)),
        mape_excluded: ms.iter().map(|m| m.mape_excluded).sum(),
        count: ms.iter().map(|m| m.count).sum(),
    }
}

/// Report CSV: the resolved config as `#` lines, the column header, one row
/// per (split, horizon step), a pooled `all` row per split, then averages.
pub fn report_csv(config_text: &str, tables: &[(String, &ScoreTable)]) -> String {
    let mut out = String::new();
    for line in config_text.lines() {
        writeln!(out, "# {line}").expect("string write");
    }
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for (name, t) in tables {
        for (h, m) in t.per_step.iter().enumerate() {
            row(&mut out, name, &(h + 1).to_string(), m);
        }
        row(&mut out, name, "all", &t.pooled);
    }
    if let Some((_, first)) = tables.first() {
        for h in 0..first.per_step.len() {
            let ms: Vec<&Metrics> = tables.iter().map(|(_, t)| &t.per_step[h]).collect();
            row(&mut out, "average", &(h + 1).to_string(), &average_metrics(&ms));
        }
        let ms: Vec<&Metrics> = tables.iter().map(|(_, t)| &t.pooled).collect();
        row(&mut out, "average", "all", &average_metrics(&ms));
    }
    out
}

/// Attention CSV `t,t_prime,weight` from a `[T, T_w]` map.
pub fn attention_csv(alpha: &Tensor) -> String {
    let (t_len, t_w) = (alpha.shape()[0], alpha.shape()[1]);
    let mut out = String::from("t,t_prime,weight\n");
    for t in 0..t_len {
        for tp in 0..t_w {
            writeln!(out, "{t},{tp},{}", alpha.data()[t * t_w + tp]).expect("string write");
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|e| EvalError::Data(format!("{}: {e}", path.display())))
}

/// Writes the model and baseline reports, training logs and attention maps.
pub fn write_report_set(dir: &Path, config_text: &str, splits: &[SplitOutcome]) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|e| EvalError::Data(format!("{}: {e}", dir.display())))?;
    let pick = |f: fn(&SplitScores) -> &ScoreTable| -> Vec<(String, &ScoreTable)> {
        splits.iter().map(|s| (s.name.clone(), f(&s.scores))).collect()
    };
    write(&dir.join("report.csv"), &report_csv(config_text, &pick(|s| &s.model)))?;
    write(&dir.join("report_historical_average.csv"), &report_csv(config_text, &pick(|s| &s.historical)))?;
    write(&dir.join("report_idw.csv"), &report_csv(config_text, &pick(|s| &s.idw)))?;
    for s in splits {
        write(&dir.join(format!("train_log_{}.csv", s.name)), &s.log.to_csv())?;
        if let Some(a) = &s.attention {
            write(&dir.join(format!("attention_{}.csv", s.name)), &attention_csv(a))?;
        }
    }
    Ok(())
}

/// Runs every configured split (once per sweep ratio in sweep mode) and
/// writes one report set per run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>, EvalError> {
    let ds = load_dataset(cfg)?;
    let points: Vec<(Option<f64>, (f64, f64, f64), PathBuf)> = match &cfg.sweep_ratios {
        None => vec![(None, cfg.ratios, cfg.output_dir.clone())],
        Some(rs) => rs
            .iter()
            .map(|&r| (Some(r), sweep_ratios(cfg.ratios, r), cfg.output_dir.join(format!("ratio_{r}"))))
            .collect(),
    };
    let mut reports = Vec::with_capacity(points.len());
    for (ratio, ratios, dir) in points {
        let mut point = cfg.clone();
        point.ratios = ratios;
        point.sweep_ratios = None;
        let splits = cfg
            .splits
            .iter()
            .map(|&c| run_split(&ds, &point, c, ratios))
            .collect::<Result<Vec<_>, _>>()?;
        write_report_set(&dir, &point.resolved(), &splits)?;
        reports.push(ExperimentReport { ratio, dir, splits });
    }
    Ok(reports)
}

pub fn run_experiment_file(path: &Path) -> Result<Vec<ExperimentReport>, EvalError> {
    run_experiment(&ExperimentConfig::load(path)?)
}
