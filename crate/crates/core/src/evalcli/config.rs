//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory of the config file. Optional values take
//! the literal `none`.

use std::path::{Path, PathBuf};

use super::EvalError;
use crate::pipeline::{SpatialKind, TrainConfig};
use crate::region_graph::{GraphParams, SplitMode};

/// One spatial split: cut direction and which side is unobserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitChoice {
    pub mode: SplitMode,
    pub mirrored: bool,
}

impl SplitChoice {
    pub fn name(&self) -> String {
        let base = match self.mode {
            SplitMode::Horizontal => "horizontal",
            SplitMode::Vertical => "vertical",
            SplitMode::Ring => "ring",
        };
        if self.mirrored {
            format!("{base}_mirrored")
        } else {
            base.to_string()
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let (base, mirrored) = match s.strip_suffix("_mirrored") {
            Some(b) => (b, true),
            None => (s, false),
        };
        Ok(Self {
            mode: base.parse()?,
            mirrored,
        })
    }

    /// Horizontal and vertical cuts, each with both sides unobserved.
    pub fn standard() -> Vec<Self> {
        [SplitMode::Horizontal, SplitMode::Vertical]
            .into_iter()
            .flat_map(|mode| [false, true].map(|mirrored| Self { mode, mirrored }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub sensors: PathBuf,
    pub observations: PathBuf,
    pub weather: Option<PathBuf>,
    /// Precomputed per-node embeddings for the frozen spatial variant.
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub splits: Vec<SplitChoice>,
    /// Train, validation and test proportions.
    pub ratios: (f64, f64, f64),
    /// Unobserved fractions to sweep; each keeps the train:val proportion.
    pub sweep_ratios: Option<Vec<f64>>,
    pub attention: bool,
    pub epsilon_sg: f64,
    pub sigma: Option<f64>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sensors: PathBuf::from("sensors.csv"),
            observations: PathBuf::from("observations.csv"),
            weather: None,
            embeddings: None,
            output_dir: PathBuf::from("results"),
            splits: SplitChoice::standard(),
            ratios: (4.0, 1.0, 5.0),
            sweep_ratios: None,
            attention: true,
            epsilon_sg: 0.1,
            sigma: None,
            train: TrainConfig::default(),
        }
    }
}

fn opt<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, String> {
    if v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    v.split(',').map(|s| f(s.trim())).collect()
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every recognised key, in the order `resolved` emits them.
    pub const KEYS: &'static [&'static str] = &[
        "sensors", "observations", "weather", "embeddings", "output_dir", "splits", "ratios", "sweep_ratios",
        "attention", "epsilon_sg", "sigma", "steps", "horizon", "d_ste", "spatial", "hash_length", "hash_width",
        "hash_layers", "hidden", "layers", "kernel", "dilations", "sg", "cg", "head_hidden", "d_z", "t_w",
        "use_weather", "epochs", "batch_size", "learning_rate", "mask_ratio", "seed", "lambda", "mu", "theta",
        "omega", "tau", "patience", "max_batches", "val_windows", "train_fraction", "q_kk", "q_ku", "idw_k",
        "idw_power", "use_physics", "clip_norm",
    ];

    /// Parses config text; `base` anchors relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self, EvalError> {
        let mut cfg = Self::default();
        cfg.output_dir = base.join(&cfg.output_dir);
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |field: &str, message: String| EvalError::Config {
                line,
                field: field.to_string(),
                message,
            };
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(err("", format!("expected `key = value`, found `{trimmed}`")));
            };
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(err(k, "key given more than once".into()));
            }
            cfg.set(k, v, base).map_err(|m| err(k, m))?;
            seen.push(k.to_string());
        }
        for key in ["sensors", "observations"] {
            if !seen.iter().any(|s| s == key) {
                return Err(EvalError::Config {
                    line: 0,
                    field: key.to_string(),
                    message: "required key is missing".into(),
                });
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Config {
            line: 0,
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies `key=value` overrides after loading; diagnostics use line 0.
    pub fn apply_overrides(&mut self, overrides: &[String], base: &Path) -> Result<(), EvalError> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| EvalError::Config {
                line: 0,
                field: o.clone(),
                message: "override must look like key=value".into(),
            })?;
            self.set(k.trim(), v.trim(), base).map_err(|message| EvalError::Config {
                line: 0,
                field: k.trim().to_string(),
                message,
            })?;
        }
        self.check()
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.train.model.spatial == SpatialKind::Llm && self.embeddings.is_none() {
            return Err(EvalError::Config {
                line: 0,
                field: "embeddings".into(),
                message: "spatial = llm needs an embeddings file".into(),
            });
        }
        self.train.validate().map_err(|e| EvalError::Config {
            line: 0,
            field: String::new(),
            message: e.to_string(),
        })
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<(), String> {
        let path = |v: &str| -> Result<PathBuf, String> {
            if v.is_empty() {
                return Err("empty path".into());
            }
            let p = PathBuf::from(v);
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "sensors" => self.sensors = path(v)?,
            "observations" => self.observations = path(v)?,
            "weather" => self.weather = opt(v, path)?,
            "embeddings" => self.embeddings = opt(v, path)?,
            "output_dir" => self.output_dir = path(v)?,
            "splits" => {
                let s = list(v, SplitChoice::parse)?;
                if s.is_empty() {
                    return Err("at least one split is required".into());
                }
                self.splits = s;
            }
            "ratios" => {
                let r = v.split(':').map(num::<f64>).collect::<Result<Vec<_>, _>>()?;
                match r[..] {
                    [a, b, c] if a > 0.0 && b > 0.0 && c > 0.0 => self.ratios = (a, b, c),
                    _ => return Err("expected three positive parts like 4:1:5".into()),
                }
            }
            "sweep_ratios" => {
                let r = opt(v, |s| list(s, num::<f64>))?;
                if let Some(r) = &r {
                    if r.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                        return Err("each ratio must lie in (0, 1)".into());
                    }
                }
                self.sweep_ratios = r;
            }
            "attention" => self.attention = boolean(v)?,
            "epsilon_sg" => self.epsilon_sg = num(v)?,
            "sigma" => self.sigma = opt(v, num)?,
            "steps" => m.steps = num(v)?,
            "horizon" => m.horizon = num(v)?,
            "d_ste" => m.d_ste = num(v)?,
            "spatial" => {
                m.spatial = match v.to_ascii_lowercase().as_str() {
                    "hash" => SpatialKind::Hash,
                    "llm" => SpatialKind::Llm,
                    _ => return Err(format!("`{v}` is not one of hash, llm")),
                }
            }
            "hash_length" => m.hash.length = num(v)?,
            "hash_width" => m.hash.width = num(v)?,
            "hash_layers" => m.hash.layers = num(v)?,
            "hidden" => m.st.hidden = num(v)?,
            "layers" => m.st.layers = num(v)?,
            "kernel" => m.st.kernel = num(v)?,
            "dilations" => m.st.dilations = list(v, num)?,
            "sg" => m.st.sg = num(v)?,
            "cg" => m.st.cg = num(v)?,
            "head_hidden" => m.st.head_hidden = num(v)?,
            "d_z" => m.st.d_z = num(v)?,
            "t_w" => m.t_w = num(v)?,
            "use_weather" => m.use_weather = boolean(v)?,
            "epochs" => t.epochs = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "learning_rate" => t.learning_rate = num(v)?,
            "mask_ratio" => t.mask_ratio = num(v)?,
            "seed" => t.seed = num(v)?,
            "lambda" => t.weights.lambda = num(v)?,
            "mu" => t.weights.mu = num(v)?,
            "theta" => t.weights.theta = num(v)?,
            "omega" => t.weights.omega = num(v)?,
            "tau" => t.tau = num(v)?,
            "patience" => t.patience = num(v)?,
            "max_batches" => t.max_batches = opt(v, num)?,
            "val_windows" => t.val_windows = num(v)?,
            "train_fraction" => t.train_fraction = num(v)?,
            "q_kk" => t.q_kk = num(v)?,
            "q_ku" => t.q_ku = num(v)?,
            "idw_k" => t.idw_k = num(v)?,
            "idw_power" => t.idw_power = num(v)?,
            "use_physics" => t.use_physics = boolean(v)?,
            "clip_norm" => t.clip_norm = opt(v, num)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// The value of `key` in the text form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &t.model;
        let p = |p: &Path| p.display().to_string();
        Some(match key {
            "sensors" => p(&self.sensors),
            "observations" => p(&self.observations),
            "weather" => self.weather.as_deref().map_or("none".into(), p),
            "embeddings" => self.embeddings.as_deref().map_or("none".into(), p),
            "output_dir" => p(&self.output_dir),
            "splits" => self.splits.iter().map(SplitChoice::name).collect::<Vec<_>>().join(","),
            "ratios" => format!("{}:{}:{}", self.ratios.0, self.ratios.1, self.ratios.2),
            "sweep_ratios" => self.sweep_ratios.as_deref().map_or("none".into(), join),
            "attention" => self.attention.to_string(),
            "epsilon_sg" => self.epsilon_sg.to_string(),
            "sigma" => show_opt(&self.sigma),
            "steps" => m.steps.to_string(),
            "horizon" => m.horizon.to_string(),
            "d_ste" => m.d_ste.to_string(),
            "spatial" => match m.spatial {
                SpatialKind::Hash => "hash".into(),
                SpatialKind::Llm => "llm".into(),
            },
            "hash_length" => m.hash.length.to_string(),
            "hash_width" => m.hash.width.to_string(),
            "hash_layers" => m.hash.layers.to_string(),
            "hidden" => m.st.hidden.to_string(),
            "layers" => m.st.layers.to_string(),
            "kernel" => m.st.kernel.to_string(),
            "dilations" => join(&m.st.dilations),
            "sg" => m.st.sg.to_string(),
            "cg" => m.st.cg.to_string(),
            "head_hidden" => m.st.head_hidden.to_string(),
            "d_z" => m.st.d_z.to_string(),
            "t_w" => m.t_w.to_string(),
            "use_weather" => m.use_weather.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "mask_ratio" => t.mask_ratio.to_string(),
            "seed" => t.seed.to_string(),
            "lambda" => t.weights.lambda.to_string(),
            "mu" => t.weights.mu.to_string(),
            "theta" => t.weights.theta.to_string(),
            "omega" => t.weights.omega.to_string(),
            "tau" => t.tau.to_string(),
            "patience" => t.patience.to_string(),
            "max_batches" => show_opt(&t.max_batches),
            "val_windows" => t.val_windows.to_string(),
            "train_fraction" => t.train_fraction.to_string(),
            "q_kk" => t.q_kk.to_string(),
            "q_ku" => t.q_ku.to_string(),
            "idw_k" => t.idw_k.to_string(),
            "idw_power" => t.idw_power.to_string(),
            "use_physics" => t.use_physics.to_string(),
            "clip_norm" => show_opt(&t.clip_norm),
            _ => return None,
        })
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn graph_params(&self) -> GraphParams {
        GraphParams {
            epsilon_sg: self.epsilon_sg,
            sigma: self.sigma,
            q_kk: self.train.q_kk,
            q_ku: self.train.q_ku,
        }
    }
}
