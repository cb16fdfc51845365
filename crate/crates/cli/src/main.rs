use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gencast::evalcli::{
    apply_split, attention_csv, evaluate, load_dataset, report_csv, resolve_train_config, run_experiment,
    test_windows, train_split, EvalError, ExperimentConfig, SplitChoice,
};
use gencast::lwr_sim::{synth_dataset, SynthConfig};
use gencast::pipeline::{attention_map, forecast_unobserved, load_checkpoint, prepare, save_checkpoint};
use gencast::region_graph::SplitLabel;

#[derive(Parser)]
#[command(name = "gencast", version, about = "Traffic forecasting for regions without sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates a sensor corridor and writes its data files and a config.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        sensors: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        #[arg(long, default_value_t = 15)]
        interval: u32,
        /// Observation noise standard deviation, km/h.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Builds the splits and writes node labels, adjacency and free-flow speeds.
    Prepare(ConfigArgs),
    /// Trains on one split and saves a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Split name, e.g. `vertical_mirrored`; defaults to the first configured split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Writes unobserved-node forecasts from a checkpoint.
    Forecast {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// First input step; defaults to the first test window.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores a checkpoint and the baselines on the test windows.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: Option<String>,
    },
    /// Runs every configured split (or ratio sweep) and writes the reports.
    Report(ConfigArgs),
}

fn data_err(e: impl std::fmt::Display) -> EvalError {
    EvalError::Data(e.to_string())
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(data_err)?;
    }
    std::fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, EvalError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply_overrides(&args.overrides, Path::new("."))?;
    Ok(cfg)
}

fn choose(cfg: &ExperimentConfig, name: &Option<String>) -> Result<SplitChoice, EvalError> {
    let bad = |m: String| EvalError::Config {
        line: 0,
        field: "split".into(),
        message: m,
    };
    match name {
        Some(n) => SplitChoice::parse(n).map_err(bad),
        None => cfg.splits.first().copied().ok_or_else(|| bad("no split configured".into())),
    }
}

fn simulate(out: &Path, sensors: usize, days: usize, interval: u32, noise: f64, seed: u64) -> Result<(), EvalError> {
    let mut sc = SynthConfig::corridor(sensors, days, interval);
    sc.noise_std = noise;
    sc.seed = seed;
    let data = synth_dataset(&sc).map_err(data_err)?;
    data.write(out).map_err(data_err)?;
    let steps = (120 / interval).max(1);
    let conf = format!(
        "# Synthetic corridor: {sensors} sensors, {days} days at {interval}-minute intervals.\n\
         sensors = sensors.csv\n\
         observations = observations.csv\n\
         weather = weather.csv\n\
         output_dir = results\n\
         splits = horizontal,horizontal_mirrored,vertical,vertical_mirrored\n\
         ratios = 4:1:5\n\
         steps = {steps}\n\
         horizon = {steps}\n\
         epochs = 12\n\
         max_batches = 8\n\
         learning_rate = 0.003\n\
         theta = 0.000001\n"
    );
    write(&out.join("experiment.conf"), &conf)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn prepare_cmd(cfg: &ExperimentConfig) -> Result<(), EvalError> {
    let ds = load_dataset(cfg)?;
    let dir = cfg.output_dir.join("prepared");
    let mut splits = String::from("node_id,lat,lon");
    let mut labels = Vec::new();
    for &c in &cfg.splits {
        write!(splits, ",{}", c.name()).expect("string write");
        labels.push(apply_split(&ds, c, cfg.ratios)?);
    }
    splits.push('\n');
    for (i, id) in ds.graph.node_ids.iter().enumerate() {
        let ll = ds.graph.coords[i];
        write!(splits, "{id},{},{}", ll.lat, ll.lon).expect("string write");
        for l in &labels {
            let name = match l.graph.split[i] {
                SplitLabel::Train => "train",
                SplitLabel::Val => "val",
                SplitLabel::Test => "test",
            };
            write!(splits, ",{name}").expect("string write");
        }
        splits.push('\n');
    }
    write(&dir.join("splits.csv"), &splits)?;

    let n = ds.graph.len();
    let mut a_sg = String::from("from,to,weight\n");
    for i in 0..n {
        for j in 0..n {
            let w = ds.graph.a_sg.get(i, j);
            if w != 0.0 {
                writeln!(a_sg, "{},{},{w}", ds.graph.node_ids[j], ds.graph.node_ids[i]).expect("string write");
            }
        }
    }
    write(&dir.join("a_sg.csv"), &a_sg)?;

    for (c, split_ds) in cfg.splits.iter().zip(&labels) {
        let prep = prepare(split_ds, &resolve_train_config(cfg, split_ds))?;
        let v = &prep.inference;
        let mut a_dtw = String::from("from,to,weight\n");
        for (li, &i) in v.nodes.iter().enumerate() {
            for (lj, &j) in v.nodes.iter().enumerate() {
                let w = v.a_dtw.get(li, lj);
                if w != 0.0 {
                    writeln!(a_dtw, "{},{},{w}", prep.node_ids[j], prep.node_ids[i]).expect("string write");
                }
            }
        }
        write(&dir.join(format!("a_dtw_{}.csv", c.name())), &a_dtw)?;
        let mut fspd = String::from("node_id,x_fspd\n");
        for (id, f) in prep.node_ids.iter().zip(&prep.x_fspd) {
            writeln!(fspd, "{id},{f}").expect("string write");
        }
        write(&dir.join(format!("free_flow_{}.csv", c.name())), &fspd)?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, split: &Option<String>) -> Result<(), EvalError> {
    let choice = choose(cfg, split)?;
    let ds = load_dataset(cfg)?;
    let (_, state, log) = train_split(&ds, cfg, choice, cfg.ratios)?;
    let dir = cfg.output_dir.join(choice.name());
    std::fs::create_dir_all(&dir).map_err(data_err)?;
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&state, &ckpt)?;
    log.write_csv(&dir.join("train_log.csv"))?;
    println!(
        "best epoch {:?}, delta {:?}; checkpoint {}",
        log.best_epoch,
        log.delta,
        ckpt.display()
    );
    Ok(())
}

fn forecast_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: &Option<String>,
    start: Option<usize>,
    out: &Option<PathBuf>,
) -> Result<(), EvalError> {
    let choice = choose(cfg, split)?;
    let state = load_checkpoint(checkpoint)?;
    let ds = apply_split(&load_dataset(cfg)?, choice, cfg.ratios)?;
    let prep = prepare(&ds, &state.config)?;
    let m = &state.config.model;
    let start = match start {
        Some(s) => s,
        None => *test_windows(&prep, m.steps, m.horizon)
            .first()
            .ok_or_else(|| data_err("no test window after the training range"))?,
    };
    let x = forecast_unobserved(&state, &prep, &[start])?.remove(0);
    let c = prep.channels();
    let mut csv = String::from("step,node_id,channel,value\n");
    for h in 0..m.horizon {
        for (k, &g) in prep.test_nodes.iter().enumerate() {
            for ch in 0..c {
                let v = x.data()[(h * prep.test_nodes.len() + k) * c + ch];
                writeln!(csv, "{},{},{ch},{v}", start + m.steps + h, prep.node_ids[g]).expect("string write");
            }
        }
    }
    match out {
        Some(p) => write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, checkpoint: &Path, split: &Option<String>) -> Result<(), EvalError> {
    let choice = choose(cfg, split)?;
    let state = load_checkpoint(checkpoint)?;
    let ds = apply_split(&load_dataset(cfg)?, choice, cfg.ratios)?;
    let prep = prepare(&ds, &state.config)?;
    let scores = evaluate(&state, &prep)?;
    let dir = cfg.output_dir.join(choice.name());
    let text = cfg.resolved();
    let name = choice.name();
    write(&dir.join("report.csv"), &report_csv(&text, &[(name.clone(), &scores.model)]))?;
    write(
        &dir.join("report_historical_average.csv"),
        &report_csv(&text, &[(name.clone(), &scores.historical)]),
    )?;
    write(&dir.join("report_idw.csv"), &report_csv(&text, &[(name, &scores.idw)]))?;
    let m = &state.config.model;
    if let Some(a) = attention_map(&state, &prep, &test_windows(&prep, m.steps, m.horizon))? {
        write(&dir.join("attention.csv"), &attention_csv(&a))?;
    }
    println!(
        "RMSE model {:.4}, historical average {:.4}, IDW {:.4}; reports in {}",
        scores.model.pooled.rmse,
        scores.historical.pooled.rmse,
        scores.idw.pooled.rmse,
        dir.display()
    );
    Ok(())
}

fn report_cmd(cfg: &ExperimentConfig) -> Result<(), EvalError> {
    for r in run_experiment(cfg)? {
        let label = r.ratio.map_or_else(String::new, |x| format!("unobserved ratio {x}: "));
        println!("{label}mean RMSE {:.4}; reports in {}", r.mean_rmse(), r.dir.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), EvalError> {
    match cli.command {
        Command::Simulate {
            out,
            sensors,
            days,
            interval,
            noise,
            seed,
        } => simulate(&out, sensors, days, interval, noise, seed),
        Command::Prepare(a) => prepare_cmd(&load(&a)?),
        Command::Train { cfg, split } => train_cmd(&load(&cfg)?, &split),
        Command::Forecast {
            cfg,
            checkpoint,
            split,
            start,
            out,
        } => forecast_cmd(&load(&cfg)?, &checkpoint, &split, start, &out),
        Command::Evaluate { cfg, checkpoint, split } => evaluate_cmd(&load(&cfg)?, &checkpoint, &split),
        Command::Report(a) => report_cmd(&load(&a)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
