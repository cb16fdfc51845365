use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "epochs=2",
    "--set", "max_batches=2",
    "--set", "hidden=8",
    "--set", "head_hidden=16",
    "--set", "d_z=8",
    "--set", "hash_width=8",
    "--set", "hash_layers=1",
    "--set", "val_windows=4",
    "--set", "batch_size=4",
    "--set", "splits=vertical",
];

fn gencast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gencast"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn gencast")
}

fn with_config<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--config", "experiment.conf"];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn simulate(dir: &Path) {
    let out = gencast(dir, &["simulate", "--out", ".", "--sensors", "12", "--days", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    for f in ["sensors.csv", "observations.csv", "weather.csv", "experiment.conf"] {
        assert!(dir.join(f).exists(), "{f}");
    }

    let out = gencast(dir, &with_config("prepare", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let prepared = dir.join("results/prepared");
    for f in ["splits.csv", "a_sg.csv", "a_dtw_vertical.csv", "free_flow_vertical.csv"] {
        assert!(prepared.join(f).exists(), "{f}");
    }

    let out = gencast(dir, &with_config("train", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = "results/vertical/model.ckpt";
    assert!(dir.join(ckpt).exists());
    assert!(dir.join("results/vertical/train_log.csv").exists());

    let out = gencast(dir, &with_config("forecast", &["--checkpoint", ckpt, "--out", "fc.csv"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fc = std::fs::read_to_string(dir.join("fc.csv")).unwrap();
    assert!(fc.starts_with("step,node_id,channel,value\n"));
    assert!(fc.lines().count() > 1);

    let out = gencast(dir, &with_config("evaluate", &["--checkpoint", ckpt]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("results/vertical/report.csv")).unwrap();
    assert!(report.contains("split,horizon_step,rmse,mae,mape,r2,mape_excluded_count"));
    assert!(report.contains("vertical,all,"));

    let out = gencast(dir, &with_config("report", &["--set", "output_dir=full"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "report_historical_average.csv", "report_idw.csv"] {
        assert!(dir.join("full").join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);

    let out = gencast(dir, &with_config("train", &["--set", "epochs=many"]));
    assert_eq!(out.status.code(), Some(2));
    let out = gencast(dir, &with_config("train", &["--set", "no_such_key=1"]));
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = gencast(dir, &with_config("evaluate", &["--checkpoint", "bad.ckpt"]));
    assert_eq!(out.status.code(), Some(3));

    let out = gencast(dir, &["prepare", "--config", "missing.conf"]);
    assert_eq!(out.status.code(), Some(2));

    let out = gencast(dir, &with_config("prepare", &["--set", "observations=absent.csv"]));
    assert_eq!(out.status.code(), Some(3));
}
