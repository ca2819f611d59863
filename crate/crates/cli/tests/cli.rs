use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "data.total=800",
    "--set",
    "model.channels=4,8",
    "--set",
    "split.scheme=stratified",
    "--set",
    "split.folds=3",
    "--set",
    "train.batch_size=64",
    "--epochs",
    "2",
];

fn ibanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibanet")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_out<'a>(base: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend(["--out", out]);
    v
}

#[test]
fn etf_check_reports_small_deviation() {
    let o = ibanet(&["etf-check", "--classes", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let dev: f64 = text.rsplit(' ').next().unwrap().trim().parse().unwrap();
    assert!(dev < 1e-9);
    let o = ibanet(&["etf-check", "--classes", "6", "--dim", "4"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let o = ibanet(&["cv", "--set", "train.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.learning_rate"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "train.lr=1e-3\nmodel.depth=3\n").unwrap();
    let o = ibanet(&["cv", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.depth"));
}

#[test]
fn bad_value_and_profile_exit_2() {
    assert_eq!(ibanet(&["cv", "--variant", "lstm"]).status.code(), Some(2));
    assert_eq!(ibanet(&["cv", "--profile", "sheep"]).status.code(), Some(2));
    assert_eq!(ibanet(&["ablate", "--study", "nothing", "--epochs", "1"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let o = ibanet(&["cv", "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "subject,label,t,ch0\ns1,walk,0.0,zero\n").unwrap();
    let o = ibanet(&["cv", "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec!["train"];
    args.extend(with_out(TINY, out.to_str().unwrap()));
    args.extend(["--set", "train.lr=1e300", "--set", "train.batch_size=16"]);
    let o = ibanet(&args);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 0"));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = ibanet(&["synth", "--profile", "goat-like", "--seed", "0", "--set", "data.total=300", "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["dataset.csv", "labels.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let head = std::fs::read_to_string(a.join("dataset.csv")).unwrap();
    assert!(head.starts_with("subject,label,t,ch0,ch1,ch2\n"));
}

#[test]
fn synthetic_dataset_round_trips_through_csv_input() {
    let dir = tempfile::tempdir().unwrap();
    let synth_dir = dir.path().join("s");
    let o = ibanet(&["synth", "--set", "data.total=800", "--out", synth_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = synth_dir.join("dataset.csv");
    let out = dir.path().join("o");
    let mut args = vec!["train", "--data", csv.to_str().unwrap()];
    args.extend(with_out(TINY, out.to_str().unwrap()));
    let o = ibanet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn cv_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["cv"];
    args.extend(with_out(TINY, out.to_str().unwrap()));
    let o = ibanet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("macro recall"));
    for f in ["metrics.json", "confusion.csv", "angles.csv", "history.csv", "router_rates.csv", "effective_config.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 3);
    assert_eq!(metrics["variant"], "iba_net");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3 * 2);
    let router = std::fs::read_to_string(out.join("router_rates.csv")).unwrap();
    assert!(router.starts_with("class,count,r_50hz,r_25hz,r_12.5hz\n"));
    assert_effective_config_reproduces(&out);
}

fn assert_effective_config_reproduces(out: &Path) {
    let written = std::fs::read_to_string(out.join("effective_config.txt")).unwrap();
    let o = ibanet(&["cv", "--config", out.join("effective_config.txt").to_str().unwrap(), "--print-effective-config"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), written);
}

#[test]
fn baseline_variant_has_no_router() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let mut args = vec!["cv", "--profile", "goat", "--variant", "single_rate:12.5"];
    args.extend(with_out(TINY, out.to_str().unwrap()));
    let o = ibanet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("router_rates.csv")).unwrap(), "class,count\n");
}

#[test]
fn profile_flags_override_in_order() {
    let o = ibanet(&["cv", "--profile", "cattle", "--set", "train.lr=0.5", "--print-effective-config"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("train.lr=0.5\n"));
    assert!(text.contains("train.weight_decay=6e-2\n"));
    assert!(text.contains("data.factors=1,2,5\n"));
    let o = ibanet(&["cv", "--set", "run.seed=3", "--seed", "9", "--print-effective-config"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("run.seed=9\n"));
}
