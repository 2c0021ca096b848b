use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.train_size=160",
    "--set",
    "data.test_size=60",
    "--set",
    "train.epochs=3",
    "--set",
    "model.dim=8",
    "--set",
    "model.hidden=8",
];

fn rollingq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rollingq"))
        .args(args)
        .env_remove("ROLLINGQ_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn with_small<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--out", out];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(extra);
    v
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn config_value(dir: &Path, key: &str) -> String {
    read(&dir.join("config.txt"))
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing from echo"))
}

#[test]
fn identical_runs_export_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));
    for dir in [&one, &two] {
        let out = rollingq(&with_small("train", dir.to_str().unwrap(), &["--set", "rollingq.enabled=false"]));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["diagnostics.csv", "summary.txt", "scatter.csv", "model.ckpt"] {
        assert_eq!(read(&one.join(file)), read(&two.join(file)), "{file} differs");
    }
    let table = read(&one.join("diagnostics.csv"));
    assert_eq!(table.lines().count(), 1 + 3);
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "train.epochs = 2\ntrain.lr = 0.01\nrollingq.beta = 0.3\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = rollingq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--set",
        "train.lr=0.02",
        "--set",
        "data.train_size=100",
        "--set",
        "data.test_size=60",
        "--set",
        "model.dim=8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(config_value(&out_dir, "train.lr"), "0.02");
    assert_eq!(config_value(&out_dir, "train.epochs"), "2");
    assert_eq!(config_value(&out_dir, "rollingq.beta"), "0.3");
    assert_eq!(config_value(&out_dir, "train.batch_size"), "64");
    assert_eq!(config_value(&out_dir, "out_dir"), out_dir.display().to_string());
}

#[test]
fn usage_errors_exit_one_and_name_the_token() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rollingq(&["train", "--out", tmp.path().to_str().unwrap(), "--set", "train.speed=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.speed"));

    let out = rollingq(&["fly"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fly"));

    let out = rollingq(&["train", "--set", "train.epochs=none"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn blow_up_exits_two_after_echoing_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = rollingq(&with_small(
        "train",
        dir.to_str().unwrap(),
        &["--set", "train.lr=1e12", "--set", "model.init_std=1.5"],
    ));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("divergence") || err.contains("invariant"), "{err}");
    assert_eq!(config_value(&dir, "train.lr"), "1000000000000");
}

#[test]
fn gradcheck_passes_and_reports_error() {
    let out = rollingq(&["gradcheck", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let max: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max_rel_error = "))
        .expect("report line")
        .parse()
        .unwrap();
    assert!(max < 1e-4, "{text}");
}

#[test]
fn output_directory_defaults_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("from_env");
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_rollingq"))
        .args(&args)
        .env("ROLLINGQ_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("diagnostics.csv").exists());
}

#[test]
fn analyses_run_on_a_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let out = rollingq(&with_small("train", train_dir.to_str().unwrap(), &[]));
    assert!(out.status.success());
    let ckpt = train_dir.join("model.ckpt");
    let summary = read(&train_dir.join("summary.txt"));
    let clean_acc = summary
        .lines()
        .find_map(|l| l.strip_prefix("test_accuracy = "))
        .unwrap()
        .to_string();

    let noise_dir = tmp.path().join("noise");
    let out = rollingq(&with_small(
        "eval-noise",
        noise_dir.to_str().unwrap(),
        &["--checkpoint", ckpt.to_str().unwrap()],
    ));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(&noise_dir.join("noise_response.csv"));
    let first: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], clean_acc);

    let quag_dir = tmp.path().join("quag");
    let out = rollingq(&with_small("quag", quag_dir.to_str().unwrap(), &["--checkpoint", ckpt.to_str().unwrap()]));
    assert!(out.status.success());
    let quag = read(&quag_dir.join("quag.csv"));
    let modes: Vec<&str> = quag.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["none", "mask_a", "mask_v", "block_average"]);
    assert!(quag.lines().nth(1).unwrap().ends_with(&clean_acc));

    let corr_dir = tmp.path().join("corr");
    let out = rollingq(&with_small(
        "correlate",
        corr_dir.to_str().unwrap(),
        &["--checkpoint", ckpt.to_str().unwrap()],
    ));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read(&corr_dir.join("correlation.txt")).contains("correlation = "));

    let mismatch = rollingq(&with_small(
        "quag",
        quag_dir.to_str().unwrap(),
        &["--checkpoint", ckpt.to_str().unwrap(), "--set", "model.dim=6"],
    ));
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn demo_cycle_writes_one_row_per_method() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rollingq(&with_small("demo-cycle", tmp.path().to_str().unwrap(), &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = read(&tmp.path().join("demo_cycle.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,final_accuracy,final_air,correlation");
    assert!(lines[1].starts_with("vanilla,"));
    assert!(lines[2].starts_with("rollingq,"));
    assert_eq!(lines.len(), 3);
    assert!(tmp.path().join("vanilla/diagnostics.csv").exists());
    assert!(tmp.path().join("rollingq/diagnostics.csv").exists());
}
