use std::path::Path;
use std::process::{Command, Output};

fn ign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ign"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ign")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "ign failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--n", "120", "--dim", "2", "--m", "8", "--epochs", "3", "--batch-size", "32", "--hidden", "8",
    "--feature-dim", "4",
];

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", p(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ign(&args)
}

fn write_csv(path: &Path, header: &str, rows: &[&str]) {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn train_writes_run_directory_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&train_small(&a, &["--seed", "7"]));
    ok(&train_small(&b, &["--seed", "7"]));
    for f in ["model.json", "report.json", "metrics.json", "timing.json", "config.json", "config.txt"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let ra = std::fs::read(a.join("report.json")).unwrap();
    let rb = std::fs::read(b.join("report.json")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(std::fs::read(a.join("model.json")).unwrap(), std::fs::read(b.join("model.json")).unwrap());
}

#[test]
fn eval_and_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train_small(&run, &[]));
    let model = run.join("model.json");

    let stdout = ok(&ign(&["eval", "--model", p(&model), "--raw-rmse"]));
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(v["rmse"].as_f64().unwrap().is_finite());
    assert!(v["raw_rmse"].as_f64().unwrap().is_finite());
    assert_eq!(v["n_test"].as_u64().unwrap(), 48);

    let input = dir.path().join("in.csv");
    write_csv(&input, "x0,x1,y", &["0.1,0.2,5", "-1,1,3", "2,0.5,1"]);
    let out = dir.path().join("pred.csv");
    ok(&ign(&[
        "predict", "--model", p(&model), "--input", p(&input), "--drop", "y", "--variance", "--output", p(&out),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mean,variance");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[0].is_finite() && cols[1] >= 0.0);
    }
}

#[test]
fn predict_rejects_wrong_column_count() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train_small(&run, &[]));
    let input = dir.path().join("in.csv");
    write_csv(&input, "x0,x1,x2", &["0,0,0"]);
    let out = ign(&["predict", "--model", p(&run.join("model.json")), "--input", p(&input)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_target_column_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, "a,b", &["1,2", "3,4", "5,6"]);
    let out = ign(&["train", "--out", p(&dir.path().join("r")), "--data", p(&data), "--target", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn unknown_set_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ign(&["train", "--out", p(&dir.path().join("r")), "--set", "nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nn = 100\nepochs = 2\nm = 4\nseed = 3\n").unwrap();
    let run = dir.path().join("r");
    ok(&ign(&["train", "--out", p(&run), "--config", p(&cfg), "--seed", "5", "--dim", "2"]));
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["n"], 100);
    assert_eq!(saved["seed"], 5);
}

#[test]
fn classification_predict_gives_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train_small(&run, &["--task", "classification", "--gen", "blobs"]));
    let input = dir.path().join("in.csv");
    write_csv(&input, "x0,x1", &["0,0", "6,0", "-6,0"]);
    let text = ok(&ign(&["predict", "--model", p(&run.join("model.json")), "--input", p(&input)]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mean,probability");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let prob: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
        assert!(prob > 0.0 && prob < 1.0);
    }
}

#[test]
fn one_vs_all_predicts_a_class_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train_small(
        &run,
        &["--task", "classification", "--gen", "blobs", "--classes", "3", "--jobs", "2"],
    ));
    let input = dir.path().join("in.csv");
    write_csv(&input, "x0,x1", &["0,0", "1,1"]);
    let text = ok(&ign(&["predict", "--model", p(&run.join("model.json")), "--input", p(&input)]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class,p0,p1,p2");
    assert_eq!(lines.len(), 3);
    let acc = ok(&ign(&["eval", "--model", p(&run.join("model.json"))]));
    assert!(acc.contains("accuracy"));
}

#[test]
fn ablate_prints_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let stdout = ok(&ign(&[
        "ablate", "--out", p(&out), "--gen", "sin", "--n", "60", "--dim", "1", "--epochs", "1", "--repeats", "1",
        "--hidden", "4", "--feature-dim", "2",
    ]));
    let rows = stdout.lines().filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit())).count();
    assert_eq!(rows, 7, "{stdout}");
    let plot = std::fs::read_to_string(out.join("ablation_plot.csv")).unwrap();
    assert!(plot.starts_with("m,mean_var,std_var"));
    assert!(out.join("ablation.json").exists());
}

#[test]
fn inspect_lists_every_inducing_point() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&train_small(&run, &[]));
    let stdout = ok(&ign(&["inspect", "--model", p(&run.join("model.json")), "--k", "2"]));
    assert_eq!(stdout.lines().count(), 8);
    assert!(stdout.lines().all(|l| l.split_whitespace().count() == 3));
}

#[test]
fn newton_failure_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = train_small(
        &run,
        &["--task", "classification", "--gen", "blobs", "--newton-max-iter", "1", "--newton-tol", "1e-300"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
