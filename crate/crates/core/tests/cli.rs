use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ikd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ikd")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(ikd(&["--help"]).status.code(), Some(0));
    assert_eq!(ikd(&["ladder", "--help"]).status.code(), Some(0));
    let out = ikd(&["ladder", "--alhpa", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
    assert_eq!(ikd(&["ladder", "--method", "kd"]).status.code(), Some(1));
    assert_eq!(ikd(&[]).status.code(), Some(1));
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "k = 2\nalhpa = 0.5\n").unwrap();
    let out = ikd(&["ladder", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("alhpa"), "{err}");
    let out = ikd(&["ladder", "alpha=2"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ikd(&["evaluate", "--model", p(&dir.path().join("missing.ikdp")), "train_csv=/nonexistent.csv"]);
    assert_eq!(out.status.code(), Some(2));
    // no training data configured
    let out = ikd(&["train-teacher", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_images"));
}

fn table_compression(table: &str, step: usize) -> String {
    let line = table.lines().nth(step + 1).unwrap();
    line.split(',').nth(3).unwrap().trim_end_matches('x').to_string()
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_desk_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = ikd(&["synth-data", "--n", "400", "--test-n", "100", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = data.join("data.cfg");
    let base = ["--config", p(&cfg), "teacher=dense:24", "teacher_epochs=2", "epochs_per_step=1"];

    let mut args = vec!["compare", "--k", "2", "--seed", "4", "--out", p(&run)];
    args.extend(base);
    let out = ikd(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty(), "data goes to files only");

    let table = fs::read_to_string(run.join("ladder.csv")).unwrap();
    let rows = ikd::report::parse_ladder_csv(table.as_bytes()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ece_ikd.is_some() && r.ece_ikd_plus.is_some()));
    let report: ikd::ikd::LadderReport = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for (read, built) in rows.iter().zip(ikd::report::ladder_rows(&report)) {
        assert_eq!(ikd::report::format_compression(built.compression), format!("{}x", table_compression(&table, read.step)));
        assert_eq!(*read, ikd::report::LadderRow { compression: read.compression, ..built });
    }

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(listed.contains(&"models/M0.ikdp") && listed.contains(&"models/ikd+temp/M2.ikdp") && listed.contains(&"ladder.csv"));

    // re-emitting from the run directory reproduces every report file
    let again = dir.path().join("again");
    let out = ikd(&["report", "--run", p(&run), "--out", p(&again)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let originals: std::collections::BTreeMap<_, _> = read_tree(&run).into_iter().collect();
    for (name, bytes) in read_tree(&again) {
        assert_eq!(originals.get(&name), Some(&bytes), "{name}");
    }
    let out = ikd(&["report", "--run", p(&run), "--out", p(&again), "--format", "md"]);
    assert!(out.status.success());
    assert!(fs::read_to_string(again.join("ladder.md")).unwrap().starts_with("| step | student |"));

    // calibrate, evaluate and predict on the teacher
    let m0 = run.join("models/M0.ikdp");
    let work = dir.path().join("work");
    let mut args = vec!["calibrate", "--model", p(&m0), "--out", p(&work)];
    args.extend(base);
    assert!(ikd(&args).status.success());
    let map = work.join("maps/M0_ikd+temp.json");
    assert!(map.exists());
    let mut args = vec!["evaluate", "--model", p(&m0), "--map", p(&map), "--out", p(&work)];
    args.extend(base);
    assert!(ikd(&args).status.success());
    let bins = fs::read_to_string(work.join("reliability.csv")).unwrap();
    assert_eq!(bins.lines().count(), 11);
    let counted: usize = bins.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 100);
    let mut args = vec!["predict", "--model", p(&m0), "--map", p(&map), "--examples", "0,7", "--out", p(&work)];
    args.extend(base);
    assert!(ikd(&args).status.success());
    assert!(work.join("predictions/example_7.svg").exists());
    assert_eq!(fs::read_to_string(work.join("predictions/predictions.csv")).unwrap().lines().count(), 1 + 2 * 10);
    let mut args = vec!["predict", "--model", p(&m0), "--examples", "100", "--out", p(&work)];
    args.extend(base);
    assert_eq!(ikd(&args).status.code(), Some(1));
}

#[test]
fn single_method_ladder_leaves_baseline_columns_empty() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert!(ikd(&["synth-data", "--kind", "multilabel", "--n", "300", "--test-n", "80", "--classes", "4", "--out", p(&data)]).status.success());
    let cfg = data.join("data.cfg");
    let out = ikd(&[
        "ladder",
        "--config",
        p(&cfg),
        "--k",
        "2",
        "--method",
        "ikd+platt",
        "--out",
        p(&run),
        "teacher_epochs=1",
        "epochs_per_step=1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = ikd::report::parse_ladder_csv(fs::File::open(run.join("ladder.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ece_ikd.is_none() && r.acc_ikd.is_none() && r.ece_ikd_plus.is_some()));
    assert!(run.join("maps/ikd+platt/M1_loss.json").exists());
}

#[test]
fn train_teacher_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(ikd(&["synth-data", "--n", "200", "--test-n", "50", "--out", p(&data)]).status.success());
    let out_dir = dir.path().join("t");
    let out = ikd(&["train-teacher", "--config", p(&data.join("data.cfg")), "--out", p(&out_dir), "teacher=conv:4:3,pool,flatten,dense:16", "teacher_epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = ikd::model::checkpoint_load(&out_dir.join("models/M0.ikdp")).unwrap();
    assert_eq!(model.structure.input_shape, vec![1, 28, 28]);
    assert!(out_dir.join("teacher.json").exists());
}
