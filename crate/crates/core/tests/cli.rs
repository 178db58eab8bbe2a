use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn brainage(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainage"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn png(path: &Path, level: u8) {
    image::GrayImage::from_fn(40, 40, |x, y| image::Luma([level.wrapping_add((x + y) as u8)])).save(path).unwrap();
}

fn labels(path: &Path, rows: &[(&str, f64)]) {
    let mut t = String::from("source_path,subject_id,age_years,sex\n");
    for (i, (p, a)) in rows.iter().enumerate() {
        t.push_str(&format!("{p},s{i},{a},M\n"));
    }
    fs::write(path, t).unwrap();
}

fn report_hash(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("report hash "))
        .expect("hash line")
        .to_string()
}

#[test]
fn synth_run_smoke_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = brainage(d, &["synth", "--out", "src", "--structured", "61", "--noise", "3", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(
        d.join("run.toml"),
        "run_dir = \"run\"\nseed = 5\nk_folds = 2\nbackbones = [\"Stub\"]\n\
         [source]\nroot = \"src\"\nlabels = \"src/labels.csv\"\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let start = Instant::now();
    let first = brainage(d, &["run", "--config", "run.toml"]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(secs < 60.0, "smoke run took {secs:.1}s");
    for f in ["config.resolved", "manifest.json", "outliers/scores.csv", "outliers/kept_manifest.json",
              "fold0", "fold1", "report.json", "report.csv", "plot.csv", "plot.svg"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["records"].as_array().unwrap().len(), 64);

    // same config again: everything reused, same report
    let second = brainage(d, &["run", "--config", "run.toml"]);
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    assert_eq!(report_hash(&first), report_hash(&second));

    // stored resolved config re-executes to the same outputs
    fs::remove_dir_all(d.join("run/fold1")).unwrap();
    let third = brainage(d, &["run", "--config", "run/config.resolved"]);
    assert_eq!(code(&third), 0, "{}", stderr(&third));
    assert_eq!(report_hash(&first), report_hash(&third));

    // a different training setup may not reuse these results
    let changed = brainage(d, &["run", "--config", "run.toml", "--epochs", "3"]);
    assert_eq!(code(&changed), 2);
    assert!(stderr(&changed).contains("differ"), "{}", stderr(&changed));

    let rep = brainage(d, &["report", "--run-dir", "run"]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    assert!(stdout(&rep).contains("before_filtering"));
}

#[test]
fn convert_reports_corrupt_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("src")).unwrap();
    png(&d.join("src/a.png"), 10);
    png(&d.join("src/b.png"), 90);
    fs::write(d.join("src/c.png"), b"\x89PNG\r\n\x1a\nnot really").unwrap();
    labels(&d.join("labels.csv"), &[("a.png", 30.0), ("b.png", 40.0), ("c.png", 50.0)]);
    let o = brainage(d, &["convert", "--run-dir", "run", "--source", "src", "--labels", "labels.csv"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("c.png"));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["records"].as_array().unwrap().len(), 2);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/conversion.json")).unwrap()).unwrap();
    assert_eq!(report["failures"].as_array().unwrap().len(), 1);
}

#[test]
fn usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("empty")).unwrap();
    labels(&d.join("labels.csv"), &[("a.png", 30.0)]);
    let o = brainage(d, &["convert", "--run-dir", "r1", "--source", "empty", "--labels", "labels.csv"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = brainage(d, &["outliers", "--run-dir", "r2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("convert"));

    let o = brainage(d, &["outliers", "--run-dir", "r2", "--contamination", "1.5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    fs::write(d.join("bad.toml"), "run_dir = \"r3\"\nepochz = 4\n").unwrap();
    let o = brainage(d, &["run", "--config", "bad.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));

    let o = brainage(d, &["run", "--backbones", "AlexNet", "--run-dir", "r4"]);
    assert_eq!(code(&o), 2);

    let o = brainage(d, &["report", "--run-dir", "r5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn tiny_contamination_flags_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("src")).unwrap();
    let mut rows = Vec::new();
    let names: Vec<String> = (0..10).map(|i| format!("img{i}.png")).collect();
    for (i, n) in names.iter().enumerate() {
        png(&d.join("src").join(n), (i * 20) as u8);
        rows.push((n.as_str(), 20.0 + i as f64));
    }
    labels(&d.join("labels.csv"), &rows);
    let o = brainage(d, &["convert", "--run-dir", "run", "--source", "src", "--labels", "labels.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = brainage(d, &["outliers", "--run-dir", "run", "--contamination", "0.001"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("flagged 0 of 10"), "{}", stdout(&o));
    let o = brainage(d, &["outliers", "--run-dir", "run", "--contamination", "0.2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("flagged 2 of 10"), "{}", stdout(&o));
    let kept: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("run/outliers/kept_manifest.json")).unwrap()).unwrap();
    assert_eq!(kept["records"].as_array().unwrap().len(), 8);
}

#[test]
fn concurrent_runs_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("run")).unwrap();
    fs::write(d.join("run/.lock"), "4242\n").unwrap();
    let o = brainage(d, &["outliers", "--run-dir", "run"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked by process 4242"), "{}", stderr(&o));
}
