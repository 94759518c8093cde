use std::path::Path;
use std::process::{Command, Output};

use flowpost::condmodel::Model;

fn flowpost(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowpost")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = flowpost(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    flowpost(dir, args).status.code().expect("exit code")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn gen_is_deterministic_and_validates_arguments() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--dataset", "2", "--n", "300", "--seed", "7", "--out", "a.jsonl"]);
    ok(d.path(), &["--threads", "1", "gen", "--dataset", "2", "--n", "300", "--seed", "7", "--out", "b.jsonl"]);
    let a = std::fs::read(d.path().join("a.jsonl")).unwrap();
    let b = std::fs::read(d.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 301);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen");
    assert_eq!(m["seeds"][0], 7);
    assert_eq!(m["outputs"][0]["sha256"].as_str().unwrap().len(), 64);

    assert_eq!(code(d.path(), &["gen", "--dataset", "9", "--n", "10", "--out", "c.jsonl"]), 2);
    assert_eq!(code(d.path(), &["gen", "--dataset", "1", "--n", "10", "--strip-labels", "1.5", "--out", "c.jsonl"]), 2);
    assert_eq!(code(d.path(), &["train", "--mode", "supervised", "--data", "missing.jsonl", "--out", "m.json"]), 3);
    std::fs::write(d.path().join("bad.jsonl"), "{\"format\":\"other\"}\n").unwrap();
    assert_eq!(code(d.path(), &["train", "--mode", "supervised", "--data", "bad.jsonl", "--out", "m.json"]), 3);
}

#[test]
fn supervised_then_frozen_extended() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--dataset", "1", "--n", "300", "--seed", "3", "--out", "d.jsonl"]);
    let s = ok(
        p,
        &["train", "--mode", "supervised", "--data", "d.jsonl", "--out", "sup.json", "--posterior", "affine", "--epochs", "3"],
    );
    assert!(s.contains("final validation loss"), "{s}");
    let log = csv_rows(&p.join("sup.json.log.csv"));
    assert_eq!(log.len(), 4);
    assert!(log[1..].iter().all(|r| r[2].parse::<f64>().unwrap().is_finite()));

    ok(
        p,
        &[
            "train", "--mode", "extended", "--data", "d.jsonl", "--out", "ext.json", "--init", "sup.json",
            "--freeze-posterior", "--decoder", "physics", "--epochs", "2",
        ],
    );
    let sup = Model::load(&p.join("sup.json")).unwrap();
    let ext = Model::load(&p.join("ext.json")).unwrap();
    assert!(ext.has_generative());
    let mut n_post = 0;
    for (name, slot) in sup.params.layout() {
        assert!(name.starts_with("post."));
        let other = ext.params.slot(name).unwrap();
        let (a, b) = (sup.params.get(slot), ext.params.get(other));
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} changed");
        n_post += 1;
    }
    assert!(n_post > 0);
    let gen_slot = ext.params.slot("gen.physics").unwrap();
    assert!(ext.params.get(gen_slot).iter().all(|v| v.is_finite()));

    assert_eq!(code(p, &["train", "--mode", "supervised", "--data", "d.jsonl", "--out", "x.json", "--freeze-posterior"]), 2);
}

#[test]
fn semi_supervised_on_half_labels() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--dataset", "1", "--n", "200", "--seed", "5", "--strip-labels", "0.5", "--out", "half.jsonl"]);
    assert_eq!(code(p, &["train", "--mode", "supervised", "--data", "half.jsonl", "--out", "m.json"]), 3);
    ok(
        p,
        &[
            "train", "--mode", "semi", "--data", "half.jsonl", "--out", "semi.json", "--posterior", "affine",
            "--decoder", "physics", "--epochs", "2",
        ],
    );
    let log = csv_rows(&p.join("semi.json.log.csv"));
    let head = &log[0];
    let lab = head.iter().position(|h| h == "train_labeled").unwrap();
    let unl = head.iter().position(|h| h == "train_unlabeled").unwrap();
    for r in &log[1..] {
        assert!(r[lab].parse::<f64>().unwrap() != 0.0);
        assert!(r[unl].parse::<f64>().unwrap() != 0.0);
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--dataset", "1", "--n", "150", "--seed", "2", "--out", "d.jsonl"]);
    std::fs::write(p.join("c.json"), r#"{"model": {"posterior": "mse"}, "train": {"max_epochs": 4, "lr": 0.003}}"#).unwrap();
    ok(p, &["train", "--mode", "supervised", "--data", "d.jsonl", "--out", "m.json", "--config", "c.json", "--epochs", "2"]);
    assert_eq!(csv_rows(&p.join("m.json.log.csv")).len(), 3);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("m.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["resolved"]["train"]["lr"], 0.003);
    assert_eq!(m["config"]["resolved"]["train"]["max_epochs"], 2);
    assert_eq!(m["config"]["resolved"]["model"]["posterior"], "mse");
    std::fs::write(p.join("bad.json"), r#"{"train": {"epochs": 4}}"#).unwrap();
    assert_eq!(code(p, &["train", "--mode", "supervised", "--data", "d.jsonl", "--out", "m2.json", "--config", "bad.json"]), 2);
}

#[test]
fn eval_reports() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["gen", "--dataset", "1", "--n", "200", "--seed", "11", "--out", "a.jsonl"]);
    ok(p, &["gen", "--dataset", "1", "--n", "30", "--seed", "12", "--out", "b.jsonl"]);
    ok(p, &["gen", "--dataset", "1", "--n", "30", "--seed", "13", "--marginalize", "--out", "c.jsonl"]);
    ok(
        p,
        &[
            "train", "--mode", "extended", "--data", "a.jsonl", "--out", "m.json", "--posterior", "affine",
            "--decoder", "physics", "--epochs", "2",
        ],
    );

    ok(p, &["eval", "coverage", "--model", "m.json", "--data", "a.jsonl", "--out-dir", "rep", "--svg"]);
    let cov = csv_rows(&p.join("rep/coverage.csv"));
    assert_eq!(cov.len(), 20);
    for (i, r) in cov[1..].iter().enumerate() {
        let lvl: f64 = r[0].parse().unwrap();
        assert!((lvl - 0.05 * (i + 1) as f64).abs() < 1e-12);
    }
    assert!(std::fs::read_to_string(p.join("rep/coverage.svg")).unwrap().starts_with("<svg"));

    ok(p, &["eval", "scan", "--model", "m.json", "--data", "a.jsonl", "--event-index", "3", "--grid", "25", "--out-dir", "rep"]);
    let g = csv_rows(&p.join("rep/scan_grid.csv"));
    let f = csv_rows(&p.join("rep/scan_flow.csv"));
    assert_eq!(g.len(), 25 * 25 + 1);
    assert_eq!(g.len(), f.len());
    for (a, b) in g.iter().zip(&f) {
        assert_eq!(a[..2], b[..2]);
    }
    assert_eq!(code(p, &["eval", "scan", "--model", "m.json", "--data", "a.jsonl", "--event-index", "999", "--out-dir", "rep"]), 2);

    ok(
        p,
        &[
            "eval", "gof", "--model", "m.json", "--datasets", "a.jsonl", "b.jsonl", "c.jsonl", "--n-sim", "20",
            "--max-events", "10", "--bins", "5", "--out-dir", "gof",
        ],
    );
    for n in ["a", "b", "c"] {
        let rows = csv_rows(&p.join(format!("gof/gof_{n}.csv")));
        assert_eq!(rows.len(), 11);
        assert!(rows[1..].iter().all(|r| (0.0..=1.0).contains(&r[1].parse::<f64>().unwrap())));
    }
    let h = csv_rows(&p.join("gof/gof_histogram.csv"));
    assert_eq!(h[0], ["bin_lo", "bin_hi", "a", "b", "c"]);
    assert_eq!(h.len(), 6);
    for col in 2..5 {
        assert_eq!(h[1..].iter().map(|r| r[col].parse::<usize>().unwrap()).sum::<usize>(), 10);
    }

    ok(p, &["gen", "--dataset", "2", "--n", "20", "--seed", "1", "--out", "other.jsonl"]);
    assert_eq!(code(p, &["eval", "coverage", "--model", "m.json", "--data", "other.jsonl", "--out-dir", "x"]), 3);
}
