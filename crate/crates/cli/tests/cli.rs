use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridtopo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn star() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/star.json")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generated_grid_validates() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.json");
    let o = run(&["generate-grid", "--nodes", "100", "--max-degree", "5", "--seed", "7", "--out", p(&g)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["validate", "--grid", p(&g)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("valid"));
}

#[test]
fn invalid_grid_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("bad.json");
    let text = fs::read_to_string(star()).unwrap().replace("\"r\": 0.10", "\"r\": 0.0");
    fs::write(&g, text).unwrap();
    let o = run(&["validate", "--grid", p(&g)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("impedance"), "{}", stderr(&o));
}

#[test]
fn missing_column_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let o = run(&["simulate", "--grid", p(&star()), "--samples", "50", "--seed", "1", "--out", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cut: String = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                l.to_string()
            } else {
                l.split(',').take(6).collect::<Vec<_>>().join(",")
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&csv, cut).unwrap();
    let o = run(&["estimate", "--data", p(&csv), "--out", p(&dir.path().join("l.json"))]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("q:b") && msg.contains("s.csv"), "{msg}");
    assert!(!msg.contains("panicked"));
}

#[test]
fn missing_file_exits_one() {
    let o = run(&["validate", "--grid", "/nonexistent/grid.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/grid.json"));
}

#[test]
fn unknown_flag_is_rejected() {
    let o = run(&["validate", "--grid", p(&star()), "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_recovers_star() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "pipeline", "--grid", p(&star()), "--samples", "10000", "--eps", "0.07", "--seed", "7", "--out-dir", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("exact_recovery=true"));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["exact_recovery"], Value::Bool(true));
    assert_eq!(report["edge_difference"], 0);
    assert!(report["avg_impedance_error"].as_f64().unwrap() <= 0.10);
    assert!(out.join("data.csv").exists() && out.join("learned.json").exists());
}

#[test]
fn stepwise_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    let g = d("g.json");
    assert!(run(&["generate-grid", "--nodes", "12", "--seed", "3", "--out", p(&g)]).status.success());
    assert!(run(&["simulate", "--grid", p(&g), "--samples", "20000", "--seed", "5", "--out", p(&d("s.csv"))])
        .status
        .success());
    assert!(run(&["moments", "--data", p(&d("s.csv")), "--out", p(&d("m.json"))]).status.success());
    assert!(run(&["estimate", "--data", p(&d("s.csv")), "--out", p(&d("a.json"))]).status.success());
    assert!(run(&["estimate", "--moments", p(&d("m.json")), "--out", p(&d("b.json"))]).status.success());
    let a: Value = serde_json::from_str(&fs::read_to_string(d("a.json")).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&fs::read_to_string(d("b.json")).unwrap()).unwrap();
    assert_eq!(a["edges"], b["edges"]);

    let o = run(&["evaluate", "--truth", p(&g), "--learned", p(&d("a.json")), "--out", p(&d("r.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&fs::read_to_string(d("r.json")).unwrap()).unwrap();
    assert!(r["exact_recovery"].is_boolean());

    assert!(run(&["pipeline", "--grid", p(&g), "--samples", "20000", "--seed", "5", "--out-dir", p(&d("pipe"))])
        .status
        .success());
    assert_eq!(fs::read(d("pipe/learned.json")).unwrap(), fs::read(d("a.json")).unwrap());
}

#[test]
fn outputs_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = |f: &str| dir.path().join(f);
    let cfg = d("sweep.cfg");
    fs::write(&cfg, "n = 10\nsamples = 2000, 5000\ntrials = 4\nseed = 3\n").unwrap();
    for k in ["1", "2"] {
        let o = run(&["generate-grid", "--nodes", "20", "--seed", "9", "--out", p(&d(&format!("g{k}.json")))]);
        assert!(o.status.success());
        let o = run(&[
            "simulate", "--grid", p(&d("g1.json")), "--samples", "300", "--seed", "4", "--out", p(&d(&format!("s{k}.csv"))),
        ]);
        assert!(o.status.success());
        let o = run(&[
            "--threads",
            k,
            "sweep",
            "--config",
            p(&cfg),
            "--out",
            p(&d(&format!("r{k}.csv"))),
            "--summary",
            p(&d(&format!("r{k}.json"))),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["g", "s", "r"] {
        let ext = match f {
            "g" => "json",
            _ => "csv",
        };
        assert_eq!(fs::read(d(&format!("{f}1.{ext}"))).unwrap(), fs::read(d(&format!("{f}2.{ext}"))).unwrap());
    }
    assert_eq!(fs::read(d("r1.json")).unwrap(), fs::read(d("r2.json")).unwrap());
}

#[test]
fn bad_sweep_config_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "n = 10\nsamples = lots\n").unwrap();
    let o = run(&["sweep", "--config", p(&cfg), "--out", p(&dir.path().join("r.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("bad.cfg") && msg.contains('2'), "{msg}");
}

#[test]
fn help_documents_flags_and_formats() {
    let cases: &[(&str, &[&str])] = &[
        ("generate-grid", &["--nodes", "--max-degree", "--seed", "--out", "Grid JSON"]),
        ("validate", &["--grid", "Grid JSON"]),
        ("simulate", &["--grid", "--samples", "--seed", "--var-p", "--out", "Measurement CSV"]),
        ("moments", &["--data", "--out", "MomentSet JSON"]),
        ("estimate", &["--data", "--moments", "--eps", "--eps-growth", "--tau", "--lambda", "LearnedGrid JSON"]),
        ("evaluate", &["--truth", "--learned", "--out", "EvalReport JSON"]),
        ("pipeline", &["--grid", "--samples", "--eps", "--out-dir", "report.json"]),
        ("sweep", &["--config", "--out", "--summary", "eps_mode", "tau_rule"]),
    ];
    for (cmd, needles) in cases {
        let o = run(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{cmd}");
        let text = String::from_utf8_lossy(&o.stdout);
        for n in *needles {
            assert!(text.contains(n), "{cmd} --help lacks {n}");
        }
    }
}
