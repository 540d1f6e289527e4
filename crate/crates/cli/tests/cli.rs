use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use ncdkit_core::synthetic::four_gaussians_csv;
use serde_json::{json, Value};

fn ncdkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncdkit")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.file("data.csv"), four_gaussians_csv(50, 10.0, 2, 0)).unwrap();
        ws
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_json(&self, name: &str, v: &Value) -> PathBuf {
        let p = self.file(name);
        std::fs::write(&p, v.to_string()).unwrap();
        p
    }

    fn run_config(&self, kind: &str, config: Value, output: &str) -> PathBuf {
        self.write_json(
            &format!("{output}.json"),
            &json!({
                "dataset": "data.csv",
                "kind": kind,
                "selection": selection(),
                "config": config,
                "seed": 4,
                "output": output,
            }),
        )
    }
}

fn selection() -> Value {
    json!({
        "selected_features": ["f0", "f1"],
        "target_column": "class",
        "class_status": {"A": "known", "B": "known", "C": "unknown", "D": "unknown"},
    })
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn dataset_info_prints_schema_and_classes() {
    let ws = Workspace::new();
    let out = ncdkit(&["dataset", "info", path(&ws.file("data.csv")), "--target", "class"]);
    assert_exit(&out, 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_rows"], 200);
    assert_eq!(v["schema"]["columns"].as_array().unwrap().len(), 3);
    assert_eq!(v["classes"].as_array().unwrap().len(), 4);

    std::fs::write(ws.file("ragged.csv"), "a,b\n1,2\n3\n").unwrap();
    let out = ncdkit(&["dataset", "info", path(&ws.file("ragged.csv"))]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("RaggedInput"));

    let out = ncdkit(&["dataset", "info", path(&ws.file("data.csv")), "--target", "nope"]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnknownColumn"));

    assert_exit(&ncdkit(&["dataset", "info", path(&ws.file("missing.csv"))]), 2);
    assert_exit(&ncdkit(&["frobnicate"]), 2);
}

#[test]
fn baseline_run_is_accurate_and_reproducible() {
    let ws = Workspace::new();
    let cfg = ws.run_config("baseline", json!({"k": 2, "train": {"epochs": 10}}), "out_a");
    assert_exit(&ncdkit(&["run", path(&cfg)]), 0);
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(ws.file("out_a/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["acc"], 1.0);
    for f in ["labels.csv", "summary.json", "history.json", "model.json", "source.json"] {
        assert!(ws.file("out_a").join(f).exists(), "{f}");
    }
    let labels = std::fs::read_to_string(ws.file("out_a/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 101);

    assert_exit(&ncdkit(&["run", path(&cfg), "--output", path(&ws.file("out_b"))]), 0);
    for f in ["labels.csv", "summary.json", "history.json", "model.json"] {
        assert_eq!(
            std::fs::read(ws.file("out_a").join(f)).unwrap(),
            std::fs::read(ws.file("out_b").join(f)).unwrap(),
            "{f}"
        );
    }

    assert_exit(&ncdkit(&["run", path(&cfg), "--output", path(&ws.file("out_c")), "--seed", "11"]), 0);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ws.file("out_c/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["params"]["train"]["seed"], 11);
}

#[test]
fn config_errors_exit_with_two() {
    let ws = Workspace::new();
    let cfg = ws.run_config("forest", json!({"k": 2}), "out");
    let out = ncdkit(&["run", path(&cfg)]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("BadConfig"));

    let cfg = ws.run_config("kmeans", json!({"k": 2, "colour": 1}), "out");
    assert_exit(&ncdkit(&["run", path(&cfg)]), 2);

    let no_output = ws.write_json("no_output.json", &json!({"dataset": "data.csv", "kind": "kmeans", "selection": selection()}));
    assert_exit(&ncdkit(&["run", path(&no_output)]), 2);
}

fn count_leaves(node: &Value) -> usize {
    if node.get("feature").is_some() {
        count_leaves(&node["left"]) + count_leaves(&node["right"])
    } else {
        1
    }
}

#[test]
fn rules_from_a_result_directory() {
    let ws = Workspace::new();
    let cfg = ws.run_config("kmeans", json!({"k": 2}), "km");
    assert_exit(&ncdkit(&["run", path(&cfg)]), 0);
    let dir = ws.file("km");

    let text = ncdkit(&["rules", path(&dir)]);
    assert_exit(&text, 0);
    let structured = ncdkit(&["rules", path(&dir), "--format", "structured"]);
    assert_exit(&structured, 0);
    let tree: Value = serde_json::from_slice(&structured.stdout).unwrap();
    let text = String::from_utf8(text.stdout).unwrap();
    assert_eq!(text.lines().count(), count_leaves(&tree));
    assert!(text.lines().all(|l| l.starts_with("IF ")));

    let out_dir = ws.file("ovr");
    assert_exit(&ncdkit(&["rules", path(&dir), "--one-vs-rest", "--unlimited", "--output", path(&out_dir)]), 0);
    let mut files: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["A.txt", "B.txt", "cluster_0.txt", "cluster_1.txt"]);

    assert_exit(&ncdkit(&["rules", path(&dir), "--format", "yaml"]), 2);
    assert_exit(&ncdkit(&["rules", path(&ws.file("nowhere"))]), 2);

    // editing the dataset invalidates the saved result
    std::fs::write(ws.file("data.csv"), four_gaussians_csv(50, 10.0, 2, 1)).unwrap();
    let out = ncdkit(&["rules", path(&dir)]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("StaleResult"));
}

#[test]
fn tsne_payload_follows_the_row_filter() {
    let ws = Workspace::new();
    let run = ws.run_config("baseline", json!({"k": 2, "train": {"epochs": 3}}), "base");
    assert_exit(&ncdkit(&["run", path(&run)]), 0);
    let cfg = ws.write_json(
        "tsne.json",
        &json!({
            "dataset": "data.csv",
            "selection": selection(),
            "row_filter": "unknown_only",
            "perplexity": 10.0,
            "n_iter": 300,
            "seed": 3,
            "output": "plots/unknown.json",
        }),
    );
    assert_exit(&ncdkit(&["tsne", path(&cfg)]), 0);
    let payload: Value = serde_json::from_str(&std::fs::read_to_string(ws.file("plots/unknown.json")).unwrap()).unwrap();
    assert_eq!(payload["points"].as_array().unwrap().len(), 100);
    assert_exit(&ncdkit(&["tsne", path(&cfg), "--output", path(&ws.file("again.json"))]), 0);
    assert_eq!(
        std::fs::read(ws.file("plots/unknown.json")).unwrap(),
        std::fs::read(ws.file("again.json")).unwrap()
    );

    let latent = ws.write_json(
        "latent.json",
        &json!({
            "dataset": "data.csv",
            "selection": selection(),
            "source": {"kind": "latent", "model_id": "base"},
            "perplexity": 10.0,
            "n_iter": 250,
            "color_by": "base",
        }),
    );
    let out = ncdkit(&["tsne", path(&latent)]);
    assert_exit(&out, 0);
    let payload: Value = serde_json::from_slice(&out.stdout).unwrap();
    let points = payload["points"].as_array().unwrap();
    assert_eq!(points.len(), 200);
    assert_eq!(points.iter().filter(|p| p["label"].as_str().unwrap().starts_with("cluster_")).count(), 100);

    let big = ws.write_json(
        "big.json",
        &json!({"dataset": "data.csv", "selection": selection(), "row_filter": "unknown_only", "perplexity": 40.0}),
    );
    let out = ncdkit(&["tsne", path(&big)]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("BadPerplexity"));
}

#[test]
fn serve_takes_its_port_from_the_environment() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_ncdkit"))
        .arg("serve")
        .env("NCDKIT_PORT", "0")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit("http://").next().unwrap().to_string();
    let mut stream = std::net::TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.ends_with("ok"));
}
