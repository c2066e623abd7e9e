#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_archinfer"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn task(id: &str, seed: u64, classes: usize) -> serde_json::Value {
    json!({
        "task_id": id, "seed": seed, "num_samples": 120, "num_classes": classes,
        "margin": 3.0, "informative": 6
    })
}

pub fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "seed": 11,
        "timestamp": 0,
        "space": {
            "num_layers": 2, "base_sizes": [4, 8], "activations": ["relu", "tanh"],
            "num_preproc_modules": 2
        },
        "tasks": { "synthetic": [
            task("a", 1, 2), task("b", 2, 3), task("c", 3, 2), task("d", 4, 4)
        ]},
        "db": "out/experiments.ndjson",
        "output_dir": "out",
        "populate": { "m_per_task": 6, "child": { "learning_rate": 0.01, "epochs": 1 } },
        "dvn": { "mode": "learned_meta",
                 "train": { "learning_rate": 0.01, "max_steps": 20, "task_batch_size": 16,
                            "minibatch_size": 4 } },
        "inference": { "num_starting_points": 2, "max_iters": 20 },
        "evaluation": { "modes": ["no_meta", "learned_meta"], "repeats": 1 },
        "studies": { "orderings": 2, "trainings": 1, "batches_per_task": 3, "batch_size": 16 },
        "search": { "baseline_samples": 2, "repeats": 1 }
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn run(args: &[&str], config: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

pub fn ok(args: &[&str], config: &Path) -> Output {
    let out = run(args, config);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

pub fn pipeline(dir: &Path, jobs: &str) -> Vec<(String, Vec<u8>)> {
    let cfg = tiny_config(dir);
    let j = ["--jobs", jobs];
    ok(&["gen-tasks"], &cfg);
    ok(&[&["populate"][..], &j].concat(), &cfg);
    ok(&["train-dvn"], &cfg);
    let pred = ok(&["predict", "--task", "a"], &cfg);
    assert!(String::from_utf8_lossy(&pred.stdout).contains("spearman"));
    let single = ok(
        &["predict", "--task", "a", "--u", "[1,0,0,0,0,1,0,0,1,0,1,0]"],
        &cfg,
    );
    let v: f64 = String::from_utf8_lossy(&single.stdout)
        .trim()
        .parse()
        .unwrap();
    assert!(v.is_finite());
    let inf = ok(&["infer", "--task", "b"], &cfg);
    assert!(String::from_utf8_lossy(&inf.stdout).contains("architecture"));
    ok(&[&["evaluate-loo"][..], &j].concat(), &cfg);
    ok(&[&["study-tasks", "--task", "d"][..], &j].concat(), &cfg);
    ok(&["study-embeddings"], &cfg);
    ok(&[&["search-eval"][..], &j].concat(), &cfg);

    let mut files: Vec<_> = walk(&dir.join("out"))
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().display().to_string();
            (rel, fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

pub fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
