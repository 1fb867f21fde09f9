use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqplace::datasets::{make_benchmark_with, write_cloud, BenchmarkSpec, ScanSource};
use seqplace::rangeproj::SensorModel;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_seqplace");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("SEQPLACE_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// A small file-backed dataset and a toy-model config next to it.
fn tiny_setup(dir: &Path) -> std::path::PathBuf {
    let spec = BenchmarkSpec {
        sensor: SensorModel::new(24, 8, 0.3, 0.3).unwrap(),
        loop_size: [40.0, 30.0],
        scans_per_pass: 40,
        query_forward: 25,
        obstacle_count: 80,
        ..BenchmarkSpec::default()
    };
    let mut m = make_benchmark_with(3, &spec).unwrap();
    let clouds = m.clouds(Path::new("")).unwrap();
    fs::create_dir_all(dir.join("scans")).unwrap();
    for (s, c) in m.scans.iter_mut().zip(&clouds) {
        let name = format!("scans/{:06}.bin", s.index);
        write_cloud(&dir.join(&name), c).unwrap();
        s.source = ScanSource::File(name);
    }
    m.synthetic = None;
    m.write(&dir.join("dataset.json")).unwrap();
    let cfg = json!({
        "model": {
            "c": 8, "heads_sst": 2, "heads_mst": 2, "vlad_clusters": 4, "seq_len_m": 5,
            "leg_channels": [4], "leg_kernels": [3, 3], "range_norm": 20.0
        },
        "train": {
            "epochs_phase1": 1, "epochs_phase2": 1, "queries_per_epoch": 4,
            "vlad_init_windows": 4, "n_pos": 2, "n_neg": 2
        },
        "data": { "manifest": dir.join("dataset.json") },
        "eval": { "recall_at": [1, 2, 5, 20] }
    });
    let p = dir.join("tiny.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["train"])), 1);
    assert_eq!(code(&run(dir.path(), &["train", "--phase", "3"])), 1);
    assert_eq!(code(&run(dir.path(), &["--workers", "0", "project"])), 1);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"c": 8, "colour": 3}}"#).unwrap();
    let o = run(dir.path(), &["--config", cfg.to_str().unwrap(), "project"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn missing_artifacts_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let out = dir.path().join("out");
    let o = run(&out, &["--config", cfg.to_str().unwrap(), "describe"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seqplace train"));
    let o = run(
        &out,
        &["--config", cfg.to_str().unwrap(), "train", "--phase", "1"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seqplace project"));
    fs::write(dir.path().join("scans/000003.bin"), [0u8; 20]).unwrap();
    let o = run(&out, &["--config", cfg.to_str().unwrap(), "project"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("000003.bin"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    for step in [
        &["project"][..],
        &["label"],
        &["train", "--phase", "1"],
        &["train", "--phase", "2"],
        &["describe"],
        &["index"],
        &["query", "--top-k", "3"],
        &["eval"],
    ] {
        let mut args = vec!["--config", cfg];
        args.extend_from_slice(step);
        let o = run(&out, &args);
        assert_eq!(
            code(&o),
            0,
            "{step:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 80);
    for name in [
        "project",
        "label",
        "train-phase1",
        "train-phase2",
        "describe",
        "index",
        "query",
        "eval",
    ] {
        let m = json_file(&out.join(format!("runs/{name}.json")));
        assert_eq!(m["command"], name);
        assert_eq!(m["config"]["model"]["c"], 8);
        assert!(m["outputs"].as_object().is_some_and(|o| !o.is_empty()));
    }
    let eval = json_file(&out.join("eval.json"));
    let ar: Vec<f64> = eval["ar"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p[1].as_f64().unwrap())
        .collect();
    assert_eq!(ar.len(), 4);
    assert!(ar.windows(2).all(|w| w[0] <= w[1]), "{ar:?}");
    assert!(eval["reversed"]["evaluated"].as_u64().unwrap() > 0);
    let queries = json_file(&out.join("queries.json"));
    assert!(queries
        .as_array()
        .unwrap()
        .iter()
        .all(|q| q["hits"].as_array().unwrap().len() == 3));
    let pr = fs::read_to_string(out.join("pr.csv")).unwrap();
    assert!(pr.starts_with("threshold,precision,recall\n"));

    // streaming writes the same descriptors as batch mode
    let batch = fs::read(out.join("descriptors.sqix")).unwrap();
    let o = run(&out, &["--config", cfg, "describe", "--stream"]);
    assert_eq!(code(&o), 0);
    assert_eq!(batch, fs::read(out.join("descriptors.sqix")).unwrap());

    // resuming a finished phase is a no-op on the weights
    let before = fs::read(out.join("phase1/model.sqwt")).unwrap();
    let o = run(
        &out,
        &["--config", cfg, "train", "--phase", "1", "--resume"],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(before, fs::read(out.join("phase1/model.sqwt")).unwrap());

    let o = run(
        &out,
        &[
            "--config",
            cfg,
            "bench",
            "--index-size",
            "50",
            "--scans",
            "12",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let b = json_file(&out.join("bench.json"));
    assert_eq!(b["scans_timed"], 12 - 4);
    assert!(b["trained_weights"].as_bool().unwrap());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["selftest"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}
