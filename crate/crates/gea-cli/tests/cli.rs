//! End-to-end tests of the `gea` binary: exit codes, file outputs,
//! reproducibility and the attention-dump schema.

use std::path::Path;
use std::process::{Command, Output};

fn gea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gea"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(path: &Path) {
    let config = serde_json::json!({
        "seed": 3,
        "data": {"kind": "tree", "r": 2, "count": 12, "split": [0.5, 0.25, 0.25]},
        "model": {
            "hidden_dim": 8,
            "layers": 1,
            "unit_size": 3,
            "self_heads": 2,
            "external_heads": 2,
            "mpnn": "gcn",
            "self_attention": true,
            "geanet": true,
            "pe": {"kind": "none"}
        },
        "train": {"epochs": 3, "warmup_epochs": 1, "batch_size": 4}
    });
    std::fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

#[test]
fn generate_tree_writes_expected_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let result = gea(&[
            "generate", "tree", "--r", "2", "--count", "96", "--seed", "5", "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&result);
    }
    let train = std::fs::read_to_string(out_a.join("train.jsonl")).unwrap();
    let valid = std::fs::read_to_string(out_a.join("valid.jsonl")).unwrap();
    let test = std::fs::read_to_string(out_a.join("test.jsonl")).unwrap();
    let total = train.lines().count() + valid.lines().count() + test.lines().count();
    assert_eq!(total, 96);

    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "meta.json"] {
        assert_eq!(
            std::fs::read(out_a.join(f)).unwrap(),
            std::fs::read(out_b.join(f)).unwrap(),
            "{f} not reproducible"
        );
    }
}

#[test]
fn generate_rejects_invalid_parameters_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = gea(&[
        "generate", "tree", "--r", "1", "--count", "4", "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = gea(&[
        "generate", "sbm", "--p-in", "0.2", "--p-out", "0.5", "--count", "2", "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_run_directory_and_eval_reproduces_test_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let run_dir = dir.path().join("run");
    let out = gea(&[
        "train", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    for f in ["config.resolved.json", "report.json", "checkpoint.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("report.json")).unwrap()).unwrap();
    let test_metric = report["test_metric"].as_f64().unwrap();

    let eval = gea(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_ok(&eval);
    let line = String::from_utf8_lossy(&eval.stdout);
    let parsed: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(
        parsed["metric"].as_f64().unwrap().to_bits(),
        test_metric.to_bits(),
        "eval must reproduce the reported test metric exactly"
    );
}

#[test]
fn train_reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&run_a, &run_b] {
        assert_ok(&gea(&[
            "train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(),
        ]));
    }
    assert_eq!(
        std::fs::read(run_a.join("checkpoint.json")).unwrap(),
        std::fs::read(run_b.join("checkpoint.json")).unwrap(),
        "checkpoints differ"
    );
    assert_eq!(
        std::fs::read(run_a.join("config.resolved.json")).unwrap(),
        std::fs::read(run_b.join("config.resolved.json")).unwrap()
    );
    // Reports match except for wall time, which is a measurement.
    let mut a: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_a.join("report.json")).unwrap()).unwrap();
    let mut b: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_b.join("report.json")).unwrap()).unwrap();
    a["seconds"] = serde_json::json!(0);
    b["seconds"] = serde_json::json!(0);
    assert_eq!(a, b, "reports differ beyond wall time");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 1, "data": {"kind": "tree"}, "model": {"hidden_dim": 8, "layers": 1, "unexpected_key": 4}, "train": {"epochs": 2}}"#,
    )
    .unwrap();
    let out = gea(&[
        "train", "--config", cfg.to_str().unwrap(), "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unexpected_key"), "stderr: {stderr}");
}

#[test]
fn set_overrides_show_up_in_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let run_dir = dir.path().join("run");
    assert_ok(&gea(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.epochs=2",
        "--set",
        "model.unit_size=4",
        "--seed",
        "11",
        "--out",
        run_dir.to_str().unwrap(),
    ]));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["model"]["unit_size"], 4);
    assert_eq!(resolved["seed"], 11);
}

#[test]
fn gradcheck_passes_and_corrupted_fixture_fails_by_name() {
    let ok = gea(&["gradcheck"]);
    assert_ok(&ok);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.contains("PASS")).collect();
    assert!(lines.len() >= 10, "only {} components listed", lines.len());

    let bad = gea(&["gradcheck", "--with-corrupted-fixture"]);
    assert!(!bad.status.success());
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(
        stderr.contains("corrupted_relu"),
        "failure must name the op, stderr: {stderr}"
    );
}

#[test]
fn attn_dump_writes_schema_valid_documents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let run_dir = dir.path().join("run");
    assert_ok(&gea(&[
        "train", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(),
    ]));
    let dump_dir = dir.path().join("dump");
    assert_ok(&gea(&[
        "attn-dump",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        run_dir.join("checkpoint.json").to_str().unwrap(),
        "--graphs",
        "2",
        "--out",
        dump_dir.to_str().unwrap(),
    ]));

    for idx in 0..2 {
        let doc: serde_json::Value = serde_json::from_slice(
            &std::fs::read(dump_dir.join(format!("graph_{idx:03}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(doc["graph"], idx);
        let layers = doc["layers"].as_array().unwrap();
        assert_eq!(layers.len(), 1);
        // External attention rows are row-stochastic.
        for head in layers[0]["gea"]["heads"].as_array().unwrap() {
            for row in head.as_array().unwrap() {
                let sum: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sums to {sum}");
            }
        }
        let salience = doc["salience"].as_array().unwrap();
        assert_eq!(salience.len(), 7); // r=2 trees have 7 nodes
    }
}

#[test]
fn bench_writes_table_and_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let out = gea(&[
        "bench", "--sizes", "64,128", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    let sections = report["sections"].as_array().unwrap();
    assert_eq!(sections.len(), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("exponent"));
}

#[test]
fn sweep_ablation_emits_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    tiny_config(&cfg);
    let out_dir = dir.path().join("sweep");
    let out = gea(&[
        "sweep",
        "ablation",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "train.epochs=2",
        "--seeds",
        "0,1",
        "--jobs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("sweep_ablation.json")).unwrap())
            .unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["full", "no_node_units", "no_edge_units", "no_shared_unit"]);
}
