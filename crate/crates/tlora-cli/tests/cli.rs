//! Command-level integration tests: flag resolution, run-directory layout,
//! report generation, plotting, comparison, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tlora"))
}

/// Small-model config so these tests stay fast.
fn write_small_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{"n_examples": 48, "vocab_size": 12, "seq_len": 4, "d_model": 16, "n_heads": 2, "n_layers": 2, "max_seq_len": 16}"#,
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tlora");
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_small(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_small_cfg(dir);
    let out_dir = dir.join(name);
    let mut cmd = bin();
    cmd.args([
        "train",
        "--task",
        "synth",
        "--seed",
        "7",
        "--epochs",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    cmd.args(extra);
    run_ok(&mut cmd);
    out_dir
}

#[test]
fn omitted_flags_resolve_to_published_defaults() {
    let dir = TempDir::new().unwrap();
    // Omit --method/--rank/--lr/--batch/--dropout; only shrink the model and
    // epochs for speed.
    let run = train_small(dir.path(), "run", &["--rank", "2"]);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["method"], "tlora");
    assert_eq!(cfg["train"]["batch_size"], 32);
    assert_eq!(cfg["train"]["learning_rate"], 1e-3);
    assert_eq!(cfg["train"]["weight_decay"], 0.01);
    assert_eq!(cfg["train"]["schedule"], "linear");
    assert_eq!(cfg["adapter"]["dropout_p"], 0.5);
    assert_eq!(cfg["adapter"]["method"], "tlora");
    assert_eq!(cfg["seed"], 7);
    assert!(cfg["dataset"]["fingerprint_sha256"].as_str().unwrap().len() == 64);
    // The built-in epoch default is Table 2's 30; this run overrode it.
    assert_eq!(cfg["train"]["epochs"], 2);
    // No marker left behind.
    assert!(!run.join(".incomplete").exists());
}

#[test]
fn default_rank_is_32_when_unspecified() {
    let dir = TempDir::new().unwrap();
    let cfg = write_small_cfg(dir.path());
    let out_dir = dir.path().join("run");
    // d_model 16 supports rank 32? No: rank <= min(d,k) = 16, so expect a
    // clean configuration error, which itself proves the default was 32.
    let out = bin()
        .args([
            "train",
            "--task",
            "synth",
            "--seed",
            "7",
            "--epochs",
            "1",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rank 32"), "{err}");
}

#[test]
fn frozen_method_scores_chance_level() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"n_examples": 512, "vocab_size": 12, "seq_len": 4, "d_model": 16, "n_heads": 2, "n_layers": 2, "max_seq_len": 16}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("frozen");
    run_ok(bin().args([
        "train",
        "--method",
        "frozen",
        "--task",
        "synth",
        "--seed",
        "7",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let metrics =
        tlora_core::rundir::read_metrics(&tlora_core::rundir::metrics_path(&out_dir)).unwrap();
    assert_eq!(metrics.rows.len(), 1, "frozen runs snapshot epoch 0 only");
    let acc = metrics.column("val_acc").unwrap()[0];
    assert!((acc - 0.5).abs() <= 0.1, "frozen accuracy {acc} not chance-level");
}

#[test]
fn analyze_writes_reports_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let run = train_small(dir.path(), "run", &["--method", "tlora", "--rank", "2"]);
    run_ok(bin().args(["analyze", "--run", run.to_str().unwrap()]));

    let reports = run.join("reports");
    for name in [
        "histograms.json",
        "histograms.csv",
        "norm_timeline.json",
        "norm_timeline.csv",
        "scaling_timeline.json",
        "scaling_timeline.csv",
        "heatmap_q.json",
        "heatmap_v.csv",
        "spectra.json",
    ] {
        assert!(reports.join(name).exists(), "missing {name}");
    }
    assert!(!reports.join(".incomplete").exists());

    // Timeline CSV data rows = epochs + 1 (epoch 0 through final).
    let timeline = std::fs::read_to_string(reports.join("norm_timeline.csv")).unwrap();
    assert_eq!(timeline.lines().count(), 1 + 3, "header + epochs+1 rows");

    // Byte-identical on a second invocation.
    let before: Vec<(String, Vec<u8>)> = std::fs::read_dir(&reports)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    run_ok(bin().args(["analyze", "--run", run.to_str().unwrap()]));
    for (name, bytes) in before {
        assert_eq!(
            std::fs::read(reports.join(&name)).unwrap(),
            bytes,
            "{name} changed between identical analyze invocations"
        );
    }
}

#[test]
fn analyze_at_epoch_zero_shows_untrained_state() {
    let dir = TempDir::new().unwrap();
    let run = train_small(dir.path(), "run", &["--method", "tlora", "--rank", "2"]);
    run_ok(bin().args(["analyze", "--run", run.to_str().unwrap(), "--epoch", "0"]));
    let histograms: Vec<serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(run.join("reports/histograms.json")).unwrap(),
    )
    .unwrap();
    let b_hists: Vec<&serde_json::Value> = histograms
        .iter()
        .filter(|h| h["component"] == "b")
        .collect();
    assert!(!b_hists.is_empty());
    for h in b_hists {
        assert_eq!(h["degenerate"], true, "untrained B should be all zeros");
        assert_eq!(h["std"], 0.0);
    }
    let scaling: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.join("reports/scaling_timeline.json")).unwrap(),
    )
    .unwrap();
    for series in scaling["alphas"].as_array().unwrap() {
        assert_eq!(series.as_array().unwrap()[0], 1.0);
    }
}

#[test]
fn compare_run_with_itself_and_untrained_runs() {
    let dir = TempDir::new().unwrap();
    let run_a = train_small(dir.path(), "a", &["--method", "tlora", "--rank", "2"]);

    // Self-comparison: cosine 1.0 everywhere (updates are nonzero after
    // training), zero diffs.
    let out = run_ok(bin().args([
        "compare",
        "--run-a",
        run_a.to_str().unwrap(),
        "--run-b",
        run_a.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for site in report["similarity"]["sites"].as_array().unwrap() {
        assert_eq!(site["max_abs_diff"], 0.0);
        let c = site["cosine"].as_f64().unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    // Epoch 0 vs epoch 0: both updates are exactly zero, similarity is the
    // undefined sentinel (null), never 1.
    let out = run_ok(bin().args([
        "compare",
        "--run-a",
        run_a.to_str().unwrap(),
        "--run-b",
        run_a.to_str().unwrap(),
        "--epoch",
        "0",
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for site in report["similarity"]["sites"].as_array().unwrap() {
        assert!(site["cosine"].is_null(), "zero updates must report null");
        assert_eq!(site["max_abs_diff"], 0.0);
    }
}

#[test]
fn compare_refuses_mismatched_datasets_without_force() {
    let dir = TempDir::new().unwrap();
    let run_a = train_small(dir.path(), "a", &["--method", "tlora", "--rank", "2"]);
    // Different seed => different synthetic dataset => different fingerprint.
    let cfg = write_small_cfg(dir.path());
    let run_b = dir.path().join("b");
    run_ok(bin().args([
        "train",
        "--task",
        "synth",
        "--seed",
        "8",
        "--epochs",
        "2",
        "--rank",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run_b.to_str().unwrap(),
    ]));

    let out = bin()
        .args([
            "compare",
            "--run-a",
            run_a.to_str().unwrap(),
            "--run-b",
            run_b.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "fingerprint mismatch must refuse");
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));

    run_ok(bin().args([
        "compare",
        "--run-a",
        run_a.to_str().unwrap(),
        "--run-b",
        run_b.to_str().unwrap(),
        "--force",
    ]));
}

#[test]
fn plot_loss_has_exactly_two_polylines_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let run = train_small(dir.path(), "run", &["--method", "tlora", "--rank", "2"]);
    let svg1 = dir.path().join("loss1.svg");
    let svg2 = dir.path().join("loss2.svg");
    for out in [&svg1, &svg2] {
        run_ok(bin().args([
            "plot",
            "--run",
            run.to_str().unwrap(),
            "--what",
            "loss",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let content = std::fs::read_to_string(&svg1).unwrap();
    assert_eq!(content.matches("<polyline").count(), 2);
    assert!(content.contains("train_loss") && content.contains("val_loss"));
    assert_eq!(
        std::fs::read(&svg1).unwrap(),
        std::fs::read(&svg2).unwrap(),
        "identical inputs must render identical bytes"
    );
}

#[test]
fn plot_spectrum_of_zero_update_annotates_empty_series() {
    let dir = TempDir::new().unwrap();
    let run = train_small(dir.path(), "run", &["--method", "tlora", "--rank", "2"]);
    run_ok(bin().args(["analyze", "--run", run.to_str().unwrap(), "--epoch", "0"]));
    let svg = dir.path().join("spec.svg");
    run_ok(bin().args([
        "plot",
        "--run",
        run.to_str().unwrap(),
        "--what",
        "spectrum",
        "--out",
        svg.to_str().unwrap(),
    ]));
    let content = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(content.matches("<polyline").count(), 0);
    assert!(content.contains("no nonzero eigenvalues"));
}

#[test]
fn plot_without_reports_instructs_running_analyze() {
    let dir = TempDir::new().unwrap();
    let run = train_small(dir.path(), "run", &["--method", "tlora", "--rank", "2"]);
    let out = bin()
        .args([
            "plot",
            "--run",
            run.to_str().unwrap(),
            "--what",
            "norms",
            "--out",
            dir.path().join("x.svg").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("analyze"));
}

#[test]
fn tsv_task_trains_end_to_end() {
    let dir = TempDir::new().unwrap();
    let tsv = dir.path().join("task.tsv");
    let mut content = String::from("text_a\ttext_b\tlabel\n");
    for i in 0..24 {
        let (a, b, label) = if i % 2 == 0 {
            ("mrk0 tok1 mrk0 tok2", "tok3 mrk0 mrk0 tok1", 1)
        } else {
            ("mrk0 tok2 mrk0 tok1", "mrk1 tok1 mrk1 tok3", 0)
        };
        content.push_str(&format!("{a} v{i}\t{b} w{i}\t{label}\n"));
    }
    std::fs::write(&tsv, content).unwrap();

    let cfg = write_small_cfg(dir.path());
    let out_dir = dir.path().join("run");
    run_ok(bin().args([
        "train",
        "--method",
        "lora",
        "--rank",
        "2",
        "--task",
        &format!("tsv:{}", tsv.display()),
        "--seed",
        "3",
        "--epochs",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    // The input is copied into the run directory and fingerprinted.
    assert_eq!(
        std::fs::read(&tsv).unwrap(),
        std::fs::read(out_dir.join("dataset.tsv")).unwrap()
    );
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["dataset"]["kind"], "tsv");
}

#[test]
fn error_exit_codes() {
    let dir = TempDir::new().unwrap();
    // Unknown flag: clap usage error, exit 2.
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Missing TSV file: I/O error, exit 4.
    let cfg = write_small_cfg(dir.path());
    let out = bin()
        .args([
            "train",
            "--task",
            "tsv:/nonexistent/file.tsv",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("r1").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // Malformed TSV (unknown label): data error, exit 3.
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "text_a\ttext_b\tlabel\nx\ty\tmaybe\n").unwrap();
    let out = bin()
        .args([
            "train",
            "--task",
            &format!("tsv:{}", bad.display()),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("r2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Analyzing a missing run directory: I/O error, exit 4.
    let out = bin()
        .args(["analyze", "--run", "/nonexistent/run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn seed_env_fallback_applies() {
    let dir = TempDir::new().unwrap();
    let cfg = write_small_cfg(dir.path());
    let out_dir = dir.path().join("run");
    let mut cmd = bin();
    cmd.env("TLORA_LAB_SEED", "1234");
    cmd.args([
        "train",
        "--rank",
        "2",
        "--epochs",
        "1",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    run_ok(&mut cmd);
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["seed"], 1234);
}

#[test]
fn incomplete_marker_stays_after_failure() {
    let dir = TempDir::new().unwrap();
    // NaN learning rate is rejected by validation AFTER the directory is
    // created, so the marker must survive.
    let cfg = write_small_cfg(dir.path());
    let out_dir = dir.path().join("run");
    let out = bin()
        .args([
            "train",
            "--rank",
            "2",
            "--lr",
            "-1.0",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(
        out_dir.join(".incomplete").exists(),
        "failed run must keep its .incomplete marker"
    );
}
