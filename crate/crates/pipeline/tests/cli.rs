//! End-to-end CLI checks through the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn mpqdm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpqdm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const SMALL_CONFIG: &str = r#"
bits = "W2A4"

[model]
hidden = 12
emb_dim = 8

[schedule]
steps = 20

[dataset]
points = 500

[fp_train]
steps = 120
batch = 16

[quant]
weight_bits = 2
act_bits = 4
calib_batch = 4
calib_samples = 24

[finetune]
steps = 30
batch = 8
lora_rank = 2

[eval]
seeds = 3
batch = 16
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

#[test]
fn unknown_flag_exits_two_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpqdm(&["eval", "--definitely-not-a-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"), "{stderr}");
}

#[test]
fn missing_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mpqdm(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_out_of_order_exits_one_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = mpqdm(
        &["finetune", "--config", cfg.to_str().unwrap(), "--run-dir", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "{stderr}");
}

#[test]
fn full_pipeline_via_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();

    for stage in ["train-fp", "calibrate"] {
        let out = mpqdm(&[stage, "--config", cfg, "--run-dir", "run"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{stage}: {:?}", out);
    }

    let out = mpqdm(
        &[
            "allocate",
            "--config",
            cfg,
            "--run-dir",
            "run",
            "--weight-bits",
            "3",
            "--group-size",
            "auto",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("promoted"), "{stdout}");

    // Rerun allocation at the config's own bits for the remaining stages.
    let out = mpqdm(&["allocate", "--config", cfg, "--run-dir", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0));

    for stage in ["finetune", "eval", "report"] {
        let out = mpqdm(&[stage, "--config", cfg, "--run-dir", "run"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{stage}: {:?}", out);
    }

    let run = dir.path().join("run");
    for file in [
        "fp_model.mpqt",
        "calib.mpqt",
        "alloc.mpqt",
        "q_model.mpqt",
        "train_loss.csv",
        "finetune_loss.csv",
        "eval_seeds.csv",
        "report.toml",
    ] {
        assert!(run.join(file).exists(), "missing {file}");
    }

    // eval emits one CSV row per seed.
    let eval = std::fs::read_to_string(run.join("eval_seeds.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(lines[0], "seed,trajectory_mse,sqnr_db,mode_coverage");

    // sample writes the requested batch.
    let out = mpqdm(
        &[
            "sample", "--config", cfg, "--run-dir", "run", "--model", "quantized", "--seed",
            "5", "--batch", "17", "--out", "run/samples.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let samples = std::fs::read_to_string(run.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 1 + 17);

    // The report is a valid, re-loadable document.
    let report =
        mpqdm_pipeline::report::RunReport::load(run.join("report.toml")).unwrap();
    assert_eq!(report.run.wa_label, "W2A4");
    assert_eq!(report.layers.len(), 2);
}

#[test]
fn eval_seed_override_controls_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    for stage in ["train-fp", "calibrate", "allocate", "finetune"] {
        let out = mpqdm(&[stage, "--config", cfg, "--run-dir", "run"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{stage}");
    }
    let out = mpqdm(
        &["eval", "--config", cfg, "--run-dir", "run", "--seeds", "5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let eval = std::fs::read_to_string(dir.path().join("run/eval_seeds.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 5);
}
