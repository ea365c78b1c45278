//! File-level pipeline tests: artifact layout, determinism, config
//! echo round-trips, grid sweeps, stage resumption, and process exit
//! codes.

use std::path::Path;
use std::process::Command;

use upllrs::cli::{
    cmd_audit, cmd_report, cmd_run_all, cmd_separate, cmd_synth, cmd_train, parse_grid_axis,
    run_pipeline, AUDIT_FILE, CONFIG_ECHO_FILE, FEATURES_FILE, GRID_FILE, METRICS_FILE,
    MODEL_FILE, REPORT_DIR, SEPARATION_FILE, STAGE_FILE, SUMMARY_FILE, TEST_IDX_FILE,
    TRAIN_IDX_FILE, UPLL_FILE, VAL_IDX_FILE,
};
use upllrs::config::RunConfig;

/// Small, fast configuration shared by these tests.
fn tiny_config() -> RunConfig {
    let mut config = RunConfig::default();
    for (key, value) in [
        ("data.n", "600"),
        ("data.classes", "5"),
        ("data.dim", "8"),
        ("data.separation", "8"),
        ("data.mu", "0.2"),
        ("data.eta", "0.1"),
        ("rs.beta", "2"),
        ("rs.gamma", "0.2"),
        ("rs.patience", "2"),
        ("rs.batch_size", "128"),
        ("train.hidden", "16"),
        ("train.epochs", "6"),
        ("train.patience", "6"),
        ("train.batch_size", "128"),
        ("seed", "1"),
    ] {
        config.apply(key, value).unwrap();
    }
    config
}

/// Artifact files whose bytes must reproduce exactly; summary.json is
/// excluded because it records wall time.
const COMPARED: [&str; 11] = [
    CONFIG_ECHO_FILE,
    FEATURES_FILE,
    TRAIN_IDX_FILE,
    VAL_IDX_FILE,
    TEST_IDX_FILE,
    UPLL_FILE,
    AUDIT_FILE,
    SEPARATION_FILE,
    METRICS_FILE,
    MODEL_FILE,
    "report/epochs.csv",
];

fn assert_same_artifacts(a: &Path, b: &Path) {
    for name in COMPARED {
        let left = std::fs::read(a.join(name)).unwrap_or_else(|_| panic!("{name} missing in {a:?}"));
        let right =
            std::fs::read(b.join(name)).unwrap_or_else(|_| panic!("{name} missing in {b:?}"));
        assert_eq!(left, right, "{name} differs");
    }
}

#[test]
fn synth_writes_artifacts_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let config = tiny_config();
    cmd_synth(&config, &a).unwrap();
    cmd_synth(&config, &b).unwrap();

    for name in [FEATURES_FILE, TRAIN_IDX_FILE, VAL_IDX_FILE, TEST_IDX_FILE, UPLL_FILE, AUDIT_FILE]
    {
        assert!(a.join(name).exists(), "{name} missing");
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs across identical runs"
        );
    }

    let audit = std::fs::read_to_string(a.join(AUDIT_FILE)).unwrap();
    assert!(audit.contains("unreliable_rate = "));
    assert!(audit.contains("flip_rate = 0."), "generation-time audit has the flip rate");

    // 600 samples split 4:1:1.
    let count = |p: &Path| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(count(&a.join(TRAIN_IDX_FILE)), 400);
    assert_eq!(count(&a.join(VAL_IDX_FILE)), 100);
    assert_eq!(count(&a.join(TEST_IDX_FILE)), 100);
}

#[test]
fn run_all_equals_sequential_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (all, seq) = (dir.path().join("all"), dir.path().join("seq"));
    let config = tiny_config();

    run_pipeline(&config, &all).unwrap();

    cmd_synth(&config, &seq).unwrap();
    cmd_separate(&config, &seq).unwrap();
    cmd_train(&config, &seq).unwrap();
    cmd_report(&config, &seq).unwrap();

    assert_same_artifacts(&all, &seq);
    assert_eq!(
        std::fs::read_to_string(all.join(STAGE_FILE)).unwrap().trim(),
        "report"
    );
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let config = tiny_config();
    run_pipeline(&config, &first).unwrap();

    let mut echoed = RunConfig::default();
    echoed.apply_file(&first.join(CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(echoed, config);
    run_pipeline(&echoed, &second).unwrap();

    assert_same_artifacts(&first, &second);
}

#[test]
fn grid_sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid");
    let mut config = tiny_config();
    // Baseline mode skips separation, keeping the sweep quick; gamma
    // still changes the echoed config so every cell is distinct.
    config.apply("train.mode", "baseline_cce").unwrap();
    let grid = vec![parse_grid_axis("rs.gamma=0.005,0.01,0.03,0.05").unwrap()];
    cmd_run_all(&config, &out, &grid).unwrap();

    let table = std::fs::read_to_string(out.join(GRID_FILE)).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "header plus four cells:\n{table}");
    assert_eq!(lines[0], "dir,rs.gamma,best_epoch,best_val_acc,test_acc_at_best_val");
    for (line, gamma) in lines[1..].iter().zip(["0.005", "0.01", "0.03", "0.05"]) {
        assert!(line.contains(&format!(",{gamma},")), "{line}");
        let cell_dir = line.split(',').next().unwrap();
        assert!(out.join(cell_dir).join(SUMMARY_FILE).exists());
        assert!(cell_dir.starts_with("cell_"), "{cell_dir}");
        assert!(cell_dir.ends_with("_s1"), "cell name carries the seed: {cell_dir}");
    }

    // A single-cell grid produces the same artifacts as the direct run.
    let single = vec![parse_grid_axis("rs.gamma=0.03").unwrap()];
    let single_out = dir.path().join("single");
    cmd_run_all(&config, &single_out, &single).unwrap();
    let mut cell_config = config.clone();
    cell_config.apply("rs.gamma", "0.03").unwrap();
    let direct_out = dir.path().join("direct");
    cmd_run_all(&cell_config, &direct_out, &[]).unwrap();
    let cell_dir = single_out.join(format!(
        "cell_{}_s{}",
        cell_config.short_hash(),
        cell_config.seed
    ));
    for name in [FEATURES_FILE, UPLL_FILE, METRICS_FILE, MODEL_FILE] {
        assert_eq!(
            std::fs::read(cell_dir.join(name)).unwrap(),
            std::fs::read(direct_out.join(name)).unwrap(),
            "{name} differs between grid cell and direct run"
        );
    }
}

#[test]
fn interrupted_run_resumes_from_stage_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("resume");
    let config = tiny_config();
    run_pipeline(&config, &out).unwrap();

    // Tamper with a synth artifact, then mark the run as interrupted
    // after synth: resuming must skip synth (sentinel survives) and
    // regenerate the rest.
    let sentinel = b"sentinel".to_vec();
    std::fs::write(out.join(AUDIT_FILE), &sentinel).unwrap();
    std::fs::write(out.join(STAGE_FILE), "synth").unwrap();
    std::fs::remove_file(out.join(SEPARATION_FILE)).unwrap();
    std::fs::remove_file(out.join(METRICS_FILE)).unwrap();

    run_pipeline(&config, &out).unwrap();
    assert_eq!(std::fs::read(out.join(AUDIT_FILE)).unwrap(), sentinel, "synth was re-run");
    assert!(out.join(SEPARATION_FILE).exists(), "separation stage re-ran");
    assert!(out.join(METRICS_FILE).exists(), "train stage re-ran");
    assert_eq!(std::fs::read_to_string(out.join(STAGE_FILE)).unwrap().trim(), "report");
}

#[test]
fn ablation_flags_and_baselines_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flags");
    let mut config = tiny_config();
    cmd_synth(&config, &out).unwrap();

    // --no-rs: train without a separation file.
    config.use_rs = false;
    cmd_train(&config, &out).unwrap();
    assert!(out.join(METRICS_FILE).exists());

    // --no-unreliable on a separated run.
    config.use_rs = true;
    config.use_unreliable = false;
    cmd_separate(&config, &out).unwrap();
    cmd_train(&config, &out).unwrap();

    // MAE baseline.
    config.apply("train.mode", "baseline_mae").unwrap();
    cmd_train(&config, &out).unwrap();

    // Augmented mode over the same separated run.
    config.use_unreliable = true;
    config.apply("train.mode", "augmented").unwrap();
    config.apply("train.xi", "0.5").unwrap();
    config.apply("train.views", "2").unwrap();
    cmd_train(&config, &out).unwrap();
    assert!(out.join(MODEL_FILE).exists());

    // Audit from stored records: membership known, flip rate not.
    let audit = cmd_audit(&out).unwrap();
    assert!(audit.contains("membership_rate = "));
    assert!(audit.contains("flip_rate = unavailable"));
}

#[test]
fn report_exports_follow_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report");
    let config = tiny_config();
    run_pipeline(&config, &out).unwrap();

    let report = out.join(REPORT_DIR);
    let decile = std::fs::read_to_string(report.join("decile.csv")).unwrap();
    assert_eq!(decile.lines().count(), 11, "header plus ten sections");
    let purity = std::fs::read_to_string(report.join("purity.csv")).unwrap();
    assert!(purity.lines().count() >= 2, "at least the step-0 row");
    let first_row = purity.lines().nth(1).unwrap();
    assert!(first_row.starts_with("0,"), "purity starts at step 0: {first_row}");
    let epochs = std::fs::read_to_string(report.join("epochs.csv")).unwrap();
    let metrics_lines = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap().lines().count();
    assert_eq!(epochs.lines().count(), metrics_lines + 1);
    assert!(report.join("summary.txt").exists());
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_upllrs"))
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key: configuration error, exit 2.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "data.unknown = 1\n").unwrap();
    let status = binary()
        .args(["synth", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Out-of-range hyperparameter: exit 2.
    let status = binary()
        .args(["synth", "--mu", "1.5", "--out"])
        .arg(dir.path().join("y"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Missing inputs for a later stage: I/O error, exit 3.
    let status = binary()
        .args(["separate", "--out"])
        .arg(dir.path().join("nonexistent"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // A healthy tiny synth run exits 0 and prints nothing to stderr.
    let out_dir = dir.path().join("ok");
    let output = binary()
        .args([
            "synth",
            "--set",
            "data.n=60",
            "--set",
            "data.classes=3",
            "--set",
            "data.dim=4",
            "--seed",
            "7",
            "--out",
        ])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(output.stderr.is_empty());

    // The audit subcommand prints the report.
    let output = binary().args(["audit", "--out"]).arg(&out_dir).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("membership_rate"));
}
