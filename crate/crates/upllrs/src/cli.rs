//! Pipeline commands behind the `upllrs` binary: synth, separate, train,
//! audit, report, and run-all with grid sweeps.
//!
//! Stages communicate only through files in the run directory, so
//! `run-all` is exactly the sequential commands. A stage marker makes an
//! interrupted `run-all` resumable: completed stages are skipped on the
//! next invocation.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{DataSource, RunConfig};
use crate::data::{
    audit, corrupt_to_upll, load_csv_raw, load_csv_with_stats, read_upll_records, split_4_1_1,
    synth_gaussians, write_csv, write_upll_records, CandidateSet, LabeledDataset, SplitIndices,
    UpllDataset, UpllRecord,
};
use crate::diagnostics::{export_report, loss_decile_histogram, purity_curve, RunArtifacts};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeding::derive_seed;
use crate::separation::{
    read_separation, run_recursive_separation, train_and_final_losses, write_separation,
};
use crate::trainer::{
    read_metrics, save_model, train_augmented, train_baseline, train_general, write_metrics,
    write_summary, Partition, TrainMode, TrainOutcome, TrainSummary,
};

pub const FEATURES_FILE: &str = "features.csv";
pub const UPLL_FILE: &str = "upll.txt";
pub const TRAIN_IDX_FILE: &str = "train_idx.txt";
pub const VAL_IDX_FILE: &str = "val_idx.txt";
pub const TEST_IDX_FILE: &str = "test_idx.txt";
pub const AUDIT_FILE: &str = "audit.txt";
pub const SEPARATION_FILE: &str = "separation.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.bin";
pub const CONFIG_ECHO_FILE: &str = "config.echo";
pub const REPORT_DIR: &str = "report";
pub const GRID_FILE: &str = "grid.csv";
pub const STAGE_FILE: &str = ".stage";

fn write_indices(path: &Path, indices: &[usize]) -> Result<()> {
    let mut out = String::new();
    for i in indices {
        let _ = writeln!(out, "{i}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::DataFormat {
                row: i + 1,
                col: 1,
                msg: format!("bad index {l:?}"),
            })
        })
        .collect()
}

fn write_config_echo(config: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_ECHO_FILE), config.to_echo_string())?;
    Ok(())
}

/// Synthesizes (or ingests) the dataset and writes every data artifact:
/// canonical features CSV, split index files, candidate records with
/// hidden truth, and the generation-time audit.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    write_config_echo(config, out)?;

    let full = match config.source {
        DataSource::Synthetic => synth_gaussians(
            config.n,
            config.classes,
            config.dim,
            config.separation,
            derive_seed(config.seed, 10),
        )?,
        DataSource::Csv => {
            let path = config.csv_path.as_ref().expect("validated");
            load_csv_raw(path, &config.label_column)?
        }
    };
    write_csv(&out.join(FEATURES_FILE), &full)?;

    let split = split_4_1_1(full.len(), derive_seed(config.seed, 11))?;
    write_indices(&out.join(TRAIN_IDX_FILE), &split.train)?;
    write_indices(&out.join(VAL_IDX_FILE), &split.val)?;
    write_indices(&out.join(TEST_IDX_FILE), &split.test)?;

    let train_clean = full.gather(&split.train);
    let upll = corrupt_to_upll(&train_clean, config.mu, config.eta, derive_seed(config.seed, 12))?;
    let report = audit(&upll)?;
    std::fs::write(out.join(AUDIT_FILE), report.to_text())?;

    let records: Vec<UpllRecord> = split
        .train
        .iter()
        .zip(&upll.candidates)
        .zip(upll.hidden_truth.as_ref().expect("generated with truth"))
        .map(|((&index, &candidates), &truth)| UpllRecord {
            index,
            candidates,
            hidden_truth: Some(truth),
        })
        .collect();
    write_upll_records(&out.join(UPLL_FILE), &records)?;
    Ok(())
}

/// Data artifacts reloaded for the later stages: standardized features
/// throughout.
pub struct RunInputs {
    pub train: UpllDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub split: SplitIndices,
}

pub fn load_run_inputs(out: &Path) -> Result<RunInputs> {
    let (full, _) = load_csv_with_stats(&out.join(FEATURES_FILE), "label")?;
    let split = SplitIndices {
        train: read_indices(&out.join(TRAIN_IDX_FILE))?,
        val: read_indices(&out.join(VAL_IDX_FILE))?,
        test: read_indices(&out.join(TEST_IDX_FILE))?,
    };
    let records = read_upll_records(&out.join(UPLL_FILE))?;
    if records.len() != split.train.len() {
        return Err(Error::DataFormat {
            row: 0,
            col: 0,
            msg: format!(
                "{} candidate records for {} training indices",
                records.len(),
                split.train.len()
            ),
        });
    }
    let indices: Vec<usize> = records.iter().map(|r| r.index).collect();
    let candidates: Vec<CandidateSet> = records.iter().map(|r| r.candidates).collect();
    for (row, rec) in records.iter().enumerate() {
        let ok = rec.candidates.iter().all(|c| c < full.class_count)
            && rec.hidden_truth.is_none_or(|y| y < full.class_count);
        if !ok {
            return Err(Error::DataFormat {
                row: row + 1,
                col: 2,
                msg: format!("class out of range for {} classes", full.class_count),
            });
        }
    }
    let hidden_truth: Option<Vec<usize>> = records
        .iter()
        .map(|r| r.hidden_truth)
        .collect::<Option<Vec<usize>>>();
    let train = UpllDataset {
        features: full.features.gather_rows(&indices),
        candidates,
        hidden_truth,
        hidden_flipped: None,
        class_count: full.class_count,
    };
    let val = full.gather(&split.val);
    let test = full.gather(&split.test);
    Ok(RunInputs { train, val, test, split })
}

/// Runs recursive separation on the stored dataset and writes the
/// partition plus per-step history.
pub fn cmd_separate(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    write_config_echo(config, out)?;
    let inputs = load_run_inputs(out)?;
    let result = run_recursive_separation(
        &inputs.train,
        &inputs.val,
        &config.model_spec(),
        &config.separation_config(),
    )?;
    write_separation(&out.join(SEPARATION_FILE), &result)?;
    Ok(())
}

/// Trains in the configured mode and writes metrics, summary, and model.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    write_config_echo(config, out)?;
    let inputs = load_run_inputs(out)?;
    let spec = config.model_spec();
    let train_config = config.train_config();

    let outcome: TrainOutcome = match config.mode {
        TrainMode::BaselineCce | TrainMode::BaselineMae => {
            train_baseline(&inputs.train, &inputs.val, &inputs.test, &spec, &train_config)?
        }
        mode => {
            let partition = if config.use_rs {
                let sep = read_separation(&out.join(SEPARATION_FILE))?;
                Partition { reliable: sep.reliable_indices, unreliable: sep.unreliable_indices }
            } else {
                Partition::all_reliable(inputs.train.len())
            };
            match mode {
                TrainMode::General => train_general(
                    &inputs.train,
                    &partition,
                    &inputs.val,
                    &inputs.test,
                    &spec,
                    &train_config,
                )?,
                TrainMode::Augmented => train_augmented(
                    &inputs.train,
                    &partition,
                    &inputs.val,
                    &inputs.test,
                    &spec,
                    &train_config,
                )?,
                _ => unreachable!("baselines handled above"),
            }
        }
    };

    write_metrics(&out.join(METRICS_FILE), &outcome.epochs)?;
    write_summary(&out.join(SUMMARY_FILE), &outcome.summary)?;
    save_model(&out.join(MODEL_FILE), &outcome.model)?;
    Ok(())
}

/// Recomputes the audit from the stored candidate records and prints it.
/// File-loaded records carry no flipped labels, so the flip rate is
/// reported as unavailable.
pub fn cmd_audit(out: &Path) -> Result<String> {
    let records = read_upll_records(&out.join(UPLL_FILE))?;
    if records.is_empty() {
        return Err(Error::Config("no candidate records to audit".into()));
    }
    let class_count = records
        .iter()
        .flat_map(|r| r.candidates.iter().chain(r.hidden_truth))
        .max()
        .expect("nonempty")
        + 1;
    let upll = UpllDataset {
        features: Matrix::zeros(records.len(), 0),
        candidates: records.iter().map(|r| r.candidates).collect(),
        hidden_truth: records
            .iter()
            .map(|r| r.hidden_truth)
            .collect::<Option<Vec<usize>>>(),
        hidden_flipped: None,
        class_count,
    };
    let report = audit(&upll)?;
    Ok(report.to_text())
}

/// Exports plot-ready tables: the loss-decile histogram of a fresh short
/// training run (the same seeded run as separation step 1), the purity
/// curve from the separation history, and the per-epoch metrics.
pub fn cmd_report(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    let inputs = load_run_inputs(out)?;
    let mut artifacts = RunArtifacts::default();

    if let Ok(flags) = inputs.train.reliability_flags() {
        let (_, losses) = train_and_final_losses(
            &inputs.train.features,
            &inputs.train.candidates,
            inputs.train.class_count,
            &config.model_spec(),
            config.rs_beta,
            config.rs_lr,
            config.rs_batch_size,
            derive_seed(config.seed, 1),
        )?;
        artifacts.decile = Some(loss_decile_histogram(&losses, &flags)?);
    }

    let separation_path = out.join(SEPARATION_FILE);
    if separation_path.exists() {
        let sep = read_separation(&separation_path)?;
        if let Ok(curve) = purity_curve(&sep.history) {
            artifacts.purity = Some(curve);
        }
    }

    let metrics_path = out.join(METRICS_FILE);
    if metrics_path.exists() {
        artifacts.epochs = read_metrics(&metrics_path)?;
    }
    let summary_path = out.join(SUMMARY_FILE);
    if summary_path.exists() {
        let text = std::fs::read_to_string(&summary_path)?;
        let summary: TrainSummary = serde_json::from_str(&text).map_err(|e| Error::DataFormat {
            row: 0,
            col: 0,
            msg: format!("bad summary: {e}"),
        })?;
        artifacts.summary = Some(summary);
    }

    export_report(&artifacts, &out.join(REPORT_DIR))
}

const STAGES: [&str; 4] = ["synth", "separate", "train", "report"];

fn stage_rank(stage: &str) -> usize {
    STAGES.iter().position(|s| *s == stage).map_or(0, |p| p + 1)
}

fn completed_stage(out: &Path) -> String {
    std::fs::read_to_string(out.join(STAGE_FILE))
        .map(|s| s.trim().to_string())
        .unwrap_or_default()
}

fn mark_stage(out: &Path, stage: &str) -> Result<()> {
    std::fs::write(out.join(STAGE_FILE), stage)?;
    Ok(())
}

/// Runs synth, separate, train, and report in order, skipping stages the
/// marker records as complete.
pub fn run_pipeline(config: &RunConfig, out: &Path) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    write_config_echo(config, out)?;
    let done = stage_rank(&completed_stage(out));

    if done < stage_rank("synth") {
        cmd_synth(config, out)?;
        mark_stage(out, "synth")?;
    }
    if done < stage_rank("separate") {
        if config.use_rs && !matches!(config.mode, TrainMode::BaselineCce | TrainMode::BaselineMae)
        {
            cmd_separate(config, out)?;
        }
        mark_stage(out, "separate")?;
    }
    if done < stage_rank("train") {
        cmd_train(config, out)?;
        mark_stage(out, "train")?;
    }
    if done < stage_rank("report") {
        cmd_report(config, out)?;
        mark_stage(out, "report")?;
    }
    Ok(())
}

/// One grid axis: a config key and its values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `KEY=V1,V2,...`.
pub fn parse_grid_axis(spec: &str) -> Result<GridAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis {spec:?} needs KEY=V1,V2,...")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.is_empty() || values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("grid axis {spec:?} has empty values")));
    }
    Ok(GridAxis { key: key.trim().to_string(), values })
}

fn cartesian(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for value in &axis.values {
                let mut extended = cell.clone();
                extended.push((axis.key.clone(), value.clone()));
                next.push(extended);
            }
        }
        cells = next;
    }
    cells
}

/// Full pipeline; with grid axes it sweeps the cartesian product, one
/// subdirectory per cell, and writes one summary row per cell.
pub fn cmd_run_all(config: &RunConfig, out: &Path, grid: &[GridAxis]) -> Result<()> {
    if grid.is_empty() {
        return run_pipeline(config, out);
    }
    std::fs::create_dir_all(out)?;
    let cells = cartesian(grid);

    let mut table = String::from("dir");
    for axis in grid {
        let _ = write!(table, ",{}", axis.key);
    }
    table.push_str(",best_epoch,best_val_acc,test_acc_at_best_val\n");

    for overrides in &cells {
        let mut cell_config = config.clone();
        for (key, value) in overrides {
            cell_config.apply(key, value)?;
        }
        cell_config.validate()?;
        let dir_name = format!("cell_{}_s{}", cell_config.short_hash(), cell_config.seed);
        let cell_dir = out.join(&dir_name);
        run_pipeline(&cell_config, &cell_dir)?;

        let text = std::fs::read_to_string(cell_dir.join(SUMMARY_FILE))?;
        let summary: TrainSummary = serde_json::from_str(&text).map_err(|e| Error::DataFormat {
            row: 0,
            col: 0,
            msg: format!("bad summary: {e}"),
        })?;
        let _ = write!(table, "{dir_name}");
        for (_, value) in overrides {
            let _ = write!(table, ",{value}");
        }
        let _ = writeln!(
            table,
            ",{},{},{}",
            summary.best_epoch, summary.best_val_acc, summary.test_acc_at_best_val
        );
    }
    std::fs::write(out.join(GRID_FILE), table)?;
    Ok(())
}
