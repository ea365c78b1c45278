//! Pilot-experiment analyses: loss-decile composition of the training
//! set, the reliable-rate trajectory across separation steps, and
//! plot-ready exports of both plus the per-epoch metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::separation::{rank_by_loss, StepRecord};
use crate::trainer::{EpochRecord, TrainSummary};

/// Ten equal-count sections of the loss-ranked training set with
/// reliable/unreliable counts per section. Section 1 holds the highest
/// losses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecileHistogram {
    pub section_sizes: Vec<usize>,
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
}

impl DecileHistogram {
    pub fn total(&self) -> usize {
        self.section_sizes.iter().sum()
    }
}

/// Reliable-rate trajectory over separation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityCurve {
    pub points: Vec<PurityPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurityPoint {
    pub step: usize,
    pub purity: f64,
    pub reliable_size: usize,
    pub val_acc: f64,
}

/// Ranks samples by loss (descending, stable) and cuts them into ten
/// equal-count sections; any remainder goes to the earliest sections.
pub fn loss_decile_histogram(
    per_sample_losses: &[f64],
    reliability_flags: &[bool],
) -> Result<DecileHistogram> {
    if per_sample_losses.len() != reliability_flags.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} flags",
            per_sample_losses.len(),
            reliability_flags.len()
        )));
    }
    let n = per_sample_losses.len();
    let ranked = rank_by_loss(per_sample_losses)?;
    let base = n / 10;
    let remainder = n % 10;
    let mut section_sizes = Vec::with_capacity(10);
    let mut reliable = vec![0usize; 10];
    let mut unreliable = vec![0usize; 10];
    let mut cursor = 0usize;
    for section in 0..10 {
        let size = base + usize::from(section < remainder);
        section_sizes.push(size);
        for &pos in &ranked[cursor..cursor + size] {
            if reliability_flags[pos] {
                reliable[section] += 1;
            } else {
                unreliable[section] += 1;
            }
        }
        cursor += size;
    }
    Ok(DecileHistogram { section_sizes, reliable, unreliable })
}

/// Extracts `(step, purity)` points from an audited separation history.
pub fn purity_curve(history: &[StepRecord]) -> Result<PurityCurve> {
    let mut points = Vec::with_capacity(history.len());
    for rec in history {
        let purity = rec.audited_purity.ok_or_else(|| {
            Error::AuditUnavailable(format!("step {} has no audited purity", rec.step))
        })?;
        points.push(PurityPoint {
            step: rec.step,
            purity,
            reliable_size: rec.reliable_size,
            val_acc: rec.val_accuracy,
        });
    }
    Ok(PurityCurve { points })
}

/// Everything the report can draw from; any piece may be absent.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub decile: Option<DecileHistogram>,
    pub purity: Option<PurityCurve>,
    pub epochs: Vec<EpochRecord>,
    pub summary: Option<TrainSummary>,
}

/// Writes `decile.csv`, `purity.csv`, `epochs.csv`, and `summary.txt`
/// into `out_dir`. Missing artifacts yield header-only tables. Output is
/// a pure function of the artifacts.
pub fn export_report(artifacts: &RunArtifacts, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut decile = String::from("section,reliable,unreliable\n");
    if let Some(h) = &artifacts.decile {
        for s in 0..10 {
            let _ = writeln!(decile, "{},{},{}", s + 1, h.reliable[s], h.unreliable[s]);
        }
    }
    std::fs::write(out_dir.join("decile.csv"), decile)?;

    let mut purity = String::from("step,purity,reliable_size,val_acc\n");
    if let Some(curve) = &artifacts.purity {
        for p in &curve.points {
            let _ = writeln!(purity, "{},{},{},{}", p.step, p.purity, p.reliable_size, p.val_acc);
        }
    }
    std::fs::write(out_dir.join("purity.csv"), purity)?;

    let mut epochs =
        String::from("epoch,lr,train_loss,val_acc,test_acc,promotions,reliable_size\n");
    for e in &artifacts.epochs {
        let _ = writeln!(
            epochs,
            "{},{},{},{},{},{},{}",
            e.epoch, e.lr, e.train_loss, e.val_acc, e.test_acc, e.promotions, e.reliable_size
        );
    }
    std::fs::write(out_dir.join("epochs.csv"), epochs)?;

    let mut summary = String::new();
    match &artifacts.summary {
        Some(s) => {
            let _ = writeln!(summary, "best_epoch: {}", s.best_epoch);
            let _ = writeln!(summary, "best_val_acc: {}", s.best_val_acc);
            let _ = writeln!(summary, "test_acc_at_best_val: {}", s.test_acc_at_best_val);
        }
        None => {
            let _ = writeln!(summary, "no training summary");
        }
    }
    if let Some(curve) = &artifacts.purity {
        if let (Some(first), Some(last)) = (curve.points.first(), curve.points.last()) {
            let _ = writeln!(summary, "initial_purity: {}", first.purity);
            let _ = writeln!(summary, "final_purity: {}", last.purity);
        }
    }
    std::fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(())
}

/// Parses a `decile.csv` written by `export_report`.
pub fn read_decile_csv(path: &Path) -> Result<DecileHistogram> {
    let text = std::fs::read_to_string(path)?;
    let mut reliable = Vec::new();
    let mut unreliable = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::DataFormat {
                row: i + 1,
                col: cells.len(),
                msg: "decile rows need 3 fields".into(),
            });
        }
        let parse = |s: &str, col: usize| -> Result<usize> {
            s.parse().map_err(|_| Error::DataFormat {
                row: i + 1,
                col,
                msg: format!("bad count {s:?}"),
            })
        };
        reliable.push(parse(cells[1], 2)?);
        unreliable.push(parse(cells[2], 3)?);
    }
    let section_sizes = reliable
        .iter()
        .zip(&unreliable)
        .map(|(r, u)| r + u)
        .collect();
    Ok(DecileHistogram { section_sizes, reliable, unreliable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn all_reliable_samples_leave_unreliable_counts_zero() {
        let losses: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let flags = vec![true; 100];
        let h = loss_decile_histogram(&losses, &flags).unwrap();
        assert!(h.unreliable.iter().all(|&c| c == 0));
        assert_eq!(h.reliable.iter().sum::<usize>(), 100);
    }

    #[test]
    fn forty_thousand_samples_split_into_4000_sections() {
        let losses: Vec<f64> = (0..40_000).map(|i| (i % 977) as f64).collect();
        let flags: Vec<bool> = (0..40_000).map(|i| i % 3 == 0).collect();
        let h = loss_decile_histogram(&losses, &flags).unwrap();
        assert!(h.section_sizes.iter().all(|&s| s == 4000));
        assert_eq!(h.total(), 40_000);
    }

    #[test]
    fn remainder_goes_to_earliest_sections() {
        let losses: Vec<f64> = (0..13).map(|i| i as f64).collect();
        let flags = vec![true; 13];
        let h = loss_decile_histogram(&losses, &flags).unwrap();
        assert_eq!(h.section_sizes, vec![2, 2, 2, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn histogram_matches_counting_oracle() {
        let mut rng = StdRng::seed_from_u64(0);
        let n = 257;
        let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let h = loss_decile_histogram(&losses, &flags).unwrap();

        // Brute-force partition: sort index pairs, walk sections.
        let mut pairs: Vec<(usize, f64)> = losses.iter().copied().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut cursor = 0;
        for s in 0..10 {
            let size = n / 10 + usize::from(s < n % 10);
            let mut reliable = 0;
            for &(idx, _) in &pairs[cursor..cursor + size] {
                if flags[idx] {
                    reliable += 1;
                }
            }
            assert_eq!(h.reliable[s], reliable);
            assert_eq!(h.reliable[s] + h.unreliable[s], size);
            cursor += size;
        }
    }

    #[test]
    fn histogram_rejects_mismatched_lengths() {
        assert!(loss_decile_histogram(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn purity_curve_extracts_steps_in_order() {
        let history = vec![
            StepRecord { step: 0, val_accuracy: 0.0, reliable_size: 100, audited_purity: Some(0.7) },
            StepRecord { step: 1, val_accuracy: 0.5, reliable_size: 97, audited_purity: Some(0.74) },
        ];
        let curve = purity_curve(&history).unwrap();
        assert_eq!(curve.points.len(), 2);
        assert_eq!(curve.points[0].step, 0);
        assert_eq!(curve.points[1].purity, 0.74);

        let unaudited = vec![StepRecord {
            step: 0,
            val_accuracy: 0.0,
            reliable_size: 10,
            audited_purity: None,
        }];
        assert!(matches!(
            purity_curve(&unaudited),
            Err(Error::AuditUnavailable(_))
        ));
    }

    #[test]
    fn export_empty_artifacts_writes_header_only_tables() {
        let dir = tempfile::tempdir().unwrap();
        export_report(&RunArtifacts::default(), dir.path()).unwrap();
        let decile = std::fs::read_to_string(dir.path().join("decile.csv")).unwrap();
        assert_eq!(decile, "section,reliable,unreliable\n");
        let epochs = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
        assert_eq!(epochs.lines().count(), 1);
    }

    #[test]
    fn export_is_deterministic_and_decile_round_trips() {
        let losses: Vec<f64> = (0..50).map(|i| ((i * 37) % 23) as f64).collect();
        let flags: Vec<bool> = (0..50).map(|i| i % 4 != 0).collect();
        let artifacts = RunArtifacts {
            decile: Some(loss_decile_histogram(&losses, &flags).unwrap()),
            purity: Some(PurityCurve {
                points: vec![PurityPoint { step: 0, purity: 0.73, reliable_size: 50, val_acc: 0.0 }],
            }),
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 0.05,
                train_loss: 1.25,
                val_acc: 0.5,
                test_acc: 0.48,
                promotions: 0,
                reliable_size: 50,
            }],
            summary: None,
        };
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        export_report(&artifacts, dir1.path()).unwrap();
        export_report(&artifacts, dir2.path()).unwrap();
        for name in ["decile.csv", "purity.csv", "epochs.csv", "summary.txt"] {
            assert_eq!(
                std::fs::read(dir1.path().join(name)).unwrap(),
                std::fs::read(dir2.path().join(name)).unwrap(),
                "{name}"
            );
        }
        let parsed = read_decile_csv(&dir1.path().join("decile.csv")).unwrap();
        assert_eq!(parsed, artifacts.decile.unwrap());
    }
}
