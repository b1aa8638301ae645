//! Confusion matrix, mean class accuracy (MCA), average classification
//! accuracy (ACA), and the delimited-text report files.
//!
//! MCA is the unweighted mean of per-class correct-classification rates;
//! ACA is the overall fraction of correct predictions. They differ under
//! class imbalance, which is why both are reported.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// n x n prediction counts; cell `(true k, predicted j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidInput(
                "confusion matrix needs at least one class".into(),
            ));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Records one prediction.
    pub fn accumulate(&mut self, true_label: usize, predicted: usize) -> Result<()> {
        if true_label >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: true_label,
                classes: self.classes,
            });
        }
        if predicted >= self.classes {
            return Err(Error::LabelOutOfRange {
                label: predicted,
                classes: self.classes,
            });
        }
        self.counts[true_label * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, true_label: usize, predicted: usize) -> u64 {
        self.counts[true_label * self.classes + predicted]
    }

    pub fn row_sum(&self, true_label: usize) -> u64 {
        self.counts[true_label * self.classes..(true_label + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Cell-wise addition, for merging shards evaluated in parallel.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                axis: "confusion matrix classes",
                expected: self.classes,
                actual: other.classes,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class correct-classification rates `CCR_k = cm[k][k] / rowsum_k`.
/// A class with zero samples is an error: silently skipping it would bias
/// the MCA mean.
pub fn per_class_ccr(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    (0..cm.classes)
        .map(|k| {
            let row = cm.row_sum(k);
            if row == 0 {
                Err(Error::EmptyClass { class: k })
            } else {
                Ok(cm.count(k, k) as f64 / row as f64)
            }
        })
        .collect()
}

/// Mean class accuracy: the unweighted mean of the per-class rates.
pub fn mca(cm: &ConfusionMatrix) -> Result<f64> {
    let ccr = per_class_ccr(cm)?;
    Ok(ccr.iter().sum::<f64>() / ccr.len() as f64)
}

/// Average classification accuracy: `trace / total`.
pub fn aca(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyClass { class: 0 });
    }
    let trace: u64 = (0..cm.classes).map(|k| cm.count(k, k)).sum();
    Ok(trace as f64 / total as f64)
}

/// One learning-curve record: what the trainer logs after each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_mca: f64,
    /// Absent when no validation set was supplied.
    pub validation_mca: Option<f64>,
}

/// Files produced by [`export_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub confusion_percent: PathBuf,
    pub curves: PathBuf,
    pub summary: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Renders the curve table as comma-separated text, one record per epoch.
pub fn curves_to_string(history: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,learning_rate,train_loss,train_mca,validation_mca\n");
    for p in history {
        let val = p
            .validation_mca
            .map(|v| v.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.epoch, p.learning_rate, p.train_loss, p.train_mca, val
        );
    }
    out
}

/// Writes the three report files into `dir`:
/// `confusion_percent.csv` (row-normalized, two decimals), `curves.csv` (one
/// record per epoch), and `summary.csv` (full-precision MCA, ACA, per-class
/// CCR).
pub fn export_report(
    dir: &Path,
    cm: &ConfusionMatrix,
    class_names: &[String],
    history: &[CurvePoint],
) -> Result<ReportPaths> {
    if class_names.len() != cm.classes {
        return Err(Error::ShapeMismatch {
            axis: "class names",
            expected: cm.classes,
            actual: class_names.len(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut confusion = String::from("true\\predicted");
    for name in class_names {
        let _ = write!(confusion, ",{name}");
    }
    confusion.push('\n');
    for (k, name) in class_names.iter().enumerate() {
        let row = cm.row_sum(k);
        if row == 0 {
            return Err(Error::EmptyClass { class: k });
        }
        let _ = write!(confusion, "{name}");
        for j in 0..cm.classes {
            let pct = 100.0 * cm.count(k, j) as f64 / row as f64;
            let _ = write!(confusion, ",{pct:.2}");
        }
        confusion.push('\n');
    }

    let mca_value = mca(cm)?;
    let aca_value = aca(cm)?;
    let ccr = per_class_ccr(cm)?;
    let mut summary = String::from("metric,value\n");
    let _ = writeln!(summary, "mca,{mca_value}");
    let _ = writeln!(summary, "aca,{aca_value}");
    for (name, rate) in class_names.iter().zip(&ccr) {
        let _ = writeln!(summary, "ccr_{name},{rate}");
    }

    let paths = ReportPaths {
        confusion_percent: dir.join("confusion_percent.csv"),
        curves: dir.join("curves.csv"),
        summary: dir.join("summary.csv"),
    };
    write_file(&paths.confusion_percent, &confusion)?;
    write_file(&paths.curves, &curves_to_string(history))?;
    write_file(&paths.summary, &summary)?;
    Ok(paths)
}
