//! Accuracy reports, k-fold cross-validation and the training-size ablation.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{collate, normalize, ratio_split, split, Normalization, Sample};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::graph::{predict, Network, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::Mode;
use crate::train::{train, TrainConfig};

/// Inference batch size used by [`evaluate`].
const EVAL_BATCH: usize = 32;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[String]) -> Self {
        let c = class_names.len();
        ConfusionMatrix {
            class_names: class_names.to_vec(),
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Overall accuracy in percent.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => 100.0 * self.trace() as f64 / t as f64,
        }
    }

    /// Per-class recall in percent; classes without test samples report 0.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| match row.iter().sum::<u64>() {
                0 => 0.0,
                n => 100.0 * row[i] as f64 / n as f64,
            })
            .collect()
    }

    /// Elementwise sum with a matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::config("cannot merge confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Confidence {
    pub path: String,
    pub truth: usize,
    pub predicted: usize,
    /// Maximum softmax probability.
    pub confidence: f64,
    pub correct: bool,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confidences: Vec<Confidence>,
}

impl EvalReport {
    fn from_parts(confusion: ConfusionMatrix, confidences: Vec<Confidence>) -> Self {
        EvalReport {
            overall_accuracy: confusion.accuracy(),
            per_class_accuracy: confusion.per_class_accuracy(),
            confusion,
            confidences,
        }
    }

    /// Pools several reports over the same classes.
    pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::input("no reports to aggregate"))?;
        let mut confusion = ConfusionMatrix::new(&first.confusion.class_names);
        let mut confidences = Vec::new();
        for r in reports {
            confusion.merge(&r.confusion)?;
            confidences.extend(r.confidences.iter().cloned());
        }
        Ok(EvalReport::from_parts(confusion, confidences))
    }
}

/// Classifies every sample with inference-mode batch statistics.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    samples: &[&Sample<T>],
    class_names: &[String],
    norm: &Normalization,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::input("test set is empty"));
    }
    let classes = net.config().num_classes;
    if class_names.len() != classes {
        return Err(Error::config(format!(
            "{} class names for a {classes}-class network",
            class_names.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(class_names);
    let mut confidences = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let (x, labels) = collate(chunk)?;
        let pass = net.forward(&normalize(&x, norm)?, Mode::Inference)?;
        for ((row, &truth), s) in pass.logits().data().chunks(classes).zip(&labels).zip(chunk) {
            if truth >= classes {
                return Err(Error::input(format!(
                    "label {truth} of {} exceeds {classes} classes",
                    s.source_path
                )));
            }
            let (predicted, confidence) = predict(row);
            confusion.record(truth, predicted);
            confidences.push(Confidence {
                path: s.source_path.clone(),
                truth,
                predicted,
                confidence: confidence.to_f64_lossy(),
                correct: predicted == truth,
                logits: row.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
    }
    Ok(EvalReport::from_parts(confusion, confidences))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub aggregate: EvalReport,
    pub folds: Vec<EvalReport>,
}

/// Trains one freshly initialized network per fold and pools the held-out
/// predictions. Sample folds must have been assigned for `k` folds.
pub fn cross_validate<T: Scalar>(
    net_cfg: &NetworkConfig,
    samples: &[Sample<T>],
    class_names: &[String],
    k: usize,
    train_cfg: &TrainConfig,
) -> Result<CrossValidation> {
    if k < 2 {
        return Err(Error::config(format!("cross-validation needs k >= 2, got {k}")));
    }
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let (train_set, test_set) = split(samples, fold, k)?;
        let seed = train_cfg.seed.wrapping_add(fold as u64);
        let mut net = Network::new(net_cfg, seed)?;
        let cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        train(&mut net, &train_set, &cfg, &mut |_, _| Ok(()))?;
        folds.push(evaluate(&net, &test_set, class_names, &cfg.normalization)?);
    }
    Ok(CrossValidation {
        aggregate: EvalReport::aggregate(&folds)?,
        folds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub train_fraction: f64,
    pub accuracy: f64,
    pub report: EvalReport,
}

/// Fractions used by the default training-size ablation.
pub const ABLATION_FRACTIONS: [f64; 4] = [0.9, 0.8, 0.7, 0.6];

/// One train/evaluate cycle per training fraction.
pub fn split_ablation<T: Scalar>(
    net_cfg: &NetworkConfig,
    samples: &[Sample<T>],
    class_names: &[String],
    fractions: &[f64],
    train_cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let (train_set, test_set) = ratio_split(samples, fraction, train_cfg.seed)?;
        let mut net = Network::new(net_cfg, train_cfg.seed)?;
        train(&mut net, &train_set, train_cfg, &mut |_, _| Ok(()))?;
        let report = evaluate(&net, &test_set, class_names, &train_cfg.normalization)?;
        rows.push(AblationRow {
            train_fraction: fraction,
            accuracy: report.overall_accuracy,
            report,
        });
    }
    Ok(rows)
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::config(format!("CSV encoding failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::config(format!("CSV encoding failed: {e}")))
}

/// `true_class,<class names...>` followed by one row per true class.
pub fn write_confusion_csv(path: &Path, m: &ConfusionMatrix) -> Result<()> {
    let mut header = vec!["true_class".to_string()];
    header.extend(m.class_names.iter().cloned());
    let rows = m.class_names.iter().zip(&m.counts).map(|(name, row)| {
        std::iter::once(name.clone())
            .chain(row.iter().map(u64::to_string))
            .collect()
    });
    atomic_write(path, &csv_bytes(&header, rows)?)
}

/// `path,true,predicted,confidence,correct` with class names for labels.
pub fn write_confidences_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let names = &report.confusion.class_names;
    let header = ["path", "true", "predicted", "confidence", "correct"].map(String::from);
    let rows = report.confidences.iter().map(|c| {
        vec![
            c.path.clone(),
            names[c.truth].clone(),
            names[c.predicted].clone(),
            c.confidence.to_string(),
            c.correct.to_string(),
        ]
    });
    atomic_write(path, &csv_bytes(&header, rows)?)
}

/// `train_fraction,accuracy` with accuracy rounded to one decimal.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let header = ["train_fraction", "accuracy"].map(String::from);
    let rows = rows
        .iter()
        .map(|r| vec![r.train_fraction.to_string(), format!("{:.1}", r.accuracy)]);
    atomic_write(path, &csv_bytes(&header, rows)?)
}

/// Plain-text summary with accuracies rounded to one decimal.
pub fn summary_text(report: &EvalReport) -> String {
    let m = &report.confusion;
    let mut s = String::new();
    let _ = writeln!(s, "samples: {}", m.total());
    let _ = writeln!(s, "correct: {}", m.trace());
    let _ = writeln!(s, "accuracy: {:.1}", report.overall_accuracy);
    for ((name, acc), n) in m.class_names.iter().zip(&report.per_class_accuracy).zip(m.row_sums()) {
        let _ = writeln!(s, "class {name}: {acc:.1} ({n} samples)");
    }
    s
}

pub fn write_summary(path: &Path, report: &EvalReport) -> Result<()> {
    atomic_write(path, summary_text(report).as_bytes())
}
