//! Classification metrics and cross-dataset evaluation.
//!
//! The confusion matrix is the sole source for every metric: per-class
//! precision/recall/F1, accuracy, and macro/weighted aggregates all derive
//! from its integer counts. Zero denominators yield a metric of 0 with a
//! degeneracy flag rather than an error, so absent classes render as zero
//! rows instead of aborting the report.

use std::path::Path;

use crate::dataset::{DatasetManifest, LabelRange, SeaStateLabel, Split};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;

// ---------------------------------------------------------------------------
// Confusion matrix
// ---------------------------------------------------------------------------

/// N x N integer counts; rows are the true class, columns the predicted one.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<SeaStateLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<SeaStateLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("confusion matrix needs at least one label".into()));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "confusion matrix labels must be strictly increasing".into(),
            ));
        }
        let n = labels.len();
        Ok(ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        })
    }

    pub fn from_range(range: LabelRange) -> Self {
        Self::new(range.labels().collect()).expect("range labels are sorted and non-empty")
    }

    /// Construct from prefilled counts; must be square and match the labels.
    pub fn from_counts(labels: Vec<SeaStateLabel>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let mut cm = Self::new(labels)?;
        if counts.len() != cm.n() || counts.iter().any(|row| row.len() != cm.n()) {
            return Err(Error::Config(format!(
                "counts must be {0}x{0} to match the labels",
                cm.n()
            )));
        }
        cm.counts = counts;
        Ok(cm)
    }

    /// Tally equal-length true/predicted sequences.
    pub fn from_pairs(
        truth: &[SeaStateLabel],
        predicted: &[SeaStateLabel],
        labels: Vec<SeaStateLabel>,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Data(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(labels)?;
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn index_of(&self, label: SeaStateLabel) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn record(&mut self, truth: SeaStateLabel, predicted: SeaStateLabel) -> Result<()> {
        let range = (self.labels[0].value(), self.labels[self.n() - 1].value());
        let idx = |l: SeaStateLabel| {
            self.index_of(l).ok_or(Error::LabelOutOfRange {
                label: i64::from(l.value()),
                min: range.0,
                max: range.1,
            })
        };
        let (i, j) = (idx(truth)?, idx(predicted)?);
        self.counts[i][j] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|i| self.counts[i][i]).sum()
    }

    /// Row sum: number of true samples of class i.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Column sum: number of predictions of class j.
    pub fn predicted_total(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// Delimited integer grid with label headers; first column is the true
    /// class.
    pub fn render_grid(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            out.push_str(&format!("\t{l}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&self.labels[i].to_string());
            for v in row {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Per-class and aggregate metrics
// ---------------------------------------------------------------------------

/// f1 is the harmonic mean of precision and recall, 0 when both are 0.
/// `degenerate` marks classes where a zero denominator forced a 0.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassMetrics {
    pub label: SeaStateLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub degenerate: bool,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.n())
        .map(|j| {
            let tp = cm.counts[j][j];
            let predicted = cm.predicted_total(j);
            let support = cm.support(j);
            let precision = if predicted == 0 {
                0.0
            } else {
                tp as f64 / predicted as f64
            };
            let recall = if support == 0 {
                0.0
            } else {
                tp as f64 / support as f64
            };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                label: cm.labels[j],
                precision,
                recall,
                f1,
                support,
                degenerate: predicted == 0 || support == 0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub total: u64,
}

/// All aggregates from one confusion matrix: accuracy = trace/total, macro =
/// unweighted class mean, weighted = support-weighted class mean.
pub fn aggregate(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty evaluation: confusion matrix has no samples".into()));
    }
    let per_class = per_class_metrics(cm);
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| m.support as f64 * f(m))
            .sum::<f64>()
            / total as f64
    };
    Ok(EvalReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
        confusion: cm.clone(),
        total,
    })
}

impl EvalReport {
    /// Per-class rows plus aggregate rows, three decimals.
    pub fn render_table(&self) -> String {
        let mut out = String::from("class\tprecision\trecall\tf1\tsupport\n");
        for m in &self.per_class {
            out.push_str(&format!(
                "{}\t{:.3}\t{:.3}\t{:.3}\t{}\n",
                m.label, m.precision, m.recall, m.f1, m.support
            ));
        }
        out.push_str(&format!("accuracy\t\t\t{:.3}\t{}\n", self.accuracy, self.total));
        out.push_str(&format!(
            "macro\t{:.3}\t{:.3}\t{:.3}\t{}\n",
            self.macro_precision, self.macro_recall, self.macro_f1, self.total
        ));
        out.push_str(&format!(
            "weighted\t{:.3}\t{:.3}\t{:.3}\t{}\n",
            self.weighted_precision, self.weighted_recall, self.weighted_f1, self.total
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

/// Declared relation between a model's label space and a dataset's. Metrics
/// run over the union space; predictions outside the dataset's range simply
/// count as errors there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LabelMapping {
    pub model_range: LabelRange,
    pub dataset_range: LabelRange,
}

impl LabelMapping {
    pub fn union(&self) -> LabelRange {
        self.model_range.union(self.dataset_range)
    }
}

/// Batch size for inference; small enough that im2col scratch stays modest.
const EVAL_BATCH: usize = 32;

/// Deterministic evaluation of a model on one split: center-crop every image,
/// predict, tally the confusion matrix over the (mapped) label space.
/// A label-space mismatch without an explicit mapping is an error.
pub fn evaluate_model(
    model: &mut ClassifierModel,
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    mapping: Option<&LabelMapping>,
) -> Result<EvalReport> {
    let space = match mapping {
        Some(m) => {
            if m.model_range != model.label_range {
                return Err(Error::Config(format!(
                    "mapping declares model range {}, model has {}",
                    m.model_range, model.label_range
                )));
            }
            m.union()
        }
        None => {
            if model.label_range != manifest.label_range {
                return Err(Error::MappingRequired {
                    model_min: model.label_range.min,
                    model_max: model.label_range.max,
                    dataset_min: manifest.label_range.min,
                    dataset_max: manifest.label_range.max,
                });
            }
            model.label_range
        }
    };
    let data = crate::dataset::load_split(root, manifest, split)?;
    let mut cm = ConfusionMatrix::from_range(space);
    let input = model.spec.input_size;
    let mut index = 0;
    while index < data.len() {
        let end = (index + EVAL_BATCH).min(data.len());
        let batch: Vec<crate::img::Image> = (index..end)
            .map(|i| crate::augment::prepare_eval(&data.image(i), input))
            .collect::<Result<_>>()?;
        let predicted = model.predict_labels(&batch)?;
        for (offset, pred) in predicted.into_iter().enumerate() {
            cm.record(data.label(index + offset), pred)?;
        }
        index = end;
    }
    aggregate(&cm)
}

/// In-domain aggregate minus out-of-domain aggregate, per metric.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerformanceDrop {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

pub fn performance_drop(home: &EvalReport, foreign: &EvalReport) -> PerformanceDrop {
    PerformanceDrop {
        accuracy: home.accuracy - foreign.accuracy,
        weighted_precision: home.weighted_precision - foreign.weighted_precision,
        weighted_recall: home.weighted_recall - foreign.weighted_recall,
        weighted_f1: home.weighted_f1 - foreign.weighted_f1,
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CrossEvalReport {
    pub home: EvalReport,
    pub foreign: EvalReport,
    pub drop: PerformanceDrop,
}

impl CrossEvalReport {
    /// Two-decimal comparison table, the cross-dataset rendering convention.
    pub fn render_table(&self) -> String {
        let row = |name: &str, h: f64, f: f64, d: f64| {
            format!("{name}\t{h:.2}\t{f:.2}\t{d:.2}\n")
        };
        let mut out = String::from("metric\thome\tforeign\tdrop\n");
        out.push_str(&row(
            "accuracy",
            self.home.accuracy,
            self.foreign.accuracy,
            self.drop.accuracy,
        ));
        out.push_str(&row(
            "weighted_precision",
            self.home.weighted_precision,
            self.foreign.weighted_precision,
            self.drop.weighted_precision,
        ));
        out.push_str(&row(
            "weighted_recall",
            self.home.weighted_recall,
            self.foreign.weighted_recall,
            self.drop.weighted_recall,
        ));
        out.push_str(&row(
            "weighted_f1",
            self.home.weighted_f1,
            self.foreign.weighted_f1,
            self.drop.weighted_f1,
        ));
        out
    }
}

/// Evaluate one model on its home test split and a foreign one, both over the
/// union label space, and report the per-metric performance drop.
pub fn cross_dataset_eval(
    model: &mut ClassifierModel,
    home_root: &Path,
    home_manifest: &DatasetManifest,
    foreign_root: &Path,
    foreign_manifest: &DatasetManifest,
    split: Split,
    mapping: &LabelMapping,
) -> Result<CrossEvalReport> {
    let home_mapping = LabelMapping {
        model_range: model.label_range,
        dataset_range: mapping.union(),
    };
    let home = evaluate_model(model, home_root, home_manifest, split, Some(&home_mapping))?;
    let foreign = evaluate_model(model, foreign_root, foreign_manifest, split, Some(mapping))?;
    let drop = performance_drop(&home, &foreign);
    Ok(CrossEvalReport {
        home,
        foreign,
        drop,
    })
}
