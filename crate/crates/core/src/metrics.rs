//! Confusion matrices, accuracy, quadratic weighted kappa, and one-vs-rest
//! rates.
//!
//! Rows are ground truth, columns are predictions. Kappa uses the quadratic
//! weight convention `w_ij = (i-j)^2 / (C-1)^2` and the marginal-product
//! expected matrix; both sums are accumulated over symmetric index pairs so
//! that `kappa(M) == kappa(M^T)` holds bit-exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("truth and prediction lengths differ: {truths} vs {preds}")]
    LengthMismatch { truths: usize, preds: usize },
    #[error("empty input: a confusion matrix needs at least one pair")]
    Empty,
    #[error("matrix total must be at least 1")]
    EmptyMatrix,
    #[error("kappa requires at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("kappa undefined: expected disagreement is zero but observations are off-diagonal")]
    KappaUndefined,
    #[error("{got} counts cannot form a {classes}x{classes} matrix")]
    BadCounts { classes: usize, got: usize },
    #[error("positive class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// C x C count matrix; rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::BadCounts {
                classes,
                got: counts.len(),
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let classes = rows.len();
        let counts: Vec<u64> = rows.iter().flatten().copied().collect();
        Self::new(classes, counts)
    }

    pub fn from_pairs(
        truths: &[usize],
        preds: &[usize],
        classes: usize,
    ) -> Result<Self, MetricsError> {
        if truths.len() != preds.len() {
            return Err(MetricsError::LengthMismatch {
                truths: truths.len(),
                preds: preds.len(),
            });
        }
        if truths.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truths.iter().zip(preds) {
            for label in [t, p] {
                if label >= classes {
                    return Err(MetricsError::LabelOutOfRange { label, classes });
                }
            }
            counts[t * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row * self.classes..(row + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, col: usize) -> u64 {
        (0..self.classes).map(|r| self.count(r, col)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.count(k, k)).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0u64; self.classes * self.classes];
        for t in 0..self.classes {
            for p in 0..self.classes {
                counts[p * self.classes + t] = self.count(t, p);
            }
        }
        ConfusionMatrix {
            classes: self.classes,
            counts,
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.classes)
            .map(|r| self.counts[r * self.classes..(r + 1) * self.classes].to_vec())
            .collect()
    }

    /// Trace over total.
    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Quadratic weighted kappa:
    /// `1 - sum(w .* O) / sum(w .* E)` with `w_ij = (i-j)^2/(C-1)^2` and
    /// `E = outer(row marginals, col marginals) / total`.
    ///
    /// If the expected disagreement is zero (all mass in one diagonal cell),
    /// the agreement is perfect and the result is defined as 1.0; zero
    /// expected disagreement with off-diagonal mass is reported as undefined
    /// (it cannot arise from a real count matrix, but the constructor accepts
    /// arbitrary counts).
    pub fn quadratic_weighted_kappa(&self) -> Result<f64, MetricsError> {
        let c = self.classes;
        if c < 2 {
            return Err(MetricsError::TooFewClasses(c));
        }
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let n = total as f64;
        let scale = ((c - 1) * (c - 1)) as f64;
        let rows: Vec<f64> = (0..c).map(|k| self.row_sum(k) as f64).collect();
        let cols: Vec<f64> = (0..c).map(|k| self.col_sum(k) as f64).collect();

        // symmetric-pair accumulation: identical addition order for M and M^T
        let mut observed = 0.0;
        let mut expected = 0.0;
        for i in 0..c {
            for j in (i + 1)..c {
                let d = (j - i) as f64;
                let w = d * d / scale;
                observed += w * (self.count(i, j) as f64 + self.count(j, i) as f64);
                expected += w * (rows[i] * cols[j] + rows[j] * cols[i]);
            }
        }
        expected /= n;

        if expected == 0.0 {
            let off_diag: u64 = (0..c)
                .flat_map(|i| (0..c).map(move |j| (i, j)))
                .filter(|&(i, j)| i != j)
                .map(|(i, j)| self.count(i, j))
                .sum();
            return if off_diag == 0 {
                Ok(1.0)
            } else {
                Err(MetricsError::KappaUndefined)
            };
        }
        Ok(1.0 - observed / expected)
    }

    /// Each nonzero row divided by its sum; zero rows stay zero.
    pub fn normalize_rows(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|r| {
                let sum = self.row_sum(r);
                (0..self.classes)
                    .map(|p| {
                        if sum == 0 {
                            0.0
                        } else {
                            self.count(r, p) as f64 / sum as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Collapses the matrix to a binary problem with `positive_class` as the
    /// positive label. Rates with empty denominators are `None`, never 0.
    pub fn one_vs_rest(&self, positive_class: usize) -> Result<OneVsRest, MetricsError> {
        let c = self.classes;
        if positive_class >= c {
            return Err(MetricsError::ClassOutOfRange {
                class: positive_class,
                classes: c,
            });
        }
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let k = positive_class;
        let tp = self.count(k, k);
        let fn_ = self.row_sum(k) - tp;
        let fp = self.col_sum(k) - tp;
        let tn = total - tp - fn_ - fp;
        let fpr = if fp + tn > 0 {
            Some(fp as f64 / (fp + tn) as f64)
        } else {
            None
        };
        let fnr = if tp + fn_ > 0 {
            Some(fn_ as f64 / (tp + fn_) as f64)
        } else {
            None
        };
        Ok(OneVsRest {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            false_positive_rate: fpr,
            false_negative_rate: fnr,
        })
    }
}

/// One-vs-rest binarization of a multi-class confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVsRest {
    #[serde(rename = "tp")]
    pub true_positives: u64,
    #[serde(rename = "fp")]
    pub false_positives: u64,
    #[serde(rename = "fn")]
    pub false_negatives: u64,
    #[serde(rename = "tn")]
    pub true_negatives: u64,
    #[serde(rename = "fpr")]
    pub false_positive_rate: Option<f64>,
    #[serde(rename = "fnr")]
    pub false_negative_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassEntry {
    pub class: usize,
    #[serde(flatten)]
    pub rates: OneVsRest,
}

/// Full evaluation bundle for one prediction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<u64>>,
    pub confusion_row_normalized: Vec<Vec<f64>>,
    pub per_class: Vec<PerClassEntry>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self, MetricsError> {
        let per_class = (0..cm.classes())
            .map(|k| {
                Ok(PerClassEntry {
                    class: k,
                    rates: cm.one_vs_rest(k)?,
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        Ok(MetricsReport {
            accuracy: cm.accuracy()?,
            kappa: cm.quadratic_weighted_kappa()?,
            confusion: cm.rows(),
            confusion_row_normalized: cm.normalize_rows(),
            per_class,
        })
    }

    /// Per-class recall (diagonal of the row-normalized matrix), `None` for
    /// classes absent from the truths.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let row_total: u64 = self.confusion[class].iter().sum();
        if row_total == 0 {
            None
        } else {
            Some(self.confusion[class][class] as f64 / row_total as f64)
        }
    }

    /// Plain-text rendering: raw and row-normalized confusion matrices plus
    /// the headline numbers.
    pub fn render_text(&self) -> String {
        let c = self.confusion.len();
        let mut out = String::new();
        out.push_str(&format!(
            "accuracy {:.4}  kappa {:.4}\n\nconfusion (rows = truth, cols = prediction):\n",
            self.accuracy, self.kappa
        ));
        for row in &self.confusion {
            for v in row {
                out.push_str(&format!("{v:>6} "));
            }
            out.push('\n');
        }
        out.push_str("\nrow-normalized:\n");
        for row in &self.confusion_row_normalized {
            for v in row {
                out.push_str(&format!("{v:>6.3} "));
            }
            out.push('\n');
        }
        out.push_str("\nper-class one-vs-rest:\n");
        for entry in &self.per_class {
            let fmt = |r: Option<f64>| match r {
                Some(v) => format!("{v:.5}"),
                None => "undefined".to_string(),
            };
            out.push_str(&format!(
                "class {} tp {:>4} fp {:>4} fn {:>4} tn {:>4}  fpr {}  fnr {}\n",
                entry.class,
                entry.rates.true_positives,
                entry.rates.false_positives,
                entry.rates.false_negatives,
                entry.rates.true_negatives,
                fmt(entry.rates.false_positive_rate),
                fmt(entry.rates.false_negative_rate),
            ));
        }
        let _ = c;
        out
    }
}
