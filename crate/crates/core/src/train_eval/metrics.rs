use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// `M x M` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(shape_err("confusion", "rows must form a square matrix"));
        }
        Ok(Self { classes: m, counts: rows.concat() })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(shape_err("confusion", format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Contract(format!("class index out of range: true {t}, predicted {p}")));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// CSV with a header of predicted class names and one row per true class.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (t, name) in names.iter().enumerate().take(self.classes) {
            out.push_str(name);
            for v in self.row(t) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Percentages; macro values are unweighted means over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let m = cm.classes();
        let total = cm.total();
        if total == 0 {
            return Err(Error::Contract("metrics of an empty test set".into()));
        }
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        let per_class: Vec<ClassMetrics> = (0..m)
            .map(|c| {
                let tp = cm.get(c, c);
                let predicted: u64 = (0..m).map(|t| cm.get(t, c)).sum();
                let actual: u64 = cm.row(c).iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, actual);
                let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                ClassMetrics { precision, recall, f1 }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / m as f64;
        Ok(Self {
            accuracy: 100.0 * cm.trace() as f64 / total as f64,
            macro_precision: mean(|c| c.precision),
            macro_recall: mean(|c| c.recall),
            macro_f1: mean(|c| c.f1),
            per_class,
        })
    }

    /// Unweighted mean of several reports, per class included.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Contract("no reports to aggregate".into()))?;
        let n = reports.len() as f64;
        let m = first.per_class.len();
        if reports.iter().any(|r| r.per_class.len() != m) {
            return Err(shape_err("aggregate", "reports disagree on the class count"));
        }
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            accuracy: avg(&|r| r.accuracy),
            macro_precision: avg(&|r| r.macro_precision),
            macro_recall: avg(&|r| r.macro_recall),
            macro_f1: avg(&|r| r.macro_f1),
            per_class: (0..m)
                .map(|c| ClassMetrics {
                    precision: avg(&|r| r.per_class[c].precision),
                    recall: avg(&|r| r.per_class[c].recall),
                    f1: avg(&|r| r.per_class[c].f1),
                })
                .collect(),
        })
    }
}

/// Pairwise angles in degrees between the columns of a `[C, M]` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleReport {
    pub classes: usize,
    pub degrees: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

impl AngleReport {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.degrees[i * self.classes + j]
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let m = self.classes;
        (0..m).flat_map(move |i| (0..m).filter(move |&j| j != i).map(move |j| self.get(i, j)))
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("class");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, name) in names.iter().enumerate().take(self.classes) {
            out.push_str(name);
            for j in 0..self.classes {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    /// Elementwise mean of several reports with min/max/spread recomputed.
    pub fn mean(reports: &[AngleReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Contract("no angle reports to aggregate".into()))?;
        let m = first.classes;
        let mut degrees = vec![0.0; m * m];
        for r in reports {
            if r.classes != m {
                return Err(shape_err("angles", "reports disagree on the class count"));
            }
            for (d, v) in degrees.iter_mut().zip(&r.degrees) {
                *d += v / reports.len() as f64;
            }
        }
        Ok(Self::from_degrees(m, degrees))
    }

    fn from_degrees(classes: usize, degrees: Vec<f64>) -> Self {
        let mut report = Self { classes, degrees, min: 0.0, max: 0.0, spread: 0.0 };
        let (lo, hi) = report.off_diagonal().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a), hi.max(a)));
        if lo.is_finite() {
            report.min = lo;
            report.max = hi;
            report.spread = hi - lo;
        }
        report
    }
}

pub fn pairwise_angles(w: &Tensor) -> Result<AngleReport> {
    if w.rank() != 2 {
        return Err(shape_err("pairwise_angles", format!("expected a matrix, got {:?}", w.shape())));
    }
    let (c, m) = (w.shape()[0], w.shape()[1]);
    let mut units = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<f64> = (0..c).map(|i| w.at2(i, j)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Contract(format!("classifier column {j} is zero")));
        }
        units.push(col.into_iter().map(|v| v / norm).collect::<Vec<_>>());
    }
    // 2 atan2(|a - b|, |a + b|) equals arccos(a.b) for unit vectors and stays
    // accurate near 0 and 180 degrees
    let mut degrees = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let (mut diff, mut sum) = (0.0, 0.0);
            for (a, b) in units[i].iter().zip(&units[j]) {
                diff += (a - b) * (a - b);
                sum += (a + b) * (a + b);
            }
            degrees[i * m + j] = (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
        }
    }
    Ok(AngleReport::from_degrees(m, degrees))
}

/// Mean router contribution rate per true class, `[M, N]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterSummary {
    pub rates_hz: Vec<f64>,
    pub mean_rates: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl RouterSummary {
    pub fn from_rates(rates_hz: &[f64], rates: &[f64], labels: &[usize], classes: usize) -> Result<Self> {
        let n = rates_hz.len();
        if rates.len() != labels.len() * n {
            return Err(shape_err("router summary", format!("{} rates for {} samples", rates.len(), labels.len())));
        }
        let mut sums = vec![vec![0.0; n]; classes];
        let mut counts = vec![0usize; classes];
        for (row, &y) in rates.chunks(n).zip(labels) {
            counts[y] += 1;
            for (s, r) in sums[y].iter_mut().zip(row) {
                *s += r;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            if c > 0 {
                s.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        Ok(Self { rates_hz: rates_hz.to_vec(), mean_rates: sums, counts })
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("class,count");
        for r in &self.rates_hz {
            out.push_str(&format!(",r_{r}hz"));
        }
        out.push('\n');
        for (c, name) in names.iter().enumerate().take(self.mean_rates.len()) {
            out.push_str(&format!("{name},{}", self.counts[c]));
            for v in &self.mean_rates[c] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}
