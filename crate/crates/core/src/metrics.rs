//! Confusion matrices and classification metrics.
//!
//! For binary tasks the positive class is index 1 (malignant). Ratios with
//! a zero denominator evaluate to 0 and carry a `degenerate` flag.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `k x k` counts, rows = actual class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape(format!("confusion counts must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// One-vs-rest counts with `positive` as the positive class.
    pub fn binary_counts(&self, positive: usize) -> BinaryCounts {
        let total = self.total();
        let tp = self.counts[positive][positive];
        let actual: u64 = self.counts[positive].iter().sum();
        let predicted: u64 = self.counts.iter().map(|r| r[positive]).sum();
        let fn_ = actual - tp;
        let fp = predicted - tp;
        BinaryCounts {
            tp,
            fp,
            fn_,
            tn: total - tp - fp - fn_,
        }
    }

    /// CSV grid: a header of predicted labels, then one row per actual label.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("actual\\predicted");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        let Some(((_, header), body)) = rows.split_first() else {
            return Err(Error::Csv {
                line: 1,
                message: "empty confusion matrix".into(),
            });
        };
        let labels: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let k = labels.len();
        if body.len() != k {
            return Err(Error::Csv {
                line: body.last().map_or(1, |(l, _)| *l),
                message: format!("expected {k} rows, found {}", body.len()),
            });
        }
        let mut counts = Vec::with_capacity(k);
        for (i, (line, rec)) in body.iter().enumerate() {
            let bad = |message: String| Error::Csv { line: *line, message };
            if rec.len() != k + 1 {
                return Err(bad(format!("expected {} fields, found {}", k + 1, rec.len())));
            }
            if rec[0] != labels[i] {
                return Err(bad(format!("row label `{}` does not match `{}`", &rec[0], labels[i])));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<u64>().map_err(|_| bad(format!("`{v}` is not a count"))))
                .collect::<Result<Vec<_>>>()?;
            counts.push(row);
        }
        ConfusionMatrix::from_counts(labels, counts)
    }
}

pub fn confusion_matrix(predicted: &[usize], actual: &[usize], labels: Vec<String>) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(labels);
    let k = cm.k();
    for (&p, &a) in predicted.iter().zip(actual) {
        if p >= k || a >= k {
            return Err(Error::Input(format!(
                "label {} is outside 0..{k}",
                if p >= k { p } else { a }
            )));
        }
        cm.counts[a][p] += 1;
    }
    Ok(cm)
}

/// Labels `"0"`, `"1"`, ... for `k` classes.
pub fn index_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| i.to_string()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    /// The denominator was zero.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Ratio {
    if den == 0 {
        Ratio {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Ratio {
            value: num as f64 / den as f64,
            degenerate: false,
        }
    }
}

pub fn precision(c: &BinaryCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &BinaryCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn accuracy(c: &BinaryCounts) -> Ratio {
    ratio(c.tp + c.tn, c.total())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Input(format!("AUC label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC score is NaN".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs at least one positive and one negative sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral so ties stay exact.
    let mut twice_u: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Some per-class ratio had a zero denominator.
    pub degenerate: bool,
}

/// Unweighted means of per-class one-vs-rest precision, recall and F1,
/// plus overall accuracy.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    let k = cm.k();
    if k < 2 {
        return Err(Error::Input(format!("macro metrics need k >= 2, got {k}")));
    }
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    let mut degenerate = false;
    for c in 0..k {
        let counts = cm.binary_counts(c);
        let (p, r) = (precision(&counts), recall(&counts));
        degenerate |= p.degenerate || r.degenerate;
        p_sum += p.value;
        r_sum += r.value;
        f_sum += f1(p.value, r.value);
    }
    let acc = ratio(cm.diagonal(), cm.total());
    Ok(MacroMetrics {
        precision: p_sum / k as f64,
        recall: r_sum / k as f64,
        f1: f_sum / k as f64,
        accuracy: acc.value,
        degenerate: degenerate || acc.degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    /// Metrics of the positive class (index 1).
    Binary,
    Macro,
}

impl Averaging {
    pub fn name(self) -> &'static str {
        match self {
            Averaging::Binary => "binary",
            Averaging::Macro => "macro",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub averaging: Averaging,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Binary only; `None` when a class is absent from the labels.
    pub auc: Option<f64>,
    pub degenerate: bool,
    pub confusion: ConfusionMatrix,
}

pub const REPORT_FIELDS: [&str; 8] = [
    "averaging",
    "samples",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "auc",
    "degenerate",
];

impl MetricsReport {
    /// Binary report; `scores` are positive-class probabilities for AUC.
    pub fn binary(cm: ConfusionMatrix, scores: &[f64], actual: &[usize]) -> Result<Self> {
        if cm.k() != 2 {
            return Err(Error::Input(format!("binary report needs 2 classes, got {}", cm.k())));
        }
        let c = cm.binary_counts(1);
        let (p, r, a) = (precision(&c), recall(&c), accuracy(&c));
        let auc = match roc_auc(scores, actual) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(m)) => {
                log::warn!("{m}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            averaging: Averaging::Binary,
            accuracy: a.value,
            precision: p.value,
            recall: r.value,
            f1: f1(p.value, r.value),
            auc,
            degenerate: p.degenerate || r.degenerate || a.degenerate,
            confusion: cm,
        })
    }

    pub fn multiclass(cm: ConfusionMatrix) -> Result<Self> {
        let m = macro_metrics(&cm)?;
        Ok(MetricsReport {
            averaging: Averaging::Macro,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: None,
            degenerate: m.degenerate,
            confusion: cm,
        })
    }

    fn values(&self) -> [String; 8] {
        [
            self.averaging.name().to_string(),
            self.confusion.total().to_string(),
            self.accuracy.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
            match (self.averaging, self.auc) {
                (_, Some(v)) => v.to_string(),
                (Averaging::Binary, None) => "undefined".into(),
                (Averaging::Macro, None) => String::new(),
            },
            self.degenerate.to_string(),
        ]
    }

    /// `key=value` lines. Macro reports omit `auc`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in REPORT_FIELDS.iter().zip(self.values()) {
            if *k == "auc" && self.averaging == Averaging::Macro {
                continue;
            }
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn csv_header() -> String {
        REPORT_FIELDS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.values().join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> BinaryCounts {
        BinaryCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn hand_values() {
        assert_eq!(precision(&counts(1, 0, 0, 0)).value, 1.0);
        assert_eq!(precision(&counts(90, 0, 10, 0)).value, 0.9);
        let d = precision(&counts(0, 5, 0, 3));
        assert!(d.degenerate && d.value == 0.0);
        assert_eq!(recall(&counts(3, 0, 0, 1)).value, 0.75);
        assert!(recall(&counts(0, 4, 1, 0)).degenerate);
        assert_eq!(accuracy(&counts(25, 25, 25, 25)).value, 0.5);
        assert_eq!(f1(1.0, 0.0), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert!((f1(0.9888, 0.9867) - 0.9877).abs() < 5e-5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.5, 0.6], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn confusion_csv_round_trip() {
        let cm = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 2, 2], vec!["A".into(), "F".into(), "PT".into()]).unwrap();
        assert_eq!(cm.get(2, 1), 1);
        let text = cm.to_csv();
        assert_eq!(ConfusionMatrix::from_csv(&text).unwrap(), cm);
        assert!(ConfusionMatrix::from_csv("x,a\na,zz\n").is_err());
    }

    #[test]
    fn out_of_range_label() {
        assert!(confusion_matrix(&[2], &[0], index_labels(2)).is_err());
    }
}
