mod support;

use histofuse_core::metrics::*;
use histofuse_core::Error;
use proptest::prelude::*;
use support::metric_oracle::{auc_pairwise, direct_macro, metric_oracle};

#[test]
fn random_matrices_and_score_sets_match_oracle() {
    let t = metric_oracle(1000, 200, 17);
    assert_eq!((t.matrices, t.auc_sets), (1000, 200));
    assert!(t.mismatches.is_empty(), "{:?}", &t.mismatches[..t.mismatches.len().min(5)]);
}

#[test]
fn published_f1_is_consistent_with_precision_and_recall() {
    assert!((f1(0.9888, 0.9867) - 0.9877).abs() <= 5e-5);
}

#[test]
fn auc_known_values() {
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
    assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
}

#[test]
fn auc_single_class_is_undefined() {
    assert!(matches!(roc_auc(&[0.2, 0.3], &[1, 1]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(roc_auc(&[0.2, f64::NAN], &[0, 1]), Err(Error::NonFinite(_))));
    let cm = confusion_matrix(&[1, 1], &[1, 1], index_labels(2)).unwrap();
    let rep = MetricsReport::binary(cm, &[0.7, 0.9], &[1, 1]).unwrap();
    assert_eq!(rep.auc, None);
    assert!(rep.to_key_values().contains("auc=undefined"));
}

#[test]
fn zero_denominators_are_flagged() {
    let cm = ConfusionMatrix::from_counts(index_labels(2), vec![vec![5, 0], vec![0, 0]]).unwrap();
    let c = cm.binary_counts(1);
    let p = precision(&c);
    assert!(p.degenerate);
    assert_eq!(p.value, 0.0);
    assert_eq!(f1(0.0, 0.0), 0.0);
    let m = macro_metrics(&cm).unwrap();
    assert!(m.degenerate);
}

#[test]
fn macro_report_omits_auc() {
    let cm = confusion_matrix(&[0, 1, 2, 2], &[0, 1, 2, 1], index_labels(3)).unwrap();
    let rep = MetricsReport::multiclass(cm).unwrap();
    assert!(!rep.to_key_values().contains("auc"));
    assert_eq!(rep.accuracy, 0.75);
}

#[test]
fn report_csv_row_has_every_field() {
    let cm = confusion_matrix(&[0, 1, 1], &[0, 1, 0], index_labels(2)).unwrap();
    let rep = MetricsReport::binary(cm, &[0.1, 0.9, 0.6], &[0, 1, 0]).unwrap();
    let header = MetricsReport::csv_header();
    let row = rep.to_csv_row();
    assert_eq!(header.split(',').count(), row.trim_end().split(',').count());
    assert!(row.starts_with("binary,3,"));
}

#[test]
fn confusion_csv_reports_bad_line() {
    let cm = confusion_matrix(&[0, 1, 1], &[0, 1, 0], vec!["benign".into(), "malignant".into()]).unwrap();
    let text = cm.to_csv();
    assert_eq!(ConfusionMatrix::from_csv(&text).unwrap(), cm);
    let broken = text.replacen("1,1", "1,x", 1);
    match ConfusionMatrix::from_csv(&broken) {
        Err(Error::Csv { line, .. }) => assert!(line >= 2, "line {line}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn macro_values_lie_in_unit_interval(counts in (2usize..6).prop_flat_map(|k| {
        proptest::collection::vec(proptest::collection::vec(0u64..30, k), k)
    })) {
        let total: u64 = counts.iter().flatten().sum();
        prop_assume!(total > 0);
        let cm = ConfusionMatrix::from_counts(index_labels(counts.len()), counts.clone()).unwrap();
        let m = macro_metrics(&cm).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let (p, r, f, a) = direct_macro(&counts);
        prop_assert!((m.precision - p).abs() <= 1e-12);
        prop_assert!((m.recall - r).abs() <= 1e-12);
        prop_assert!((m.f1 - f).abs() <= 1e-12);
        prop_assert!((m.accuracy - a).abs() <= 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescoring(
        pairs in proptest::collection::vec((0u32..8, 0usize..2), 2..30)
    ) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 8.0).collect();
        let warped: Vec<f64> = scores.iter().map(|s| s.powi(3) * 10.0 - 2.0).collect();
        let a = roc_auc(&scores, &labels).unwrap();
        prop_assert_eq!(a, roc_auc(&warped, &labels).unwrap());
        prop_assert_eq!(a, auc_pairwise(&scores, &labels));
        let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((roc_auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}
