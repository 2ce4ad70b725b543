use histofuse_core::metrics::{
    index_labels, macro_metrics, roc_auc, ConfusionMatrix, MetricsReport,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const METRIC_TOL: f64 = 1e-12;

/// Pairwise Mann-Whitney count over every positive/negative pair.
pub fn auc_pairwise(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs as f64
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Per-class one-vs-rest values straight from row and column sums.
pub fn direct_macro(counts: &[Vec<u64>]) -> (f64, f64, f64, f64) {
    let k = counts.len();
    let total: u64 = counts.iter().flatten().sum();
    let diag: u64 = (0..k).map(|i| counts[i][i]).sum();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = counts[c][c] as f64;
        let predicted: u64 = counts.iter().map(|row| row[c]).sum();
        let actual: u64 = counts[c].iter().sum();
        let pc = safe_div(tp, predicted as f64);
        let rc = safe_div(tp, actual as f64);
        p += pc;
        r += rc;
        f += safe_div(2.0 * pc * rc, pc + rc);
    }
    let kf = k as f64;
    (p / kf, r / kf, f / kf, safe_div(diag as f64, total as f64))
}

#[derive(Debug, Default)]
pub struct MetricTally {
    pub matrices: usize,
    pub auc_sets: usize,
    pub worst_gap: f64,
    pub mismatches: Vec<String>,
}

pub fn random_counts(rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    let k = rng.gen_range(2..=6);
    let zero_bias = rng.gen_bool(0.2);
    (0..k)
        .map(|_| {
            (0..k)
                .map(|_| {
                    if zero_bias && rng.gen_bool(0.5) {
                        0
                    } else {
                        rng.gen_range(0..40)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    loop {
        let n = rng.gen_range(2..=30);
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    rng.gen_range(0..5) as f64 / 4.0
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

pub fn metric_oracle(matrices: usize, auc_sets: usize, seed: u64) -> MetricTally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = MetricTally::default();
    let compare = |tally: &mut MetricTally, what: &str, got: f64, want: f64| {
        let gap = (got - want).abs();
        tally.worst_gap = tally.worst_gap.max(gap);
        if gap > METRIC_TOL {
            tally.mismatches.push(format!("{what}: {got} vs {want}"));
        }
    };
    for _ in 0..matrices {
        let counts = random_counts(&mut rng);
        let k = counts.len();
        let cm = ConfusionMatrix::from_counts(index_labels(k), counts.clone()).unwrap();
        let total: u64 = counts.iter().flatten().sum();
        let (p, r, f, a) = direct_macro(&counts);
        if total > 0 {
            let m = macro_metrics(&cm).unwrap();
            compare(&mut tally, "macro precision", m.precision, p);
            compare(&mut tally, "macro recall", m.recall, r);
            compare(&mut tally, "macro f1", m.f1, f);
            compare(&mut tally, "accuracy", m.accuracy, a);
        }
        if k == 2 {
            let rep = MetricsReport::binary(cm, &[0.2, 0.8], &[0, 1]).unwrap();
            let (tp, fp, fn_) = (counts[1][1] as f64, counts[0][1] as f64, counts[1][0] as f64);
            let bp = safe_div(tp, tp + fp);
            let br = safe_div(tp, tp + fn_);
            compare(&mut tally, "binary precision", rep.precision, bp);
            compare(&mut tally, "binary recall", rep.recall, br);
            compare(&mut tally, "binary f1", rep.f1, safe_div(2.0 * bp * br, bp + br));
            compare(&mut tally, "binary accuracy", rep.accuracy, a);
        }
        tally.matrices += 1;
    }
    for _ in 0..auc_sets {
        let (scores, labels) = random_scores(&mut rng);
        let got = roc_auc(&scores, &labels).unwrap();
        let want = auc_pairwise(&scores, &labels);
        if got != want {
            tally.mismatches.push(format!("auc {got} vs {want} on {scores:?} {labels:?}"));
        }
        tally.auc_sets += 1;
    }
    tally
}
