use histofuse_core::optim::*;
use histofuse_core::Tensor;
use proptest::prelude::*;

/// Independent transcription of the plateau rule: returns the lr produced
/// after each epoch.
fn plateau_reference(losses: &[f64], mut lr: f64) -> Vec<f64> {
    let mut best = f64::INFINITY;
    let mut wait = 0;
    let mut out = Vec::new();
    for &l in losses {
        if l < best - 1e-4 {
            best = l;
            wait = 0;
        } else {
            wait += 1;
            if wait == 4 {
                lr = f64::max(lr / 2.0, 1e-6);
                wait = 0;
            }
        }
        out.push(lr);
    }
    out
}

/// 1-based stop epoch (if any) and the epoch whose weights are restored.
fn early_stop_reference(losses: &[f64]) -> (Option<usize>, usize) {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < best - 1e-4 {
            best = l;
            best_epoch = i + 1;
            since = 0;
        } else {
            since += 1;
            if since == 5 {
                return (Some(i + 1), best_epoch);
            }
        }
    }
    (None, best_epoch)
}

fn run_plateau(losses: &[f64], mut lr: f64) -> Vec<f64> {
    let mut p = Plateau::default();
    losses
        .iter()
        .map(|&l| {
            lr = p.update(l, lr);
            lr
        })
        .collect()
}

fn run_early(losses: &[f64]) -> (Option<usize>, Option<usize>) {
    let mut es = EarlyStopping::default();
    for (i, &l) in losses.iter().enumerate() {
        if es.update(l, &(i + 1)) == Decision::Stop {
            return (Some(i + 1), es.restore().copied());
        }
    }
    (None, es.restore().copied())
}

#[test]
fn flat_losses_halve_the_rate_at_epoch_five() {
    assert_eq!(run_plateau(&[1.0; 5], 1e-4), vec![1e-4, 1e-4, 1e-4, 1e-4, 5e-5]);
    let nine = run_plateau(&[1.0; 9], 1e-4);
    assert_eq!(nine[8], 2.5e-5);
}

#[test]
fn improvement_resets_the_plateau_counter() {
    let losses = [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5];
    assert_eq!(
        run_plateau(&losses, 1e-3),
        vec![1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 5e-4]
    );
}

#[test]
fn tiny_improvements_do_not_count() {
    let losses = [1.0, 0.99998, 0.99996, 0.99994, 0.99992];
    assert_eq!(*run_plateau(&losses, 1e-4).last().unwrap(), 5e-5);
}

#[test]
fn rate_never_drops_below_floor() {
    let lrs = run_plateau(&[2.0; 200], 1e-2);
    assert!(lrs.iter().all(|&v| v >= 1e-6));
    assert_eq!(*lrs.last().unwrap(), 1e-6);
}

#[test]
fn early_stop_restores_best_epoch() {
    let losses = [1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.95];
    assert_eq!(run_early(&losses), (Some(7), Some(2)));
    let mut es: EarlyStopping<u32> = EarlyStopping::new(5, false);
    for (i, l) in losses.iter().enumerate() {
        es.update(*l, &(i as u32));
    }
    assert_eq!(es.restore(), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn plateau_matches_reference(
        steps in proptest::collection::vec(0u8..4, 1..40),
        lr in prop_oneof![Just(1e-4), Just(1e-3), Just(3e-6)]
    ) {
        let losses: Vec<f64> = steps.iter().scan(2.0, |acc, &s| {
            *acc = if s == 0 { *acc * 0.9 } else { *acc + 0.00001 * s as f64 };
            Some(*acc)
        }).collect();
        prop_assert_eq!(run_plateau(&losses, lr), plateau_reference(&losses, lr));
    }

    #[test]
    fn early_stopping_matches_reference(steps in proptest::collection::vec(0u8..3, 1..40)) {
        let losses: Vec<f64> = steps.iter().scan(1.0, |acc, &s| {
            *acc = if s == 0 { *acc * 0.95 } else { *acc * 1.01 };
            Some(*acc)
        }).collect();
        let (stop, best) = early_stop_reference(&losses);
        let (got_stop, restored) = run_early(&losses);
        prop_assert_eq!(got_stop, stop);
        prop_assert_eq!(restored, Some(best));
        let best_loss = losses[best - 1];
        prop_assert!(losses[..got_stop.unwrap_or(losses.len())].iter().all(|&l| l >= best_loss - 1e-4 || l == best_loss));
    }
}

fn quadratic_grad(w: &[f64], centre: &[f64], curv: &[f64]) -> Vec<f64> {
    w.iter().zip(centre).zip(curv).map(|((x, c), k)| 2.0 * k * (x - c)).collect()
}

fn quadratic(w: &[f64], centre: &[f64], curv: &[f64]) -> f64 {
    w.iter().zip(centre).zip(curv).map(|((x, c), k)| k * (x - c).powi(2)).sum()
}

#[test]
fn every_rule_descends_a_convex_quadratic() {
    let centre = [1.5, -2.0, 0.25, 3.0];
    let curv = [1.0, 0.5, 2.0, 0.1];
    for (rule, lr) in [(Rule::sgd(), 0.05), (Rule::adam(), 0.05), (Rule::rmsprop(), 0.01)] {
        let mut opt = Optimizer::new(rule, lr).unwrap();
        let mut w = Tensor::<f64>::zeros(&[4]);
        let start = quadratic(w.data(), &centre, &curv);
        let mut last = start;
        for step in 0..400 {
            let g = Tensor::new(vec![4], quadratic_grad(w.data(), &centre, &curv)).unwrap();
            opt.step_one("w", &mut w, &g).unwrap();
            let now = quadratic(w.data(), &centre, &curv);
            if step == 0 {
                assert!(now < last, "{rule:?} rose on the first step: {last} -> {now}");
            }
            last = now;
        }
        assert!(last < start * 1e-2, "{rule:?}: {start} -> {last}");
        assert_eq!(opt.steps(), 400);
    }
}

#[test]
fn optimizer_rejects_bad_gradients() {
    let mut opt = Optimizer::new(Rule::adam(), 1e-3).unwrap();
    let mut w = Tensor::<f32>::zeros(&[3]);
    assert!(opt.step_one("w", &mut w, &Tensor::zeros(&[2])).is_err());
    let nan = Tensor::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap();
    assert!(opt.step_one("w", &mut w, &nan).is_err());
    assert!(Optimizer::new(Rule::sgd(), -1.0).is_err());
}

#[test]
fn rule_configs_parse_from_json() {
    let r: Rule = serde_json::from_str(r#"{"rule":"rmsprop","rho":0.8}"#).unwrap();
    assert!(matches!(r, Rule::RmsProp { rho, .. } if rho == 0.8));
    assert!(serde_json::from_str::<Rule>(r#"{"rule":"adam","bogus":1}"#).is_err());
}
