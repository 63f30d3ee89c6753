mod common;

use common::*;
use diffce::adversarial::*;
use diffce::score::{DenoiserConfig, DenoiserModel};
use diffce::seed;
use proptest::prelude::*;
use rand::Rng;

fn model(seed_: u64) -> ClassifierModel {
    ClassifierModel::new(ClassifierConfig { hidden: vec![12, 8], dropout: 0.0 }, 4, 3, seed_).unwrap()
}

fn random_batch(rng: &mut impl Rng, n: usize, d: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let xs = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let ys = (0..n).map(|_| rng.random_range(0..k)).collect();
    (xs, ys)
}

fn flat(p: &diffce::nn::ParamSet) -> Vec<f64> {
    p.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
}

#[test]
fn classifier_parameter_gradient_matches_fd() {
    let mut rng = seed::rng(1);
    for s in 0..3 {
        let m = model(s);
        let (xs, ys) = random_batch(&mut rng, 5, 4, 3);
        let (_, g) = m.loss_and_grad(&xs, &ys).unwrap();
        let base = flat(&m.params);
        let err = max_grad_rel_err(&flat(&g), &base, |i, v| {
            let mut p = m.clone();
            p.params.flat_set(i, v);
            p.loss_and_grad(&xs, &ys).unwrap().0
        });
        assert!(err < 1e-4, "max relative error {err}");
    }
}

#[test]
fn classifier_input_gradient_matches_fd() {
    let mut rng = seed::rng(2);
    let m = model(4);
    for _ in 0..10 {
        let (xs, ys) = random_batch(&mut rng, 1, 4, 3);
        let (_, g) = m.log_prob_input_grad(&xs[0], ys[0]).unwrap();
        let err = max_grad_rel_err(&g, &xs[0], |i, v| {
            let mut x = xs[0].clone();
            x[i] = v;
            m.log_prob_input_grad(&x, ys[0]).unwrap().0
        });
        assert!(err < 1e-4, "max relative error {err}");
    }
}

#[test]
fn denoiser_parameter_gradient_matches_fd() {
    let mut rng = seed::rng(3);
    let m = DenoiserModel::new(DenoiserConfig { hidden: 8, blocks: 2, n_freqs: 3 }, 3, 2, 5).unwrap();
    let (xs, _) = random_batch(&mut rng, 4, 3, 2);
    let (zs, _) = random_batch(&mut rng, 4, 3, 2);
    let ts = [0.05, 0.3, 0.7, 1.0];
    let cls = [Some(0), None, Some(1), None];
    let (_, g) = m.dsm_loss_and_grad(&xs, &ts, &cls, &zs);
    let err = max_grad_rel_err(&flat(&g), &flat(&m.params), |i, v| {
        let mut p = m.clone();
        p.params.flat_set(i, v);
        p.dsm_loss_and_grad(&xs, &ts, &cls, &zs).0
    });
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn attack_loss_monotone_in_steps() {
    let mut rng = seed::rng(6);
    let m = {
        // A briefly trained model has a less flat loss surface than a fresh one.
        let (xs, ys) = random_batch(&mut rng, 300, 4, 3);
        let data: Vec<(Vec<f64>, usize)> = xs.into_iter().zip(ys).collect();
        let cfg = ClassifierTrainConfig { epochs: 5, seed: 1, ..Default::default() };
        train_classifier(model(7), &data, 0.0, &cfg).unwrap().0
    };
    let (mut ok, mut total) = (0, 0);
    for _ in 0..100 {
        let (xs, ys) = random_batch(&mut rng, 1, 4, 3);
        let eps = rng.random_range(0.1..1.0);
        let loss = |k: usize| {
            let cfg = AttackConfig { epsilon: eps, n_steps: k, step_size: eps / 4.0, targeted: false, target_class: None };
            let adv = pgd_attack(&m, &xs[0], ys[0], &cfg).unwrap();
            -m.log_prob_input_grad(&adv, ys[0]).unwrap().0
        };
        for k in 0..8 {
            total += 1;
            ok += usize::from(loss(k + 1) >= loss(k));
        }
    }
    let rate = ok as f64 / total as f64;
    assert!(rate >= 0.95, "monotone in {rate} of trials");
}

#[test]
fn robust_ce_stops_at_threshold_or_step_limit() {
    let mut rng = seed::rng(9);
    let (xs, ys) = random_batch(&mut rng, 300, 4, 3);
    let data: Vec<(Vec<f64>, usize)> = xs.iter().cloned().zip(ys).collect();
    let cfg = ClassifierTrainConfig { epochs: 5, seed: 2, ..Default::default() };
    let (m, _) = train_classifier(model(8), &data, 0.2, &cfg).unwrap();
    let ce_cfg = RobustCeConfig::default();
    for x in xs.iter().take(30) {
        let x: Vec<f64> = x.iter().map(|v| (v + 1.5) / 3.0).collect();
        let (ce, steps, conf) = robust_model_ce(&m, &x, 2, &ce_cfg).unwrap();
        assert!((conf - m.classify(&ce).unwrap().1[2]).abs() < 1e-12);
        assert!(conf >= ce_cfg.conf_threshold || steps == ce_cfg.max_steps, "{conf} after {steps}");
        assert!(ce.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #[test]
    fn projection_is_exact(v in prop::collection::vec(-10.0f64..10.0, 1..12), eps in 0.0f64..5.0) {
        let mut d = v.clone();
        project_l2(&mut d, eps);
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= eps + 1e-12);
        if n0 <= eps {
            prop_assert_eq!(d, v);
        }
    }

    #[test]
    fn pgd_stays_in_budget(
        x in prop::collection::vec(-2.0f64..2.0, 4),
        y in 0usize..3,
        eps in 0.0f64..2.0,
        steps in 1usize..12,
    ) {
        let m = model(11);
        let adv = pgd_attack(&m, &x, y, &AttackConfig::untargeted(eps, steps)).unwrap();
        let n = adv.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(n <= eps + 1e-6);
    }
}
