mod common;

use common::*;
use diffce::score::*;
use diffce::{seed, toy, Schedule};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_mixture(rng: &mut impl Rng, dim: usize, k: usize) -> (GaussianMixture, Vec<Comp>) {
    let mut comps = Vec::new();
    let mut oracle = Vec::new();
    let total: f64 = (0..k).map(|i| 1.0 + i as f64).sum();
    for i in 0..k {
        let w = (1.0 + i as f64) / total;
        let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..1.5)).collect();
        oracle.push((w, mean.clone(), var.clone()));
        comps.push(Component { weight: w, mean, var, class: i % 2 });
    }
    (GaussianMixture::new(comps, 2).unwrap(), oracle)
}

#[test]
fn diffused_score_matches_fd_of_log_density() {
    let mut rng = seed::rng(3);
    let s = Schedule::default();
    let t = 0.3;
    let (a, sg) = vp_alpha_sigma(0.1, 20.0, t);
    for _ in 0..20 {
        let (gm, oracle) = random_mixture(&mut rng, 2, 3);
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.5..2.5)).collect();
        let got = gm.diffused_score(&s, &x, t, None).unwrap();
        for i in 0..2 {
            let f = |v: f64| {
                let mut y = x.clone();
                y[i] = v;
                diffused_mixture_log_density(&oracle, a, sg, &y)
            };
            let fd = fd_first(&f, x[i], 1e-4);
            assert!(rel_err(got[i], fd) < 1e-5, "coord {i}: {} vs {fd}", got[i]);
        }
    }
}

#[test]
fn noise_prediction_regresses_on_injected_noise() {
    let gm = toy::toy2d().unwrap();
    let s = Schedule::default();
    let t = 0.5;
    let mut rng = seed::rng(5);
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for _ in 0..10_000 {
        let (x0, _) = gm.sample(&mut rng);
        let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt = s.perturb(&x0, t, &z).unwrap();
        let e = gm.noise_prediction(&s, &xt, t, None).unwrap();
        pred.extend(e);
        truth.extend(z);
    }
    // The prediction is E[z | x_t], so z regressed on it has slope 1. The
    // other direction has slope Var(E[z | x_t]) < 1 (about 0.93 here).
    let (_, slope, _) = ols(&pred, &truth);
    assert!((slope - 1.0).abs() < 0.05, "{slope}");
}

#[test]
fn posterior_matches_brute_force() {
    let mut rng = seed::rng(8);
    for _ in 0..50 {
        let (gm, oracle) = random_mixture(&mut rng, 3, 4);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let dens: Vec<f64> = oracle.iter().map(|(w, m, v)| w * log_normal_diag(&x, m, v).exp()).collect();
        let per_class = [dens[0] + dens[2], dens[1] + dens[3]];
        let z = per_class[0] + per_class[1];
        let got = gm.bayes_posterior(&x).unwrap();
        for c in 0..2 {
            assert!((got[c] - per_class[c] / z).abs() < 1e-12);
        }
    }
}

#[test]
fn score_at_t_min_approaches_clean_score() {
    let mut rng = seed::rng(13);
    let s = Schedule::default();
    let (gm, oracle) = random_mixture(&mut rng, 2, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let at_min = gm.diffused_score(&s, &x, s.t_min, None).unwrap();
        for i in 0..2 {
            let f = |v: f64| {
                let mut y = x.clone();
                y[i] = v;
                diffused_mixture_log_density(&oracle, 1.0, 0.0, &y)
            };
            worst = worst.max((at_min[i] - fd_first(&f, x[i], 1e-4)).abs());
        }
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn denoiser_learns_two_class_mixture() {
    let gm = toy::toy2d().unwrap();
    let s = Schedule::default();
    let mut rng = seed::rng(21);
    let data = toy::sample_dataset(&gm, 4000, &mut rng);
    let model = DenoiserModel::new(DenoiserConfig { hidden: 64, blocks: 2, n_freqs: 6 }, 2, 2, 1).unwrap();
    let cfg = DsmConfig {
        epochs: 20,
        steps_per_epoch: 1000,
        batch_size: 64,
        lr: 2e-3,
        warmup_steps: 500,
        grad_clip: 1.0,
        cond_dropout: 0.3,
        seed: 2,
    };
    let (model, report) = train_denoiser_dsm(model, &s, &data, &cfg).unwrap();
    assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
    for t in [0.1, 0.5, 0.9] {
        for class in [None, Some(0), Some(1)] {
            let mut se = 0.0;
            let n = 2000;
            for _ in 0..n {
                let (x0, _) = gm.sample(&mut rng);
                let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                let xt = s.perturb(&x0, t, &z).unwrap();
                let want = gm.noise_prediction(&s, &xt, t, class).unwrap();
                let got = model.predict(&s, &xt, t, class).unwrap();
                se += want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 2.0;
            }
            let mse = se / n as f64;
            assert!(mse < 0.05, "t = {t}, class {class:?}: mse {mse}");
        }
    }
}

proptest! {
    #[test]
    fn posterior_sums_to_one(seed_ in 0u64..1000, x in prop::collection::vec(-6.0f64..6.0, 3)) {
        let mut rng = seed::rng(seed_);
        let (gm, _) = random_mixture(&mut rng, 3, 4);
        let p = gm.bayes_posterior(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guided_noise_affine(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        c in prop::collection::vec(-5.0f64..5.0, 3),
        d in prop::collection::vec(-5.0f64..5.0, 3),
        w in 0.0f64..30.0,
    ) {
        let sum = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + q).collect::<Vec<_>>();
        let l = sum(&guided_noise(&a, &b, w).unwrap(), &guided_noise(&c, &d, w).unwrap());
        let r = guided_noise(&sum(&a, &c), &sum(&b, &d), w).unwrap();
        for (p, q) in l.iter().zip(&r) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }
}
