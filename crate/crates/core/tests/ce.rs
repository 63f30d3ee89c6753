mod common;

use common::*;
use diffce::adversarial::*;
use diffce::ce::*;
use diffce::neighborhood::Variant;
use diffce::sampler::{CeParams, SamplerConfig};
use diffce::{seed, toy, Result, Schedule};
use proptest::prelude::*;
use rand::Rng;

/// Two classes in 1D, decision at x = 0.
fn threshold_model() -> ClassifierModel {
    let mut m = ClassifierModel::new(ClassifierConfig { hidden: vec![], dropout: 0.0 }, 1, 2, 0).unwrap();
    m.params.tensors[0].data = vec![-4.0, 4.0];
    m.params.tensors[1].data = vec![0.0, 0.0];
    m
}

fn dataset(records: Vec<CERecord>, n_classes: usize) -> CEDataset {
    CEDataset {
        header: CeHeader {
            schema_version: SCHEMA_VERSION,
            config_digest: "fixture".into(),
            seed: 0,
            n_samples: 0,
            n_classes,
            n_per_class: 1,
            failures: vec![],
        },
        records,
    }
}

fn record(source_id: usize, x: f64, y: usize, y_ce: usize, x_ce: f64) -> CERecord {
    CERecord {
        source_id,
        x: vec![x],
        y,
        y_ce,
        x_ce: vec![x_ce],
        l2: (x - x_ce).abs(),
        l0: 1.0,
        method: CeMethod::RobustModel { model: "fixture".into() },
    }
}

/// Ten records over four sources; source 2 is misclassified.
fn fixture() -> CEDataset {
    dataset(
        vec![
            record(0, -1.0, 0, 1, -0.5),
            record(0, -1.0, 0, 1, 0.5),
            record(0, -1.0, 0, 0, -0.9),
            record(1, 2.0, 1, 0, 1.0),
            record(1, 2.0, 1, 0, -1.0),
            record(1, 2.0, 1, 0, 0.5),
            record(2, 0.5, 0, 1, 0.6),
            record(2, 0.5, 0, 1, -0.2),
            record(3, -3.0, 0, 1, -2.0),
            record(3, -3.0, 0, 0, -3.0),
        ],
        2,
    )
}

#[test]
fn source_prediction_hand_count() {
    // Qualifying: sources 0, 1, 3 with 2 + 3 + 1 different-class records.
    // Still predicted as the source label: 1 + 2 + 1.
    let sp = source_prediction_probability(&threshold_model(), &fixture()).unwrap();
    assert_eq!(sp.qualifying, 6);
    assert_eq!(sp.source_predicted, 4);
    assert!((sp.probability - 4.0 / 6.0).abs() < 1e-15);
}

#[test]
fn accuracy_hand_count() {
    let r = ce_accuracy_report(&threshold_model(), &fixture()).unwrap();
    assert_eq!((r.n_same, r.n_diff, r.n_sources), (2, 8, 4));
    assert_eq!(r.same_class_acc, 1.0);
    assert_eq!(r.diff_class_acc, 3.0 / 8.0);
    assert_eq!(r.clean_acc, 3.0 / 4.0);
}

#[test]
fn source_prediction_extremes() {
    let m = threshold_model();
    // CE equal to its source: the model keeps predicting the source label.
    let frozen = dataset(
        vec![record(0, -1.0, 0, 1, -1.0), record(1, 1.0, 1, 0, 1.0), record(1, 1.0, 1, 1, 1.0)],
        2,
    );
    assert_eq!(source_prediction_probability(&m, &frozen).unwrap().probability, 1.0);
    // CEs always on the target side.
    let moved = dataset(vec![record(0, -1.0, 0, 1, 1.0), record(1, 1.0, 1, 0, -1.0)], 2);
    assert_eq!(source_prediction_probability(&m, &moved).unwrap().probability, 0.0);
}

#[test]
fn r_squared_matches_textbook_ols() {
    let mut rng = seed::rng(1);
    for _ in 0..20 {
        let n = rng.random_range(3..200);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-1.0..1.0)).collect();
        let got = ols_r_squared(&x, &y).unwrap();
        let (_, _, want) = ols(&x, &y);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn avg_distance_matches_recomputation() {
    let mut rng = seed::rng(2);
    let mut recs = Vec::new();
    for id in 0..10 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = rng.random_range(0..3);
        for c in 0..3 {
            for _ in 0..2 {
                let x_ce: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let (l2, l0) = distances(&x, &x_ce, L0_THRESHOLD).unwrap();
                recs.push(CERecord {
                    source_id: id,
                    x: x.clone(),
                    y,
                    y_ce: c,
                    x_ce,
                    l2,
                    l0,
                    method: CeMethod::RobustModel { model: "r".into() },
                });
            }
        }
    }
    let ds = dataset(recs, 3);
    for id in 0..10 {
        let raw: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| r.source_id == id && r.y_ce != r.y)
            .map(|r| r.x.iter().zip(&r.x_ce).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        let want = raw.iter().sum::<f64>() / raw.len() as f64;
        let got = avg_ce_distance(&ds, id, false).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

struct Offset(usize);

impl CeGenerator for Offset {
    fn generate(&self, x: &[f64], _y_ce: usize, _seed: u64) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| v + 0.5).collect())
    }
    fn method(&self) -> CeMethod {
        CeMethod::RobustModel { model: "offset".into() }
    }
    fn n_classes(&self) -> usize {
        self.0
    }
}

#[test]
fn equal_distances_break_ties_to_class_zero() {
    let (pred, means) = ce_distance_classifier(&Offset(3), &[0.0, 0.0], 2, 1).unwrap();
    assert_eq!(pred, 0);
    assert!(means.iter().all(|m| *m == means[0]));
}

#[test]
fn cardinality_and_stored_distances() {
    let samples: Vec<(Vec<f64>, usize)> = (0..7).map(|i| (vec![i as f64, 1.0], i % 3)).collect();
    let ds = build_ce_dataset(&Offset(3), &samples, 2, 4, "d").unwrap();
    assert_eq!(ds.records.len() + ds.header.failures.len(), 7 * 3 * 2);
    let same = ds.records.iter().filter(|r| r.is_same_class()).count();
    assert_eq!(same + ds.different_class().count(), ds.records.len());
    for r in &ds.records {
        let l2 = r.x.iter().zip(&r.x_ce).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert_eq!(r.l2, l2);
    }
}

fn toy2d_generator(gm: &diffce::score::GaussianMixture) -> DiffusionCe<'_> {
    DiffusionCe {
        sched: Schedule::default(),
        sampler: SamplerConfig::default(),
        data: gm,
        params: CeParams { variant: Variant::Boltzmann, w: 15.0, sigma_ce: 1.0, sigma_t_scaling: false },
    }
}

#[test]
fn distance_classifier_tracks_bayes_on_toy2d() {
    let gm = toy::toy2d().unwrap();
    let g = toy2d_generator(&gm);
    let mut rng = seed::rng(3);
    let test = toy::sample_dataset(&gm, 200, &mut rng);
    let (mut ours, mut bayes) = (0, 0);
    for (i, (x, y)) in test.iter().enumerate() {
        ours += usize::from(ce_distance_classifier(&g, x, 2, i as u64).unwrap().0 == *y);
        bayes += usize::from(gm.bayes_class(x).unwrap() == *y);
    }
    assert!(ours as f64 >= 0.8 * bayes as f64, "{ours} vs Bayes {bayes}");
}

#[test]
fn isolated_component_mean_wins() {
    let gm = toy::toy2d().unwrap();
    let g = toy2d_generator(&gm);
    for comp in gm.components() {
        let (pred, _) = ce_distance_classifier(&g, &comp.mean, 4, 5).unwrap();
        assert_eq!(pred, comp.class);
    }
}

#[test]
fn trained_classifier_tracks_bayes_on_ces() {
    let gm = toy::toy2d().unwrap();
    let mut rng = seed::rng(4);
    let train = toy::sample_dataset(&gm, 2000, &mut rng);
    let cfg = ClassifierTrainConfig { epochs: 10, seed: 3, ..Default::default() };
    let init = ClassifierModel::new(ClassifierConfig::default(), 2, 2, 1).unwrap();
    let (m, _) = train_classifier(init, &train, 0.0, &cfg).unwrap();
    let sources = toy::sample_dataset(&gm, 150, &mut rng);
    let ds = build_ce_dataset(&toy2d_generator(&gm), &sources, 2, 6, "d").unwrap();
    let diff: Vec<&CERecord> = ds.different_class().collect();
    let bayes = diff.iter().filter(|r| gm.bayes_class(&r.x_ce).unwrap() == r.y_ce).count() as f64 / diff.len() as f64;
    let acc = ce_accuracy_report(&m, &ds).unwrap().diff_class_acc;
    assert!((acc - bayes).abs() < 0.05, "classifier {acc} vs Bayes {bayes}");
}

#[test]
fn ce_from_ce_baseline_is_reproducible_and_summarized() {
    let gm = toy::toy2d().unwrap();
    let g = toy2d_generator(&gm);
    let mut rng = seed::rng(5);
    let sources = toy::sample_dataset(&gm, 10, &mut rng);
    let base = build_ce_dataset(&g, &sources, 1, 2, "d").unwrap();
    let a = ce_from_ce_analysis(&g, &base, 9, 10).unwrap();
    let b = ce_from_ce_analysis(&g, &base, 9, 10).unwrap();
    assert_eq!(a, b);
    for (vals, summ) in [(&a.baseline, &a.baseline_summary), (&a.from_ce, &a.from_ce_summary)] {
        let mut s = vals.clone();
        s.sort_by(f64::total_cmp);
        for (p, q) in summ.levels.iter().zip(&summ.quantiles) {
            assert_eq!(*q, quantile(&s, *p));
        }
        assert_eq!(summ.histogram.counts.iter().sum::<usize>(), vals.len());
    }
}

proptest! {
    #[test]
    fn l0_counts_strictly_above_threshold(d in prop::collection::vec(-0.1f64..0.1, 1..30)) {
        let x = vec![0.0; d.len()];
        let (l2, l0) = distances(&x, &d, L0_THRESHOLD).unwrap();
        let want = d.iter().filter(|v| v.abs() > 0.02).count() as f64 / d.len() as f64;
        prop_assert_eq!(l0, want);
        prop_assert!((l2 - d.iter().map(|v| v * v).sum::<f64>().sqrt()).abs() < 1e-15);
    }

    #[test]
    fn quantiles_are_monotone(v in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let qs: Vec<f64> = SUMMARY_LEVELS.iter().map(|p| quantile(&s, *p)).collect();
        prop_assert!(qs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(qs[0], s[0]);
        prop_assert_eq!(*qs.last().unwrap(), *s.last().unwrap());
    }
}
