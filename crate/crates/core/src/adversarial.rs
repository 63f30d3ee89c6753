//! Small MLP classifiers, L² PGD attacks, adversarial training, and the
//! gradient-following CE baseline for robust models.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{check_dim, Error, Result};
use crate::nn::{
    self, clip_grad_norm, init_linear, linear, linear_backward, log_softmax_rows, silu_arr,
    silu_backward, Adam, AdamConfig, ParamSet,
};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    /// Dropout on hidden activations during training.
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            dropout: 0.0,
        }
    }
}

/// SiLU MLP `d → hidden… → n_classes`; tensors alternate weight, bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub cfg: ClassifierConfig,
    pub dim: usize,
    pub n_classes: usize,
    pub params: ParamSet,
}

struct Cache {
    x: Array2<f64>,
    pre: Vec<Array2<f64>>,
    /// Post-activation (and post-dropout) inputs to each linear layer after
    /// the first.
    act: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    logits: Array2<f64>,
}

impl ClassifierModel {
    pub fn new(cfg: ClassifierConfig, dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_classes < 2 {
            return Err(Error::config(
                "classifier needs dim >= 1 and at least two classes",
            ));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::config("classifier dropout must lie in [0, 1)"));
        }
        let mut rng = seed::rng(seed);
        let mut tensors = Vec::new();
        let mut fan_in = dim;
        for (l, &h) in cfg.hidden.iter().enumerate() {
            let (w, b) = init_linear(&mut rng, &format!("layer{l}"), h, fan_in);
            tensors.push(w);
            tensors.push(b);
            fan_in = h;
        }
        let (w, b) = init_linear(&mut rng, "logits", n_classes, fan_in);
        tensors.push(w);
        tensors.push(b);
        Ok(Self {
            cfg,
            dim,
            n_classes,
            params: ParamSet { tensors },
        })
    }

    fn n_layers(&self) -> usize {
        self.params.tensors.len() / 2
    }

    fn forward<R: Rng + ?Sized>(&self, x: Array2<f64>, mut dropout: Option<&mut R>) -> Cache {
        let p = &self.params;
        let n = self.n_layers();
        let mut pre = Vec::with_capacity(n - 1);
        let mut act = Vec::with_capacity(n - 1);
        let mut masks = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for l in 0..n - 1 {
            let z = linear(&h.view(), &p.mat(2 * l), &p.vec(2 * l + 1));
            let mut a = silu_arr(&z);
            let mask = match dropout.as_deref_mut() {
                Some(rng) if self.cfg.dropout > 0.0 => {
                    let keep = 1.0 - self.cfg.dropout;
                    let m = Array2::from_shape_fn(a.raw_dim(), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            masks.push(mask);
            act.push(a.clone());
            h = a;
        }
        let logits = linear(&h.view(), &p.mat(2 * (n - 1)), &p.vec(2 * (n - 1) + 1));
        Cache {
            x,
            pre,
            act,
            masks,
            logits,
        }
    }

    /// Returns parameter gradients and the input gradient for upstream
    /// `dlogits`.
    fn backward(&self, cache: &Cache, dlogits: &Array2<f64>) -> (ParamSet, Array2<f64>) {
        let p = &self.params;
        let n = self.n_layers();
        let mut g = p.zeros_like();
        let mut dy = dlogits.clone();
        for l in (0..n).rev() {
            let input = if l == 0 { &cache.x } else { &cache.act[l - 1] };
            let mut dx = linear_backward(p, &mut g, 2 * l, &input.view(), &dy.view());
            if l == 0 {
                return (g, dx);
            }
            if let Some(m) = &cache.masks[l - 1] {
                dx *= m;
            }
            dy = silu_backward(&cache.pre[l - 1], &dx);
        }
        unreachable!("classifier has at least one layer")
    }

    fn batch(&self, xs: &[&[f64]]) -> Result<Array2<f64>> {
        for x in xs {
            check_dim(self.dim, x.len())?;
        }
        Ok(nn::rows_to_array(xs, self.dim))
    }

    /// Deterministic forward pass: `(logits, softmax(logits))`.
    pub fn classify(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = self.batch(&[x])?;
        let c = self.forward::<rand_chacha::ChaCha8Rng>(a, None);
        let logits = c.logits.row(0).to_vec();
        let conf = nn::softmax(&logits);
        Ok((logits, conf))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::score::argmax(&self.classify(x)?.1))
    }

    /// Batched class probabilities.
    pub fn confidences(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let a = self.batch(&rows)?;
        let c = self.forward::<rand_chacha::ChaCha8Rng>(a, None);
        Ok(c.logits.rows().into_iter().map(|r| nn::softmax(&r.to_vec())).collect())
    }

    /// Mean cross-entropy over the batch and its parameter gradient.
    pub fn loss_and_grad(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<(f64, ParamSet)> {
        let (loss, g, _) = self.loss_grads(xs, ys, None::<&mut rand_chacha::ChaCha8Rng>)?;
        Ok((loss, g))
    }

    fn loss_grads<R: Rng + ?Sized>(
        &self,
        xs: &[Vec<f64>],
        ys: &[usize],
        dropout: Option<&mut R>,
    ) -> Result<(f64, ParamSet, Array2<f64>)> {
        check_dim(xs.len(), ys.len())?;
        if let Some(&y) = ys.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::domain(format!("label {y} outside [0, {})", self.n_classes)));
        }
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let a = self.batch(&rows)?;
        let cache = self.forward(a, dropout);
        let logp = log_softmax_rows(&cache.logits);
        let b = xs.len() as f64;
        let mut loss = 0.0;
        let mut d = logp.mapv(f64::exp);
        for (i, &y) in ys.iter().enumerate() {
            loss -= logp[[i, y]];
            d[[i, y]] -= 1.0;
        }
        d /= b;
        let (g, dx) = self.backward(&cache, &d);
        Ok((loss / b, g, dx))
    }

    /// `log p(class | x)` and its gradient with respect to `x`.
    pub fn log_prob_input_grad(&self, x: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
        let (loss, _, dx) =
            self.loss_grads(&[x.to_vec()], &[class], None::<&mut rand_chacha::ChaCha8Rng>)?;
        Ok((-loss, dx.row(0).mapv(|v| -v).to_vec()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub n_steps: usize,
    pub step_size: f64,
    pub targeted: bool,
    pub target_class: Option<usize>,
}

impl AttackConfig {
    /// Untargeted PGD with the step size `2.5·ε/n_steps`.
    pub fn untargeted(epsilon: f64, n_steps: usize) -> Self {
        Self {
            epsilon,
            n_steps,
            step_size: 2.5 * epsilon / n_steps.max(1) as f64,
            targeted: false,
            target_class: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::config("PGD step size must be > 0"));
        }
        if self.targeted && self.target_class.is_none() {
            return Err(Error::config("targeted attack without a target class"));
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `delta` onto the L² ball of radius `eps` if it lies outside.
pub fn project_l2(delta: &mut [f64], eps: f64) {
    let n = l2(delta);
    if n > eps {
        let s = eps / n;
        for d in delta.iter_mut() {
            *d *= s;
        }
    }
}

/// L² PGD starting at `x`. Steps with a zero gradient are skipped.
pub fn pgd_attack(model: &ClassifierModel, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_dim(model.dim, x.len())?;
    if cfg.epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let mut adv = x.to_vec();
    for _ in 0..cfg.n_steps {
        // Ascend −log p_y, or descend −log p_target.
        let (class, sign) = match (cfg.targeted, cfg.target_class) {
            (true, Some(c)) => (c, 1.0),
            _ => (y, -1.0),
        };
        let (_, g) = model.log_prob_input_grad(&adv, class)?;
        let n = l2(&g);
        if n == 0.0 || !n.is_finite() {
            continue;
        }
        let mut delta: Vec<f64> = adv
            .iter()
            .zip(x)
            .zip(&g)
            .map(|((a, x0), gi)| a - x0 + sign * cfg.step_size * gi / n)
            .collect();
        project_l2(&mut delta, cfg.epsilon);
        adv = x.iter().zip(&delta).map(|(x0, d)| x0 + d).collect();
    }
    Ok(adv)
}

/// Accuracy of `model` on `data` after untargeted PGD with budget
/// `epsilon` (clean accuracy when `epsilon = 0`).
pub fn pgd_accuracy(
    model: &ClassifierModel,
    data: &[(Vec<f64>, usize)],
    epsilon: f64,
    n_steps: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let cfg = AttackConfig::untargeted(epsilon, n_steps);
    let correct: Result<Vec<bool>> = data
        .par_iter()
        .map(|(x, y)| {
            let adv = pgd_attack(model, x, *y, &cfg)?;
            Ok(model.predict(&adv)? == *y)
        })
        .collect();
    let correct = correct?;
    Ok(correct.iter().filter(|c| **c).count() as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub pgd_steps: usize,
    /// Points used for the per-epoch accuracy traces.
    pub eval_size: usize,
    /// Set by the caller; never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 2e-3,
            pgd_steps: 8,
            eval_size: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epsilon: f64,
    pub losses: Vec<f64>,
    pub clean_acc: Vec<f64>,
    pub adv_acc: Vec<f64>,
}

/// Replaces a batch by its PGD adversaries; the identity for `epsilon = 0`.
pub fn adversarial_batch(
    model: &ClassifierModel,
    xs: &[Vec<f64>],
    ys: &[usize],
    epsilon: f64,
    pgd_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    if epsilon == 0.0 {
        return Ok(xs.to_vec());
    }
    let cfg = AttackConfig::untargeted(epsilon, pgd_steps);
    xs.par_iter()
        .zip(ys)
        .map(|(x, y)| pgd_attack(model, x, *y, &cfg))
        .collect()
}

/// Standard (`epsilon = 0`) or PGD adversarial training with class-balanced
/// batches.
pub fn train_classifier(
    mut model: ClassifierModel,
    data: &[(Vec<f64>, usize)],
    epsilon: f64,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::config("classifier training set is empty"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let k = model.n_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (x, y)) in data.iter().enumerate() {
        check_dim(model.dim, x.len())?;
        if *y >= k {
            return Err(Error::config(format!("label {y} outside [0, {k})")));
        }
        by_class[*y].push(i);
    }
    let present: Vec<usize> = (0..k).filter(|c| !by_class[*c].is_empty()).collect();
    let per_class = (cfg.batch_size / present.len()).max(1);
    let steps = (data.len() / (per_class * present.len())).max(1);
    let mut rng = seed::rng(cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let eval: Vec<(Vec<f64>, usize)> = data.iter().take(cfg.eval_size).cloned().collect();
    let mut report = TrainReport {
        epsilon,
        losses: Vec::new(),
        clean_acc: Vec::new(),
        adv_acc: Vec::new(),
    };
    let mut cursors = vec![0usize; k];
    for epoch in 0..cfg.epochs {
        for c in &present {
            by_class[*c].shuffle(&mut rng);
            cursors[*c] = 0;
        }
        let mut total = 0.0;
        for _ in 0..steps {
            let mut xs = Vec::with_capacity(per_class * present.len());
            let mut ys = Vec::with_capacity(xs.capacity());
            for &c in &present {
                for _ in 0..per_class {
                    let pool = &by_class[c];
                    let idx = pool[cursors[c] % pool.len()];
                    cursors[c] += 1;
                    xs.push(data[idx].0.clone());
                    ys.push(c);
                }
            }
            let xs = adversarial_batch(&model, &xs, &ys, epsilon, cfg.pgd_steps)?;
            let (loss, mut g, _) = model.loss_grads(&xs, &ys, Some(&mut rng))?;
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::TrainingDivergence { epoch, loss });
            }
            clip_grad_norm(&mut g, 5.0);
            opt.step(&mut model.params, &g, 1.0);
            total += loss;
        }
        let loss = total / steps as f64;
        let clean = pgd_accuracy(&model, &eval, 0.0, cfg.pgd_steps)?;
        let adv = if epsilon > 0.0 {
            pgd_accuracy(&model, &eval, epsilon, cfg.pgd_steps)?
        } else {
            clean
        };
        debug!(epsilon, epoch, loss, clean, adv, "classifier epoch");
        report.losses.push(loss);
        report.clean_acc.push(clean);
        report.adv_acc.push(adv);
    }
    model.params.round_to_f32();
    Ok((model, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustCeConfig {
    pub step_size: f64,
    pub conf_threshold: f64,
    pub max_steps: usize,
    pub clip: Option<(f64, f64)>,
}

impl Default for RobustCeConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            conf_threshold: 0.9,
            max_steps: 200,
            clip: Some((0.0, 1.0)),
        }
    }
}

/// Follows the normalized gradient of `log p(y_ce | x)` until the target
/// confidence reaches the threshold or the step budget runs out. Returns the
/// point, the steps taken, and the final target confidence.
pub fn robust_model_ce(
    model: &ClassifierModel,
    x: &[f64],
    y_ce: usize,
    cfg: &RobustCeConfig,
) -> Result<(Vec<f64>, usize, f64)> {
    if y_ce >= model.n_classes {
        return Err(Error::domain(format!("target class {y_ce} outside [0, {})", model.n_classes)));
    }
    let mut cur = x.to_vec();
    let mut steps = 0;
    loop {
        let (logp, g) = model.log_prob_input_grad(&cur, y_ce)?;
        let conf = logp.exp();
        if conf >= cfg.conf_threshold || steps == cfg.max_steps {
            return Ok((cur, steps, conf));
        }
        let n = l2(&g);
        if n > 0.0 && n.is_finite() {
            for (c, gi) in cur.iter_mut().zip(&g) {
                *c += cfg.step_size * gi / n;
            }
        }
        if let Some((lo, hi)) = cfg.clip {
            for c in &mut cur {
                *c = c.clamp(lo, hi);
            }
        }
        steps += 1;
    }
}

/// Mean cross-entropy of `model` on `data` (used by attack-strength checks).
pub fn mean_loss(model: &ClassifierModel, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
    Ok(model.loss_and_grad(xs, ys)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn linear_model(w: &[f64], b: f64) -> ClassifierModel {
        // Single linear layer: logit_1 − logit_0 = w·x + b.
        let mut m = ClassifierModel::new(
            ClassifierConfig {
                hidden: vec![],
                dropout: 0.0,
            },
            w.len(),
            2,
            0,
        )
        .unwrap();
        let d = w.len();
        for i in 0..d {
            m.params.tensors[0].data[i] = 0.0;
            m.params.tensors[0].data[d + i] = w[i];
        }
        m.params.tensors[1].data = vec![0.0, b];
        m
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut m = ClassifierModel::new(ClassifierConfig::default(), 3, 4, 1).unwrap();
        for t in &mut m.params.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, c) = m.classify(&[0.3, 0.1, -2.0]).unwrap();
        assert!(c.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn linear_model_matches_hand_softmax() {
        let m = linear_model(&[1.0, -2.0], 0.5);
        let (_, c) = m.classify(&[0.4, 0.3]).unwrap();
        let z: f64 = 0.4 - 0.6 + 0.5;
        let p1 = 1.0 / (1.0 + (-z).exp());
        assert!((c[1] - p1).abs() < 1e-15);
        assert!((c[0] + c[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn epsilon_zero_attack_is_identity() {
        let m = linear_model(&[1.0, 1.0], 0.0);
        let x = [0.2, 0.7];
        assert_eq!(pgd_attack(&m, &x, 1, &AttackConfig::untargeted(0.0, 8)).unwrap(), x.to_vec());
        let xs = vec![x.to_vec()];
        assert_eq!(adversarial_batch(&m, &xs, &[1], 0.0, 8).unwrap(), xs);
    }

    #[test]
    fn single_untargeted_step_on_linear_model() {
        let w = [3.0, -4.0];
        let m = linear_model(&w, 0.0);
        let x = [0.1, 0.2];
        let cfg = AttackConfig {
            epsilon: 10.0,
            n_steps: 1,
            step_size: 0.5,
            targeted: false,
            target_class: None,
        };
        // True class 1: the loss increases along −w.
        let adv = pgd_attack(&m, &x, 1, &cfg).unwrap();
        assert!((adv[0] - (0.1 - 0.5 * 0.6)).abs() < 1e-12);
        assert!((adv[1] - (0.2 + 0.5 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn robust_ce_stops_immediately_when_confident() {
        let m = linear_model(&[10.0, 10.0], 0.0);
        let x = [0.9, 0.9];
        let (out, steps, conf) = robust_model_ce(&m, &x, 1, &RobustCeConfig::default()).unwrap();
        assert_eq!(steps, 0);
        assert_eq!(out, x.to_vec());
        assert!(conf >= 0.9);
    }

    #[test]
    fn robust_ce_respects_clip_and_budget() {
        let m = linear_model(&[1.0, 1.0], -100.0);
        let (out, steps, _) = robust_model_ce(&m, &[0.5, 0.5], 1, &RobustCeConfig::default()).unwrap();
        assert_eq!(steps, 200);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn standard_training_separates_linear_data() {
        let mut rng = seed::rng(3);
        let data: Vec<(Vec<f64>, usize)> = (0..400)
            .map(|i| {
                let y = i % 2;
                let c = if y == 1 { 1.0 } else { -1.0 };
                let x = vec![c + 0.3 * rng.random::<f64>(), rng.random::<f64>() - 0.5];
                (x, y)
            })
            .collect();
        let model = ClassifierModel::new(ClassifierConfig::default(), 2, 2, 4).unwrap();
        let cfg = ClassifierTrainConfig {
            epochs: 10,
            ..ClassifierTrainConfig::default()
        };
        let (m, rep) = train_classifier(model, &data, 0.0, &cfg).unwrap();
        assert!(*rep.clean_acc.last().unwrap() >= 0.99);
        assert!(pgd_accuracy(&m, &data, 0.0, 8).unwrap() >= 0.99);
    }

    proptest! {
        #[test]
        fn projection_lands_in_ball(
            v in prop::collection::vec(-10.0f64..10.0, 1..10),
            eps in 0.0f64..3.0,
        ) {
            let mut d = v.clone();
            project_l2(&mut d, eps);
            prop_assert!(l2(&d) <= eps + 1e-12);
            if l2(&v) <= eps {
                prop_assert_eq!(d, v);
            }
        }

        #[test]
        fn pgd_respects_budget(
            x in prop::collection::vec(-1.0f64..1.0, 3),
            eps in 0.0f64..1.0,
            y in 0usize..3,
            seed in 0u64..1000,
        ) {
            let m = ClassifierModel::new(ClassifierConfig { hidden: vec![8], dropout: 0.0 }, 3, 3, seed).unwrap();
            let adv = pgd_attack(&m, &x, y, &AttackConfig::untargeted(eps, 8)).unwrap();
            let d: Vec<f64> = adv.iter().zip(&x).map(|(a, b)| a - b).collect();
            prop_assert!(l2(&d) <= eps + 1e-6);
        }

        #[test]
        fn softmax_sums_to_one(x in prop::collection::vec(-5.0f64..5.0, 4), seed in 0u64..100) {
            let m = ClassifierModel::new(ClassifierConfig::default(), 4, 5, seed).unwrap();
            let (_, c) = m.classify(&x).unwrap();
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
