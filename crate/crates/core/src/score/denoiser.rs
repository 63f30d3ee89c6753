use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::NoisePredictor;
use crate::error::{check_dim, Error, Result};
use crate::nn::{
    self, clip_grad_norm, init_linear, linear, linear_backward, silu_arr, silu_backward, Adam,
    AdamConfig, ParamSet, Tensor,
};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub blocks: usize,
    /// Sinusoidal time features use frequencies `π·2^j`, `j < n_freqs`.
    pub n_freqs: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            blocks: 3,
            n_freqs: 8,
        }
    }
}

const IN_W: usize = 0;
const IN_B: usize = 1;
const T_W: usize = 2;
const T_B: usize = 3;
const CLASS_EMB: usize = 4;
const NULL_EMB: usize = 5;
const FIRST_BLOCK: usize = 6;

/// Residual MLP noise predictor `ε_θ(x_t, y, t)`.
///
/// The time embedding plus the class (or null) embedding is added to the
/// input projection and to the pre-activation of every residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub cfg: DenoiserConfig,
    pub dim: usize,
    pub n_classes: usize,
    pub params: ParamSet,
}

struct Cache {
    x: Array2<f64>,
    feats: Array2<f64>,
    /// Pre-activations of each block (`h_l + e`), then the final hidden state.
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
}

impl DenoiserModel {
    pub fn new(cfg: DenoiserConfig, dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_classes == 0 || cfg.hidden == 0 || cfg.n_freqs == 0 {
            return Err(Error::config(
                "denoiser requires positive dim, n_classes, hidden and n_freqs",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        let (in_w, in_b) = init_linear(&mut rng, "input", h, dim);
        let (t_w, t_b) = init_linear(&mut rng, "time", h, 2 * cfg.n_freqs);
        let mut class_emb = Tensor::zeros("class_embedding", vec![n_classes, h]);
        let mut null_emb = Tensor::zeros("null_embedding", vec![h]);
        for v in class_emb.data.iter_mut().chain(null_emb.data.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = 0.1 * z;
        }
        let mut tensors = vec![in_w, in_b, t_w, t_b, class_emb, null_emb];
        for l in 0..cfg.blocks {
            let (w, b) = init_linear(&mut rng, &format!("block{l}"), h, h);
            tensors.push(w);
            tensors.push(b);
        }
        let (out_w, out_b) = init_linear(&mut rng, "output", dim, h);
        tensors.push(out_w);
        tensors.push(out_b);
        Ok(Self {
            cfg,
            dim,
            n_classes,
            params: ParamSet { tensors },
        })
    }

    fn out_w(&self) -> usize {
        FIRST_BLOCK + 2 * self.cfg.blocks
    }

    fn time_features(&self, t: &[f64]) -> Array2<f64> {
        let nf = self.cfg.n_freqs;
        let mut f = Array2::zeros((t.len(), 2 * nf));
        for (i, ti) in t.iter().enumerate() {
            for j in 0..nf {
                let w = std::f64::consts::PI * (1u64 << j) as f64;
                f[[i, 2 * j]] = (w * ti).sin();
                f[[i, 2 * j + 1]] = (w * ti).cos();
            }
        }
        f
    }

    fn embedding(&self, feats: &Array2<f64>, classes: &[Option<usize>]) -> Array2<f64> {
        let p = &self.params;
        let mut e = linear(&feats.view(), &p.mat(T_W), &p.vec(T_B));
        let cls = p.mat(CLASS_EMB);
        let null = p.vec(NULL_EMB);
        for (mut row, c) in e.rows_mut().into_iter().zip(classes) {
            match c {
                Some(c) => row += &cls.row(*c),
                None => row += &null,
            }
        }
        e
    }

    fn forward(&self, x: Array2<f64>, t: &[f64], classes: &[Option<usize>]) -> (Array2<f64>, Cache) {
        let p = &self.params;
        let feats = self.time_features(t);
        let e = self.embedding(&feats, classes);
        let mut h = linear(&x.view(), &p.mat(IN_W), &p.vec(IN_B));
        h += &e;
        let mut pre = Vec::with_capacity(self.cfg.blocks + 1);
        let mut act = Vec::with_capacity(self.cfg.blocks + 1);
        for l in 0..self.cfg.blocks {
            let z = &h + &e;
            let a = silu_arr(&z);
            let delta = linear(
                &a.view(),
                &p.mat(FIRST_BLOCK + 2 * l),
                &p.vec(FIRST_BLOCK + 2 * l + 1),
            );
            h += &delta;
            pre.push(z);
            act.push(a);
        }
        let a = silu_arr(&h);
        let out = linear(&a.view(), &p.mat(self.out_w()), &p.vec(self.out_w() + 1));
        pre.push(h);
        act.push(a);
        (out, Cache { x, feats, pre, act })
    }

    fn backward(&self, cache: &Cache, classes: &[Option<usize>], dout: &Array2<f64>) -> ParamSet {
        let p = &self.params;
        let mut g = p.zeros_like();
        let l_n = self.cfg.blocks;
        let da = linear_backward(p, &mut g, self.out_w(), &cache.act[l_n].view(), &dout.view());
        let mut dh = silu_backward(&cache.pre[l_n], &da);
        let mut de = Array2::<f64>::zeros(dh.raw_dim());
        for l in (0..l_n).rev() {
            let dact = linear_backward(p, &mut g, FIRST_BLOCK + 2 * l, &cache.act[l].view(), &dh.view());
            let dpre = silu_backward(&cache.pre[l], &dact);
            dh += &dpre;
            de += &dpre;
        }
        linear_backward(p, &mut g, IN_W, &cache.x.view(), &dh.view());
        de += &dh;
        linear_backward(p, &mut g, T_W, &cache.feats.view(), &de.view());
        for (row, c) in de.axis_iter(Axis(0)).zip(classes) {
            match c {
                Some(c) => {
                    let mut cls = g.mat_mut(CLASS_EMB);
                    let mut r = cls.row_mut(*c);
                    r += &row;
                }
                None => {
                    let mut n = g.vec_mut(NULL_EMB);
                    n += &row;
                }
            }
        }
        g
    }

    fn check_inputs(&self, sched: &Schedule, x_t: &[f64], t: f64, class: Option<usize>) -> Result<()> {
        check_dim(self.dim, x_t.len())?;
        if !(t >= sched.t_min && t <= Schedule::T_MAX) {
            return Err(Error::domain(format!(
                "denoiser time {t} outside [{}, 1]",
                sched.t_min
            )));
        }
        if let Some(c) = class {
            if c >= self.n_classes {
                return Err(Error::domain(format!(
                    "class {c} outside [0, {})",
                    self.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Deterministic forward pass for one input.
    pub fn predict(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Result<Vec<f64>> {
        self.check_inputs(sched, x_t, t, class)?;
        let x = nn::rows_to_array(&[x_t], self.dim);
        let (out, _) = self.forward(x, &[t], &[class]);
        Ok(out.row(0).to_vec())
    }

    /// Batched forward pass.
    pub fn predict_batch(&self, x_t: &[Vec<f64>], t: &[f64], classes: &[Option<usize>]) -> Array2<f64> {
        let rows: Vec<&[f64]> = x_t.iter().map(|r| r.as_slice()).collect();
        let x = nn::rows_to_array(&rows, self.dim);
        self.forward(x, t, classes).0
    }

    /// Mean squared error `mean ‖ε_θ(x_t, y, t) − target‖²/d` and its
    /// parameter gradient.
    pub fn dsm_loss_and_grad(
        &self,
        x_t: &[Vec<f64>],
        t: &[f64],
        classes: &[Option<usize>],
        target: &[Vec<f64>],
    ) -> (f64, ParamSet) {
        let rows: Vec<&[f64]> = x_t.iter().map(|r| r.as_slice()).collect();
        let x = nn::rows_to_array(&rows, self.dim);
        let (out, cache) = self.forward(x, t, classes);
        let trows: Vec<&[f64]> = target.iter().map(|r| r.as_slice()).collect();
        let z = nn::rows_to_array(&trows, self.dim);
        let diff = &out - &z;
        let n = (out.nrows() * self.dim) as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let dout = diff.mapv(|v| 2.0 * v / n);
        (loss, self.backward(&cache, classes, &dout))
    }
}

impl NoisePredictor for DenoiserModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_noise(
        &self,
        sched: &Schedule,
        x_t: &[f64],
        t: f64,
        class: Option<usize>,
    ) -> Result<Vec<f64>> {
        self.predict(sched, x_t, t, class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Probability of replacing the class with the null embedding.
    pub cond_dropout: f64,
    /// Set by the caller; never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 1000,
            batch_size: 128,
            lr: 1e-3,
            warmup_steps: 500,
            grad_clip: 1.0,
            cond_dropout: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Denoising score matching with conditional dropout.
pub fn train_denoiser_dsm(
    mut model: DenoiserModel,
    sched: &Schedule,
    dataset: &[(Vec<f64>, usize)],
    cfg: &DsmConfig,
) -> Result<(DenoiserModel, DsmReport)> {
    if dataset.is_empty() {
        return Err(Error::config("denoiser training set is empty"));
    }
    for (i, (x, y)) in dataset.iter().enumerate() {
        check_dim(model.dim, x.len())?;
        if *y >= model.n_classes {
            return Err(Error::config(format!(
                "training example {i} has label {y} outside [0, {})",
                model.n_classes
            )));
        }
    }
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::config("cond_dropout must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut report = DsmReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let mut xt = Vec::with_capacity(cfg.batch_size);
            let mut ts = Vec::with_capacity(cfg.batch_size);
            let mut cls = Vec::with_capacity(cfg.batch_size);
            let mut zs = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let (x0, y) = &dataset[rng.random_range(0..dataset.len())];
                let t = rng.random_range(sched.t_min..=Schedule::T_MAX);
                let z: Vec<f64> = (0..model.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                xt.push(sched.perturb(x0, t, &z)?);
                ts.push(t);
                let drop = rng.random::<f64>() < cfg.cond_dropout;
                cls.push(if drop { None } else { Some(*y) });
                zs.push(z);
            }
            let (loss, mut grad) = model.dsm_loss_and_grad(&xt, &ts, &cls, &zs);
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::TrainingDivergence { epoch, loss });
            }
            clip_grad_norm(&mut grad, cfg.grad_clip);
            step += 1;
            let warm = if cfg.warmup_steps == 0 {
                1.0
            } else {
                (step as f64 / cfg.warmup_steps as f64).min(1.0)
            };
            opt.step(&mut model.params, &grad, warm);
            total += loss;
        }
        let mean = total / cfg.steps_per_epoch.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDivergence { epoch, loss: mean });
        }
        debug!(epoch, loss = mean, "dsm epoch");
        report.epoch_losses.push(mean);
    }
    model.params.round_to_f32();
    Ok((model, report))
}
