//! Staged experiment runner over one artifact directory.
//!
//! Stages run in a fixed order and each records a manifest under `stages/`
//! with its cache key and the SHA-256 of every output. A stage is skipped
//! when its key matches and its outputs are intact. Keys cover the stage
//! name, the config digest, and the manifests of upstream stages.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{
    pgd_attack, train_classifier, AttackConfig, ClassifierModel, TrainReport,
};
use crate::ce::{
    build_ce_dataset, ce_accuracy_report, ce_distance_classifier, ce_from_ce_analysis,
    confidence_distance_correlation, median, source_prediction_probability, AccuracyReport,
    CEDataset, CeFromCe, DiffusionCe, RobustCe, ScatterRow, SourcePrediction,
};
use crate::checkpoint;
use crate::config::{DataKind, ExperimentConfig, ScoreSource};
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::neighborhood::Variant;
use crate::report::{bar_svg, scatter_svg, write_csv, write_csv_records, CsvTable};
use crate::sampler::{CeParams, SamplerConfig};
use crate::score::{train_denoiser_dsm, DenoiserModel, DsmReport, GaussianMixture, NoisePredictor};
use crate::seed::{derive_named, derive_seed};
use crate::toy::sample_dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Data,
    Score,
    Classifiers,
    Ce,
    Eval,
    CeClassify,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Score,
        Stage::Classifiers,
        Stage::Ce,
        Stage::Eval,
        Stage::CeClassify,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Score => "score",
            Stage::Classifiers => "classifiers",
            Stage::Ce => "ce",
            Stage::Eval => "eval",
            Stage::CeClassify => "ce-classify",
            Stage::Report => "report",
        }
    }

    /// Upstream stages whose manifests feed this stage's cache key.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Score | Stage::Classifiers => &[Stage::Data],
            Stage::Ce | Stage::CeClassify => &[Stage::Data, Stage::Score],
            Stage::Eval => &[Stage::Data, Stage::Score, Stage::Classifiers, Stage::Ce],
            Stage::Report => &[],
        }
    }

    /// `self` plus its transitive upstream stages, in run order.
    pub fn closure(targets: &[Stage]) -> Vec<Stage> {
        fn visit(s: Stage, out: &mut Vec<Stage>) {
            for d in s.deps() {
                visit(*d, out);
            }
            if !out.contains(&s) {
                out.push(s);
            }
        }
        let mut out = Vec::new();
        for t in targets {
            visit(*t, &mut out);
        }
        out.sort();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    pub config_digest: String,
    /// Output path relative to the artifact directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataArtifact {
    pub config_digest: String,
    pub dim: usize,
    pub n_classes: usize,
    pub train: Vec<(Vec<f64>, usize)>,
    pub test: Vec<(Vec<f64>, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MixtureArtifact {
    config_digest: String,
    mixture: GaussianMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tagged<T> {
    config_digest: String,
    body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub variant: Variant,
    pub source_id: usize,
    pub y: usize,
    pub y_ce: usize,
    pub l2: f64,
    pub l0: f64,
    /// Posterior argmax of the CE under the data mixture, when known.
    pub bayes_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub train_epsilon: f64,
    pub eval_epsilon: f64,
    pub accuracy: f64,
    pub max_perturbation_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEval {
    pub train_epsilon: f64,
    pub r_squared: f64,
    pub rows: Vec<ScatterRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeAccuracyEval {
    pub train_epsilon: f64,
    pub report: AccuracyReport,
    pub source_prediction: Option<SourcePrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeFromCeEval {
    pub base_model_epsilon: f64,
    pub analysis: CeFromCe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeClassifyRow {
    pub source_id: usize,
    pub y: usize,
    pub bayes_class: Option<usize>,
    pub predicted: usize,
    pub mean_distances: Vec<f64>,
}

/// Exclusive hold on an artifact directory; released on drop.
#[derive(Debug)]
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked { path: dir.to_path_buf() })
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// One artifact directory bound to one resolved config.
#[derive(Debug)]
pub struct Experiment {
    cfg: ExperimentConfig,
    digest: String,
    dir: PathBuf,
    _lock: DirLock,
}

impl Experiment {
    /// Opens (creating if needed) `dir` for `cfg`. A directory produced by a
    /// different config is refused unless `resume` is set, in which case
    /// stale stages recompute.
    pub fn open(cfg: ExperimentConfig, dir: &Path, resume: bool) -> Result<Self> {
        cfg.validate()?;
        create_dir(dir)?;
        let lock = DirLock::acquire(dir)?;
        let digest = cfg.digest();
        let prov_path = dir.join("provenance.json");
        if prov_path.exists() {
            let prev: Provenance = read_json(&prov_path)?;
            if prev.config_digest != digest {
                if !resume {
                    return Err(Error::Provenance {
                        path: prov_path,
                        expected: digest,
                        found: prev.config_digest,
                    });
                }
                tracing::warn!(old = %prev.config_digest, new = %digest, "config changed; stale stages will rerun");
            }
        }
        write_json(
            &prov_path,
            &Provenance {
                config_digest: digest.clone(),
                seed: cfg.seed,
            },
        )?;
        let resolved = dir.join("config.resolved.toml");
        std::fs::write(&resolved, cfg.resolved_toml()).map_err(|e| Error::io(&resolved, e))?;
        Ok(Self {
            cfg,
            digest,
            dir: dir.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn manifest_path(&self, s: Stage) -> PathBuf {
        self.dir.join("stages").join(format!("{}.json", s.name()))
    }

    fn read_manifest(&self, s: Stage) -> Option<Manifest> {
        read_json(&self.manifest_path(s)).ok()
    }

    fn stage_key(&self, s: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(s.name().as_bytes());
        h.update([0]);
        h.update(self.digest.as_bytes());
        for d in s.deps() {
            let m = self.read_manifest(*d).ok_or_else(|| Error::Stage {
                stage: s.name().into(),
                source: Box::new(Error::MissingInputs(vec![self.manifest_path(*d)])),
            })?;
            h.update([0]);
            h.update(m.key.as_bytes());
            for (p, sum) in &m.outputs {
                h.update(p.as_bytes());
                h.update(sum.as_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn is_fresh(&self, s: Stage, key: &str) -> bool {
        let Some(m) = self.read_manifest(s) else {
            return false;
        };
        m.key == key
            && m.outputs
                .iter()
                .all(|(rel, sum)| sha256_file(&self.path(rel)).is_ok_and(|h| &h == sum))
    }

    /// Runs `targets` and everything upstream of them.
    pub fn run(&self, targets: &[Stage]) -> Result<Vec<(Stage, Outcome)>> {
        Stage::closure(targets)
            .into_iter()
            .map(|s| Ok((s, self.run_stage(s)?)))
            .collect()
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, Outcome)>> {
        self.run(&Stage::ALL)
    }

    fn run_stage(&self, s: Stage) -> Result<Outcome> {
        let key = self.stage_key(s)?;
        if self.is_fresh(s, &key) {
            tracing::info!(stage = s.name(), "cached");
            return Ok(Outcome::Cached);
        }
        tracing::info!(stage = s.name(), "running");
        let wrap = |e: Error| Error::Stage {
            stage: s.name().into(),
            source: Box::new(e),
        };
        // Drop the old manifest first so an interrupted stage never looks
        // complete.
        let mp = self.manifest_path(s);
        if mp.exists() {
            std::fs::remove_file(&mp).map_err(|e| wrap(Error::io(&mp, e)))?;
        }
        let outputs = match s {
            Stage::Data => self.stage_data(),
            Stage::Score => self.stage_score(),
            Stage::Classifiers => self.stage_classifiers(),
            Stage::Ce => self.stage_ce(),
            Stage::Eval => self.stage_eval(),
            Stage::CeClassify => self.stage_ce_classify(),
            Stage::Report => self.stage_report(),
        }
        .map_err(wrap)?;
        let mut sums = BTreeMap::new();
        for rel in outputs {
            let sum = sha256_file(&self.path(&rel)).map_err(wrap)?;
            sums.insert(rel, sum);
        }
        create_dir(&self.dir.join("stages")).map_err(wrap)?;
        write_json(
            &mp,
            &Manifest {
                stage: s.name().into(),
                key,
                config_digest: self.digest.clone(),
                outputs: sums,
            },
        )
        .map_err(wrap)?;
        Ok(Outcome::Ran)
    }

    fn sub_seed(&self, label: &str) -> u64 {
        derive_named(self.cfg.seed, label)
    }

    // ---- data -------------------------------------------------------------

    fn stage_data(&self) -> Result<Vec<String>> {
        let d = &self.cfg.data;
        let (dim, k, train, test) = match d.kind {
            DataKind::Idx => {
                let (Some(ip), Some(lp), Some(k)) = (&d.images, &d.labels, d.n_classes) else {
                    return Err(Error::config("idx data needs images, labels and n_classes"));
                };
                let ds = load_idx(ip, lp)?;
                let need = d.n_train + d.n_test;
                if ds.images.len() < need {
                    return Err(Error::config(format!(
                        "idx holds {} images, config asks for {need}",
                        ds.images.len()
                    )));
                }
                if let Some(bad) = ds.labels.iter().find(|l| **l >= k) {
                    return Err(Error::config(format!("idx label {bad} outside [0, {k})")));
                }
                let mut all: Vec<(Vec<f64>, usize)> =
                    ds.images.into_iter().zip(ds.labels).take(need).collect();
                let test = all.split_off(d.n_train);
                (ds.dims.1 * ds.dims.2, k, all, test)
            }
            _ => {
                let gm = self.cfg.mixture()?.expect("synthetic data has a mixture");
                let mut rng = crate::seed::rng(self.sub_seed("data"));
                let train = sample_dataset(&gm, d.n_train, &mut rng);
                let test = sample_dataset(&gm, d.n_test, &mut rng);
                (gm.dim(), gm.n_classes(), train, test)
            }
        };
        create_dir(&self.path("data"))?;
        write_json(
            &self.path("data/dataset.json"),
            &DataArtifact {
                config_digest: self.digest.clone(),
                dim,
                n_classes: k,
                train,
                test,
            },
        )?;
        Ok(vec!["data/dataset.json".into()])
    }

    pub fn load_data(&self) -> Result<DataArtifact> {
        let d: DataArtifact = read_json(&self.path("data/dataset.json"))?;
        self.check_digest("data/dataset.json", &d.config_digest)?;
        Ok(d)
    }

    fn check_digest(&self, rel: &str, found: &str) -> Result<()> {
        if found == self.digest {
            Ok(())
        } else {
            Err(Error::Provenance {
                path: self.path(rel),
                expected: self.digest.clone(),
                found: found.into(),
            })
        }
    }

    // ---- score ------------------------------------------------------------

    fn stage_score(&self) -> Result<Vec<String>> {
        create_dir(&self.path("models"))?;
        match self.cfg.score.source {
            ScoreSource::Analytic => {
                let gm = self
                    .cfg
                    .mixture()?
                    .ok_or_else(|| Error::config("analytic score needs a mixture dataset"))?;
                write_json(
                    &self.path("models/score.json"),
                    &MixtureArtifact {
                        config_digest: self.digest.clone(),
                        mixture: gm,
                    },
                )?;
                Ok(vec!["models/score.json".into()])
            }
            ScoreSource::Denoiser => {
                let data = self.load_data()?;
                let model = DenoiserModel::new(
                    self.cfg.score.denoiser,
                    data.dim,
                    data.n_classes,
                    self.sub_seed("denoiser-init"),
                )?;
                let mut tcfg = self.cfg.score.training;
                tcfg.seed = self.sub_seed("denoiser-train");
                let (model, rep) = train_denoiser_dsm(model, &self.cfg.schedule, &data.train, &tcfg)?;
                checkpoint::save_denoiser(
                    &self.path("models/score.ckpt"),
                    &model,
                    &self.cfg.schedule,
                    &self.digest,
                )?;
                write_json(
                    &self.path("models/score_training.json"),
                    &Tagged {
                        config_digest: self.digest.clone(),
                        body: rep,
                    },
                )?;
                Ok(vec!["models/score.ckpt".into(), "models/score_training.json".into()])
            }
        }
    }

    pub fn load_score(&self) -> Result<Box<dyn NoisePredictor>> {
        match self.cfg.score.source {
            ScoreSource::Analytic => {
                let a: MixtureArtifact = read_json(&self.path("models/score.json"))?;
                self.check_digest("models/score.json", &a.config_digest)?;
                a.mixture.validate()?;
                Ok(Box::new(a.mixture))
            }
            ScoreSource::Denoiser => {
                let (m, h) = checkpoint::load_denoiser(&self.path("models/score.ckpt"))?;
                self.check_digest("models/score.ckpt", &h.config_digest)?;
                Ok(Box::new(m))
            }
        }
    }

    // ---- classifiers --------------------------------------------------------

    fn classifier_rel(i: usize) -> String {
        format!("models/classifier_{i}.ckpt")
    }

    fn stage_classifiers(&self) -> Result<Vec<String>> {
        let data = self.load_data()?;
        create_dir(&self.path("models"))?;
        let c = &self.cfg.classifier;
        let mut outs = Vec::new();
        for (i, &eps) in c.epsilons.iter().enumerate() {
            let model = ClassifierModel::new(
                c.model.clone(),
                data.dim,
                data.n_classes,
                derive_seed(self.sub_seed("classifier-init"), i as u64),
            )?;
            let mut tcfg = c.training;
            tcfg.seed = derive_seed(self.sub_seed("classifier-train"), i as u64);
            let (model, rep) = train_classifier(model, &data.train, eps, &tcfg)?;
            let rel = Self::classifier_rel(i);
            checkpoint::save_classifier(&self.path(&rel), &model, eps, &self.cfg.schedule, &self.digest)?;
            let rep_rel = format!("models/classifier_{i}_training.json");
            write_json(
                &self.path(&rep_rel),
                &Tagged {
                    config_digest: self.digest.clone(),
                    body: rep,
                },
            )?;
            outs.push(rel);
            outs.push(rep_rel);
        }
        Ok(outs)
    }

    /// `(epsilon, model)` for every rung of the ladder.
    pub fn load_classifiers(&self) -> Result<Vec<(f64, ClassifierModel)>> {
        (0..self.cfg.classifier.epsilons.len())
            .map(|i| {
                let rel = Self::classifier_rel(i);
                let (m, h) = checkpoint::load_classifier(&self.path(&rel))?;
                self.check_digest(&rel, &h.config_digest)?;
                let checkpoint::ModelSpec::Classifier { epsilon, .. } = h.model else {
                    unreachable!("load_classifier checks the kind")
                };
                Ok((epsilon, m))
            })
            .collect()
    }

    pub fn load_training_reports(&self) -> Result<Vec<TrainReport>> {
        (0..self.cfg.classifier.epsilons.len())
            .map(|i| {
                let t: Tagged<TrainReport> =
                    read_json(&self.path(&format!("models/classifier_{i}_training.json")))?;
                Ok(t.body)
            })
            .collect()
    }

    pub fn load_denoiser_report(&self) -> Result<DsmReport> {
        let t: Tagged<DsmReport> = read_json(&self.path("models/score_training.json"))?;
        Ok(t.body)
    }

    // ---- CE datasets --------------------------------------------------------

    fn ce_params(&self, variant: Variant) -> CeParams {
        CeParams {
            variant,
            w: self.cfg.guidance.w,
            sigma_ce: self.cfg.neighborhood.sigma_ce,
            sigma_t_scaling: self.cfg.boltzmann_sigma_t_scaling,
        }
    }

    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.cfg.schedule.n_steps,
            t_min: self.cfg.schedule.t_min,
            seed: 0,
            // Pixels load into [0, 1]; keep samples there unless told otherwise.
            clip: self.cfg.sampler.clip.or((self.cfg.data.kind == DataKind::Idx).then_some((0.0, 1.0))),
        }
    }

    fn diffusion<'a>(&self, data: &'a dyn NoisePredictor, variant: Variant) -> DiffusionCe<'a> {
        DiffusionCe {
            sched: self.cfg.schedule,
            sampler: self.sampler_config(),
            data,
            params: self.ce_params(variant),
        }
    }

    pub fn ce_rel(variant: Variant) -> String {
        format!("ce/{}.jsonl", variant.as_str())
    }

    fn stage_ce(&self) -> Result<Vec<String>> {
        let data = self.load_data()?;
        let score = self.load_score()?;
        create_dir(&self.path("ce"))?;
        let sources = &data.test[..self.cfg.ce.n_samples];
        let mut outs = Vec::new();
        for &v in &self.cfg.neighborhood.variants {
            let g = self.diffusion(score.as_ref(), v);
            let seed = self.sub_seed(&format!("ce-{}", v.as_str()));
            let ds = build_ce_dataset(&g, sources, self.cfg.ce.n_per_class, seed, &self.digest)?;
            if !ds.header.failures.is_empty() {
                tracing::warn!(variant = v.as_str(), failures = ds.header.failures.len(), "CE generation failures");
            }
            let rel = Self::ce_rel(v);
            ds.write_jsonl(&self.path(&rel))?;
            outs.push(rel);
        }
        Ok(outs)
    }

    pub fn load_ce(&self, v: Variant) -> Result<CEDataset> {
        let rel = Self::ce_rel(v);
        let ds = CEDataset::read_jsonl(&self.path(&rel))?;
        self.check_digest(&rel, &ds.header.config_digest)?;
        Ok(ds)
    }

    /// Variant feeding the classifier-dependent analyses.
    fn primary_variant(&self) -> Variant {
        let vs = &self.cfg.neighborhood.variants;
        if vs.contains(&Variant::Boltzmann) {
            Variant::Boltzmann
        } else {
            vs[0]
        }
    }

    // ---- evaluation ---------------------------------------------------------

    fn tagged<T: Serialize>(&self, rel: &str, body: T) -> Result<String> {
        write_json(
            &self.path(rel),
            &Tagged {
                config_digest: self.digest.clone(),
                body,
            },
        )?;
        Ok(rel.into())
    }

    fn stage_eval(&self) -> Result<Vec<String>> {
        let ev = self.cfg.evaluation.clone();
        let data = self.load_data()?;
        let gm = self.cfg.mixture()?;
        create_dir(&self.path("eval"))?;
        let mut outs = Vec::new();

        if ev.distances {
            let mut rows = Vec::new();
            for &v in &self.cfg.neighborhood.variants {
                let ds = self.load_ce(v)?;
                let part: Result<Vec<DistanceRow>> = ds
                    .records
                    .par_iter()
                    .map(|r| {
                        Ok(DistanceRow {
                            variant: v,
                            source_id: r.source_id,
                            y: r.y,
                            y_ce: r.y_ce,
                            l2: r.l2,
                            l0: r.l0,
                            bayes_class: gm.as_ref().map(|g| g.bayes_class(&r.x_ce)).transpose()?,
                        })
                    })
                    .collect();
                rows.extend(part?);
            }
            outs.push(self.tagged("eval/distances.json", rows)?);
        }

        let needs_models = ev.robustness || ev.correlation || ev.ce_accuracy || ev.ce_from_ce;
        if !needs_models {
            return Ok(outs);
        }
        let models = self.load_classifiers()?;

        if ev.robustness {
            let steps = self.cfg.classifier.eval_pgd_steps;
            let mut rows = Vec::new();
            for (train_eps, m) in &models {
                for &eval_eps in &self.cfg.classifier.epsilons {
                    let atk = AttackConfig::untargeted(eval_eps, steps);
                    let res: Result<Vec<(bool, f64)>> = data
                        .test
                        .par_iter()
                        .map(|(x, y)| {
                            let adv = pgd_attack(m, x, *y, &atk)?;
                            let norm = adv.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                            Ok((m.predict(&adv)? == *y, norm))
                        })
                        .collect();
                    let res = res?;
                    rows.push(RobustnessRow {
                        train_epsilon: *train_eps,
                        eval_epsilon: eval_eps,
                        accuracy: res.iter().filter(|r| r.0).count() as f64 / res.len() as f64,
                        max_perturbation_norm: res.iter().map(|r| r.1).fold(0.0, f64::max),
                    });
                }
            }
            outs.push(self.tagged("eval/robustness.json", rows)?);
        }

        if ev.correlation || ev.ce_accuracy {
            let ds = self.load_ce(self.primary_variant())?;
            if ev.correlation {
                let mut evals = Vec::new();
                for (eps, m) in &models {
                    let (r2, rows) = confidence_distance_correlation(m, &ds, self.cfg.ce.include_same_class)?;
                    evals.push(CorrelationEval {
                        train_epsilon: *eps,
                        r_squared: r2,
                        rows,
                    });
                }
                outs.push(self.tagged("eval/correlation.json", evals)?);
            }
            if ev.ce_accuracy {
                let mut evals = Vec::new();
                for (eps, m) in &models {
                    let sp = match source_prediction_probability(m, &ds) {
                        Ok(sp) => Some(sp),
                        Err(Error::UndefinedMetric(msg)) => {
                            tracing::warn!(epsilon = eps, %msg, "source-prediction probability undefined");
                            None
                        }
                        Err(e) => return Err(e),
                    };
                    evals.push(CeAccuracyEval {
                        train_epsilon: *eps,
                        report: ce_accuracy_report(m, &ds)?,
                        source_prediction: sp,
                    });
                }
                outs.push(self.tagged("eval/ce_accuracy.json", evals)?);
            }
        }

        if ev.ce_from_ce {
            let (eps, robust) = models.last().expect("ladder is non-empty");
            let rg = RobustCe {
                model: robust,
                cfg: self.cfg.ce.robust_ce,
                tag: format!("epsilon={eps}"),
            };
            let sources = &data.test[..self.cfg.ce.ce_from_ce_samples];
            let base = build_ce_dataset(&rg, sources, 1, self.sub_seed("robust-ce"), &self.digest)?;
            base.write_jsonl(&self.path("eval/robust_ce.jsonl"))?;
            outs.push("eval/robust_ce.jsonl".into());
            let score = self.load_score()?;
            let g = self.diffusion(score.as_ref(), Variant::Boltzmann);
            let analysis = ce_from_ce_analysis(&g, &base, self.sub_seed("ce-from-ce"), self.cfg.ce.histogram_bins)?;
            outs.push(self.tagged(
                "eval/ce_from_ce.json",
                CeFromCeEval {
                    base_model_epsilon: *eps,
                    analysis,
                },
            )?);
        }
        Ok(outs)
    }

    fn stage_ce_classify(&self) -> Result<Vec<String>> {
        if !self.cfg.evaluation.ce_classifier {
            return Ok(Vec::new());
        }
        let data = self.load_data()?;
        let score = self.load_score()?;
        let gm = self.cfg.mixture()?;
        let g = self.diffusion(score.as_ref(), self.primary_variant());
        let base = self.sub_seed("ce-classify");
        let n = self.cfg.ce.n_per_class;
        let rows: Result<Vec<CeClassifyRow>> = data.test[..self.cfg.ce.classify_samples]
            .par_iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let (predicted, means) = ce_distance_classifier(&g, x, n, derive_seed(base, i as u64))?;
                Ok(CeClassifyRow {
                    source_id: i,
                    y: *y,
                    bayes_class: gm.as_ref().map(|g| g.bayes_class(x)).transpose()?,
                    predicted,
                    mean_distances: means,
                })
            })
            .collect();
        create_dir(&self.path("eval"))?;
        Ok(vec![self.tagged("eval/ce_classify.json", rows?)?])
    }

    // ---- reports --------------------------------------------------------------

    fn load_eval<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let t: Tagged<T> = read_json(&self.path(rel))?;
        self.check_digest(rel, &t.config_digest)?;
        Ok(t.body)
    }

    fn expected_eval_inputs(&self) -> Vec<&'static str> {
        let ev = &self.cfg.evaluation;
        [
            (ev.distances, "eval/distances.json"),
            (ev.robustness, "eval/robustness.json"),
            (ev.correlation, "eval/correlation.json"),
            (ev.ce_accuracy, "eval/ce_accuracy.json"),
            (ev.ce_from_ce, "eval/ce_from_ce.json"),
            (ev.ce_classifier, "eval/ce_classify.json"),
        ]
        .into_iter()
        .filter_map(|(on, p)| on.then_some(p))
        .collect()
    }

    fn stage_report(&self) -> Result<Vec<String>> {
        let missing: Vec<PathBuf> = self
            .expected_eval_inputs()
            .into_iter()
            .map(|r| self.path(r))
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
        create_dir(&self.path("reports"))?;
        let ev = self.cfg.evaluation.clone();
        let mut csvs: Vec<String> = Vec::new();
        let d = self.digest.as_str();
        let rp = |name: &str| format!("reports/{name}");

        if ev.distances {
            let rows: Vec<DistanceRow> = self.load_eval("eval/distances.json")?;
            let flat: Vec<DistanceCsv> = rows.iter().map(DistanceCsv::from).collect();
            write_csv(&self.path(&rp("fig2_distances.csv")), d, &flat)?;
            csvs.push(rp("fig2_distances.csv"));
            let mut summary = Vec::new();
            for &v in &self.cfg.neighborhood.variants {
                let diff: Vec<&DistanceRow> = rows.iter().filter(|r| r.variant == v && r.y != r.y_ce).collect();
                let l2: Vec<f64> = diff.iter().map(|r| r.l2).collect();
                let l0: Vec<f64> = diff.iter().map(|r| r.l0).collect();
                let n = diff.len();
                let bayes = diff
                    .iter()
                    .filter_map(|r| r.bayes_class.map(|b| b == r.y_ce))
                    .collect::<Vec<_>>();
                summary.push(DistanceSummaryCsv {
                    variant: v.as_str().into(),
                    n_different_class: n,
                    median_l2: median(&l2),
                    median_l0: median(&l0),
                    mean_l2: l2.iter().sum::<f64>() / n.max(1) as f64,
                    mean_l0: l0.iter().sum::<f64>() / n.max(1) as f64,
                    bayes_agreement: if bayes.is_empty() {
                        None
                    } else {
                        Some(bayes.iter().filter(|b| **b).count() as f64 / bayes.len() as f64)
                    },
                });
            }
            write_csv(&self.path(&rp("fig2_summary.csv")), d, &summary)?;
            csvs.push(rp("fig2_summary.csv"));
        }

        if ev.robustness {
            let rows: Vec<RobustnessRow> = self.load_eval("eval/robustness.json")?;
            write_csv(&self.path(&rp("table_accuracy.csv")), d, &rows)?;
            csvs.push(rp("table_accuracy.csv"));
        }

        if ev.correlation {
            let evals: Vec<CorrelationEval> = self.load_eval("eval/correlation.json")?;
            let mut summary = Vec::new();
            for (i, e) in evals.iter().enumerate() {
                let name = rp(&format!("fig3_scatter_{i}.csv"));
                write_csv(&self.path(&name), d, &e.rows)?;
                csvs.push(name);
                summary.push(R2Csv {
                    train_epsilon: e.train_epsilon,
                    r_squared: e.r_squared,
                    n: e.rows.len(),
                });
            }
            write_csv(&self.path(&rp("fig3_r2.csv")), d, &summary)?;
            csvs.push(rp("fig3_r2.csv"));
        }

        if ev.ce_accuracy {
            let evals: Vec<CeAccuracyEval> = self.load_eval("eval/ce_accuracy.json")?;
            let rows: Vec<CeAccuracyCsv> = evals
                .iter()
                .map(|e| CeAccuracyCsv {
                    train_epsilon: e.train_epsilon,
                    same_class_acc: e.report.same_class_acc,
                    diff_class_acc: e.report.diff_class_acc,
                    clean_acc: e.report.clean_acc,
                    n_same: e.report.n_same,
                    n_diff: e.report.n_diff,
                    source_prediction_probability: e.source_prediction.as_ref().map(|s| s.probability),
                    qualifying: e.source_prediction.as_ref().map_or(0, |s| s.qualifying),
                })
                .collect();
            write_csv(&self.path(&rp("fig4_ce_accuracy.csv")), d, &rows)?;
            csvs.push(rp("fig4_ce_accuracy.csv"));
        }

        if ev.ce_from_ce {
            let e: CeFromCeEval = self.load_eval("eval/ce_from_ce.json")?;
            let mut hist = Vec::new();
            let mut quant = Vec::new();
            for (series, s) in [
                ("original", &e.analysis.baseline_summary),
                ("robust_ce", &e.analysis.from_ce_summary),
            ] {
                for (i, c) in s.histogram.counts.iter().enumerate() {
                    hist.push(HistCsv {
                        series: series.into(),
                        bin: i,
                        bin_lo: s.histogram.edges[i],
                        bin_hi: s.histogram.edges[i + 1],
                        count: *c,
                    });
                }
                for (l, q) in s.levels.iter().zip(&s.quantiles) {
                    quant.push(QuantileCsv {
                        series: series.into(),
                        level: *l,
                        value: *q,
                        count: s.count,
                    });
                }
            }
            write_csv(&self.path(&rp("fig5_histogram.csv")), d, &hist)?;
            write_csv(&self.path(&rp("fig5_quantiles.csv")), d, &quant)?;
            csvs.push(rp("fig5_histogram.csv"));
            csvs.push(rp("fig5_quantiles.csv"));
        }

        if ev.ce_classifier {
            let rows: Vec<CeClassifyRow> = self.load_eval("eval/ce_classify.json")?;
            let k = rows.first().map_or(0, |r| r.mean_distances.len());
            let mut header: Vec<String> = ["source_id", "y", "bayes_class", "predicted"]
                .map(String::from)
                .to_vec();
            header.extend((0..k).map(|c| format!("mean_l2_class{c}")));
            let recs: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![
                        r.source_id.to_string(),
                        r.y.to_string(),
                        r.bayes_class.map(|b| b.to_string()).unwrap_or_default(),
                        r.predicted.to_string(),
                    ];
                    v.extend(r.mean_distances.iter().map(|m| m.to_string()));
                    v
                })
                .collect();
            write_csv_records(&self.path(&rp("ce_classifier.csv")), d, &header, &recs)?;
            let n = rows.len().max(1) as f64;
            let bayes: Vec<usize> = rows.iter().filter_map(|r| r.bayes_class).collect();
            let summary = CeClassifySummaryCsv {
                n: rows.len(),
                accuracy: rows.iter().filter(|r| r.predicted == r.y).count() as f64 / n,
                bayes_accuracy: (bayes.len() == rows.len())
                    .then(|| rows.iter().filter(|r| r.bayes_class == Some(r.y)).count() as f64 / n),
            };
            write_csv(&self.path(&rp("ce_classifier_summary.csv")), d, &[summary])?;
            csvs.push(rp("ce_classifier.csv"));
            csvs.push(rp("ce_classifier_summary.csv"));
        }

        let mut outs = csvs.clone();
        for rel in &csvs {
            for (svg_rel, svg) in render_svgs(rel, &CsvTable::read(&self.path(rel))?)? {
                std::fs::write(self.path(&svg_rel), svg).map_err(|e| Error::io(self.path(&svg_rel), e))?;
                outs.push(svg_rel);
            }
        }
        Ok(outs)
    }
}

/// SVG renderings for one report CSV, keyed by artifact-relative path.
pub fn render_svgs(csv_rel: &str, t: &CsvTable) -> Result<Vec<(String, String)>> {
    let stem = csv_rel.trim_end_matches(".csv");
    let file = stem.rsplit('/').next().unwrap_or(stem);
    let one = |svg: String| Ok(vec![(format!("{stem}.svg"), svg)]);
    match file {
        "fig2_summary" => one(bar_svg(t, &["variant"], "median_l2", "Median L2 of different-class CEs")?),
        "table_accuracy" => one(bar_svg(
            t,
            &["train_epsilon", "eval_epsilon"],
            "accuracy",
            "Accuracy by training and attack budget",
        )?),
        "fig3_r2" => one(bar_svg(t, &["train_epsilon"], "r_squared", "r2 of confidence vs CE distance")?),
        "fig4_ce_accuracy" => one(bar_svg(
            t,
            &["train_epsilon"],
            "diff_class_acc",
            "Accuracy on different-class CEs",
        )?),
        "fig5_histogram" => one(bar_svg(
            t,
            &["series", "bin"],
            "count",
            "CE distance from original data and robust-model CEs",
        )?),
        f if f.starts_with("fig3_scatter_") => one(scatter_svg(
            t,
            "avg_distance",
            "confidence",
            "True-class confidence vs average CE distance",
        )?),
        _ => Ok(Vec::new()),
    }
}

#[derive(Serialize)]
struct DistanceCsv {
    variant: &'static str,
    source_id: usize,
    y: usize,
    y_ce: usize,
    l2: f64,
    l0: f64,
    bayes_class: Option<usize>,
}

impl From<&DistanceRow> for DistanceCsv {
    fn from(r: &DistanceRow) -> Self {
        Self {
            variant: r.variant.as_str(),
            source_id: r.source_id,
            y: r.y,
            y_ce: r.y_ce,
            l2: r.l2,
            l0: r.l0,
            bayes_class: r.bayes_class,
        }
    }
}

#[derive(Serialize)]
struct DistanceSummaryCsv {
    variant: String,
    n_different_class: usize,
    median_l2: f64,
    median_l0: f64,
    mean_l2: f64,
    mean_l0: f64,
    bayes_agreement: Option<f64>,
}

#[derive(Serialize)]
struct R2Csv {
    train_epsilon: f64,
    r_squared: f64,
    n: usize,
}

#[derive(Serialize)]
struct CeAccuracyCsv {
    train_epsilon: f64,
    same_class_acc: f64,
    diff_class_acc: f64,
    clean_acc: f64,
    n_same: usize,
    n_diff: usize,
    source_prediction_probability: Option<f64>,
    qualifying: usize,
}

#[derive(Serialize)]
struct HistCsv {
    series: String,
    bin: usize,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

#[derive(Serialize)]
struct QuantileCsv {
    series: String,
    level: f64,
    value: f64,
    count: usize,
}

#[derive(Serialize)]
struct CeClassifySummaryCsv {
    n: usize,
    accuracy: f64,
    bayes_accuracy: Option<f64>,
}
