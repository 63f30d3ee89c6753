//! Experiment configuration (TOML).
//!
//! Unknown keys are rejected at every level. Relative data paths resolve
//! against the directory of the config file. The digest is the SHA-256 of
//! the resolved TOML text, so two configs that differ only in omitted
//! defaults share a digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{ClassifierConfig, ClassifierTrainConfig, RobustCeConfig};
use crate::error::{Error, Result};
use crate::neighborhood::Variant;
use crate::schedule::Schedule;
use crate::score::{Component, DenoiserConfig, DsmConfig, GaussianMixture};
use crate::toy::Toy16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Toy16,
    Toy2d,
    Mixture,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_test: usize,
    pub toy16: Toy16,
    /// Components for `kind = "mixture"`.
    pub components: Vec<Component>,
    pub n_classes: Option<usize>,
    /// IDX files for `kind = "idx"`; the first `n_train` images train, the
    /// next `n_test` test.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Toy16,
            n_train: 2000,
            n_test: 600,
            toy16: Toy16::default(),
            components: Vec::new(),
            n_classes: None,
            images: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Analytic,
    Denoiser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub source: ScoreSource,
    pub denoiser: DenoiserConfig,
    pub training: DsmConfig,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            source: ScoreSource::Analytic,
            denoiser: DenoiserConfig::default(),
            training: DsmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// Adversarial-training budgets; `0` is the standard model.
    pub epsilons: Vec<f64>,
    pub model: ClassifierConfig,
    pub training: ClassifierTrainConfig,
    /// PGD steps used when evaluating robust accuracy.
    pub eval_pgd_steps: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.2, 0.5],
            model: ClassifierConfig::default(),
            training: ClassifierTrainConfig::default(),
            eval_pgd_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighborhoodConfig {
    pub sigma_ce: f64,
    /// Variants to generate; the first Boltzmann entry feeds the
    /// classifier-dependent analyses.
    pub variants: Vec<Variant>,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        Self {
            sigma_ce: 0.2,
            variants: vec![Variant::Boltzmann, Variant::Gaussian],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub w: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 15.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Applied to each final sample. Defaults to (0, 1) for idx data.
    pub clip: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeConfig {
    /// Test points used as CE sources.
    pub n_samples: usize,
    pub n_per_class: usize,
    pub include_same_class: bool,
    /// Test points classified by lowest average CE distance.
    pub classify_samples: usize,
    /// Sources whose robust-model CEs seed the CE-from-CE analysis.
    pub ce_from_ce_samples: usize,
    pub histogram_bins: usize,
    pub robust_ce: RobustCeConfig,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            n_samples: 500,
            n_per_class: 2,
            include_same_class: false,
            classify_samples: 200,
            ce_from_ce_samples: 100,
            histogram_bins: 20,
            robust_ce: RobustCeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub distances: bool,
    pub robustness: bool,
    pub correlation: bool,
    pub ce_accuracy: bool,
    pub ce_from_ce: bool,
    pub ce_classifier: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            distances: true,
            robustness: true,
            correlation: true,
            ce_accuracy: true,
            ce_from_ce: true,
            ce_classifier: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Scale the neighborhood noise term by `σ_t` instead of using the score
    /// directly.
    pub boltzmann_sigma_t_scaling: bool,
    pub schedule: Schedule,
    pub data: DataConfig,
    pub score: ScoreConfig,
    pub classifier: ClassifierSection,
    pub neighborhood: NeighborhoodConfig,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerSection,
    pub ce: CeConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            boltzmann_sigma_t_scaling: false,
            schedule: Schedule::default(),
            data: DataConfig::default(),
            score: ScoreConfig::default(),
            classifier: ClassifierSection::default(),
            neighborhood: NeighborhoodConfig::default(),
            guidance: GuidanceConfig::default(),
            sampler: SamplerSection::default(),
            ce: CeConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = base_dir {
            for p in [&mut cfg.data.images, &mut cfg.data.labels].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_toml().as_bytes()))
    }

    /// The analytic mixture behind a synthetic dataset.
    pub fn mixture(&self) -> Result<Option<GaussianMixture>> {
        match self.data.kind {
            DataKind::Toy16 => self.data.toy16.mixture().map(Some),
            DataKind::Toy2d => crate::toy::toy2d().map(Some),
            DataKind::Mixture => {
                let k = self.data.n_classes.unwrap_or_else(|| {
                    self.data.components.iter().map(|c| c.class + 1).max().unwrap_or(0)
                });
                GaussianMixture::new(self.data.components.clone(), k).map(Some)
            }
            DataKind::Idx => Ok(None),
        }
    }

    /// Collects every constraint violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut push = |r: Result<()>| {
            if let Err(e) = r {
                errs.push(e.to_string());
            }
        };
        push(self.schedule.validate());
        let d = &self.data;
        if d.n_train == 0 {
            push(Err(Error::config("data.n_train must be >= 1")));
        }
        if d.n_test == 0 {
            push(Err(Error::config("data.n_test must be >= 1")));
        }
        match d.kind {
            DataKind::Idx => {
                if self.score.source == ScoreSource::Analytic {
                    push(Err(Error::config(
                        "score.source = \"analytic\" needs a mixture dataset; use \"denoiser\" with idx data",
                    )));
                }
                if d.n_classes.is_none() {
                    push(Err(Error::config("data.n_classes is required for idx data")));
                }
                for (key, p) in [("data.images", &d.images), ("data.labels", &d.labels)] {
                    match p {
                        None => push(Err(Error::config(format!("{key} is required for idx data")))),
                        Some(p) if !p.is_file() => push(Err(Error::config(format!(
                            "{key}: {} does not exist",
                            p.display()
                        )))),
                        Some(_) => {}
                    }
                }
            }
            _ => {
                if d.images.is_some() || d.labels.is_some() {
                    push(Err(Error::config("data.images/labels only apply to idx data")));
                }
                if d.kind != DataKind::Mixture && !d.components.is_empty() {
                    push(Err(Error::config("data.components only apply to kind = \"mixture\"")));
                }
                push(self.mixture().map(|_| ()));
            }
        }
        let c = &self.classifier;
        if c.epsilons.is_empty() {
            push(Err(Error::config("classifier.epsilons must not be empty")));
        }
        for (i, e) in c.epsilons.iter().enumerate() {
            if !(e.is_finite() && *e >= 0.0) {
                push(Err(Error::config(format!("classifier.epsilons[{i}] = {e} must be >= 0"))));
            }
        }
        if c.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            push(Err(Error::config("classifier.epsilons must be strictly increasing")));
        }
        if c.model.hidden.is_empty() || c.model.hidden.contains(&0) {
            push(Err(Error::config("classifier.model.hidden must list positive widths")));
        }
        if !(0.0..1.0).contains(&c.model.dropout) {
            push(Err(Error::config("classifier.model.dropout must lie in [0, 1)")));
        }
        if c.training.epochs == 0 || c.training.batch_size == 0 {
            push(Err(Error::config("classifier.training epochs and batch_size must be >= 1")));
        }
        if !(self.neighborhood.sigma_ce.is_finite() && self.neighborhood.sigma_ce > 0.0) {
            push(Err(Error::config(format!(
                "neighborhood.sigma_ce must be > 0, got {}",
                self.neighborhood.sigma_ce
            ))));
        }
        let vs = &self.neighborhood.variants;
        if vs.is_empty() {
            push(Err(Error::config("neighborhood.variants must not be empty")));
        }
        if vs.iter().enumerate().any(|(i, v)| vs[..i].contains(v)) {
            push(Err(Error::config("neighborhood.variants must not repeat")));
        }
        if !(self.guidance.w.is_finite() && self.guidance.w >= 0.0) {
            push(Err(Error::config(format!("guidance.w must be >= 0, got {}", self.guidance.w))));
        }
        if let Some((lo, hi)) = self.sampler.clip {
            if !(lo < hi) {
                push(Err(Error::config(format!("sampler.clip ({lo}, {hi}) is empty"))));
            }
        }
        let ce = &self.ce;
        if ce.n_per_class == 0 {
            push(Err(Error::config("ce.n_per_class must be >= 1")));
        }
        for (key, n) in [
            ("ce.n_samples", ce.n_samples),
            ("ce.classify_samples", ce.classify_samples),
            ("ce.ce_from_ce_samples", ce.ce_from_ce_samples),
        ] {
            if n > d.n_test {
                push(Err(Error::config(format!(
                    "{key} = {n} exceeds data.n_test = {}",
                    d.n_test
                ))));
            }
        }
        if ce.histogram_bins == 0 {
            push(Err(Error::config("ce.histogram_bins must be >= 1")));
        }
        match errs.len() {
            0 => Ok(()),
            _ => Err(Error::ConfigList(errs)),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text, path.parent())
}
