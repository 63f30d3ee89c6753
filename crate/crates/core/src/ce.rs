//! CE datasets and the metrics computed over them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{robust_model_ce, ClassifierModel, RobustCeConfig};
use crate::error::{check_dim, Error, Result};
use crate::neighborhood::Variant;
use crate::sampler::{generate_ce, CeParams, SamplerConfig};
use crate::schedule::Schedule;
use crate::score::NoisePredictor;
use crate::seed::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const L0_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CeMethod {
    Diffusion {
        variant: Variant,
        w: f64,
        sigma_ce: f64,
    },
    RobustModel {
        model: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CERecord {
    pub source_id: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub y_ce: usize,
    pub x_ce: Vec<f64>,
    pub l2: f64,
    pub l0: f64,
    pub method: CeMethod,
}

impl CERecord {
    pub fn is_same_class(&self) -> bool {
        self.y == self.y_ce
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeFailure {
    pub source_id: usize,
    pub y_ce: usize,
    pub message: String,
}

/// First line of a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeHeader {
    pub schema_version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub failures: Vec<CeFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CEDataset {
    pub header: CeHeader,
    pub records: Vec<CERecord>,
}

/// Produces one CE for `(x, y_ce)` from a trajectory seed.
pub trait CeGenerator: Sync {
    fn generate(&self, x: &[f64], y_ce: usize, seed: u64) -> Result<Vec<f64>>;
    fn method(&self) -> CeMethod;
    fn n_classes(&self) -> usize;
}

/// Guided diffusion sampling with a neighborhood centered at the source.
pub struct DiffusionCe<'a> {
    pub sched: Schedule,
    pub sampler: SamplerConfig,
    pub data: &'a dyn NoisePredictor,
    pub params: CeParams,
}

impl CeGenerator for DiffusionCe<'_> {
    fn generate(&self, x: &[f64], y_ce: usize, seed: u64) -> Result<Vec<f64>> {
        generate_ce(&self.sched, &self.sampler, self.data, x, y_ce, &self.params, seed)
    }

    fn method(&self) -> CeMethod {
        CeMethod::Diffusion {
            variant: self.params.variant,
            w: self.params.w,
            sigma_ce: self.params.sigma_ce,
        }
    }

    fn n_classes(&self) -> usize {
        self.data.n_classes()
    }
}

/// Targeted gradient ascent on a classifier.
pub struct RobustCe<'a> {
    pub model: &'a ClassifierModel,
    pub cfg: RobustCeConfig,
    pub tag: String,
}

impl CeGenerator for RobustCe<'_> {
    fn generate(&self, x: &[f64], y_ce: usize, _seed: u64) -> Result<Vec<f64>> {
        Ok(robust_model_ce(self.model, x, y_ce, &self.cfg)?.0)
    }

    fn method(&self) -> CeMethod {
        CeMethod::RobustModel {
            model: self.tag.clone(),
        }
    }

    fn n_classes(&self) -> usize {
        self.model.n_classes
    }
}

/// `(‖x − x_ce‖₂, |{i : |x_i − x_ce,i| > threshold}|/d)`.
pub fn distances(x: &[f64], x_ce: &[f64], l0_threshold: f64) -> Result<(f64, f64)> {
    check_dim(x.len(), x_ce.len())?;
    if x.is_empty() {
        return Err(Error::UndefinedMetric("distance between empty vectors".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for (a, b) in x.iter().zip(x_ce) {
        let d = a - b;
        sq += d * d;
        if d.abs() > l0_threshold {
            count += 1;
        }
    }
    Ok((sq.sqrt(), count as f64 / x.len() as f64))
}

/// Generates `n_per_class` CEs toward every class (the source class
/// included) for each sample. Record `k` in generation order uses seed
/// stream `k` of `seed`.
pub fn build_ce_dataset(
    generator: &dyn CeGenerator,
    samples: &[(Vec<f64>, usize)],
    n_per_class: usize,
    seed: u64,
    config_digest: &str,
) -> Result<CEDataset> {
    let k = generator.n_classes();
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be >= 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|i| (0..k).flat_map(move |c| std::iter::repeat_n((i, c), n_per_class)))
        .collect();
    let method = generator.method();
    let outcomes: Vec<std::result::Result<CERecord, CeFailure>> = jobs
        .par_iter()
        .enumerate()
        .map(|(idx, &(i, c))| {
            let (x, y) = &samples[i];
            let fail = |e: Error| CeFailure {
                source_id: i,
                y_ce: c,
                message: e.to_string(),
            };
            let x_ce = generator
                .generate(x, c, derive_seed(seed, idx as u64))
                .map_err(fail)?;
            let (l2, l0) = distances(x, &x_ce, L0_THRESHOLD).map_err(fail)?;
            Ok(CERecord {
                source_id: i,
                x: x.clone(),
                y: *y,
                y_ce: c,
                x_ce,
                l2,
                l0,
                method: method.clone(),
            })
        })
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(CEDataset {
        header: CeHeader {
            schema_version: SCHEMA_VERSION,
            config_digest: config_digest.to_string(),
            seed,
            n_samples: samples.len(),
            n_classes: k,
            n_per_class,
            failures,
        },
        records,
    })
}

impl CEDataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("{} is empty", path.display()),
            })?
            .map_err(|e| Error::io(path, e))?;
        let header: CeHeader = serde_json::from_str(&first)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported schema version {}", header.schema_version),
            });
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { header, records })
    }

    /// Sources in id order, reconstructed from the records.
    pub fn sources(&self) -> BTreeMap<usize, (&[f64], usize)> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            m.entry(r.source_id).or_insert((r.x.as_slice(), r.y));
        }
        m
    }

    pub fn different_class(&self) -> impl Iterator<Item = &CERecord> {
        self.records.iter().filter(|r| !r.is_same_class())
    }
}

/// Mean L² of a source's CEs; same-class CEs only count when
/// `include_same_class` is set.
pub fn avg_ce_distance(ds: &CEDataset, source_id: usize, include_same_class: bool) -> Result<f64> {
    let (sum, n) = ds
        .records
        .iter()
        .filter(|r| r.source_id == source_id && (include_same_class || !r.is_same_class()))
        .fold((0.0, 0usize), |(s, n), r| (s + r.l2, n + 1));
    if n == 0 {
        Err(Error::UndefinedMetric(format!(
            "source {source_id} has no qualifying CEs"
        )))
    } else {
        Ok(sum / n as f64)
    }
}

/// Coefficient of determination of the least-squares line `y ~ a + b x`.
///
/// Zero variance in `y` gives 0; zero variance in `x` is undefined.
pub fn ols_r_squared(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dim(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::UndefinedMetric("r² needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::UndefinedMetric("distances have zero variance".into()));
    }
    if syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub source_id: usize,
    pub y: usize,
    pub confidence: f64,
    pub avg_distance: f64,
}

/// r² of true-class confidence against average different-class CE distance,
/// over every source in `ds`.
/// OLS r² of true-class confidence against average CE distance, one point
/// per source.
pub fn confidence_distance_correlation(
    model: &ClassifierModel,
    ds: &CEDataset,
    include_same_class: bool,
) -> Result<(f64, Vec<ScatterRow>)> {
    let rows: Result<Vec<ScatterRow>> = ds
        .sources()
        .into_iter()
        .map(|(id, (x, y))| {
            let conf = model.classify(x)?.1[y];
            Ok(ScatterRow {
                source_id: id,
                y,
                confidence: conf,
                avg_distance: avg_ce_distance(ds, id, include_same_class)?,
            })
        })
        .collect();
    let rows = rows?;
    let d: Vec<f64> = rows.iter().map(|r| r.avg_distance).collect();
    let c: Vec<f64> = rows.iter().map(|r| r.confidence).collect();
    Ok((ols_r_squared(&d, &c)?, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub same_class_acc: f64,
    pub diff_class_acc: f64,
    pub clean_acc: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub n_sources: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy of predicting `y_ce` on `x_ce`, split by same/different class,
/// plus clean accuracy on the sources.
pub fn ce_accuracy_report(model: &ClassifierModel, ds: &CEDataset) -> Result<AccuracyReport> {
    if ds.records.is_empty() {
        return Err(Error::UndefinedMetric("empty CE dataset".into()));
    }
    let preds: Result<Vec<usize>> = ds.records.par_iter().map(|r| model.predict(&r.x_ce)).collect();
    let preds = preds?;
    let (mut same, mut same_ok, mut diff, mut diff_ok) = (0, 0, 0, 0);
    for (r, p) in ds.records.iter().zip(&preds) {
        if r.is_same_class() {
            same += 1;
            same_ok += usize::from(*p == r.y_ce);
        } else {
            diff += 1;
            diff_ok += usize::from(*p == r.y_ce);
        }
    }
    let sources = ds.sources();
    let mut clean_ok = 0;
    for (x, y) in sources.values() {
        clean_ok += usize::from(model.predict(x)? == *y);
    }
    Ok(AccuracyReport {
        same_class_acc: ratio(same_ok, same),
        diff_class_acc: ratio(diff_ok, diff),
        clean_acc: ratio(clean_ok, sources.len()),
        n_same: same,
        n_diff: diff,
        n_sources: sources.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePrediction {
    pub probability: f64,
    /// Different-class records whose source the model classifies correctly.
    pub qualifying: usize,
    /// Of those, records where the model still predicts the source label.
    pub source_predicted: usize,
}

/// `P(model(x_ce) = y | model(x) = y, y_ce ≠ y)`.
pub fn source_prediction_probability(model: &ClassifierModel, ds: &CEDataset) -> Result<SourcePrediction> {
    let mut correct = BTreeMap::new();
    for (id, (x, y)) in ds.sources() {
        correct.insert(id, model.predict(x)? == y);
    }
    let mut qualifying = 0;
    let mut hit = 0;
    for r in ds.different_class() {
        if correct[&r.source_id] {
            qualifying += 1;
            hit += usize::from(model.predict(&r.x_ce)? == r.y);
        }
    }
    if qualifying == 0 {
        return Err(Error::UndefinedMetric(
            "no different-class CE with a correctly classified source".into(),
        ));
    }
    Ok(SourcePrediction {
        probability: hit as f64 / qualifying as f64,
        qualifying,
        source_predicted: hit,
    })
}

/// Predicts the class whose CEs lie closest to `x` on average; ties go to
/// the lowest class index. Returns the class and the per-class means.
pub fn ce_distance_classifier(
    generator: &dyn CeGenerator,
    x: &[f64],
    n_per_class: usize,
    seed: u64,
) -> Result<(usize, Vec<f64>)> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be >= 1"));
    }
    let k = generator.n_classes();
    let means: Result<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|c| {
            let mut total = 0.0;
            for j in 0..n_per_class {
                let s = derive_seed(seed, (c * n_per_class + j) as u64);
                let x_ce = generator.generate(x, c, s)?;
                total += distances(x, &x_ce, L0_THRESHOLD)?.0;
            }
            Ok(total / n_per_class as f64)
        })
        .collect();
    let means = means?;
    let mut best = 0;
    for (c, m) in means.iter().enumerate() {
        if *m < means[best] {
            best = c;
        }
    }
    Ok((best, means))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values on the top edge go to the last
    /// bin, values outside are clamped into the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = if width > 0.0 {
                (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub count: usize,
    /// Probability levels of `quantiles`.
    pub levels: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub histogram: Histogram,
}

pub const SUMMARY_LEVELS: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64], hist_hi: f64, bins: usize) -> DistanceSummary {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    DistanceSummary {
        count: s.len(),
        levels: SUMMARY_LEVELS.to_vec(),
        quantiles: SUMMARY_LEVELS.iter().map(|p| quantile(&s, *p)).collect(),
        histogram: Histogram::new(&s, 0.0, hist_hi, bins),
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeFromCe {
    /// Different-class CE distances from the original sources.
    pub baseline: Vec<f64>,
    /// Different-class CE distances when each base CE is the source.
    pub from_ce: Vec<f64>,
    pub baseline_summary: DistanceSummary,
    pub from_ce_summary: DistanceSummary,
}

/// Regenerates different-class CEs with `generator` from every
/// different-class base CE (taken as a datum of class `y_ce`) and from the
/// original sources of `base`.
pub fn ce_from_ce_analysis(
    generator: &dyn CeGenerator,
    base: &CEDataset,
    seed: u64,
    bins: usize,
) -> Result<CeFromCe> {
    if base.records.is_empty() {
        return Err(Error::UndefinedMetric("empty base CE dataset".into()));
    }
    let k = generator.n_classes();
    let from_sources: Vec<(Vec<f64>, usize)> = base
        .different_class()
        .map(|r| (r.x_ce.clone(), r.y_ce))
        .collect();
    let originals: Vec<(Vec<f64>, usize)> = base
        .sources()
        .values()
        .map(|(x, y)| (x.to_vec(), *y))
        .collect();
    let run = |srcs: &[(Vec<f64>, usize)], stream: u64| -> Result<Vec<f64>> {
        let jobs: Vec<(usize, usize)> = (0..srcs.len())
            .flat_map(|i| (0..k).filter(move |c| *c != srcs[i].1).map(move |c| (i, c)))
            .collect();
        jobs.par_iter()
            .enumerate()
            .map(|(idx, &(i, c))| {
                let s = derive_seed(derive_seed(seed, stream), idx as u64);
                let x_ce = generator.generate(&srcs[i].0, c, s)?;
                Ok(distances(&srcs[i].0, &x_ce, L0_THRESHOLD)?.0)
            })
            .collect()
    };
    let baseline = run(&originals, 0)?;
    let from_ce = run(&from_sources, 1)?;
    let hi = baseline
        .iter()
        .chain(&from_ce)
        .copied()
        .fold(0.0, f64::max);
    Ok(CeFromCe {
        baseline_summary: summarize(&baseline, hi, bins),
        from_ce_summary: summarize(&from_ce, hi, bins),
        baseline,
        from_ce,
    })
}
