//! Synthetic hierarchical data, the multi-seed protocol runner, statistical
//! aggregation and the supplementary ε-recovery studies.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::empa::{em_fit, empa_assess, AssessConfig, Assessment, EMConfig};
use crate::error::{Error, Result};
use crate::grouping::{
    group, CorrespondenceKind, GroupingConfig, SensitivityScorer, ThresholdPolicy,
};
use crate::metrics::{
    chi_square, deviation, kl_divergence, mmd_rbf, moment_features, moment_reg_fit,
    moment_reg_predict, noise_mle, rmse, stacked_vectors, wasserstein1, Bandwidth, HistogramConfig,
    RangePolicy,
};
use crate::microagg::MdavConfig;
use crate::model::{
    BundleKind, GroupingResult, Layer, LayeredFeatureBundle, Matrix, NoiseFamily,
    PerturbationTriple, ReferenceMechanism, Strategy, META_DATASET, META_MODEL,
};
use crate::noise::{noise_block, perturb_sensitive, NoiseConfig, NoiseTarget};
use crate::rng::{substream, TAG_GENERATE, TAG_NOISE, TAG_REFERENCE};
use crate::stats::std_pop;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_layers: usize,
    pub samples_per_layer: usize,
    pub dim: usize,
    pub sensitive_ratio: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            samples_per_layer: 200,
            dim: 8,
            sensitive_ratio: 0.30,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensitive_ratio > 0.0 && self.sensitive_ratio < 1.0) {
            return Err(Error::Config(format!(
                "sensitive_ratio must lie in (0, 1), got {}",
                self.sensitive_ratio
            )));
        }
        if self.n_layers == 0 || self.samples_per_layer == 0 || self.dim == 0 {
            return Err(Error::Config(
                "synthetic layers, samples and dim must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sensitive_count(&self) -> usize {
        (self.sensitive_ratio * self.samples_per_layer as f64).round() as usize
    }
}

/// Standard-normal layered data with a planted sensitive subset.
///
/// The flags mark samples, so the same sample positions are sensitive in
/// every layer. Values are rounded to `f32` so bundles survive the on-disk
/// format unchanged.
pub fn generate_synthetic(
    config: &SyntheticConfig,
) -> Result<(LayeredFeatureBundle, Vec<Vec<bool>>)> {
    config.validate()?;
    let n = config.samples_per_layer;
    let mut rng = substream(config.seed, TAG_GENERATE, 0);
    let mut flags = vec![false; n];
    for j in rand::seq::index::sample(&mut rng, n, config.sensitive_count()) {
        flags[j] = true;
    }
    let layers = (1..=config.n_layers)
        .map(|i| {
            let mut rng = substream(config.seed, TAG_GENERATE, i as u64);
            let data = (0..n * config.dim)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z as f32 as f64
                })
                .collect();
            Ok(Layer::new(i, config.dim, data)?.with_flags(flags.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bundle = LayeredFeatureBundle::new(layers, BundleKind::Original);
    bundle
        .metadata
        .insert(META_MODEL.into(), "synthetic".into());
    bundle
        .metadata
        .insert(META_DATASET.into(), "synthetic".into());
    bundle
        .metadata
        .insert("synthetic.seed".into(), config.seed.to_string());
    let per_layer = vec![flags; config.n_layers];
    Ok((bundle, per_layer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Mean, sample standard deviation and a Student-t 95% interval.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * std / (n as f64).sqrt();
    Ok(Aggregate {
        n,
        mean,
        std,
        ci_lo: mean - half,
        ci_hi: mean + half,
    })
}

pub const METRIC_NAMES: [&str; 11] = [
    "rmse",
    "deviation",
    "chi_square",
    "kl",
    "mmd",
    "wass1",
    "bas",
    "bias_ref",
    "bias_uniform",
    "bias_uniform_k5",
    "noise_mle_eps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    /// Metric names, or `["all"]`.
    pub metrics: Vec<String>,
    /// Additional mixture size whose uniform-weight bias is reported as
    /// `bias_uniform_k<extra_k>`; 0 disables it.
    pub extra_k: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.01],
            seeds: vec![0, 1, 2, 3, 4],
            strategies: vec![Strategy::Bua, Strategy::Tda, Strategy::Random],
            metrics: vec!["all".into()],
            extra_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub mechanism: NoiseFamily,
    /// Reference family; the observed family when absent.
    pub reference: Option<NoiseFamily>,
    pub c: f64,
    pub target: NoiseTarget,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            mechanism: NoiseFamily::Gaussian,
            reference: None,
            c: 1.0,
            target: NoiseTarget::SensitiveOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingSection {
    pub threshold: ThresholdPolicy,
    pub alpha: f64,
    pub correspondence: CorrespondenceKind,
    pub mdav: bool,
    pub mdav_k: usize,
    pub normalize: bool,
    pub range_q_low: f64,
    pub range_q_high: f64,
}

impl Default for GroupingSection {
    fn default() -> Self {
        let g = GroupingConfig::default();
        let m = MdavConfig::default();
        Self {
            threshold: g.policy,
            alpha: g.alpha,
            correspondence: g.correspondence,
            mdav: true,
            mdav_k: m.k,
            normalize: m.normalize,
            range_q_low: g.range_quantiles.0,
            range_q_high: g.range_quantiles.1,
        }
    }
}

impl GroupingSection {
    pub fn to_config(&self) -> GroupingConfig {
        GroupingConfig {
            policy: self.threshold,
            mdav: self.mdav.then_some(MdavConfig {
                k: self.mdav_k,
                normalize: self.normalize,
            }),
            correspondence: self.correspondence,
            alpha: self.alpha,
            range_quantiles: (self.range_q_low, self.range_q_high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSection {
    pub bins: usize,
    pub alpha_chi: f64,
    pub alpha_kl: f64,
    /// Histogram range margin in units of the noise scale `c/ε`.
    pub margin_scales: f64,
}

impl Default for HistogramSection {
    fn default() -> Self {
        let h = HistogramConfig::for_budget(1.0, 1.0);
        Self {
            bins: h.bins,
            alpha_chi: h.alpha_chi,
            alpha_kl: h.alpha_kl,
            margin_scales: 3.0,
        }
    }
}

impl HistogramSection {
    pub fn to_config(&self, scale: f64) -> HistogramConfig {
        HistogramConfig {
            bins: self.bins,
            range: RangePolicy::FromOriginal {
                margin: self.margin_scales * scale,
            },
            alpha_chi: self.alpha_chi,
            alpha_kl: self.alpha_kl,
        }
    }
}

/// Everything a protocol run depends on. Defaults follow the reproducibility
/// table; the shipped synthetic config overrides the threshold quantile.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub protocol: ProtocolSection,
    pub synthetic: SyntheticConfig,
    pub noise: NoiseSection,
    pub grouping: GroupingSection,
    pub em: EMConfig,
    pub histogram: HistogramSection,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.protocol;
        if p.seeds.is_empty() || p.epsilons.is_empty() {
            return Err(Error::Config(
                "need at least one seed and one epsilon".into(),
            ));
        }
        if let Some(e) = p.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("epsilon must be positive, got {e}")));
        }
        if !(self.noise.c > 0.0 && self.noise.c.is_finite()) {
            return Err(Error::Config(format!(
                "c must be positive, got {}",
                self.noise.c
            )));
        }
        if p.strategies.is_empty() {
            return Err(Error::Config("need at least one strategy".into()));
        }
        self.selected_metrics()?;
        self.synthetic.validate()?;
        self.grouping
            .threshold
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.em
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.histogram.bins < 2 {
            return Err(Error::Config("histogram bins must be at least 2".into()));
        }
        Ok(())
    }

    pub fn reference_family(&self) -> NoiseFamily {
        self.noise.reference.unwrap_or(self.noise.mechanism)
    }

    fn extra_metric(&self) -> Option<String> {
        (self.protocol.extra_k > 0).then(|| format!("bias_uniform_k{}", self.protocol.extra_k))
    }

    /// Metric names recorded per cell, in canonical order.
    pub fn selected_metrics(&self) -> Result<Vec<String>> {
        let extra = self.extra_metric();
        let known = |m: &str| {
            METRIC_NAMES.contains(&m) && m != "bias_uniform_k5" || extra.as_deref() == Some(m)
        };
        let all: Vec<String> = METRIC_NAMES
            .iter()
            .filter(|m| **m != "bias_uniform_k5")
            .map(|m| m.to_string())
            .chain(extra.clone())
            .collect();
        if self.protocol.metrics.iter().any(|m| m == "all") {
            return Ok(all);
        }
        if let Some(bad) = self.protocol.metrics.iter().find(|m| !known(m)) {
            return Err(Error::Config(format!("unknown metric '{bad}'")));
        }
        Ok(all
            .into_iter()
            .filter(|m| self.protocol.metrics.contains(m))
            .collect())
    }
}

/// Seed of the reference draws for a run seed.
pub fn reference_seed(run_seed: u64) -> u64 {
    substream(run_seed, TAG_REFERENCE, 0).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub strategy: Strategy,
    pub epsilon: f64,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub assessment: Option<Assessment>,
    /// Set when the cell failed; metrics are then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub epsilon: f64,
    pub metric: String,
    #[serde(flatten)]
    pub stats: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub seed: u64,
    pub epsilon: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Supplementary {
    /// Leave-one-seed-out predictions of the moment regression.
    pub moment_reg: Vec<EpsilonEstimate>,
    pub moment_reg_loo_rmse: Option<f64>,
    pub moment_reg_error: Option<String>,
    pub noise_mle: Vec<EpsilonEstimate>,
    pub noise_mle_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ProtocolConfig,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<AggregateRow>,
    pub supplementary: Supplementary,
}

/// One row of figure-ready data: a named series value at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigurePoint {
    pub figure: String,
    pub series: String,
    pub epsilon: f64,
    pub mean: f64,
    pub std: f64,
}

impl ExperimentReport {
    pub fn aggregate_for(
        &self,
        strategy: Strategy,
        epsilon: f64,
        metric: &str,
    ) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|r| r.strategy == strategy && r.epsilon == epsilon && r.metric == metric)
            .map(|r| &r.stats)
    }

    pub fn cell(&self, strategy: Strategy, epsilon: f64, seed: u64) -> Option<&CellRecord> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.epsilon == epsilon && c.seed == seed)
    }

    pub fn values(&self, strategy: Strategy, epsilon: f64, metric: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.strategy == strategy && c.epsilon == epsilon)
            .filter_map(|c| c.metrics.get(metric).copied())
            .collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    /// Uniform-weight bias per strategy against ε, and every aggregated
    /// metric of the first strategy against ε.
    pub fn figure_series(&self) -> Vec<FigurePoint> {
        let mut out = Vec::new();
        for r in self
            .aggregates
            .iter()
            .filter(|r| r.metric == "bias_uniform")
        {
            out.push(FigurePoint {
                figure: "bias_vs_epsilon".into(),
                series: r.strategy.to_string(),
                epsilon: r.epsilon,
                mean: r.stats.mean,
                std: r.stats.std,
            });
        }
        if let Some(first) = self.config.protocol.strategies.first() {
            for r in self.aggregates.iter().filter(|r| r.strategy == *first) {
                out.push(FigurePoint {
                    figure: "metric_vs_epsilon".into(),
                    series: r.metric.clone(),
                    epsilon: r.epsilon,
                    mean: r.stats.mean,
                    std: r.stats.std,
                });
            }
        }
        out
    }
}

/// Data shared by every strategy at one (seed, ε).
struct SeedData {
    seed: u64,
    bundle: LayeredFeatureBundle,
    groupings: BTreeMap<Strategy, GroupingResult>,
    planted: GroupingResult,
}

fn prepare_seed(config: &ProtocolConfig, seed: u64) -> Result<SeedData> {
    let (bundle, _) = generate_synthetic(&SyntheticConfig {
        seed,
        ..config.synthetic
    })?;
    let planted = GroupingResult::from_flags(&bundle)?;
    let scorer = SensitivityScorer::GroundTruth { seed };
    let gcfg = config.grouping.to_config();
    let mut groupings = BTreeMap::new();
    for &s in &config.protocol.strategies {
        groupings.insert(s, group(&bundle, s, &scorer, &gcfg, seed)?);
    }
    Ok(SeedData {
        seed,
        bundle,
        groupings,
        planted,
    })
}

fn residuals(triples: &[PerturbationTriple]) -> Vec<f64> {
    triples
        .iter()
        .flat_map(|t| t.u.as_slice().iter().copied())
        .collect()
}

struct BudgetCell {
    seed: u64,
    epsilon: f64,
    records: Vec<CellRecord>,
    moments: Result<Vec<f64>>,
    mle: Option<f64>,
}

fn run_budget(
    config: &ProtocolConfig,
    data: &SeedData,
    epsilon: f64,
    metrics: &[String],
) -> BudgetCell {
    let fail = |e: &Error| {
        config
            .protocol
            .strategies
            .iter()
            .map(|&strategy| CellRecord {
                strategy,
                epsilon,
                seed: data.seed,
                metrics: BTreeMap::new(),
                assessment: None,
                error: Some(e.to_string()),
            })
            .collect()
    };
    let mech = match ReferenceMechanism::new(config.noise.mechanism, epsilon, config.noise.c) {
        Ok(m) => m,
        Err(e) => {
            return BudgetCell {
                seed: data.seed,
                epsilon,
                records: fail(&e),
                moments: Err(e),
                mle: None,
            }
        }
    };
    let noise = NoiseConfig {
        mechanism: mech,
        seed: data.seed,
        target: config.noise.target,
    };
    // the perturbation pipeline noises the planted sensitive regions; the
    // strategies decide which features are assessed
    let (perturbed, triples) = match perturb_sensitive(&data.bundle, &data.planted, &noise) {
        Ok(p) => p,
        Err(e) => {
            return BudgetCell {
                seed: data.seed,
                epsilon,
                records: fail(&e),
                moments: Err(e),
                mle: None,
            }
        }
    };
    let want = |m: &str| metrics.iter().any(|x| x == m);
    let hist = config.histogram.to_config(mech.scale());

    let baselines = (|| -> Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        let (a, b) = (&data.bundle, &perturbed);
        if want("rmse") {
            m.insert("rmse".into(), rmse(a, b)?);
        }
        if want("deviation") {
            m.insert("deviation".into(), deviation(a, b)?);
        }
        if want("chi_square") {
            m.insert("chi_square".into(), chi_square(a, b, &hist)?);
        }
        if want("kl") {
            m.insert("kl".into(), kl_divergence(a, b, &hist)?);
        }
        if want("mmd") {
            m.insert(
                "mmd".into(),
                mmd_rbf(
                    &stacked_vectors(a)?,
                    &stacked_vectors(b)?,
                    Bandwidth::Median,
                )?,
            );
        }
        if want("wass1") {
            m.insert("wass1".into(), wasserstein1(a, b)?);
        }
        Ok(m)
    })();
    let mle = noise_mle(&residuals(&triples), config.noise.mechanism, config.noise.c).ok();

    let reference = ReferenceMechanism::new(config.reference_family(), epsilon, config.noise.c)
        .expect("validated budget");
    let assess_cfg = AssessConfig {
        em: config.em,
        reference_seed: reference_seed(data.seed),
        layers: None,
    };
    let extra = config.extra_metric();
    let records = config
        .protocol
        .strategies
        .iter()
        .map(|&strategy| {
            let grouping = &data.groupings[&strategy];
            let cell = (|| -> Result<(BTreeMap<String, f64>, Assessment)> {
                let mut m = baselines.as_ref().map_err(clone_err)?.clone();
                let a = empa_assess(&data.bundle, &perturbed, grouping, &reference, &assess_cfg)?;
                for (name, v) in [
                    ("bas", a.bas),
                    ("bias_ref", a.bias_ref),
                    ("bias_uniform", a.bias_uniform),
                ] {
                    if want(name) {
                        m.insert(name.into(), v);
                    }
                }
                if let Some(name) = extra.as_ref().filter(|n| want(n)) {
                    let cfg = AssessConfig {
                        em: EMConfig {
                            k: config.protocol.extra_k,
                            ..config.em
                        },
                        ..assess_cfg.clone()
                    };
                    let b = empa_assess(&data.bundle, &perturbed, grouping, &reference, &cfg)?;
                    m.insert(name.clone(), b.bias_uniform);
                }
                if want("noise_mle_eps") {
                    if let Some(e) = mle {
                        m.insert("noise_mle_eps".into(), e);
                    }
                }
                Ok((m, a))
            })();
            match cell {
                Ok((metrics, a)) => CellRecord {
                    strategy,
                    epsilon,
                    seed: data.seed,
                    metrics,
                    assessment: Some(a),
                    error: None,
                },
                Err(e) => CellRecord {
                    strategy,
                    epsilon,
                    seed: data.seed,
                    metrics: BTreeMap::new(),
                    assessment: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    BudgetCell {
        seed: data.seed,
        epsilon,
        records,
        moments: moment_features(&data.bundle, &perturbed, &data.planted),
        mle,
    }
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidInput(e.to_string())
}

fn rmse_of(pairs: &[EpsilonEstimate]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let s: f64 = pairs.iter().map(|p| (p.estimate - p.epsilon).powi(2)).sum();
    Some((s / pairs.len() as f64).sqrt())
}

fn moment_reg_loo(cells: &[BudgetCell]) -> (Vec<EpsilonEstimate>, Result<f64>) {
    let seeds: BTreeSet<u64> = cells.iter().map(|c| c.seed).collect();
    if seeds.len() < 2 {
        return (
            Vec::new(),
            Err(Error::InsufficientData {
                needed: 2,
                got: seeds.len(),
            }),
        );
    }
    let mut preds = Vec::new();
    for &held in &seeds {
        let train = cells
            .iter()
            .filter(|c| c.seed != held)
            .filter_map(|c| c.moments.as_ref().ok().map(|f| (f.clone(), c.epsilon)))
            .collect::<Vec<_>>();
        let model = match moment_reg_fit(&train) {
            Ok(m) => m,
            Err(e) => return (preds, Err(e)),
        };
        for c in cells.iter().filter(|c| c.seed == held) {
            if let Ok(f) = &c.moments {
                match moment_reg_predict(&model, f) {
                    Ok(estimate) => preds.push(EpsilonEstimate {
                        seed: c.seed,
                        epsilon: c.epsilon,
                        estimate,
                    }),
                    Err(e) => return (preds, Err(e)),
                }
            }
        }
    }
    let r = rmse_of(&preds).ok_or(Error::InsufficientData { needed: 1, got: 0 });
    (preds, r)
}

/// Key order for report rows: strategy name, ε, seed.
fn cell_order(a: &CellRecord, b: &CellRecord) -> std::cmp::Ordering {
    a.strategy
        .to_string()
        .cmp(&b.strategy.to_string())
        .then(a.epsilon.total_cmp(&b.epsilon))
        .then(a.seed.cmp(&b.seed))
}

/// Run every (seed, ε, strategy) cell: generate, group, perturb, assess and
/// score. Cells run in parallel; the report is assembled in key order, so
/// the output does not depend on scheduling.
pub fn run_protocol(config: &ProtocolConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let metrics = config.selected_metrics()?;
    let seeds = config.protocol.seeds.clone();
    let prepared: Vec<SeedData> = seeds
        .par_iter()
        .map(|&s| prepare_seed(config, s))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, f64)> = (0..prepared.len())
        .flat_map(|i| config.protocol.epsilons.iter().map(move |&e| (i, e)))
        .collect();
    let budget_cells: Vec<BudgetCell> = jobs
        .par_iter()
        .map(|&(i, e)| run_budget(config, &prepared[i], e, &metrics))
        .collect();

    let mut cells: Vec<CellRecord> = budget_cells
        .iter()
        .flat_map(|b| b.records.clone())
        .collect();
    cells.sort_by(cell_order);

    let mut aggregates = Vec::new();
    let mut strategies: Vec<Strategy> = config.protocol.strategies.clone();
    strategies.sort_by_key(|s| s.to_string());
    strategies.dedup();
    let mut epsilons = config.protocol.epsilons.clone();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let mut metric_keys = metrics.clone();
    metric_keys.sort();
    for &s in &strategies {
        for &e in &epsilons {
            for m in &metric_keys {
                let v: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.strategy == s && c.epsilon == e)
                    .filter_map(|c| c.metrics.get(m).copied())
                    .collect();
                if let Ok(stats) = aggregate(&v) {
                    aggregates.push(AggregateRow {
                        strategy: s,
                        epsilon: e,
                        metric: m.clone(),
                        stats,
                    });
                }
            }
        }
    }

    let (moment_reg, loo) = moment_reg_loo(&budget_cells);
    let mut mle: Vec<EpsilonEstimate> = budget_cells
        .iter()
        .filter_map(|b| {
            b.mle.map(|estimate| EpsilonEstimate {
                seed: b.seed,
                epsilon: b.epsilon,
                estimate,
            })
        })
        .collect();
    mle.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then(a.seed.cmp(&b.seed)));
    let mut moment_reg = moment_reg;
    moment_reg.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then(a.seed.cmp(&b.seed)));
    let supplementary = Supplementary {
        moment_reg_loo_rmse: loo.as_ref().ok().copied(),
        moment_reg_error: loo.err().map(|e| e.to_string()),
        moment_reg,
        noise_mle_rmse: rmse_of(&mle),
        noise_mle: mle,
    };

    Ok(ExperimentReport {
        config: config.clone(),
        cells,
        aggregates,
        supplementary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub family: NoiseFamily,
    pub c: f64,
    pub em: EMConfig,
    pub synthetic: SyntheticConfig,
    /// Candidate budgets `10^x` for x from `log10_lo` to `log10_hi`.
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub log10_step: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.01],
            seeds: vec![0, 1, 2, 3, 4],
            family: NoiseFamily::Laplace,
            c: 1.0,
            em: EMConfig::default(),
            synthetic: SyntheticConfig::default(),
            log10_lo: -4.0,
            log10_hi: 0.0,
            log10_step: 0.05,
        }
    }
}

impl AblationConfig {
    pub fn grid(&self) -> Vec<f64> {
        let steps = ((self.log10_hi - self.log10_lo) / self.log10_step).round() as i64;
        (0..=steps)
            .map(|i| 10f64.powf(self.log10_lo + i as f64 * self.log10_step))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub epsilon: f64,
    /// Budget whose reference fit is closest (lowest BAS) to the observed fit.
    pub full_estimate: f64,
    /// `c / std(v − t)`, without any mixture comparison.
    pub without_empa_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// rMSE of `log10(ε̂/ε)` for the full pipeline.
    pub full_rmse: f64,
    pub without_empa_rmse: f64,
}

/// Budget-alignment proxy with and without the mixture assessment.
///
/// The full pipeline scans a budget grid and keeps the candidate whose
/// reference fit has the lowest BAS against the observed fit (one set of
/// unit reference draws, rescaled per candidate). The reduced pipeline
/// reads the budget off the residual standard deviation.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationReport> {
    let grid = config.grid();
    let jobs: Vec<(u64, f64)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.epsilons.iter().map(move |&e| (s, e)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, epsilon)| -> Result<AblationRun> {
            let (bundle, _) = generate_synthetic(&SyntheticConfig {
                seed,
                ..config.synthetic
            })?;
            let planted = GroupingResult::from_flags(&bundle)?;
            let mech = ReferenceMechanism::new(config.family, epsilon, config.c)?;
            let (_, triples) = perturb_sensitive(&bundle, &planted, &NoiseConfig::new(mech, seed))?;
            let t = Matrix::vstack(&triples.iter().map(|x| x.t.clone()).collect::<Vec<_>>())?;
            let v = Matrix::vstack(&triples.iter().map(|x| x.v.clone()).collect::<Vec<_>>())?;
            let theta = crate::empa::canonicalize(&em_fit(&v, &config.em)?);
            let ref_seed = reference_seed(seed);
            let mut best = (f64::INFINITY, grid[0]);
            for &cand in &grid {
                let m = ReferenceMechanism::new(config.family, cand, config.c)?;
                let blocks: Vec<Matrix> = triples
                    .iter()
                    .map(|x| {
                        let mut r = x.t.clone();
                        let u = noise_block(
                            &m,
                            ref_seed,
                            TAG_NOISE,
                            x.layer_index as u64,
                            r.rows(),
                            r.cols(),
                        );
                        for (a, b) in r.as_mut_slice().iter_mut().zip(u.as_slice()) {
                            *a += b;
                        }
                        r
                    })
                    .collect();
                let theta_ref =
                    crate::empa::canonicalize(&em_fit(&Matrix::vstack(&blocks)?, &config.em)?);
                let score = crate::empa::bas(&theta, &theta_ref)?;
                if score < best.0 {
                    best = (score, cand);
                }
            }
            let delta: Vec<f64> = v
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(a, b)| a - b)
                .collect();
            Ok(AblationRun {
                seed,
                epsilon,
                full_estimate: best.1,
                without_empa_estimate: config.c / std_pop(&delta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let score = |f: fn(&AblationRun) -> f64| {
        let s: f64 = runs
            .iter()
            .map(|r| (f(r) / r.epsilon).log10().powi(2))
            .sum();
        (s / runs.len().max(1) as f64).sqrt()
    };
    Ok(AblationReport {
        full_rmse: score(|r| r.full_estimate),
        without_empa_rmse: score(|r| r.without_empa_estimate),
        runs,
    })
}
