//! EM-based privacy assessment: diagonal-Gaussian mixture fits on perturbed
//! sensitive features, a reference fit under a declared mechanism, and the
//! parameter-space discrepancy scores between the two.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupingResult, LayeredFeatureBundle, Matrix, ReferenceMechanism};
use crate::noise::noise_block;
use crate::rng::TAG_NOISE;
use crate::stats::{l2_norm, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EMConfig {
    pub k: usize,
    pub rel_ll_tolerance: f64,
    pub max_iterations: usize,
    pub variance_floor: f64,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            k: 4,
            rel_ll_tolerance: 1e-5,
            max_iterations: 100,
            variance_floor: 1e-6,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidInput(
                "mixture needs at least one component".into(),
            ));
        }
        if self.rel_ll_tolerance.is_nan() || self.rel_ll_tolerance <= 0.0 {
            return Err(Error::InvalidInput("EM tolerance must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput(
                "EM needs at least one iteration".into(),
            ));
        }
        if self.variance_floor.is_nan() || self.variance_floor <= 0.0 {
            return Err(Error::InvalidInput(
                "variance floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub k: usize,
    pub lambda: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    /// Log-likelihood of the returned parameters.
    pub log_likelihood: f64,
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Set when every input vector was identical.
    pub degenerate: bool,
    /// Log-likelihood before each M-step, then of the returned parameters.
    pub ll_trace: Vec<f64>,
}

impl MixtureParams {
    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }
}

/// Responsibilities γ (N × K, row-major) and the log-likelihood under `theta`.
pub struct EStep {
    pub gamma: Matrix,
    pub log_likelihood: f64,
}

impl EStep {
    pub fn effective_counts(&self) -> Vec<f64> {
        let k = self.gamma.cols();
        let mut nk = vec![0.0; k];
        for row in self.gamma.iter_rows() {
            for (a, g) in nk.iter_mut().zip(row) {
                *a += g;
            }
        }
        nk
    }
}

pub fn e_step(v: &Matrix, lambda: &[f64], mu: &[Vec<f64>], sigma2: &[Vec<f64>]) -> EStep {
    let k = lambda.len();
    let d = v.cols();
    // per-component constant: ln λ_k − ½ Σ_a ln(2π σ²_ka)
    let consts: Vec<f64> = (0..k)
        .map(|c| lambda[c].ln() - 0.5 * sigma2[c].iter().map(|s| (2.0 * PI * s).ln()).sum::<f64>())
        .collect();
    let mut gamma = Matrix::zeros(v.rows(), k);
    let mut ll = 0.0;
    let mut logp = vec![0.0; k];
    for (j, x) in v.iter_rows().enumerate() {
        for c in 0..k {
            let mut q = 0.0;
            for a in 0..d {
                let z = x[a] - mu[c][a];
                q += z * z / sigma2[c][a];
            }
            logp[c] = consts[c] - 0.5 * q;
        }
        let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logp.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        ll += lse;
        for (g, l) in gamma.row_mut(j).iter_mut().zip(&logp) {
            *g = (l - lse).exp();
        }
    }
    EStep {
        gamma,
        log_likelihood: ll,
    }
}

/// Farthest-point sampling starting from row 0; ties go to the lowest id.
fn farthest_point_init(v: &Matrix, k: usize) -> Vec<Vec<f64>> {
    let mut centres = vec![v.row(0).to_vec()];
    let mut dist: Vec<f64> = v.iter_rows().map(|x| sq_dist(x, v.row(0))).collect();
    while centres.len() < k {
        let mut best = 0;
        for (j, &d) in dist.iter().enumerate() {
            if d > dist[best] {
                best = j;
            }
        }
        let c = v.row(best).to_vec();
        for (dj, x) in dist.iter_mut().zip(v.iter_rows()) {
            *dj = dj.min(sq_dist(x, &c));
        }
        centres.push(c);
    }
    centres
}

fn column_variance(v: &Matrix) -> Vec<f64> {
    let n = v.rows() as f64;
    (0..v.cols())
        .map(|a| {
            let m = v.iter_rows().map(|x| x[a]).sum::<f64>() / n;
            v.iter_rows().map(|x| (x[a] - m) * (x[a] - m)).sum::<f64>() / n
        })
        .collect()
}

/// Fit a K-component diagonal-Gaussian mixture by EM.
///
/// Initialization is deterministic: uniform weights, farthest-point means
/// and the global per-dimension variance. Iteration stops when the relative
/// log-likelihood improvement falls below the tolerance or after
/// `max_iterations` M-steps.
pub fn em_fit(v: &Matrix, config: &EMConfig) -> Result<MixtureParams> {
    config.validate()?;
    let (n, d, k) = (v.rows(), v.cols(), config.k);
    if n < k || n == 0 {
        return Err(Error::InsufficientData {
            needed: k.max(1),
            got: n,
        });
    }
    let floor = config.variance_floor;
    let degenerate = v.iter_rows().all(|x| x == v.row(0));

    let mut lambda = vec![1.0 / k as f64; k];
    let mut mu = farthest_point_init(v, k);
    let global: Vec<f64> = column_variance(v)
        .into_iter()
        .map(|s| s.max(floor))
        .collect();
    let mut sigma2 = vec![global; k];

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let e = e_step(v, &lambda, &mu, &sigma2);
        let ll = e.log_likelihood;
        if let Some(&prev) = trace.last() {
            let rel = (ll - prev) / f64::abs(prev).max(f64::MIN_POSITIVE);
            if rel < config.rel_ll_tolerance {
                converged = true;
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);
        if iterations == config.max_iterations {
            break;
        }

        // M-step
        let nk = e.effective_counts();
        for c in 0..k {
            lambda[c] = nk[c] / n as f64;
            if nk[c] <= 1e-300 {
                continue;
            }
            let mut m = vec![0.0; d];
            for (x, g) in v.iter_rows().zip(e.gamma.iter_rows()) {
                for a in 0..d {
                    m[a] += g[c] * x[a];
                }
            }
            m.iter_mut().for_each(|x| *x /= nk[c]);
            let mut s = vec![0.0; d];
            for (x, g) in v.iter_rows().zip(e.gamma.iter_rows()) {
                for a in 0..d {
                    let z = x[a] - m[a];
                    s[a] += g[c] * z * z;
                }
            }
            s.iter_mut().for_each(|x| *x = (*x / nk[c]).max(floor));
            mu[c] = m;
            sigma2[c] = s;
        }
        iterations += 1;
    }

    Ok(MixtureParams {
        k,
        lambda,
        mu,
        sigma2,
        log_likelihood: *trace.last().expect("at least one evaluation"),
        iterations,
        converged,
        degenerate,
        ll_trace: trace,
    })
}

/// Sort components by weight descending, ties by first mean coordinate.
pub fn canonicalize(theta: &MixtureParams) -> MixtureParams {
    let mut order: Vec<usize> = (0..theta.k).collect();
    order.sort_by(|&a, &b| {
        theta.lambda[b].total_cmp(&theta.lambda[a]).then_with(|| {
            let ma = theta.mu[a].first().copied().unwrap_or(0.0);
            let mb = theta.mu[b].first().copied().unwrap_or(0.0);
            ma.total_cmp(&mb)
        })
    });
    MixtureParams {
        lambda: order.iter().map(|&c| theta.lambda[c]).collect(),
        mu: order.iter().map(|&c| theta.mu[c].clone()).collect(),
        sigma2: order.iter().map(|&c| theta.sigma2[c].clone()).collect(),
        ..theta.clone()
    }
}

/// `[λ; μ_1..μ_K; σ²_1..σ²_K]`, length `K + 2Kd`.
pub fn psi(theta: &MixtureParams) -> Vec<f64> {
    let mut out = theta.lambda.clone();
    out.extend(theta.mu.iter().flatten());
    out.extend(theta.sigma2.iter().flatten());
    out
}

fn check_same(a: &MixtureParams, b: &MixtureParams) -> Result<()> {
    if a.k != b.k || a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mixtures differ in shape: K={} d={} vs K={} d={}",
            a.k,
            a.dim(),
            b.k,
            b.dim()
        )));
    }
    Ok(())
}

/// Budget-alignment score: ‖ψ(Θ) − ψ(Θ_ref)‖ on canonicalized parameters.
pub fn bas(theta: &MixtureParams, theta_ref: &MixtureParams) -> Result<f64> {
    check_same(theta, theta_ref)?;
    let a = psi(&canonicalize(theta));
    let b = psi(&canonicalize(theta_ref));
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(l2_norm(&diff))
}

pub fn bias_ref(lambda: &[f64], lambda_ref: &[f64]) -> Result<f64> {
    if lambda.len() != lambda_ref.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights vs {} weights",
            lambda.len(),
            lambda_ref.len()
        )));
    }
    let mut a = lambda.to_vec();
    let mut b = lambda_ref.to_vec();
    // weight-only comparison is taken after sorting, matching canonical order
    a.sort_by(|x, y| y.total_cmp(x));
    b.sort_by(|x, y| y.total_cmp(x));
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(l2_norm(&diff))
}

pub fn bias_uniform(lambda: &[f64]) -> f64 {
    let u = 1.0 / lambda.len() as f64;
    lambda.iter().map(|l| (l - u) * (l - u)).sum::<f64>().sqrt()
}

/// Reference fit: `v_ref = t + u_ref` with `u_ref` drawn from the same
/// stream layout as observed perturbation, then the same EM procedure.
pub fn fit_reference(
    t: &Matrix,
    mechanism: &ReferenceMechanism,
    config: &EMConfig,
    seed: u64,
) -> Result<MixtureParams> {
    let u = noise_block(mechanism, seed, TAG_NOISE, 0, t.rows(), t.cols());
    em_fit(&add(t, &u), config)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (x, y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    pub em: EMConfig,
    /// Seed of the reference draws. Reference noise for layer `i` comes from
    /// the same per-layer stream layout as observed perturbation, so equal
    /// seeds and mechanisms reproduce the observed data exactly.
    pub reference_seed: u64,
    /// Layers to assess; `None` selects all.
    pub layers: Option<BTreeSet<usize>>,
}

/// One mixture comparison over a set of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentFit {
    pub layers: Vec<usize>,
    pub n_vectors: usize,
    pub theta: MixtureParams,
    pub theta_ref: MixtureParams,
    pub bas: f64,
    pub bias_ref: f64,
    pub bias_uniform: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    /// True when all selected layers were pooled into one fit.
    pub pooled: bool,
    /// Mean over `fits` (a single entry when pooled).
    pub bas: f64,
    pub bias_ref: f64,
    pub bias_uniform: f64,
    pub fits: Vec<AssessmentFit>,
}

struct Block {
    layer: usize,
    v: Matrix,
    v_ref: Matrix,
}

fn compare(layers: Vec<usize>, v: &Matrix, v_ref: &Matrix, em: &EMConfig) -> Result<AssessmentFit> {
    let theta = canonicalize(&em_fit(v, em)?);
    let theta_ref = canonicalize(&em_fit(v_ref, em)?);
    Ok(AssessmentFit {
        layers,
        n_vectors: v.rows(),
        bas: bas(&theta, &theta_ref)?,
        bias_ref: bias_ref(&theta.lambda, &theta_ref.lambda)?,
        bias_uniform: bias_uniform(&theta.lambda),
        theta,
        theta_ref,
    })
}

/// Fit the observed sensitive features and a reference-perturbed copy of the
/// same subset, then score the discrepancy. Layers are pooled when their
/// dimensions agree; otherwise each non-empty layer is fitted separately and
/// the scores are averaged.
pub fn empa_assess(
    original: &LayeredFeatureBundle,
    perturbed: &LayeredFeatureBundle,
    grouping: &GroupingResult,
    mechanism: &ReferenceMechanism,
    config: &AssessConfig,
) -> Result<Assessment> {
    original.check_same_shape(perturbed)?;
    grouping.check_matches(original)?;

    let mut blocks = Vec::new();
    for ((lo, lp), part) in original
        .layers
        .iter()
        .zip(&perturbed.layers)
        .zip(&grouping.partitions)
    {
        if config
            .layers
            .as_ref()
            .is_some_and(|s| !s.contains(&lo.index))
        {
            continue;
        }
        let ids = part.sensitive_ids();
        let t = lo.select(ids);
        let u = noise_block(
            mechanism,
            config.reference_seed,
            TAG_NOISE,
            lo.index as u64,
            ids.len(),
            lo.dim(),
        );
        blocks.push(Block {
            layer: lo.index,
            v: lp.select(ids),
            v_ref: add(&t, &u),
        });
    }
    if blocks.iter().all(|b| b.v.is_empty()) {
        return Err(Error::NoSensitiveFeatures);
    }

    let same_dim = blocks.windows(2).all(|w| w[0].v.cols() == w[1].v.cols());
    let fits = if same_dim {
        let v = Matrix::vstack(&blocks.iter().map(|b| b.v.clone()).collect::<Vec<_>>())?;
        let v_ref = Matrix::vstack(&blocks.iter().map(|b| b.v_ref.clone()).collect::<Vec<_>>())?;
        vec![compare(
            blocks.iter().map(|b| b.layer).collect(),
            &v,
            &v_ref,
            &config.em,
        )?]
    } else {
        blocks
            .iter()
            .filter(|b| !b.v.is_empty())
            .map(|b| compare(vec![b.layer], &b.v, &b.v_ref, &config.em))
            .collect::<Result<Vec<_>>>()?
    };
    let m = fits.len() as f64;
    Ok(Assessment {
        pooled: same_dim,
        bas: fits.iter().map(|f| f.bas).sum::<f64>() / m,
        bias_ref: fits.iter().map(|f| f.bias_ref).sum::<f64>() / m,
        bias_uniform: fits.iter().map(|f| f.bias_uniform).sum::<f64>() / m,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NoiseFamily;

    fn mixture(lambda: Vec<f64>, mu: Vec<Vec<f64>>, sigma2: Vec<Vec<f64>>) -> MixtureParams {
        MixtureParams {
            k: lambda.len(),
            lambda,
            mu,
            sigma2,
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            degenerate: false,
            ll_trace: vec![],
        }
    }

    #[test]
    fn single_component_is_sample_moments() {
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 1.0]]).unwrap();
        let cfg = EMConfig {
            k: 1,
            ..EMConfig::default()
        };
        let f = em_fit(&v, &cfg).unwrap();
        assert_eq!(f.lambda, vec![1.0]);
        assert!((f.mu[0][0] - 3.0).abs() < 1e-12 && (f.mu[0][1] - 1.0).abs() < 1e-12);
        assert!((f.sigma2[0][0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((f.sigma2[0][1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(f.converged);
    }

    fn two_clusters() -> Matrix {
        let vals: Vec<f64> = (0..200)
            .map(|j| {
                let jitter = ((j * 37) % 21) as f64 / 100.0 - 0.1;
                if j < 100 {
                    jitter
                } else {
                    10.0 + jitter
                }
            })
            .collect();
        Matrix::from_vec(200, 1, vals).unwrap()
    }

    fn ll_1d(v: &Matrix, lam: f64, m1: f64, m2: f64, s2: f64) -> f64 {
        e_step(
            v,
            &[lam, 1.0 - lam],
            &[vec![m1], vec![m2]],
            &[vec![s2], vec![s2]],
        )
        .log_likelihood
    }

    #[test]
    fn separated_clusters_match_grid_oracle() {
        let v = two_clusters();
        let f = canonicalize(
            &em_fit(
                &v,
                &EMConfig {
                    k: 2,
                    ..EMConfig::default()
                },
            )
            .unwrap(),
        );
        let mut means: Vec<f64> = f.mu.iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!(f.lambda.iter().all(|l| (l - 0.5).abs() < 0.02));
        assert!(means[0].abs() < 0.1 && (means[1] - 10.0).abs() < 0.1);

        // brute-force grid over (λ, μ1, μ2) at the fitted common variance
        let s2 = f.sigma2[0][0];
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0, 0.0);
        for li in 0..=20 {
            let lam = 0.4 + li as f64 * 0.01;
            for a in 0..=20 {
                let m1 = -0.1 + a as f64 * 0.01;
                for b in 0..=20 {
                    let m2 = 9.9 + b as f64 * 0.01;
                    let ll = ll_1d(&v, lam, m1, m2, s2);
                    if ll > best.0 {
                        best = (ll, lam, m1, m2);
                    }
                }
            }
        }
        assert!((best.1 - 0.5).abs() <= 0.01);
        assert!((best.2 - means[0]).abs() <= 0.011);
        assert!((best.3 - means[1]).abs() <= 0.011);
        assert!(f.log_likelihood >= best.0 - 1e-6);
    }

    #[test]
    fn converges_before_iteration_cap() {
        let f = em_fit(
            &two_clusters(),
            &EMConfig {
                k: 2,
                ..EMConfig::default()
            },
        )
        .unwrap();
        assert!(f.converged && f.iterations < 100);
        let w = f.ll_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8);
        assert!(w);
    }

    #[test]
    fn too_few_vectors() {
        let v = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            em_fit(&v, &EMConfig::default()),
            Err(Error::InsufficientData { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn identical_vectors_are_flagged() {
        let v = Matrix::from_vec(10, 2, vec![1.5; 20]).unwrap();
        let f = em_fit(&v, &EMConfig::default()).unwrap();
        assert!(f.degenerate);
        assert!((f.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f.sigma2.iter().flatten().all(|&s| s >= 1e-6));
    }

    #[test]
    fn canonical_order() {
        let m = mixture(
            vec![0.2, 0.8],
            vec![vec![1.0], vec![2.0]],
            vec![vec![3.0], vec![4.0]],
        );
        let c = canonicalize(&m);
        assert_eq!(c.lambda, vec![0.8, 0.2]);
        assert_eq!(c.mu, vec![vec![2.0], vec![1.0]]);
        assert_eq!(c.sigma2, vec![vec![4.0], vec![3.0]]);
        assert_eq!(canonicalize(&c), c);

        let tie = mixture(
            vec![0.5, 0.5],
            vec![vec![3.0], vec![1.0]],
            vec![vec![1.0], vec![2.0]],
        );
        assert_eq!(canonicalize(&tie).mu, vec![vec![1.0], vec![3.0]]);
    }

    #[test]
    fn psi_layout_and_bas() {
        let a = mixture(vec![1.0], vec![vec![2.0]], vec![vec![3.0]]);
        assert_eq!(psi(&a), vec![1.0, 2.0, 3.0]);
        let b = mixture(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        );
        assert_eq!(psi(&b).len(), 10);

        let t = mixture(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]);
        let r = mixture(vec![1.0], vec![vec![0.0]], vec![vec![2.0]]);
        assert!((bas(&t, &r).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bas(&t, &t).unwrap(), 0.0);
        assert_eq!(bas(&t, &r).unwrap(), bas(&r, &t).unwrap());
        assert!(bas(&t, &b).is_err());
    }

    #[test]
    fn bias_values() {
        let u = [0.25; 4];
        assert_eq!(bias_ref(&u, &u).unwrap(), 0.0);
        assert!((bias_ref(&[1.0, 0.0, 0.0, 0.0], &u).unwrap() - 0.75f64.sqrt()).abs() < 1e-12);
        assert!(bias_ref(&[1.0], &u).is_err());
        assert_eq!(bias_uniform(&u), 0.0);
        assert!((bias_uniform(&[1.0, 0.0, 0.0, 0.0]) - 0.8660).abs() < 1e-4);
        assert!((bias_uniform(&[1.0, 0.0, 0.0, 0.0, 0.0]) - 0.8944).abs() < 1e-4);
    }

    #[test]
    fn reference_budget_changes_variances() {
        let t = Matrix::from_vec(50, 1, (0..50).map(|j| (j % 7) as f64).collect()).unwrap();
        let cfg = EMConfig {
            k: 1,
            ..EMConfig::default()
        };
        let m = |eps| ReferenceMechanism::new(NoiseFamily::Gaussian, eps, 1.0).unwrap();
        let a = fit_reference(&t, &m(0.1), &cfg, 3).unwrap();
        let b = fit_reference(&t, &m(0.01), &cfg, 3).unwrap();
        assert!(b.sigma2[0][0] > 50.0 * a.sigma2[0][0]);
    }
}
