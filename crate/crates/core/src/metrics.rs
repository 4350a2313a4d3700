//! Baseline discrepancy metrics and the two ε-recovery baselines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microagg::{estimate_ranges, ncp_all, uniform_weights};
use crate::model::{GroupingResult, LayeredFeatureBundle, Matrix, NoiseFamily};
use crate::stats::{mean, sq_dist, std_pop};

fn paired_values<'a>(
    a: &'a LayeredFeatureBundle,
    b: &'a LayeredFeatureBundle,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    a.check_same_shape(b)?;
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .flat_map(|(x, y)| x.values().iter().copied().zip(y.values().iter().copied())))
}

/// Root mean squared difference over every entry of every layer.
pub fn rmse(a: &LayeredFeatureBundle, b: &LayeredFeatureBundle) -> Result<f64> {
    let n = a.n_values();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = paired_values(a, b)?.map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / n as f64).sqrt())
}

/// Mean absolute difference over every entry.
pub fn deviation(a: &LayeredFeatureBundle, b: &LayeredFeatureBundle) -> Result<f64> {
    let n = a.n_values();
    if n == 0 {
        return Ok(0.0);
    }
    let s: f64 = paired_values(a, b)?.map(|(x, y)| (x - y).abs()).sum();
    Ok(s / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RangePolicy {
    /// Original data's `[min, max]` widened by `margin` on both sides.
    FromOriginal {
        margin: f64,
    },
    Fixed {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub bins: usize,
    pub range: RangePolicy,
    /// Chi-square smoothing, as a fraction of the sample size added to every
    /// expected count.
    pub alpha_chi: f64,
    /// K-L smoothing added to every bin probability before renormalizing.
    pub alpha_kl: f64,
}

impl HistogramConfig {
    /// 64 bins over the original range widened by `3·c/ε`.
    pub fn for_budget(c: f64, epsilon: f64) -> Self {
        Self {
            bins: 64,
            range: RangePolicy::FromOriginal {
                margin: 3.0 * c / epsilon,
            },
            alpha_chi: 1e-6,
            alpha_kl: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::InvalidInput(
                "histograms need at least 2 bins".into(),
            ));
        }
        if !(self.alpha_chi > 0.0 && self.alpha_kl > 0.0) {
            return Err(Error::InvalidInput(
                "histogram smoothing must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Equal-width bin counts over `[lo, hi]`; the right edge belongs to the
/// last bin and values outside the range are not counted.
pub fn histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for v in values {
        if !(v >= lo && v <= hi) {
            continue;
        }
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1.0;
    }
    counts
}

fn shared_histograms(
    original: &LayeredFeatureBundle,
    perturbed: &LayeredFeatureBundle,
    cfg: &HistogramConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    original.check_same_shape(perturbed)?;
    let all = |b: &LayeredFeatureBundle| {
        b.layers
            .iter()
            .flat_map(|l| l.values().iter().copied())
            .collect::<Vec<_>>()
    };
    let (a, b) = (all(original), all(perturbed));
    let (lo, hi) = match cfg.range {
        RangePolicy::Fixed { lo, hi } => (lo, hi),
        RangePolicy::FromOriginal { margin } => {
            let mn = a.iter().copied().fold(f64::INFINITY, f64::min);
            let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mn - margin, mx + margin)
        }
    };
    Ok((
        histogram(a.into_iter(), lo, hi, cfg.bins),
        histogram(b.into_iter(), lo, hi, cfg.bins),
    ))
}

/// `Σ_b (O_b − E_b)² / (E_b + α)` for given counts.
pub fn chi_square_counts(observed: &[f64], expected: &[f64], alpha: f64) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e) * (o - e) / (e + alpha))
        .sum()
}

/// Chi-square statistic of the perturbed value histogram (observed) against
/// the original one (expected). The smoothing term is `alpha_chi · N`.
pub fn chi_square(
    original: &LayeredFeatureBundle,
    perturbed: &LayeredFeatureBundle,
    cfg: &HistogramConfig,
) -> Result<f64> {
    let (e, o) = shared_histograms(original, perturbed, cfg)?;
    let n = original.n_values() as f64;
    Ok(chi_square_counts(&o, &e, cfg.alpha_chi * n))
}

/// `Σ p ln(p/q)` after normalizing both count vectors, adding `alpha` to
/// every bin and renormalizing.
pub fn kl_counts(p_counts: &[f64], q_counts: &[f64], alpha: f64) -> f64 {
    let smooth = |c: &[f64]| {
        let total: f64 = c.iter().sum();
        let mut p: Vec<f64> = c
            .iter()
            .map(|x| if total > 0.0 { x / total } else { 0.0 } + alpha)
            .collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    };
    let (p, q) = (smooth(p_counts), smooth(q_counts));
    p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum()
}

/// K-L divergence of the perturbed value distribution from the original one,
/// `KL(perturbed ‖ original)`, on shared-bin histograms.
pub fn kl_divergence(
    original: &LayeredFeatureBundle,
    perturbed: &LayeredFeatureBundle,
    cfg: &HistogramConfig,
) -> Result<f64> {
    let (q, p) = shared_histograms(original, perturbed, cfg)?;
    Ok(kl_counts(&p, &q, cfg.alpha_kl))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median pairwise distance on `A ∪ B`, over at most 2000 points.
    #[default]
    Median,
    Fixed(f64),
}

const MEDIAN_SUBSAMPLE: usize = 2000;

fn median_distance(points: &[&[f64]]) -> f64 {
    let n = points.len();
    let step = if n > MEDIAN_SUBSAMPLE {
        n as f64 / MEDIAN_SUBSAMPLE as f64
    } else {
        1.0
    };
    let m = n.min(MEDIAN_SUBSAMPLE);
    let sub: Vec<&[f64]> = (0..m).map(|i| points[(i as f64 * step) as usize]).collect();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(sub[i], sub[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let len = d.len();
    let (lower, &mut upper, _) = d.select_nth_unstable_by(len / 2, f64::total_cmp);
    if len % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + upper)
    }
}

/// Unbiased squared-MMD (U-statistic) with an RBF kernel `exp(−‖x−y‖²/(2h²))`, clamped at
/// zero, square-rooted.
pub fn mmd_rbf(a: &Matrix, b: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd_rbf_squared(a, b, bandwidth)?.max(0.0).sqrt())
}

/// The raw unbiased estimate, which may be slightly negative.
pub fn mmd_rbf_squared(a: &Matrix, b: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::InvalidInput(
            "MMD needs at least two vectors in each set".into(),
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "MMD sets have dims {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => {
            let pts: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
            median_distance(&pts)
        }
    };
    let h = if h > 0.0 { h } else { 1.0 };
    let g = 1.0 / (2.0 * h * h);
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) * g).exp();

    let within = |m: &Matrix| {
        let mut s = 0.0;
        for i in 0..m.rows() {
            for j in i + 1..m.rows() {
                s += k(m.row(i), m.row(j));
            }
        }
        let n = m.rows() as f64;
        2.0 * s / (n * (n - 1.0))
    };
    // With equal sizes the cross term skips the i = j pairs and sums in the
    // same order as `within`, so A = B gives exactly zero.
    let paired = a.rows() == b.rows();
    let mut cross = 0.0;
    if paired {
        for i in 0..a.rows() {
            for j in i + 1..a.rows() {
                cross += k(a.row(i), b.row(j)) + k(a.row(j), b.row(i));
            }
        }
    } else {
        for x in a.iter_rows() {
            for y in b.iter_rows() {
                cross += k(x, y);
            }
        }
    }
    let pairs = if paired {
        a.rows() * (a.rows() - 1)
    } else {
        a.rows() * b.rows()
    };
    cross /= pairs as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// All vectors of all layers stacked (layers must share one dimension).
pub fn stacked_vectors(bundle: &LayeredFeatureBundle) -> Result<Matrix> {
    Matrix::vstack(
        &bundle
            .layers
            .iter()
            .map(|l| l.to_matrix())
            .collect::<Vec<_>>(),
    )
}

/// Empirical 1-D W1 between equal-size samples: mean |sorted difference|.
pub fn wasserstein1_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "samples of sizes {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// Per-(layer, dimension) 1-D W1, averaged over all dimensions of all layers.
pub fn wasserstein1(a: &LayeredFeatureBundle, b: &LayeredFeatureBundle) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for d in 0..la.dim() {
            let x: Vec<f64> = la.vectors().map(|v| v[d]).collect();
            let y: Vec<f64> = lb.vectors().map(|v| v[d]).collect();
            total += wasserstein1_1d(&x, &y)?;
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// ε estimate from residuals under a declared noise family.
pub fn noise_mle(residuals: &[f64], family: NoiseFamily, c: f64) -> Result<f64> {
    if residuals.len() < 10 {
        return Err(Error::InsufficientData {
            needed: 10,
            got: residuals.len(),
        });
    }
    let scale = match family {
        NoiseFamily::Laplace => mean(&residuals.iter().map(|u| u.abs()).collect::<Vec<_>>()),
        NoiseFamily::Gaussian => mean(&residuals.iter().map(|u| u * u).collect::<Vec<_>>()).sqrt(),
    };
    if scale == 0.0 {
        return Err(Error::ZeroResiduals);
    }
    Ok(c / scale)
}

/// MomentReg features of one run: mean |v−t| and std(v−t) over perturbed
/// entries, then NCP of each layer's perturbed sensitive group measured with
/// the original layer's inter-quantile ranges.
pub fn moment_features(
    original: &LayeredFeatureBundle,
    perturbed: &LayeredFeatureBundle,
    grouping: &GroupingResult,
) -> Result<Vec<f64>> {
    original.check_same_shape(perturbed)?;
    grouping.check_matches(original)?;
    let mut delta = Vec::new();
    let mut ncps = Vec::new();
    for ((lo, lp), part) in original
        .layers
        .iter()
        .zip(&perturbed.layers)
        .zip(&grouping.partitions)
    {
        let ids = part.sensitive_ids();
        let t = lo.select(ids);
        let v = lp.select(ids);
        delta.extend(v.as_slice().iter().zip(t.as_slice()).map(|(v, t)| v - t));
        let ranges = estimate_ranges(&lo.to_matrix(), 0.05, 0.95)?;
        ncps.push(ncp_all(&v, &uniform_weights(lo.dim()), &ranges));
    }
    let mut f = vec![
        mean(&delta.iter().map(|d| d.abs()).collect::<Vec<_>>()),
        std_pop(&delta),
    ];
    f.extend(ncps);
    Ok(f)
}

/// Log-linear least-squares model `ln ε ≈ β₀ + Σ β_i ln f_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRegModel {
    pub coefficients: Vec<f64>,
    pub n_train: usize,
    /// Root mean squared residual of ln ε on the training set.
    pub train_rms_log: f64,
}

fn design_row(features: &[f64]) -> Result<Vec<f64>> {
    let mut row = vec![1.0];
    for &f in features {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "moment features must be positive and finite, got {f}"
            )));
        }
        row.push(f.ln());
    }
    Ok(row)
}

pub fn moment_reg_fit(runs: &[(Vec<f64>, f64)]) -> Result<MomentRegModel> {
    let mut eps: Vec<f64> = runs.iter().map(|r| r.1).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    if eps.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: eps.len(),
        });
    }
    let p = runs[0].0.len() + 1;
    let rows = runs
        .iter()
        .map(|(f, _)| {
            if f.len() + 1 != p {
                return Err(Error::ShapeMismatch(
                    "runs have differing feature counts".into(),
                ));
            }
            design_row(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = DMatrix::from_fn(runs.len(), p, |i, j| rows[i][j]);
    let y = DVector::from_iterator(runs.len(), runs.iter().map(|r| r.1.ln()));

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * runs.len().max(p) as f64 * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < p {
        return Err(Error::RankDeficient { rank, cols: p });
    }
    let beta = svd
        .solve(&y, tol)
        .map_err(|e| Error::InvalidInput(format!("least squares failed: {e}")))?;
    let resid = &x * &beta - &y;
    Ok(MomentRegModel {
        coefficients: beta.iter().copied().collect(),
        n_train: runs.len(),
        train_rms_log: (resid.norm_squared() / runs.len() as f64).sqrt(),
    })
}

pub fn moment_reg_predict(model: &MomentRegModel, features: &[f64]) -> Result<f64> {
    let row = design_row(features)?;
    if row.len() != model.coefficients.len() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} features, got {}",
            model.coefficients.len() - 1,
            features.len()
        )));
    }
    Ok(row
        .iter()
        .zip(&model.coefficients)
        .map(|(x, b)| x * b)
        .sum::<f64>()
        .exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BundleKind, Layer};

    fn bundle_1d(values: Vec<f64>) -> LayeredFeatureBundle {
        LayeredFeatureBundle::new(
            vec![Layer::new(1, 1, values).unwrap()],
            BundleKind::Original,
        )
    }

    #[test]
    fn chi_square_hand_value() {
        assert!((chi_square_counts(&[10.0, 0.0], &[5.0, 5.0], 1e-12) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn kl_hand_value() {
        let v = kl_counts(&[3.0, 1.0], &[1.0, 1.0], 1e-15);
        assert!((v - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn identical_inputs_score_zero() {
        let a = bundle_1d((0..100).map(|i| (i as f64).sin()).collect());
        let cfg = HistogramConfig::for_budget(1.0, 0.1);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(deviation(&a, &a).unwrap(), 0.0);
        assert_eq!(chi_square(&a, &a, &cfg).unwrap(), 0.0);
        assert!(kl_divergence(&a, &a, &cfg).unwrap().abs() < 1e-9);
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        let m = a.layers[0].to_matrix();
        assert!(mmd_rbf_squared(&m, &m, Bandwidth::Median).unwrap() >= -1e-6);
        assert!(mmd_rbf(&m, &m, Bandwidth::Median).unwrap() < 1e-3);
    }

    #[test]
    fn wasserstein_translation() {
        let x: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 2.5).collect();
        assert_eq!(wasserstein1_1d(&x, &y).unwrap(), 2.5);
    }

    #[test]
    fn histogram_edges() {
        let h = histogram([0.0, 0.5, 1.0, 1.5].into_iter(), 0.0, 1.0, 2);
        assert_eq!(h, vec![1.0, 2.0]);
    }

    #[test]
    fn median_of_pairwise_distances() {
        let pts: [&[f64]; 3] = [&[0.0], &[1.0], &[3.0]];
        // distances 1, 3, 2
        assert_eq!(median_distance(&pts), 2.0);
        let pts: [&[f64]; 2] = [&[0.0], &[4.0]];
        assert_eq!(median_distance(&pts), 4.0);
    }

    #[test]
    fn mmd_errors() {
        let a = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let b = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(mmd_rbf(&a, &b, Bandwidth::Median).is_err());
        let c = Matrix::from_vec(2, 2, vec![0.0; 4]).unwrap();
        assert!(mmd_rbf(&b, &c, Bandwidth::Median).is_err());
    }

    #[test]
    fn noise_mle_exact_and_errors() {
        let r: Vec<f64> = (0..20)
            .map(|i| if i % 2 == 0 { 4.0 } else { -4.0 })
            .collect();
        assert_eq!(noise_mle(&r, NoiseFamily::Laplace, 1.0).unwrap(), 0.25);
        assert_eq!(noise_mle(&r, NoiseFamily::Gaussian, 2.0).unwrap(), 0.5);
        assert!(matches!(
            noise_mle(&[0.0; 12], NoiseFamily::Laplace, 1.0),
            Err(Error::ZeroResiduals)
        ));
        assert!(noise_mle(&[1.0; 5], NoiseFamily::Laplace, 1.0).is_err());
    }

    #[test]
    fn moment_reg_interpolates_log_linear_data() {
        // ln ε = 0.5 − 1.0·ln f1 + 0.25·ln f2, exactly
        let runs: Vec<(Vec<f64>, f64)> =
            [(1.0, 2.0), (2.0, 1.0), (4.0, 3.0), (8.0, 5.0), (3.0, 7.0)]
                .iter()
                .map(|&(f1, f2)| (vec![f1, f2], (0.5 - f64::ln(f1) + 0.25 * f64::ln(f2)).exp()))
                .collect();
        let m = moment_reg_fit(&runs).unwrap();
        for (f, eps) in &runs {
            let p = moment_reg_predict(&m, f).unwrap();
            assert!((p / eps - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn moment_reg_rejects_constant_features_and_single_budget() {
        let runs = vec![(vec![2.0], 0.1), (vec![2.0], 0.01), (vec![2.0], 0.001)];
        assert!(matches!(
            moment_reg_fit(&runs),
            Err(Error::RankDeficient { .. })
        ));
        let runs = vec![(vec![1.0], 0.1), (vec![2.0], 0.1)];
        assert!(matches!(
            moment_reg_fit(&runs),
            Err(Error::InsufficientData { .. })
        ));
    }
}
