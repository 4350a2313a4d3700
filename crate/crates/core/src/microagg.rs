//! MDAV microaggregation and the normalized certainty penalty (NCP).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Matrix;
use crate::stats::{l2_normalize, quantile_sorted, sq_dist};

/// Floor applied to per-dimension ranges so constant dimensions do not
/// divide by zero.
pub const RANGE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub ranges: Vec<f64>,
    pub q_low: f64,
    pub q_high: f64,
}

/// Per-dimension inter-quantile range `q(q_high) − q(q_low)`, floored.
pub fn estimate_ranges(vectors: &Matrix, q_low: f64, q_high: f64) -> Result<RangeEstimate> {
    if !(0.0..=1.0).contains(&q_low) || !(0.0..=1.0).contains(&q_high) || q_low >= q_high {
        return Err(Error::InvalidInput(format!(
            "quantile bounds must satisfy 0 <= q_low < q_high <= 1, got ({q_low}, {q_high})"
        )));
    }
    if vectors.rows() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: vectors.rows(),
        });
    }
    let mut col = vec![0.0; vectors.rows()];
    let ranges = (0..vectors.cols())
        .map(|a| {
            for (dst, row) in col.iter_mut().zip(vectors.iter_rows()) {
                *dst = row[a];
            }
            col.sort_by(f64::total_cmp);
            let r = quantile_sorted(&col, q_high) - quantile_sorted(&col, q_low);
            r.max(RANGE_FLOOR)
        })
        .collect();
    Ok(RangeEstimate {
        ranges,
        q_low,
        q_high,
    })
}

pub fn uniform_weights(dim: usize) -> Vec<f64> {
    vec![1.0 / dim as f64; dim]
}

/// `Σ_a w_a · (max_a − min_a) / R_a` over the member rows of `vectors`.
/// Returns 0 for an empty member list.
pub fn ncp(members: &[usize], vectors: &Matrix, weights: &[f64], ranges: &RangeEstimate) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let d = vectors.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for &j in members {
        for (a, &x) in vectors.row(j).iter().enumerate() {
            lo[a] = lo[a].min(x);
            hi[a] = hi[a].max(x);
        }
    }
    (0..d)
        .map(|a| weights[a] * (hi[a] - lo[a]) / ranges.ranges[a])
        .sum()
}

/// NCP of all rows of `vectors`.
pub fn ncp_all(vectors: &Matrix, weights: &[f64], ranges: &RangeEstimate) -> f64 {
    let ids: Vec<usize> = (0..vectors.rows()).collect();
    ncp(&ids, vectors, weights, ranges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroCluster {
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdavConfig {
    pub k: usize,
    /// Scale every vector to unit ℓ2 norm before measuring distances.
    pub normalize: bool,
}

impl Default for MdavConfig {
    fn default() -> Self {
        Self {
            k: 8,
            normalize: true,
        }
    }
}

pub fn normalize_rows(vectors: &Matrix) -> Matrix {
    let mut out = vectors.clone();
    for i in 0..out.rows() {
        let n = l2_normalize(out.row(i));
        out.row_mut(i).copy_from_slice(&n);
    }
    out
}

fn centroid(ids: &[usize], x: &Matrix) -> Vec<f64> {
    let mut c = vec![0.0; x.cols()];
    for &j in ids {
        for (ca, &v) in c.iter_mut().zip(x.row(j)) {
            *ca += v;
        }
    }
    let n = ids.len().max(1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

/// Remaining id farthest from `p`; ties go to the lowest id. `rem` is kept
/// sorted ascending, so the first strict maximum wins.
fn farthest(rem: &[usize], x: &Matrix, p: &[f64]) -> usize {
    let mut best = rem[0];
    let mut best_d = f64::NEG_INFINITY;
    for &j in rem {
        let d = sq_dist(x.row(j), p);
        if d > best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Remove and return the `k` remaining ids nearest to `p` (ties by id).
fn take_nearest(rem: &mut Vec<usize>, x: &Matrix, p: &[f64], k: usize) -> Vec<usize> {
    let mut by_dist: Vec<(f64, usize)> = rem.iter().map(|&j| (sq_dist(x.row(j), p), j)).collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = by_dist[..k].iter().map(|&(_, j)| j).collect();
    picked.sort_unstable();
    rem.retain(|j| picked.binary_search(j).is_err());
    picked
}

/// Maximum-distance-to-average-vector microaggregation.
///
/// While at least `2k` records remain: take the centroid, its farthest
/// record `x_r`, the record `x_s` farthest from `x_r`, and cut the `k`
/// nearest records around `x_r` and then around `x_s`. A remainder of
/// `k..2k` records becomes one cluster; a smaller remainder joins the cluster
/// whose centroid is nearest to the remainder's centroid.
pub fn mdav(vectors: &Matrix, config: &MdavConfig) -> Result<Vec<MicroCluster>> {
    let k = config.k;
    if k < 1 {
        return Err(Error::InvalidInput("MDAV needs k >= 1".into()));
    }
    let n = vectors.rows();
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    let normalized;
    let x = if config.normalize {
        normalized = normalize_rows(vectors);
        &normalized
    } else {
        vectors
    };

    let mut rem: Vec<usize> = (0..n).collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    while rem.len() >= 2 * k {
        let c = centroid(&rem, x);
        let r = farthest(&rem, x, &c);
        let xr = x.row(r).to_vec();
        let s = farthest(&rem, x, &xr);
        let xs = x.row(s).to_vec();
        groups.push(take_nearest(&mut rem, x, &xr, k));
        groups.push(take_nearest(&mut rem, x, &xs, k));
    }
    if rem.len() >= k {
        groups.push(rem);
    } else if !rem.is_empty() {
        let c = centroid(&rem, x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (gi, g) in groups.iter().enumerate() {
            let d = sq_dist(&centroid(g, x), &c);
            if d < best_d {
                best_d = d;
                best = gi;
            }
        }
        groups[best].extend(rem);
        groups[best].sort_unstable();
    }

    Ok(groups
        .into_iter()
        .map(|members| MicroCluster {
            centroid: centroid(&members, x),
            members,
        })
        .collect())
}
