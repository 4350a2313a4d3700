//! Two-dimensional PCA projections for figure data.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::Matrix;

/// Project rows onto the top two principal axes of their covariance.
///
/// Each axis is signed so that its largest-magnitude loading is positive,
/// which makes the output independent of the eigen solver's sign choice.
/// One-dimensional input yields a zero second coordinate.
pub fn pca_2d(x: &Matrix) -> Result<Matrix> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mean: Vec<f64> = (0..d)
        .map(|a| x.iter_rows().map(|r| r[a]).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, d, |i, a| x.row(i)[a] - mean[a]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();

    let mut out = Matrix::zeros(n, 2);
    for i in 0..n {
        for (k, axis) in axes.iter().enumerate() {
            out.row_mut(i)[k] = (0..d).map(|a| centred[(i, a)] * axis[a]).sum();
        }
    }
    Ok(out)
}
