//! Gaussian feature statistics and the Fréchet distance between them.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidStats {
    /// `[d]`
    pub mu: Tensor,
    /// `[d, d]`, symmetric.
    pub sigma: Tensor,
    pub n: usize,
}

impl FidStats {
    pub fn dim(&self) -> usize {
        self.mu.numel()
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let d = t.shape()[0];
    DMatrix::from_row_slice(d, d, t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let d = m.nrows();
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![d, d], data).expect("square")
}

fn check_square(m: &Tensor) -> Result<usize> {
    match m.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::Shape(format!("expected a square matrix, got {s:?}"))),
    }
}

/// Column means and unbiased covariance (divisor `n − 1`) of an `[n, d]` feature matrix.
pub fn fid_stats(features: &Tensor) -> Result<FidStats> {
    let [n, d] = features.shape() else {
        return Err(Error::Shape(format!("features must be [n, d], got {:?}", features.shape())));
    };
    let (n, d) = (*n, *d);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 feature rows, got {n}")));
    }
    let x = features.data();
    let mut mu = vec![0.0; d];
    for row in x.chunks(d) {
        mu.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = x.chunks(d).flat_map(|row| row.iter().zip(&mu).map(|(v, m)| v - m)).collect();
    let c = Tensor::new(vec![n, d], centered)?;
    let mut sigma = c.transpose2().matmul(&c)?.scale(1.0 / (n - 1) as f64);
    symmetrize(&mut sigma);
    Ok(FidStats { mu: Tensor::new(vec![d], mu)?, sigma, n })
}

fn symmetrize(m: &mut Tensor) {
    let d = m.shape()[0];
    let data = m.data_mut();
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (data[i * d + j] + data[j * d + i]);
            data[i * d + j] = avg;
            data[j * d + i] = avg;
        }
    }
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues in `[-1e-6, 0)` are clamped to zero; anything lower is an error.
pub fn matrix_sqrt_psd(m: &Tensor) -> Result<Tensor> {
    check_square(m)?;
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(to_matrix(&sym));
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -1e-6 {
            return Err(Error::NotPsd(min));
        }
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let mut out = from_matrix(&s);
    symmetrize(&mut out);
    Ok(out)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2·sqrt(√Σa·Σb·√Σa))`, clamped at zero.
pub fn fid(a: &FidStats, b: &FidStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let d = a.dim();
    let mean_term: f64 = a.mu.data().iter().zip(b.mu.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = matrix_sqrt_psd(&a.sigma)?;
    let inner = root_a.matmul(&b.sigma)?.matmul(&root_a)?;
    let cross = matrix_sqrt_psd(&inner)?;
    let trace = |t: &Tensor| (0..d).map(|i| t.data()[i * d + i]).sum::<f64>();
    let value = mean_term + trace(&a.sigma) + trace(&b.sigma) - 2.0 * trace(&cross);
    if value < -1e-6 {
        return Err(Error::InvalidArgument(format!("Fréchet distance came out negative: {value:e}")));
    }
    Ok(value.max(0.0))
}
