use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::numerics::{Scalar, Tensor};

/// Principal axes of a set of embeddings, ordered by decreasing eigenvalue.
/// Components cover the numerical rank of the data; `k` is the retained count.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis<T> {
    pub mean: Tensor<T>,
    /// [R, D], orthonormal rows.
    pub components: Tensor<T>,
    pub eigenvalues: Vec<T>,
    /// Smallest count whose reconstruction MSE is below `mse_fraction` of the total variance.
    pub k: usize,
}

/// Fits on `x` [N, D] (N >= D) and selects `k` by the `mse_fraction` rule.
pub fn fit_pca<T: Scalar>(x: &Tensor<T>, mse_fraction: f64) -> Result<PcaBasis<T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] < s[1] || s[1] == 0 {
        return Err(Error::invalid("fit_pca", format!("need [N, D] with N >= D, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let mut mean = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64_lossy() / n as f64;
        }
    }
    let mut cov = vec![0.0f64; d * d];
    for row in x.data().chunks(d) {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v.to_f64_lossy() - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i * d + j] = cov[j * d + i];
        }
    }
    let eig = symmetric_eigen(&Tensor::<f64>::new(&[d, d], cov)?)?;
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eig.values.iter().take_while(|&&v| v > top * 1e-10 && v > 0.0).count().max(1);
    let total: f64 = eig.values[..rank].iter().sum();
    let mut k = rank;
    let mut tail: f64 = total;
    for (i, v) in eig.values[..rank].iter().enumerate() {
        tail -= v;
        // Per-sample reconstruction MSE with i+1 components is the sum of the dropped eigenvalues.
        if tail < mse_fraction * total {
            k = i + 1;
            break;
        }
    }
    let components = eig.vectors.narrow0(0, rank).cast();
    Ok(PcaBasis {
        mean: Tensor::from_vec(mean.iter().map(|&m| T::lit(m)).collect()),
        components,
        eigenvalues: eig.values[..rank].iter().map(|&v| T::lit(v)).collect(),
        k,
    })
}

impl<T: Scalar> PcaBasis<T> {
    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.rank() {
            return Err(Error::invalid("pca", format!("k={k} outside 1..={}", self.rank())));
        }
        Ok(())
    }

    /// Coefficients of `x` [N, D] on the first `k` components, [N, k].
    pub fn project(&self, x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        self.check_k(k)?;
        let d = self.dim();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::shape("pca_project", x.shape(), &[d]));
        }
        let mut centered = x.clone();
        for row in centered.data_mut().chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v -= *m;
            }
        }
        centered.matmul(&self.components.narrow0(0, k).t()?)
    }

    /// Linear reconstruction from [N, k] coefficients, without renormalizing.
    pub fn reconstruct_raw(&self, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
        let k = *coeffs.shape().last().unwrap_or(&0);
        self.check_k(k)?;
        let mut out = coeffs.matmul(&self.components.narrow0(0, k))?;
        let d = self.dim();
        for row in out.data_mut().chunks_mut(d) {
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v += *m;
            }
        }
        Ok(out)
    }

    /// Reconstruction projected back onto the unit sphere.
    pub fn reconstruct(&self, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.reconstruct_raw(coeffs)?.normalized_rows())
    }

    /// Mean squared reconstruction error per sample (summed over dims) using `k` components.
    pub fn reconstruction_mse(&self, x: &Tensor<T>, k: usize) -> Result<f64> {
        let rec = self.reconstruct_raw(&self.project(x, k)?)?;
        let n = x.shape()[0] as f64;
        Ok(rec.sub(x)?.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / n)
    }

    /// Total variance (sum of eigenvalues).
    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.to_f64_lossy()).sum()
    }
}
