//! Symmetric eigendecomposition and PSD matrix functions.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Eigenpairs of a symmetric matrix, sorted by decreasing eigenvalue.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<T> {
    pub values: Vec<T>,
    /// Row `i` is the unit eigenvector for `values[i]`.
    pub vectors: Tensor<T>,
}

/// Cyclic Jacobi rotations, accumulated in f64.
pub fn symmetric_eigen<T: Scalar>(a: &Tensor<T>) -> Result<SymmetricEigen<T>> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::invalid("symmetric_eigen", format!("shape {:?}", a.shape())));
    }
    let n = a.shape()[0];
    let mut m: Vec<f64> = a.data().iter().map(|v| v.to_f64_lossy()).collect();
    // Symmetrize against round-off in the caller's product.
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| T::lit(m[i * n + i])).collect();
    let mut rows = Vec::with_capacity(n * n);
    for &i in &order {
        rows.extend((0..n).map(|k| T::lit(v[k * n + i])));
    }
    Ok(SymmetricEigen {
        values,
        vectors: Tensor::new(&[n, n], rows)?,
    })
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues below
/// `-tol * max_eig` are rejected; smaller negative ones are clamped to zero.
pub fn sqrt_psd<T: Scalar>(a: &Tensor<T>, tol: f64) -> Result<Tensor<T>> {
    let eig = symmetric_eigen(a)?;
    let n = eig.values.len();
    let top = eig.values.first().map(|v| v.to_f64_lossy().abs()).unwrap_or(0.0);
    let mut roots = Vec::with_capacity(n);
    for &l in &eig.values {
        let l = l.to_f64_lossy();
        if l < -tol * top.max(1e-300) {
            return Err(Error::invalid("sqrt_psd", format!("matrix not PSD: eigenvalue {l:e}")));
        }
        roots.push(l.max(0.0).sqrt());
    }
    let vecs = eig.vectors.data();
    let mut out = vec![0.0f64; n * n];
    for (k, &r) in roots.iter().enumerate() {
        let row = &vecs[k * n..(k + 1) * n];
        for i in 0..n {
            let vi = row[i].to_f64_lossy() * r;
            for j in 0..n {
                out[i * n + j] += vi * row[j].to_f64_lossy();
            }
        }
    }
    Tensor::new(&[n, n], out.into_iter().map(T::lit).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_eigenvalues_sorted() {
        let a = Tensor::<f64>::from_f64(&[3, 3], &[1., 0., 0., 0., 3., 0., 0., 0., 2.]).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        assert!((e.vectors.data()[1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[4., 1., 1., 3.]).unwrap();
        let s = sqrt_psd(&a, 1e-9).unwrap();
        let back = s.matmul(&s).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 0., 0., -1.]).unwrap();
        assert!(sqrt_psd(&a, 1e-6).is_err());
    }
}
