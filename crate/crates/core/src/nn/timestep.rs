use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Sinusoidal features of `t`: `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]`
/// with `f_i = 10000^(-i/h)` and `h = dim/2`.
pub fn timestep_embed<T: Scalar>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid("timestep_embed", format!("dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::lit(arg.sin());
        out[half + i] = T::lit(arg.cos());
    }
    Ok(Tensor::from_vec(out))
}

/// Stacked embeddings, shape [ts.len(), dim].
pub fn timestep_embed_batch<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let rows: Result<Vec<_>> = ts.iter().map(|&t| timestep_embed(t, dim)).collect();
    Tensor::stack(&rows?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time() {
        let e = timestep_embed::<f64>(0, 8).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = timestep_embed::<f32>(1, 16).unwrap();
        assert_eq!(a, timestep_embed::<f32>(1, 16).unwrap());
        let b = timestep_embed::<f32>(2, 16).unwrap();
        assert!(a.sub(&b).unwrap().norm() > 0.0);
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(timestep_embed::<f32>(3, 7).is_err());
    }
}
