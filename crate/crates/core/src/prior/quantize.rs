use crate::error::{Error, Result};

/// Uniform per-dimension bucket grid over observed ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSpec {
    pub buckets: usize,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl QuantizerSpec {
    pub fn new(buckets: usize, mins: Vec<f64>, maxs: Vec<f64>) -> Result<Self> {
        if buckets == 0 || mins.len() != maxs.len() || mins.iter().zip(&maxs).any(|(a, b)| !(a < b)) {
            return Err(Error::invalid("quantizer", "need buckets > 0 and min < max per dimension"));
        }
        Ok(Self { buckets, mins, maxs })
    }

    /// Ranges from rows of `values` (each of length `dims`).
    pub fn fit(values: &[f64], dims: usize, buckets: usize) -> Result<Self> {
        if dims == 0 || values.is_empty() || values.len() % dims != 0 {
            return Err(Error::invalid("quantizer", "empty or ragged data"));
        }
        let mut mins = vec![f64::INFINITY; dims];
        let mut maxs = vec![f64::NEG_INFINITY; dims];
        for row in values.chunks(dims) {
            for (j, &v) in row.iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        for (lo, hi) in mins.iter_mut().zip(maxs.iter_mut()) {
            if *hi - *lo < 1e-9 {
                *lo -= 0.5e-3;
                *hi += 0.5e-3;
            }
        }
        Self::new(buckets, mins, maxs)
    }

    pub fn dims(&self) -> usize {
        self.mins.len()
    }

    pub fn width(&self, dim: usize) -> f64 {
        (self.maxs[dim] - self.mins[dim]) / self.buckets as f64
    }

    pub fn quantize_one(&self, dim: usize, v: f64) -> usize {
        let pos = ((v - self.mins[dim]) / self.width(dim)).floor();
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(self.buckets - 1)
        }
    }

    pub fn center(&self, dim: usize, code: usize) -> f64 {
        self.mins[dim] + (code.min(self.buckets - 1) as f64 + 0.5) * self.width(dim)
    }

    pub fn quantize(&self, v: &[f64]) -> Result<Vec<usize>> {
        if v.len() != self.dims() {
            return Err(Error::invalid("quantize", format!("{} values for {} dims", v.len(), self.dims())));
        }
        Ok(v.iter().enumerate().map(|(j, &x)| self.quantize_one(j, x)).collect())
    }

    pub fn dequantize(&self, codes: &[usize]) -> Result<Vec<f64>> {
        if codes.len() != self.dims() {
            return Err(Error::invalid("dequantize", format!("{} codes for {} dims", codes.len(), self.dims())));
        }
        Ok(codes.iter().enumerate().map(|(j, &c)| self.center(j, c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let q = QuantizerSpec::new(4, vec![0.0], vec![1.0]).unwrap();
        assert_eq!(q.quantize(&[0.375]).unwrap(), vec![1]);
        assert_eq!(q.dequantize(&[1]).unwrap(), vec![0.375]);
        assert_eq!(q.quantize(&[7.0]).unwrap(), vec![3]);
        assert_eq!(q.quantize(&[-7.0]).unwrap(), vec![0]);
        assert!(QuantizerSpec::new(4, vec![1.0], vec![1.0]).is_err());
    }
}
