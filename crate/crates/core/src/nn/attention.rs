use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::numerics::{ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

/// Scaled dot-product attention over [B, H, L, d] queries and [B, H, Lk, d]
/// keys/values. With `causal`, query `i` sees key `j` iff `j <= i + (Lk - L)`,
/// so any extra leading keys (conditioning) stay visible to every query.
pub fn attention<'g, T: Scalar>(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>, causal: bool) -> Result<Var<'g, T>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 4 || ks.len() != 4 || qs[3] != ks[3] || qs[..2] != ks[..2] || v.shape()[..3] != ks[..3] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let (lq, lk, d) = (qs[2], ks[2], qs[3]);
    if lk < lq {
        return Err(Error::invalid("attention", format!("{lk} keys for {lq} queries")));
    }
    let mut scores = q.matmul_t(k, false, true)?.scale(T::lit(1.0 / (d as f64).sqrt()));
    if causal {
        let offset = lk - lq;
        let mut mask = Tensor::zeros(&[lq, lk]);
        for i in 0..lq {
            for j in i + offset + 1..lk {
                mask.data_mut()[i * lk + j] = T::lit(-1e9);
            }
        }
        scores = scores.add(q.graph().constant(mask))?;
    }
    scores.softmax()?.matmul(v)
}

/// Multi-head self-attention, optionally also attending to conditioning
/// tokens whose keys/values are prepended to the sequence's own.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub cond_kv: Option<Linear>,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        cond_width: Option<usize>,
        zero_out: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid("attention", format!("width {width} not divisible by {heads} heads")));
        }
        let out = if zero_out {
            Linear::zeros(store, &format!("{name}.out"), width, width)
        } else {
            Linear::new(store, &format!("{name}.out"), width, width, rng)
        };
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            out,
            cond_kv: cond_width.map(|cw| Linear::new(store, &format!("{name}.cond_kv"), cw, 2 * width, rng)),
            heads,
            width,
        })
    }

    fn split_heads<'g, T: Scalar>(&self, x: Var<'g, T>, b: usize, l: usize) -> Result<Var<'g, T>> {
        x.reshape(&[b, l, self.heads, self.width / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// `x`: [B, L, W]; `cond`: [B, M, cond_width].
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: Ctx<'g, T>,
        x: Var<'g, T>,
        cond: Option<Var<'g, T>>,
        causal: bool,
    ) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::invalid("attention", format!("input shape {s:?}, width {}", self.width)));
        }
        let (b, l, w) = (s[0], s[1], s[2]);
        let qkv = self.qkv.forward(cx, x)?;
        let q = self.split_heads(qkv.slice(2, 0, w)?, b, l)?;
        let mut k = self.split_heads(qkv.slice(2, w, w)?, b, l)?;
        let mut v = self.split_heads(qkv.slice(2, 2 * w, w)?, b, l)?;
        if let (Some(proj), Some(c)) = (&self.cond_kv, cond) {
            let m = c.shape()[1];
            let ckv = proj.forward(cx, c)?;
            let ck = self.split_heads(ckv.slice(2, 0, w)?, b, m)?;
            let cv = self.split_heads(ckv.slice(2, w, w)?, b, m)?;
            k = cx.g.concat(&[ck, k], 2)?;
            v = cx.g.concat(&[cv, v], 2)?;
        }
        let o = attention(q, k, v, causal)?.permute(&[0, 2, 1, 3])?.reshape(&[b, l, w])?;
        self.out.forward(cx, o)
    }
}
