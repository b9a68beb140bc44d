use crate::error::{Error, Result};
use crate::nn::{fan_in_bound, Ctx};
use crate::numerics::{ParamId, ParamStore, Scalar, Var};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], fan_in_bound(in_dim), rng);
        let b = Some(store.add_zeros(format!("{name}.b"), &[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// Zero-initialized projection, used for the last layer of residual branches.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), &[in_dim, out_dim]);
        let b = Some(store.add_zeros(format!("{name}.b"), &[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn no_bias<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], fan_in_bound(in_dim), rng);
        Self { w, b: None, in_dim, out_dim }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(cx.p(self.w))?;
        match self.b {
            Some(b) => y.add(cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add_uniform(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], fan_in_bound(fan_in), rng);
        let b = store.add_zeros(format!("{name}.b"), &[out_ch, 1, 1]);
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel]);
        let b = store.add_zeros(format!("{name}.b"), &[out_ch, 1, 1]);
        Self {
            w,
            b,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(cx.p(self.w), self.stride, self.pad)?.add(cx.p(self.b))
    }
}

/// Normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[width]),
            beta: store.add_zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(T::lit(1e-5))?.mul(cx.p(self.gamma))?.add(cx.p(self.beta))
    }
}

/// Group normalization of [N, C, H, W] feature maps.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid("group_norm", format!("{channels} channels in {groups} groups")));
        }
        Ok(Self {
            groups,
            gamma: store.add_ones(format!("{name}.gamma"), &[channels, 1, 1]),
            beta: store.add_zeros(format!("{name}.beta"), &[channels, 1, 1]),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::invalid("group_norm", format!("shape {s:?}")));
        }
        let per = s[1] / self.groups * s[2] * s[3];
        x.reshape(&[s[0], self.groups, per])?
            .layer_norm(T::lit(1e-5))?
            .reshape(&s)?
            .mul(cx.p(self.gamma))?
            .add(cx.p(self.beta))
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(cx, x)?.gelu();
        self.fc2.forward(cx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};
    use crate::rng;

    #[test]
    fn layer_norm_moments_before_affine() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(rng::normal(&[4, 5], &mut rng::stream(0, "t")).scale(10.0));
        let y = ln.forward(cx, x).unwrap().value();
        for row in y.data().chunks(5) {
            let m: f64 = row.iter().sum::<f64>() / 5.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "mean {m} var {v}");
        }
    }

    #[test]
    fn conv_keeps_spatial_size() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, 3, 1, &mut rng::stream(0, "c"));
        let g = Graph::inference();
        let y = conv.forward(Ctx::new(&g, &store), g.constant(Tensor::zeros(&[2, 3, 5, 6]))).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 5, 6]);
    }
}
