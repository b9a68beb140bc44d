use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Scalar, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T, weight_decay: T) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update over aligned parameter and gradient lists.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} params but {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("adamw", "parameter count changed between steps"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        let decay = one - self.lr * self.weight_decay;
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (one - self.beta1) * gi;
                *vi = self.beta2 * *vi + (one - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x = *x * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.update(store.values_mut(), grads.as_slice())
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    decay: T,
    shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> Ema<T> {
    /// `decay` must lie in `[0, 1)`; zero makes the shadow track parameters exactly.
    pub fn new(decay: T, params: Vec<Tensor<T>>) -> Result<Self> {
        if !(decay >= T::zero() && decay < T::one()) {
            return Err(Error::invalid("ema", format!("decay {decay} outside [0, 1)")));
        }
        Ok(Self { decay, shadow: params })
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn shadow(&self) -> &[Tensor<T>] {
        &self.shadow
    }

    pub fn update(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::invalid("ema", "parameter count mismatch"));
        }
        let keep = self.decay;
        let take = T::one() - keep;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            if s.shape() != p.shape() {
                return Err(Error::shape("ema", s.shape(), p.shape()));
            }
            for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = keep * *a + take * b;
            }
        }
        Ok(())
    }

    pub fn update_from(&mut self, store: &ParamStore<T>) -> Result<()> {
        let params: Vec<Tensor<T>> = store.iter().map(|(_, t)| t.clone()).collect();
        self.update(&params)
    }
}
