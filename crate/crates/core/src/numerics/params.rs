use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("consistent shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut().map(Arc::make_mut)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("param.set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Copies all values from a store with the same layout.
    pub fn load_from(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::invalid(
                "param.load",
                format!("expected {} tensors, got {}", self.values.len(), values.len()),
            ));
        }
        for (i, v) in values.iter().enumerate() {
            self.set(ParamId(i), v.clone())?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|v| (**v).clone()).collect()
    }

    /// FNV-1a over names and raw value bits; equal iff contents are bit-identical.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, v) in self.iter() {
            name.bytes().for_each(&mut eat);
            for x in v.data() {
                x.to_f64_lossy().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }
}
