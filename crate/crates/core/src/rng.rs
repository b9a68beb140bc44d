//! Seeded, labelled random streams. Every random draw in the stack comes from
//! a stream derived from `(seed, label)`, so results depend on nothing else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Scalar, Tensor};

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut key = [0u8; 32];
    let mut s = splitmix(seed) ^ h;
    for chunk in key.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream for item `index` of a labelled family.
pub fn indexed(seed: u64, label: &str, index: u64) -> Rng {
    stream(splitmix(seed ^ splitmix(index.wrapping_add(1))), label)
}

pub fn normal<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor::new(shape, data).expect("consistent shape")
}
