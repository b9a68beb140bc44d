//! Central finite-difference oracle for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unclip::numerics::{Graph, Tensor, Var};
use unclip::Result;

pub type Build = Box<dyn for<'g> Fn(&'g Graph<f32>, &[Var<'g, f32>]) -> Result<Var<'g, f32>>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f32>>,
    pub build: Build,
}

/// Draws a tensor with entries in `[lo, hi]`.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..=hi)).collect()).unwrap()
}

/// Weighted output sum evaluated in f64 from the f32 forward values.
fn probe_loss(case: &Case, inputs: &[Tensor<f32>], weights: &[f32]) -> f64 {
    let g = Graph::<f32>::inference();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&g, &vars).unwrap().value();
    out.data()
        .iter()
        .zip(weights)
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

/// Returns the worst per-input relative error `|a - n| / max(|a|, |n|)` in L2 norm.
pub fn check(case: &Case, h: f32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::<f32>::new();
    let vars: Vec<_> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&g, &vars).unwrap();
    let weights: Vec<f32> = (0..out.value().numel()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let w = g.constant(Tensor::new(&out.shape(), weights.clone()).unwrap());
    let loss = out.mul(w).unwrap().sum();
    let analytic = g.grads_for(loss, &vars).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= h;
            // Use the actually representable step.
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            let numeric = (probe_loss(case, &plus, &weights) - probe_loss(case, &minus, &weights)) / step;
            let a = analytic[i].data()[j] as f64;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < 1e-6 { diff2.sqrt() } else { diff2.sqrt() / denom };
        worst = worst.max(rel);
    }
    worst
}

fn case(name: &str, inputs: Vec<Tensor<f32>>, build: Build) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        build,
    }
}

/// Randomized cases covering every differentiable operation kind.
pub fn all_cases(seed: u64, rounds: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..rounds {
        let r = &mut rng;
        let m = r.random_range(1..4);
        let n = r.random_range(2..5);
        let k = r.random_range(1..4);
        out.push(case("add", vec![rand_tensor(r, &[m, n], -1., 1.), rand_tensor(r, &[m, n], -1., 1.)], Box::new(|_, v| v[0].add(v[1]))));
        out.push(case("add_broadcast_channel", vec![rand_tensor(r, &[2, n, 2, 2], -1., 1.), rand_tensor(r, &[1, n, 1, 1], -1., 1.)], Box::new(|_, v| v[0].add(v[1]))));
        out.push(case("sub", vec![rand_tensor(r, &[m, n], -1., 1.), rand_tensor(r, &[n], -1., 1.)], Box::new(|_, v| v[0].sub(v[1]))));
        out.push(case("mul", vec![rand_tensor(r, &[m, n], -1., 1.), rand_tensor(r, &[m, n], -1., 1.)], Box::new(|_, v| v[0].mul(v[1]))));
        out.push(case("mul_broadcast", vec![rand_tensor(r, &[m, n, k], -1., 1.), rand_tensor(r, &[m, 1, k], -1., 1.)], Box::new(|_, v| v[0].mul(v[1]))));
        out.push(case("scale_add_scalar", vec![rand_tensor(r, &[n], -1., 1.)], Box::new(|_, v| Ok(v[0].scale(1.7).add_scalar(0.3)))));
        out.push(case("matmul", vec![rand_tensor(r, &[m, k], -1., 1.), rand_tensor(r, &[k, n], -1., 1.)], Box::new(|_, v| v[0].matmul(v[1]))));
        out.push(case("matmul_shared_rhs", vec![rand_tensor(r, &[2, m, k], -1., 1.), rand_tensor(r, &[k, n], -1., 1.)], Box::new(|_, v| v[0].matmul(v[1]))));
        out.push(case("matmul_batched_transposed", vec![rand_tensor(r, &[2, k, m], -1., 1.), rand_tensor(r, &[2, n, k], -1., 1.)], Box::new(|_, v| v[0].matmul_t(v[1], true, true))));
        out.push(case("matmul_tb", vec![rand_tensor(r, &[2, m, k], -1., 1.), rand_tensor(r, &[2, n, k], -1., 1.)], Box::new(|_, v| v[0].matmul_t(v[1], false, true))));
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..2);
        out.push(case(
            "conv2d",
            vec![rand_tensor(r, &[2, 2, 5, 4], -1., 1.), rand_tensor(r, &[3, 2, 3, 3], -1., 1.)],
            Box::new(move |_, v| v[0].conv2d(v[1], stride, pad)),
        ));
        out.push(case("conv2d_pointwise", vec![rand_tensor(r, &[2, 3, 2, 2], -1., 1.), rand_tensor(r, &[2, 3, 1, 1], -1., 1.)], Box::new(|_, v| v[0].conv2d(v[1], 1, 0))));
        out.push(case("reshape", vec![rand_tensor(r, &[m, n], -1., 1.)], Box::new(move |_, v| v[0].reshape(&[n, m])?.tanh().reshape(&[m * n]))));
        out.push(case("transpose", vec![rand_tensor(r, &[2, m, n], -1., 1.)], Box::new(|_, v| v[0].permute(&[2, 0, 1]))));
        out.push(case("slice", vec![rand_tensor(r, &[m, 4, 2], -1., 1.)], Box::new(|_, v| v[0].slice(1, 1, 2))));
        out.push(case("concat", vec![rand_tensor(r, &[m, 2], -1., 1.), rand_tensor(r, &[m, 3], -1., 1.)], Box::new(|g, v| g.concat(&[v[0], v[1]], 1))));
        out.push(case("sum", vec![rand_tensor(r, &[m, n], -1., 1.)], Box::new(|_, v| Ok(v[0].sum()))));
        out.push(case("mean", vec![rand_tensor(r, &[m, n], -1., 1.)], Box::new(|_, v| Ok(v[0].mean()))));
        out.push(case("sum_last", vec![rand_tensor(r, &[m, n], -1., 1.)], Box::new(|_, v| v[0].sum_last())));
        out.push(case("mean_last", vec![rand_tensor(r, &[m, n], -1., 1.)], Box::new(|_, v| v[0].mean_last())));
        out.push(case("exp", vec![rand_tensor(r, &[n], -1., 1.)], Box::new(|_, v| Ok(v[0].exp()))));
        out.push(case("log", vec![rand_tensor(r, &[n], 0.5, 2.)], Box::new(|_, v| Ok(v[0].log()))));
        out.push(case("sqrt", vec![rand_tensor(r, &[n], 0.5, 2.)], Box::new(|_, v| Ok(v[0].sqrt()))));
        out.push(case("tanh", vec![rand_tensor(r, &[n], -2., 2.)], Box::new(|_, v| Ok(v[0].tanh()))));
        out.push(case("gelu", vec![rand_tensor(r, &[n], -2., 2.)], Box::new(|_, v| Ok(v[0].gelu()))));
        out.push(case("softmax", vec![rand_tensor(r, &[m, n], -2., 2.)], Box::new(|_, v| v[0].softmax())));
        out.push(case("log_softmax", vec![rand_tensor(r, &[m, n], -2., 2.)], Box::new(|_, v| v[0].log_softmax())));
        out.push(case("layer_norm", vec![rand_tensor(r, &[m, n + 1], -2., 2.)], Box::new(|_, v| v[0].layer_norm(1e-5))));
        out.push(case("l2_normalize", vec![rand_tensor(r, &[m, n], -2., 2.)], Box::new(|_, v| v[0].l2_normalize(1e-12))));
        let idx: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
        out.push(case("gather", vec![rand_tensor(r, &[m, n], -1., 1.)], Box::new(move |_, v| v[0].gather(&idx))));
        let ids: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..n)).collect();
        out.push(case("embedding", vec![rand_tensor(r, &[n, 3], -1., 1.)], Box::new(move |g, v| g.embedding(v[0], &ids))));
        out.push(case("upsample2x", vec![rand_tensor(r, &[1, 2, 2, 3], -1., 1.)], Box::new(|_, v| v[0].upsample2x())));
    }
    out
}
