#![allow(dead_code)]

use pdsa_core::geom::Point;
use pdsa_core::rng::{seeded, Rng};
use pdsa_core::tensor::Tensor;
use rand::Rng as _;

pub fn rng(seed: u64) -> Rng {
    seeded(seed)
}

/// `n` points uniform in `[-half, half]^3`.
pub fn cloud(rng: &mut Rng, n: usize, half: f64) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            ]
        })
        .collect()
}

pub fn tensor(rng: &mut Rng, shape: &[usize], half: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-half..half))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// `W x + b` for one row, reading `{name}.weight` / `{name}.bias`.
pub fn linear_oracle(
    store: &pdsa_core::tensor::ParamStore<f64>,
    name: &str,
    x: &[f64],
) -> Vec<f64> {
    let w = store.get(store.find(&format!("{name}.weight")).unwrap());
    let b = store.get(store.find(&format!("{name}.bias")).unwrap());
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| b.data()[o] + (0..inp).map(|i| w.data()[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

/// Row-wise MLP recomputed layer by layer: linear, then layer norm and
/// ReLU wherever a `norm` parameter exists.
pub fn mlp_oracle(store: &pdsa_core::tensor::ParamStore<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut i = 0;
    while store.find(&format!("{name}.{i}.weight")).is_some() {
        h = linear_oracle(store, &format!("{name}.{i}"), &h);
        if let Some(gid) = store.find(&format!("{name}.{i}.norm.gamma")) {
            let g = store.get(gid).data();
            let b = store
                .get(store.find(&format!("{name}.{i}.norm.beta")).unwrap())
                .data();
            let n = h.len() as f64;
            let mean = h.iter().sum::<f64>() / n;
            let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            h = h
                .iter()
                .enumerate()
                .map(|(c, v)| ((v - mean) * rstd * g[c] + b[c]).max(0.0))
                .collect();
        }
        i += 1;
    }
    h
}

/// Randomizes every parameter of `store` (layer-norm affines included).
pub fn randomize(store: &mut pdsa_core::tensor::ParamStore<f64>, rng: &mut Rng, half: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-half..half);
        }
    }
}
