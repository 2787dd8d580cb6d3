#![allow(dead_code)]

use std::path::PathBuf;

use maml_privacy::data::{load_idx, Dataset};
use maml_privacy::numcore::{Architecture, LabeledBatch, ParamVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_arch(seed: u64) -> Architecture {
    let mut r = rng(seed ^ 0xA5);
    Architecture {
        input_dim: r.random_range(2..6),
        hidden_dims: vec![r.random_range(2..6)],
        num_classes: r.random_range(2..5),
    }
}

pub fn random_batch(arch: &Architecture, n: usize, r: &mut ChaCha8Rng) -> LabeledBatch {
    let data = (0..n * arch.input_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..arch.num_classes)).collect();
    LabeledBatch::new(Tensor::new(vec![n, arch.input_dim], data).unwrap(), labels).unwrap()
}

pub fn random_direction(p: &ParamVector, r: &mut ChaCha8Rng) -> ParamVector {
    p.map(|_| 0.0)
        .unflatten(
            &(0..p.num_params())
                .map(|_| r.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap()
}

/// Central differences of `f` along every coordinate of `p`.
pub fn fd_gradient(p: &ParamVector, h: f64, f: impl Fn(&ParamVector) -> f64) -> Vec<f64> {
    let flat = p.flatten();
    (0..flat.len())
        .map(|i| {
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[i] += h;
            dn[i] -= h;
            (f(&p.unflatten(&up).unwrap()) - f(&p.unflatten(&dn).unwrap())) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

pub fn mnist_paths() -> (PathBuf, PathBuf) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    (root.join("images-idx3-ubyte.gz"), root.join("labels-idx1-ubyte.gz"))
}

pub fn mnist() -> Dataset {
    let (i, l) = mnist_paths();
    Dataset::new(load_idx(i, l).expect("bundled MNIST subset"))
}
