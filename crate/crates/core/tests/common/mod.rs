//! Shared test oracles. Nothing here calls into the model code paths it checks.
#![allow(dead_code)]

pub mod audit;
pub mod grad_cases;
pub mod metamorphic;
pub mod oracle;

use bob_core::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that gradients that are zero up
/// to rounding do not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Max relative error between backward() and central differences for a
/// scalar function of `inputs`.
pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

pub fn random_shape(rng: &mut ChaCha8Rng, ndim: usize) -> Vec<usize> {
    (0..ndim).map(|_| rng.gen_range(1..=5)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Random values bounded away from zero (for kinked functions like ReLU).
pub fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduce an arbitrary output to a scalar through a fixed random weighting
/// so gradients are not trivially symmetric (sum(softmax) has zero grad).
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Triple-loop matrix product.
pub fn loop_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}
