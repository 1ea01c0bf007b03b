#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinecat::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        (rng.random::<f64>() * 2.0 - 1.0) * scale
    })
}

/// Relative error with a small absolute floor so that gradients that are
/// numerically zero compare on an absolute scale.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Builds a scalar loss from the tape-recorded inputs.
pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Analytic gradients of `f` at `inputs` (all marked as requiring grad).
pub fn analytic(inputs: &[Tensor<f64>], f: &LossFn) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let g = tape.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.get(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

pub fn eval(inputs: &[Tensor<f64>], f: &LossFn) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.data(loss)[0]
}

/// Central differences for every element of every input.
pub fn numeric(inputs: &[Tensor<f64>], f: &LossFn, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((eval(&plus, f) - eval(&minus, f)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and central-difference gradients.
pub fn max_grad_error(inputs: &[Tensor<f64>], f: &LossFn) -> f64 {
    let a = analytic(inputs, f);
    let n = numeric(inputs, f, FD_STEP);
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Reduce an arbitrary-shape output to a scalar with fixed random weights so
/// every output element contributes a distinct cotangent.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random_tensor(&mut r, tape.shape(y), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}
