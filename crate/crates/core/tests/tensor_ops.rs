mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use swinecat::{Tape, Tensor};

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-3;

fn check(name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<LossFn<'static>>)) {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut r = rng(seed * 7919 + name.len() as u64);
        let (inputs, f) = make(&mut r);
        worst = worst.max(max_grad_error(&inputs, &*f));
    }
    assert!(worst < TOL, "{name}: max relative gradient error {worst:e}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    check("matmul", |r| {
        let a = random_tensor(r, &[3, 4], 1.0);
        let b = random_tensor(r, &[4, 2], 1.0);
        (
            vec![a, b],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 1)
            }),
        )
    });
    check("batched matmul_nt", |r| {
        let a = random_tensor(r, &[2, 3, 4], 1.0);
        let b = random_tensor(r, &[2, 5, 4], 1.0);
        (
            vec![a, b],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.matmul_ex(v[0], v[1], true).unwrap();
                weighted_sum(t, y, 2)
            }),
        )
    });
}

#[test]
fn linear_and_elementwise_gradients() {
    check("linear", |r| {
        let x = random_tensor(r, &[2, 3, 4], 1.0);
        let w = random_tensor(r, &[5, 4], 1.0);
        let b = random_tensor(r, &[5], 1.0);
        (
            vec![x, w, b],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                weighted_sum(t, y, 3)
            }),
        )
    });
    check("add broadcast / mul / scale", |r| {
        let a = random_tensor(r, &[3, 2, 4], 1.0);
        let b = random_tensor(r, &[2, 4], 1.0);
        let c = random_tensor(r, &[3, 2, 4], 1.0);
        (
            vec![a, b, c],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let s = t.add(v[0], v[1]).unwrap();
                let p = t.mul(s, v[2]).unwrap();
                let q = t.scale(p, -1.7);
                weighted_sum(t, q, 4)
            }),
        )
    });
    check("gelu / sigmoid", |r| {
        let x = random_tensor(r, &[10], 3.0);
        (
            vec![x],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let g = t.gelu(v[0]);
                let s = t.sigmoid(g);
                weighted_sum(t, s, 5)
            }),
        )
    });
}

#[test]
fn normalisation_and_reduction_gradients() {
    check("softmax", |r| {
        let x = random_tensor(r, &[3, 5], 2.0);
        (
            vec![x],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.softmax(v[0]);
                weighted_sum(t, y, 6)
            }),
        )
    });
    check("layer_norm", |r| {
        let x = random_tensor(r, &[3, 6], 2.0);
        let g = random_tensor(r, &[6], 1.0);
        let b = random_tensor(r, &[6], 1.0);
        (
            vec![x, g, b],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(t, y, 7)
            }),
        )
    });
    check("mean_axis", |r| {
        let x = random_tensor(r, &[2, 3, 4], 1.0);
        (
            vec![x],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.mean_axis(v[0], 1).unwrap();
                weighted_sum(t, y, 8)
            }),
        )
    });
    check("cross_entropy", |r| {
        let x = random_tensor(r, &[4, 9], 3.0);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..9)).collect();
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, v: &[_]| t.cross_entropy(v[0], &labels).unwrap()),
        )
    });
}

#[test]
fn data_movement_gradients() {
    check("permute / reshape / transpose", |r| {
        let x = random_tensor(r, &[2, 3, 4], 1.0);
        (
            vec![x],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let p = t.permute(v[0], &[1, 2, 0]).unwrap();
                let q = t.reshape(p, &[12, 2]).unwrap();
                let s = t.transpose(q).unwrap();
                weighted_sum(t, s, 9)
            }),
        )
    });
    check("gather with repeats", |r| {
        let x = random_tensor(r, &[4, 3], 1.0);
        let idx: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
        (
            vec![x],
            Box::new(move |t: &mut Tape<f64>, v: &[_]| {
                let y = t.gather(v[0], Arc::new(idx.clone()), 3, &[6, 3]).unwrap();
                weighted_sum(t, y, 10)
            }),
        )
    });
    check("concat", |r| {
        let a = random_tensor(r, &[2, 1, 3], 1.0);
        let b = random_tensor(r, &[2, 2, 3], 1.0);
        (
            vec![a, b],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.concat(&[v[0], v[1], v[0]], 1).unwrap();
                weighted_sum(t, y, 11)
            }),
        )
    });
}

#[test]
fn channel_op_gradients() {
    check("conv1d_channels", |r| {
        let z = random_tensor(r, &[2, 8], 1.0);
        let k = random_tensor(r, &[3], 1.0);
        (
            vec![z, k],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.conv1d_channels(v[0], v[1]).unwrap();
                weighted_sum(t, y, 12)
            }),
        )
    });
    check("scale_channels", |r| {
        let x = random_tensor(r, &[2, 3, 4], 1.0);
        let w = random_tensor(r, &[2, 4], 1.0);
        (
            vec![x, w],
            Box::new(|t: &mut Tape<f64>, v: &[_]| {
                let y = t.scale_channels(v[0], v[1]).unwrap();
                weighted_sum(t, y, 13)
            }),
        )
    });
}

#[test]
fn softmax_rows_sum_to_one_and_match_naive_formula() {
    let mut r = rng(99);
    for _ in 0..100 {
        let n = r.random_range(1..12);
        let x = random_tensor(&mut r, &[3, n], 5.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax(v);
        for (row, xr) in tape.data(y).chunks(n).zip(x.data().chunks(n)) {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            let naive_total: f64 = xr.iter().map(|v| v.exp()).sum();
            for (p, xv) in row.iter().zip(xr) {
                assert!((0.0..=1.0).contains(p));
                assert!((p - xv.exp() / naive_total).abs() < 1e-12);
            }
        }
    }
    // single precision as well
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_fn([4, 7], |i| (i as f32 * 0.37).sin() * 30.0));
    let y = tape.softmax(x);
    for row in tape.data(y).chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn gelu_matches_quadrature_of_gaussian_cdf() {
    // Φ(1) by composite Simpson on the standard normal density over [-12, 1].
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (a, b, n) = (-12.0, 1.0, 20_000);
    let h = (b - a) / n as f64;
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
    }
    let phi1 = s * h / 3.0;

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn([3], |i| [1.0, 0.0, 10.0][i]));
    let y = tape.gelu(x);
    let d = tape.data(y);
    assert!((d[0] - phi1).abs() < 1e-10, "{} vs {}", d[0], phi1);
    assert_eq!(d[1], 0.0);
    assert!((d[2] - 10.0).abs() < 1e-6);
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[20, 16], 10.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([16], 1.0));
    let b = tape.constant(Tensor::zeros([16]));
    let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
    for row in tape.data(y).chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn conv1d_matches_double_loop() {
    let mut r = rng(17);
    for _ in 0..20 {
        let z = random_tensor(&mut r, &[8], 1.0);
        let k = random_tensor(&mut r, &[3], 1.0);
        let mut expect = vec![0.0; 8];
        for (c, e) in expect.iter_mut().enumerate() {
            for t in 0..3 {
                let pos = c as isize + t as isize - 1;
                if (0..8).contains(&pos) {
                    *e += k.data()[t] * z.data()[pos as usize];
                }
            }
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let kv = tape.constant(k);
        let y = tape.conv1d_channels(zv, kv).unwrap();
        for (a, b) in tape.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let run = || {
        let mut r = rng(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn([4, 8], |_| r.random::<f32>()), true);
        let w = tape.leaf(Tensor::from_fn([6, 8], |_| r.random::<f32>()), true);
        let y = tape.linear(x, w, None).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax(y);
        let y = tape.dropout(y, 0.3, true, &mut r).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        (tape.data(y).to_vec(), g.get(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
