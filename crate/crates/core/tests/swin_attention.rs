mod common;

use common::{max_grad_error, random_tensor, rng, weighted_sum, LossFn};
use rand::Rng;
use swinecat::swin::{
    build_attention_mask, cyclic_shift, patch_embed, patch_merge, swin_block, window_attention,
    window_partition, window_reverse, AttentionMask, AttentionParams, BlockParams, BlockShape,
    Dropout, FeatureMap, MASK_NEG,
};
use swinecat::{Tape, Tensor, Var};

/// Random parameters of one block with `c` channels, `heads` heads and an
/// `m × m` window, in the order consumed by [`bind`].
fn random_block(
    r: &mut impl Rng,
    c: usize,
    heads: usize,
    m: usize,
    scale: f64,
) -> Vec<Tensor<f64>> {
    let span = 2 * m - 1;
    let shapes: Vec<Vec<usize>> = vec![
        vec![c],
        vec![c],
        vec![3 * c, c],
        vec![3 * c],
        vec![c, c],
        vec![c],
        vec![span * span, heads],
        vec![c],
        vec![c],
        vec![4 * c, c],
        vec![4 * c],
        vec![c, 4 * c],
        vec![c],
    ];
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let t = random_tensor(r, &s, scale);
            if matches!(i, 0 | 7) {
                // norm gains around one
                Tensor::from_fn(s, |k| 1.0 + t.data()[k] * 0.5)
            } else {
                t
            }
        })
        .collect()
}

fn bind(v: &[Var]) -> BlockParams {
    BlockParams {
        norm1_weight: v[0],
        norm1_bias: v[1],
        attn: AttentionParams {
            qkv_weight: v[2],
            qkv_bias: v[3],
            proj_weight: v[4],
            proj_bias: v[5],
            bias_table: Some(v[6]),
        },
        norm2_weight: v[7],
        norm2_bias: v[8],
        fc1_weight: v[9],
        fc1_bias: v[10],
        fc2_weight: v[11],
        fc2_bias: v[12],
    }
}

fn attn_params(v: &[Var]) -> AttentionParams {
    bind(v).attn
}

fn consts(tape: &mut Tape<f64>, ts: &[Tensor<f64>]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn naive_linear(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let k = x.len();
    (0..out)
        .map(|o| b[o] + (0..k).map(|i| w[o * k + i] * x[i]).sum::<f64>())
        .collect()
}

/// Dense per-window attention on one image, coded directly from token
/// coordinates: roll by `s`, group into windows, label wrapped tokens, add
/// the relative bias, softmax, mix values, project. Returns the output in
/// rolled-grid row-major order.
#[allow(clippy::too_many_arguments)]
fn oracle_attention(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    s: usize,
    heads: usize,
    p: &[Tensor<f64>],
) -> Vec<f64> {
    let d = c / heads;
    let rolled = |i: usize, j: usize| -> &[f64] {
        let (si, sj) = ((i + s) % h, (j + s) % w);
        &x[(si * w + sj) * c..(si * w + sj + 1) * c]
    };
    let (qkv_w, qkv_b, proj_w, proj_b, table) = (
        p[2].data(),
        p[3].data(),
        p[4].data(),
        p[5].data(),
        p[6].data(),
    );
    let mut out = vec![0.0; h * w * c];
    for wi in 0..h / m {
        for wj in 0..w / m {
            let coords: Vec<(usize, usize)> = (0..m * m)
                .map(|t| (wi * m + t / m, wj * m + t % m))
                .collect();
            let qkv: Vec<Vec<f64>> = coords
                .iter()
                .map(|&(i, j)| naive_linear(rolled(i, j), qkv_w, qkv_b, 3 * c))
                .collect();
            let label = |(i, j): (usize, usize)| (s > 0 && i >= h - s, s > 0 && j >= w - s);
            let mut mixed = vec![vec![0.0; c]; m * m];
            for hd in 0..heads {
                for a in 0..m * m {
                    let mut scores = Vec::with_capacity(m * m);
                    for b in 0..m * m {
                        let dot: f64 = (0..d)
                            .map(|e| qkv[a][hd * d + e] * qkv[b][c + hd * d + e])
                            .sum::<f64>()
                            / (d as f64).sqrt();
                        let dr = coords[a].0 as isize - coords[b].0 as isize + m as isize - 1;
                        let dc = coords[a].1 as isize - coords[b].1 as isize + m as isize - 1;
                        let row = (dr * (2 * m as isize - 1) + dc) as usize;
                        let mask = if label(coords[a]) == label(coords[b]) {
                            0.0
                        } else {
                            MASK_NEG
                        };
                        scores.push(dot + table[row * heads + hd] + mask);
                    }
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for b in 0..m * m {
                        for k in 0..d {
                            mixed[a][hd * d + k] += e[b] / z * qkv[b][2 * c + hd * d + k];
                        }
                    }
                }
            }
            for (a, &(i, j)) in coords.iter().enumerate() {
                let y = naive_linear(&mixed[a], proj_w, proj_b, c);
                out[(i * w + j) * c..(i * w + j + 1) * c].copy_from_slice(&y);
            }
        }
    }
    out
}

fn run_attention(
    x: &Tensor<f64>,
    h: usize,
    w: usize,
    m: usize,
    s: usize,
    heads: usize,
    p: &[Tensor<f64>],
) -> (Vec<f64>, Vec<f64>, AttentionMask) {
    let mut tape = Tape::new();
    let vars = consts(&mut tape, p);
    let t = tape.constant(x.clone());
    let fm = FeatureMap::new(&tape, t, h, w).unwrap();
    let fm = cyclic_shift(&mut tape, fm, s as isize).unwrap();
    let wg = window_partition(&mut tape, fm, m).unwrap();
    let mask = build_attention_mask(h, w, m, s).unwrap();
    let out = window_attention(&mut tape, wg, &attn_params(&vars), Some(&mask), heads).unwrap();
    let back = window_reverse(&mut tape, out.grid).unwrap();
    (
        tape.data(back.tokens).to_vec(),
        tape.data(out.probs).to_vec(),
        mask,
    )
}

#[test]
fn dense_attention_oracle_agrees() {
    let mut r = rng(11);
    for &(h, w, m, s, c, heads) in &[
        (2, 2, 2, 0, 4, 1),
        (4, 4, 2, 1, 6, 2),
        (8, 8, 4, 2, 8, 2),
        (4, 8, 4, 2, 6, 3),
    ] {
        for _ in 0..5 {
            let p = random_block(&mut r, c, heads, m, 0.7);
            let x = random_tensor(&mut r, &[1, h * w, c], 1.0);
            let (got, _, _) = run_attention(&x, h, w, m, s, heads, &p);
            let want = oracle_attention(x.data(), h, w, c, m, s, heads, &p);
            for (g, o) in got.iter().zip(&want) {
                assert!((g - o).abs() < 1e-5, "{h}x{w} M={m} s={s}: {g} vs {o}");
            }
        }
    }
}

#[test]
fn single_token_windows_attend_to_themselves() {
    let mut r = rng(12);
    let c = 4;
    let p = random_block(&mut r, c, 2, 1, 1.0);
    let x = random_tensor(&mut r, &[2, 9, c], 1.0);
    let (got, probs, _) = run_attention(&x, 3, 3, 1, 0, 2, &p);
    assert!(probs.iter().all(|&v| v == 1.0));
    for tok in 0..18 {
        let xi = &x.data()[tok * c..(tok + 1) * c];
        let v = &naive_linear(xi, p[2].data(), p[3].data(), 3 * c)[2 * c..];
        let y = naive_linear(v, p[4].data(), p[5].data(), c);
        for (g, o) in got[tok * c..(tok + 1) * c].iter().zip(&y) {
            assert!((g - o).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_tokens_share_attention_evenly() {
    let mut r = rng(13);
    let c = 4;
    let mut p = random_block(&mut r, c, 1, 2, 1.0);
    p[6] = Tensor::zeros([9, 1]);
    let token: Vec<f64> = (0..c).map(|_| r.random::<f64>()).collect();
    let x = Tensor::new([1, 4, c], token.repeat(4)).unwrap();
    let (_, probs, _) = run_attention(&x, 2, 2, 2, 0, 1, &p);
    assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));

    // two identical keys among distinct ones always receive equal weight
    let mut data = random_tensor(&mut r, &[1, 4, c], 1.0).into_data();
    let (a, b) = data.split_at_mut(c);
    b[..c].copy_from_slice(a);
    let x = Tensor::new([1, 4, c], data).unwrap();
    let (_, probs, _) = run_attention(&x, 2, 2, 2, 0, 1, &p);
    for q in 0..4 {
        assert!((probs[q * 4] - probs[q * 4 + 1]).abs() < 1e-15);
    }
    let pair = (probs[0], probs[1]);
    assert!((pair.0 - 0.5 * (pair.0 + pair.1)).abs() < 1e-15);
}

#[test]
fn mask_matches_brute_force_wrap_labels() {
    for &(h, w, m, s) in &[
        (4, 4, 2, 1),
        (8, 8, 4, 2),
        (8, 12, 4, 1),
        (14, 14, 7, 3),
        (6, 6, 3, 1),
    ] {
        let mask = build_attention_mask(h, w, m, s).unwrap();
        let label = |i: usize, j: usize| (i >= h - s, j >= w - s);
        let mut win = 0;
        for wi in 0..h / m {
            for wj in 0..w / m {
                for a in 0..m * m {
                    for b in 0..m * m {
                        let (ai, aj) = (wi * m + a / m, wj * m + a % m);
                        let (bi, bj) = (wi * m + b / m, wj * m + b % m);
                        let want = if label(ai, aj) == label(bi, bj) {
                            0.0
                        } else {
                            MASK_NEG
                        };
                        assert_eq!(mask.get(win, a, b), want, "{h}x{w} M={m} s={s}");
                    }
                }
                win += 1;
            }
        }
    }
    assert!(build_attention_mask(8, 8, 4, 0).unwrap().is_all_zero());
    assert!(build_attention_mask(8, 8, 4, 4).is_err());
}

#[test]
fn masked_pairs_vanish_and_unmasked_pairs_survive() {
    let mut r = rng(14);
    let (h, m, s, c, heads) = (8, 4, 2, 8, 2);
    for _ in 0..20 {
        let p = random_block(&mut r, c, heads, m, 1.0);
        let x = random_tensor(&mut r, &[1, h * h, c], 2.0);
        let (_, probs, mask) = run_attention(&x, h, h, m, s, heads, &p);
        let n = m * m;
        for win in 0..mask.windows {
            for hd in 0..heads {
                for a in 0..n {
                    for b in 0..n {
                        let pr = probs[((win * heads + hd) * n + a) * n + b];
                        if mask.get(win, a, b) != 0.0 {
                            assert!(pr < 1e-6, "masked weight {pr}");
                        } else {
                            assert!(pr > 0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Input tokens whose gradient reaches output token `out` through one block.
fn influence(
    p: &[Tensor<f64>],
    x: &Tensor<f64>,
    grid: usize,
    shapes: &[BlockShape],
    out: usize,
) -> Vec<bool> {
    let c = x.shape()[2];
    let mut tape = Tape::new();
    let vars = consts(&mut tape, p);
    let t = tape.leaf(x.clone(), true);
    let mut fm = FeatureMap::new(&tape, t, grid, grid).unwrap();
    for &shape in shapes {
        fm = swin_block(&mut tape, fm, &bind(&vars), shape, &mut Dropout::disabled()).unwrap();
    }
    let mut sel = Tensor::zeros([1, grid * grid, c]);
    sel.data_mut()[out * c..(out + 1) * c].fill(1.0);
    let sel = tape.constant(sel);
    let picked = tape.mul(fm.tokens, sel).unwrap();
    let loss = tape.sum(picked);
    let g = tape.backward(loss).unwrap();
    let g = g.get(t).unwrap();
    (0..grid * grid)
        .map(|tok| g[tok * c..(tok + 1) * c].iter().any(|&v| v != 0.0))
        .collect()
}

#[test]
fn unshifted_attention_is_block_diagonal() {
    let mut r = rng(15);
    let (grid, m, c, heads) = (8, 4, 8, 2);
    let p = random_block(&mut r, c, heads, m, 0.8);
    let x = random_tensor(&mut r, &[1, grid * grid, c], 1.0);

    // dense reconstruction from per-window probabilities
    let (_, probs, _) = run_attention(&x, grid, grid, m, 0, heads, &p);
    let n = m * m;
    let windows = (grid / m) * (grid / m);
    for hd in 0..heads {
        let mut dense = vec![0.0; grid * grid * grid * grid];
        for win in 0..windows {
            let (wi, wj) = (win / (grid / m), win % (grid / m));
            let tok = |k: usize| (wi * m + k / m) * grid + wj * m + k % m;
            for a in 0..n {
                for b in 0..n {
                    dense[tok(a) * grid * grid + tok(b)] =
                        probs[((win * heads + hd) * n + a) * n + b];
                }
            }
        }
        let window_of = |t: usize| (t / grid / m) * (grid / m) + (t % grid) / m;
        for a in 0..grid * grid {
            let row = &dense[a * grid * grid..(a + 1) * grid * grid];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (b, &v) in row.iter().enumerate() {
                if window_of(a) != window_of(b) {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v > 0.0);
                }
            }
        }
    }

    // the Jacobian of a whole unshifted block is block-diagonal as well
    let shape = BlockShape {
        heads,
        window: m,
        shift: 0,
    };
    let window_of = |t: usize| (t / grid / m) * (grid / m) + (t % grid) / m;
    for out in 0..grid * grid {
        let reach = influence(&p, &x, grid, &[shape], out);
        for (tok, &hit) in reach.iter().enumerate() {
            assert_eq!(hit, window_of(tok) == window_of(out), "out {out} tok {tok}");
        }
    }
}

#[test]
fn shifted_block_connects_neighbouring_windows() {
    let mut r = rng(16);
    let (grid, m, c, heads) = (8, 4, 8, 2);
    let p = random_block(&mut r, c, heads, m, 0.8);
    let x = random_tensor(&mut r, &[1, grid * grid, c], 1.0);
    let plain = BlockShape {
        heads,
        window: m,
        shift: 0,
    };
    let shifted = BlockShape {
        heads,
        window: m,
        shift: m / 2,
    };
    // token (1, 3) lives in window 0, token (1, 4) in window 1
    let (src, dst) = (grid + 3, grid + 4);
    assert!(!influence(&p, &x, grid, &[plain], dst)[src]);
    assert!(influence(&p, &x, grid, &[plain, shifted], dst)[src]);

    // the same holds when perturbing the input value directly
    let outputs = |x: &Tensor<f64>, shapes: &[BlockShape]| {
        let mut tape = Tape::new();
        let vars = consts(&mut tape, &p);
        let t = tape.constant(x.clone());
        let mut fm = FeatureMap::new(&tape, t, grid, grid).unwrap();
        for &s in shapes {
            fm = swin_block(&mut tape, fm, &bind(&vars), s, &mut Dropout::disabled()).unwrap();
        }
        tape.data(fm.tokens)[dst * c..(dst + 1) * c].to_vec()
    };
    let mut bumped = x.clone();
    bumped.data_mut()[src * c] += 0.5;
    assert_eq!(outputs(&x, &[plain]), outputs(&bumped, &[plain]));
    assert_ne!(
        outputs(&x, &[plain, shifted]),
        outputs(&bumped, &[plain, shifted])
    );
}

#[test]
fn zero_output_projections_make_block_identity() {
    let mut r = rng(17);
    let (grid, m, c, heads) = (8, 4, 8, 2);
    let mut p = random_block(&mut r, c, heads, m, 1.0);
    for i in [4, 5, 11, 12] {
        p[i] = Tensor::zeros(p[i].shape().to_vec());
    }
    let x = random_tensor(&mut r, &[2, grid * grid, c], 1.0);
    for shift in [0, 2] {
        let mut tape = Tape::new();
        let vars = consts(&mut tape, &p);
        let t = tape.constant(x.clone());
        let fm = FeatureMap::new(&tape, t, grid, grid).unwrap();
        let out = swin_block(
            &mut tape,
            fm,
            &bind(&vars),
            BlockShape {
                heads,
                window: m,
                shift,
            },
            &mut Dropout::disabled(),
        )
        .unwrap();
        assert_eq!(tape.data(out.tokens), x.data());
        assert_eq!((out.height, out.width, out.channels), (grid, grid, c));
    }
}

#[test]
fn block_shape_law() {
    let mut r = rng(18);
    for &(grid, m, c, heads) in &[(4, 4, 6, 3), (8, 4, 8, 2), (6, 3, 4, 1)] {
        let p = random_block(&mut r, c, heads, m, 0.5);
        let mut tape = Tape::new();
        let vars = consts(&mut tape, &p);
        let t = tape.constant(random_tensor(&mut r, &[3, grid * grid, c], 1.0));
        let fm = FeatureMap::new(&tape, t, grid, grid).unwrap();
        let shift = if grid > m { m / 2 } else { 0 };
        let out = swin_block(
            &mut tape,
            fm,
            &bind(&vars),
            BlockShape {
                heads,
                window: m,
                shift,
            },
            &mut Dropout::disabled(),
        )
        .unwrap();
        assert_eq!(tape.shape(out.tokens), &[3, grid * grid, c]);
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut r = rng(19);
    let (grid, m, c, heads) = (4, 2, 4, 2);
    for shift in [0, 1] {
        let mut inputs = random_block(&mut r, c, heads, m, 0.6);
        inputs.push(random_tensor(&mut r, &[1, grid * grid, c], 1.0));
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let fm = FeatureMap::new(tape, v[13], grid, grid).unwrap();
            let out = swin_block(
                tape,
                fm,
                &bind(&v[..13]),
                BlockShape {
                    heads,
                    window: m,
                    shift,
                },
                &mut Dropout::disabled(),
            )
            .unwrap();
            weighted_sum(tape, out.tokens, 5)
        });
        let err = max_grad_error(&inputs, &*f);
        assert!(err < 1e-3, "shift {shift}: {err}");
    }
}

#[test]
fn partition_counts_and_layout() {
    let mut tape = Tape::<f32>::new();
    let t = tape.constant(Tensor::zeros([1, 56 * 56, 1]));
    let fm = FeatureMap::new(&tape, t, 56, 56).unwrap();
    let wg = window_partition(&mut tape, fm, 7).unwrap();
    assert_eq!(wg.windows_per_image(), 64);
    assert_eq!(tape.shape(wg.windows), &[64, 49, 1]);
    assert!(window_partition(&mut tape, fm, 5).is_err());
}

#[test]
fn patch_embed_matches_convolution_loops() {
    let mut r = rng(20);
    let (b, hh, ww, p, d) = (2, 8, 12, 4, 5);
    let img = random_tensor(&mut r, &[b, 3, hh, ww], 1.0);
    let w = random_tensor(&mut r, &[d, 3, p, p], 1.0);
    let bias = random_tensor(&mut r, &[d], 1.0);
    let mut tape = Tape::new();
    let (iv, wv, bv) = (
        tape.constant(img.clone()),
        tape.constant(w.clone()),
        tape.constant(bias.clone()),
    );
    let fm = patch_embed(&mut tape, iv, wv, bv, p).unwrap();
    assert_eq!((fm.height, fm.width, fm.channels), (2, 3, d));
    let out = tape.data(fm.tokens);
    for bi in 0..b {
        for i in 0..2 {
            for j in 0..3 {
                for o in 0..d {
                    let mut acc = bias.data()[o];
                    for ch in 0..3 {
                        for y in 0..p {
                            for x in 0..p {
                                acc += w.data()[((o * 3 + ch) * p + y) * p + x]
                                    * img.data()[((bi * 3 + ch) * hh + i * p + y) * ww + j * p + x];
                            }
                        }
                    }
                    let got = out[((bi * 6) + i * 3 + j) * d + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
    // zero image gives the bias at every token
    let z = tape.constant(Tensor::zeros([1, 3, hh, ww]));
    let fm = patch_embed(&mut tape, z, wv, bv, p).unwrap();
    for tok in tape.data(fm.tokens).chunks(d) {
        assert_eq!(tok, bias.data());
    }
    let odd = tape.constant(Tensor::zeros([1, 3, 10, 12]));
    assert!(matches!(
        patch_embed(&mut tape, odd, wv, bv, p),
        Err(swinecat::Error::Config(_))
    ));
}

#[test]
fn full_size_grid_shapes() {
    let mut tape = Tape::<f32>::new();
    let img = tape.constant(Tensor::zeros([1, 3, 224, 224]));
    let w = tape.constant(Tensor::zeros([96, 3, 4, 4]));
    let b = tape.constant(Tensor::zeros([96]));
    let fm = patch_embed(&mut tape, img, w, b, 4).unwrap();
    assert_eq!((fm.height, fm.width, fm.channels), (56, 56, 96));
    let g = tape.constant(Tensor::full([384], 1.0));
    let nb = tape.constant(Tensor::zeros([384]));
    let red = tape.constant(Tensor::zeros([192, 384]));
    let merged = patch_merge(&mut tape, fm, g, nb, red).unwrap();
    assert_eq!(
        (merged.height, merged.width, merged.channels),
        (28, 28, 192)
    );
    assert_eq!(tape.shape(merged.tokens), &[1, 784, 192]);
}

#[test]
fn patch_merge_matches_loops() {
    let mut r = rng(21);
    let (b, h, w, c) = (2, 4, 6, 3);
    let x = random_tensor(&mut r, &[b, h * w, c], 1.0);
    let g = random_tensor(&mut r, &[4 * c], 1.0);
    let nb = random_tensor(&mut r, &[4 * c], 1.0);
    let red = random_tensor(&mut r, &[2 * c, 4 * c], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fm = FeatureMap::new(&tape, xv, h, w).unwrap();
    let (gv, bv, rv) = (
        tape.constant(g.clone()),
        tape.constant(nb.clone()),
        tape.constant(red.clone()),
    );
    let out = patch_merge(&mut tape, fm, gv, bv, rv).unwrap();
    let got = tape.data(out.tokens);
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut cat = Vec::new();
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (bi * h + 2 * i + di) * w + 2 * j + dj;
                    cat.extend_from_slice(&x.data()[t * c..(t + 1) * c]);
                }
                let mean = cat.iter().sum::<f64>() / cat.len() as f64;
                let var = cat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cat.len() as f64;
                let normed: Vec<f64> = cat
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (v - mean) / (var + 1e-5).sqrt() * g.data()[k] + nb.data()[k])
                    .collect();
                let want = naive_linear(&normed, red.data(), &vec![0.0; 2 * c], 2 * c);
                let at = ((bi * (h / 2) + i) * (w / 2) + j) * 2 * c;
                for (k, v) in want.iter().enumerate() {
                    assert!((got[at + k] - v).abs() < 1e-10);
                }
            }
        }
    }
}
