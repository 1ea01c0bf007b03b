//! Window attention building blocks: patch embedding, window partitioning,
//! cyclic shifts with region masks, windowed multi-head self-attention, the
//! transformer block and patch merging.
//!
//! Token grids live on the tape as `[B, H·W, C]` in row-major `(h, w)` order.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Additive pre-softmax bias for pairs that must not attend to each other.
pub const MASK_NEG: f64 = -100.0;

pub const LN_EPS: f64 = 1e-5;

/// A batch of token grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    /// `[batch, height·width, channels]`
    pub tokens: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMap {
    pub fn new<T: Scalar>(
        tape: &Tape<T>,
        tokens: Var,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::dim("feature map", s, &[height, width]));
        }
        Ok(FeatureMap {
            tokens,
            batch: s[0],
            height,
            width,
            channels: s[2],
        })
    }

    fn with_tokens(self, tokens: Var) -> Self {
        FeatureMap { tokens, ..self }
    }
}

/// Tokens regrouped into non-overlapping `window × window` tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    /// `[batch · windows, window², channels]`
    pub windows: Var,
    pub window: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl WindowGrid {
    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }
}

/// Window size and shift actually used for a `grid × grid` feature map.
///
/// Grids no larger than the configured window collapse to a single window
/// without shifting.
pub fn effective_window(grid: usize, window: usize) -> (usize, usize) {
    if grid <= window {
        (grid, 0)
    } else {
        (window, window / 2)
    }
}

/// Non-overlapping `patch × patch` patches of `[B, 3, H, W]` images projected
/// to `weight.shape()[0]` channels. `weight` is `[D, 3, P, P]`.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    weight: Var,
    bias: Var,
    patch: usize,
) -> Result<FeatureMap> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("patch_embed", &s, &[0, 3, 0, 0]));
    }
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let ws = tape.shape(weight).to_vec();
    if ws.len() != 4 || ws[1] != ch || ws[2] != patch || ws[3] != patch {
        return Err(Error::dim(
            "patch_embed weight",
            &ws,
            &[0, ch, patch, patch],
        ));
    }
    let dim = ws[0];
    let (gh, gw) = (h / patch, w / patch);
    let cols = ch * patch * patch;
    let mut index = Vec::with_capacity(b * gh * gw * cols);
    for bi in 0..b {
        for i in 0..gh {
            for j in 0..gw {
                for c in 0..ch {
                    for py in 0..patch {
                        let row = bi * ch * h * w + c * h * w + (i * patch + py) * w + j * patch;
                        index.extend(row..row + patch);
                    }
                }
            }
        }
    }
    let patches = tape.gather(images, Arc::new(index), 1, &[b * gh * gw, cols])?;
    let wflat = tape.reshape(weight, &[dim, cols])?;
    let proj = tape.linear(patches, wflat, Some(bias))?;
    let tokens = tape.reshape(proj, &[b, gh * gw, dim])?;
    FeatureMap::new(tape, tokens, gh, gw)
}

/// Token index of `(row, col)` in window-major order for an `h × w` grid.
fn window_order(h: usize, w: usize, m: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for wi in 0..h / m {
        for wj in 0..w / m {
            for r in 0..m {
                for c in 0..m {
                    idx.push((wi * m + r) * w + wj * m + c);
                }
            }
        }
    }
    idx
}

fn batched(per_image: &[usize], batch: usize, stride: usize) -> Arc<Vec<usize>> {
    let mut idx = Vec::with_capacity(per_image.len() * batch);
    for b in 0..batch {
        idx.extend(per_image.iter().map(|&i| b * stride + i));
    }
    Arc::new(idx)
}

pub fn window_partition<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    window: usize,
) -> Result<WindowGrid> {
    let FeatureMap {
        batch,
        height,
        width,
        channels,
        ..
    } = fm;
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(Error::Config(format!(
            "{height}x{width} grid is not divisible into {window}x{window} windows"
        )));
    }
    let order = window_order(height, width, window);
    let n = height * width;
    let windows = tape.gather(
        fm.tokens,
        batched(&order, batch, n),
        channels,
        &[batch * n / (window * window), window * window, channels],
    )?;
    Ok(WindowGrid {
        windows,
        window,
        batch,
        height,
        width,
        channels,
    })
}

pub fn window_reverse<T: Scalar>(tape: &mut Tape<T>, wg: WindowGrid) -> Result<FeatureMap> {
    let order = window_order(wg.height, wg.width, wg.window);
    let mut inverse = vec![0; order.len()];
    for (pos, &tok) in order.iter().enumerate() {
        inverse[tok] = pos;
    }
    let n = wg.height * wg.width;
    let tokens = tape.gather(
        wg.windows,
        batched(&inverse, wg.batch, n),
        wg.channels,
        &[wg.batch, n, wg.channels],
    )?;
    FeatureMap::new(tape, tokens, wg.height, wg.width)
}

/// Roll the grid by `(-shift, -shift)` with wraparound, so the token at
/// `(0, 0)` afterwards is the one originally at `(shift, shift)`. A negative
/// shift rolls the other way.
pub fn cyclic_shift<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    shift: isize,
) -> Result<FeatureMap> {
    if shift == 0 {
        return Ok(fm);
    }
    let (h, w) = (fm.height as isize, fm.width as isize);
    let mut order = Vec::with_capacity((h * w) as usize);
    for i in 0..h {
        for j in 0..w {
            let si = (i + shift).rem_euclid(h);
            let sj = (j + shift).rem_euclid(w);
            order.push((si * w + sj) as usize);
        }
    }
    let n = fm.height * fm.width;
    let tokens = tape.gather(
        fm.tokens,
        batched(&order, fm.batch, n),
        fm.channels,
        &[fm.batch, n, fm.channels],
    )?;
    Ok(fm.with_tokens(tokens))
}

/// Per-window additive masks for shifted-window attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub windows: usize,
    /// Tokens per window (`window²`).
    pub size: usize,
    /// `[windows, size, size]`, entries `0` or [`MASK_NEG`].
    pub data: Vec<f64>,
}

impl AttentionMask {
    pub fn get(&self, window: usize, i: usize, j: usize) -> f64 {
        self.data[(window * self.size + i) * self.size + j]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Expanded over heads to `[windows, heads, size, size]`.
    pub fn to_tensor<T: Scalar>(&self, heads: usize) -> Tensor<T> {
        let per = self.size * self.size;
        let mut data = Vec::with_capacity(self.windows * heads * per);
        for w in 0..self.windows {
            let src = &self.data[w * per..(w + 1) * per];
            for _ in 0..heads {
                data.extend(src.iter().map(|&v| T::lit(v)));
            }
        }
        Tensor::new(vec![self.windows, heads, self.size, self.size], data).expect("mask shape")
    }
}

/// Mask for attention over a grid rolled by `shift`. Region labels come from
/// the three bands `[0, H-M)`, `[H-M, H-s)`, `[H-s, H)` along each axis.
pub fn build_attention_mask(
    height: usize,
    width: usize,
    window: usize,
    shift: usize,
) -> Result<AttentionMask> {
    if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "{height}x{width} grid is not divisible into {window}x{window} windows"
        )));
    }
    if shift >= window {
        return Err(Error::Config(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    let band = |x: usize, extent: usize| -> usize {
        if shift == 0 || x < extent - window {
            0
        } else if x < extent - shift {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; height * width];
    for i in 0..height {
        for j in 0..width {
            labels[i * width + j] = band(i, height) * 3 + band(j, width);
        }
    }
    let order = window_order(height, width, window);
    let size = window * window;
    let windows = order.len() / size;
    let mut data = Vec::with_capacity(windows * size * size);
    for win in order.chunks(size) {
        for &a in win {
            for &b in win {
                data.push(if labels[a] == labels[b] {
                    0.0
                } else {
                    MASK_NEG
                });
            }
        }
    }
    Ok(AttentionMask {
        windows,
        size,
        data,
    })
}

/// Row of the relative-position table used by each ordered pair of positions
/// in a `window × window` tile, as a flat `[window², window²]` map.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let m = window as isize;
    let span = (2 * window - 1) as isize;
    let n = window * window;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n as isize {
        for b in 0..n as isize {
            let dr = a / m - b / m + (m - 1);
            let dc = a % m - b % m + (m - 1);
            idx.push((dr * span + dc) as usize);
        }
    }
    idx
}

/// Parameter handles for one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `[3C, C]`
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    /// `[C, C]`
    pub proj_weight: Var,
    pub proj_bias: Var,
    /// `[(2M-1)², heads]` when relative position bias is enabled.
    pub bias_table: Option<Var>,
}

pub struct AttentionOutput {
    pub grid: WindowGrid,
    /// Post-softmax weights `[batch · windows, heads, window², window²]`.
    pub probs: Var,
}

/// Multi-head scaled dot-product attention inside every window:
/// `softmax(QKᵀ/√d + bias + mask) · V` followed by the output projection.
pub fn window_attention<T: Scalar>(
    tape: &mut Tape<T>,
    wg: WindowGrid,
    params: &AttentionParams,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<AttentionOutput> {
    let c = wg.channels;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    let d = c / heads;
    let n = wg.window * wg.window;
    let nw = wg.windows_per_image();
    let g = wg.batch * nw;

    let qkv = tape.linear(wg.windows, params.qkv_weight, Some(params.qkv_bias))?;
    let qkv = tape.reshape(qkv, &[g, n, 3, heads, d])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let part = g * heads * n * d;
    let pick = |tape: &mut Tape<T>, i: usize| {
        tape.gather(qkv, Arc::new(vec![i]), part, &[g * heads, n, d])
    };
    let q = pick(tape, 0)?;
    let k = pick(tape, 1)?;
    let v = pick(tape, 2)?;

    let q = tape.scale(q, T::lit(1.0 / (d as f64).sqrt()));
    let scores = tape.matmul_ex(q, k, true)?;
    let mut scores = tape.reshape(scores, &[wg.batch, nw, heads, n, n])?;
    if let Some(table) = params.bias_table {
        let span = 2 * wg.window - 1;
        let ts = tape.shape(table).to_vec();
        if ts != [span * span, heads] {
            return Err(Error::dim(
                "relative position table",
                &ts,
                &[span * span, heads],
            ));
        }
        let rel = relative_position_index(wg.window);
        let mut index = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            index.extend(rel.iter().map(|&r| r * heads + h));
        }
        let bias = tape.gather(table, Arc::new(index), 1, &[heads, n, n])?;
        scores = tape.add(scores, bias)?;
    }
    if let Some(mask) = mask {
        if mask.windows != nw || mask.size != n {
            return Err(Error::dim(
                "attention mask",
                &[mask.windows, mask.size],
                &[nw, n],
            ));
        }
        if !mask.is_all_zero() {
            let m = tape.constant(mask.to_tensor(heads));
            scores = tape.add(scores, m)?;
        }
    }
    let probs = tape.softmax(scores);
    let flat = tape.reshape(probs, &[g * heads, n, n])?;
    let out = tape.matmul(flat, v)?;
    let out = tape.reshape(out, &[g, heads, n, d])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[g, n, c])?;
    let out = tape.linear(out, params.proj_weight, Some(params.proj_bias))?;
    let probs = tape.reshape(probs, &[g, heads, n, n])?;
    Ok(AttentionOutput {
        grid: WindowGrid { windows: out, ..wg },
        probs,
    })
}

/// Parameter handles for one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub norm1_weight: Var,
    pub norm1_bias: Var,
    pub attn: AttentionParams,
    pub norm2_weight: Var,
    pub norm2_bias: Var,
    /// `[rC, C]`
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    /// `[C, rC]`
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub heads: usize,
    /// Effective window (already clamped to the grid).
    pub window: usize,
    /// Zero for plain windows.
    pub shift: usize,
}

/// Dropout applied after the attention projection and inside the MLP.
pub struct Dropout {
    pub p: f64,
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, train: bool, seed: u64) -> Self {
        Dropout {
            p,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn disabled() -> Self {
        Self::new(0.0, false, 0)
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.dropout(x, self.p, self.train, &mut self.rng)
    }
}

/// `x + Attn(LN(x))` over (optionally shifted) windows, then `x + MLP(LN(x))`.
pub fn swin_block<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    params: &BlockParams,
    shape: BlockShape,
    dropout: &mut Dropout,
) -> Result<FeatureMap> {
    let BlockShape {
        heads,
        window,
        shift,
    } = shape;
    let normed = tape.layer_norm(fm.tokens, params.norm1_weight, params.norm1_bias, LN_EPS)?;
    let normed = fm.with_tokens(normed);
    let shifted = cyclic_shift(tape, normed, shift as isize)?;
    let grid = window_partition(tape, shifted, window)?;
    let mask = if shift > 0 {
        Some(build_attention_mask(fm.height, fm.width, window, shift)?)
    } else {
        None
    };
    let attn = window_attention(tape, grid, &params.attn, mask.as_ref(), heads)?;
    let merged = window_reverse(tape, attn.grid)?;
    let unshifted = cyclic_shift(tape, merged, -(shift as isize))?;
    let attn_out = dropout.apply(tape, unshifted.tokens)?;
    let x = tape.add(fm.tokens, attn_out)?;

    let normed = tape.layer_norm(x, params.norm2_weight, params.norm2_bias, LN_EPS)?;
    let hidden = tape.linear(normed, params.fc1_weight, Some(params.fc1_bias))?;
    let hidden = tape.gelu(hidden);
    let hidden = dropout.apply(tape, hidden)?;
    let mlp = tape.linear(hidden, params.fc2_weight, Some(params.fc2_bias))?;
    let mlp = dropout.apply(tape, mlp)?;
    let x = tape.add(x, mlp)?;
    Ok(fm.with_tokens(x))
}

/// Concatenate each 2×2 neighbourhood (`4C`), normalise, and project to `2C`
/// without bias. `reduction` is `[2C, 4C]`.
pub fn patch_merge<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    norm_weight: Var,
    norm_bias: Var,
    reduction: Var,
) -> Result<FeatureMap> {
    let FeatureMap {
        batch,
        height,
        width,
        channels,
        ..
    } = fm;
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Config(format!(
            "cannot merge patches of an odd {height}x{width} grid"
        )));
    }
    let (oh, ow) = (height / 2, width / 2);
    let mut order = Vec::with_capacity(height * width);
    for i in 0..oh {
        for j in 0..ow {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                order.push((2 * i + di) * width + 2 * j + dj);
            }
        }
    }
    let n = height * width;
    let grouped = tape.gather(
        fm.tokens,
        batched(&order, batch, n),
        channels,
        &[batch, oh * ow, 4 * channels],
    )?;
    let normed = tape.layer_norm(grouped, norm_weight, norm_bias, LN_EPS)?;
    let reduced = tape.linear(normed, reduction, None)?;
    FeatureMap::new(tape, reduced, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(tape: &mut Tape<f64>, h: usize, w: usize, c: usize) -> FeatureMap {
        let t = Tensor::from_fn([1, h * w, c], |i| i as f64);
        let v = tape.constant(t);
        FeatureMap::new(tape, v, h, w).unwrap()
    }

    #[test]
    fn partition_layout_and_round_trip() {
        let mut tape = Tape::new();
        let fm = numbered(&mut tape, 4, 4, 1);
        let wg = window_partition(&mut tape, fm, 2).unwrap();
        assert_eq!(tape.shape(wg.windows), &[4, 4, 1]);
        assert_eq!(&tape.data(wg.windows)[..4], &[0.0, 1.0, 4.0, 5.0]);
        let back = window_reverse(&mut tape, wg).unwrap();
        assert_eq!(tape.data(back.tokens), tape.data(fm.tokens));

        assert_eq!(window_order(56, 56, 7).len() / 49, 64);
        assert!(matches!(
            window_partition(&mut tape, fm, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cyclic_shift_definition_and_inverse() {
        let mut tape = Tape::new();
        let fm = numbered(&mut tape, 4, 4, 1);
        assert_eq!(cyclic_shift(&mut tape, fm, 0).unwrap(), fm);
        let s = cyclic_shift(&mut tape, fm, 1).unwrap();
        assert_eq!(tape.data(s.tokens)[0], 5.0); // original (1, 1)
        let back = cyclic_shift(&mut tape, s, -1).unwrap();
        assert_eq!(tape.data(back.tokens), tape.data(fm.tokens));
    }

    #[test]
    fn zero_shift_mask_is_zero() {
        let m = build_attention_mask(8, 8, 4, 0).unwrap();
        assert!(m.is_all_zero());
        assert_eq!(m.windows, 4);
    }

    #[test]
    fn effective_window_clamps() {
        assert_eq!(effective_window(56, 7), (7, 3));
        assert_eq!(effective_window(7, 7), (7, 0));
        assert_eq!(effective_window(2, 4), (2, 0));
    }

    #[test]
    fn relative_index_depends_only_on_offsets() {
        let m = 3;
        let idx = relative_position_index(m);
        let n = m * m;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let same = (a / m) as isize - (b / m) as isize
                            == (c / m) as isize - (d / m) as isize
                            && (a % m) as isize - (b % m) as isize
                                == (c % m) as isize - (d % m) as isize;
                        assert_eq!(same, idx[a * n + b] == idx[c * n + d]);
                    }
                }
            }
        }
        assert_eq!(*idx.iter().max().unwrap(), (2 * m - 1) * (2 * m - 1) - 1);
    }

    #[test]
    fn merge_smallest_case() {
        let mut tape = Tape::<f64>::new();
        let fm = numbered(&mut tape, 2, 2, 1);
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let r = tape.constant(Tensor::from_fn([2, 4], |i| i as f64));
        let out = patch_merge(&mut tape, fm, g, b, r).unwrap();
        assert_eq!((out.height, out.width, out.channels), (1, 1, 2));
        let odd = numbered(&mut tape, 3, 2, 1);
        assert!(matches!(
            patch_merge(&mut tape, odd, g, b, r),
            Err(Error::Config(_))
        ));
    }
}
