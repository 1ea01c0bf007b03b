//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation appends one node holding its forward value. Operands always
//! precede results, so a single reverse sweep from the loss visits each
//! recorded op exactly once in topological order.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf {
        param: Option<usize>,
    },
    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
        block: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        pre: usize,
        post: usize,
        widths: Vec<usize>,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        n: usize,
        rstd: Vec<T>,
    },
    Mean {
        x: Var,
        pre: usize,
        len: usize,
        post: usize,
    },
    Sum {
        x: Var,
    },
    Conv1d {
        z: Var,
        kernel: Var,
        rows: usize,
        c: usize,
        k: usize,
    },
    ScaleChannels {
        x: Var,
        w: Var,
        b: usize,
        l: usize,
        c: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        k: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, kept for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of parameter leaves as `(parameter index, gradient)`.
    pub fn params<'a>(&'a self, tape: &'a Tape<T>) -> impl Iterator<Item = (usize, &'a [T])> + 'a {
        tape.nodes
            .iter()
            .enumerate()
            .filter_map(move |(id, node)| match node.op {
                Op::Leaf { param: Some(p) } => self.get(Var(id)).map(|g| (p, g)),
                _ => None,
            })
    }
}

fn suffix_of(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let last = shape.last().copied().unwrap_or(1);
    (shape.iter().product::<usize>() / last, last)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded op; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by tape op");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn out(&self, shape: &[usize], data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data).expect("op output shape")
    }

    /// Record a leaf. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Record a model parameter; its gradient is reported under `index`.
    pub fn param(&mut self, value: &Tensor<T>, index: usize) -> Var {
        let rg = value.requires_grad();
        self.push(value.detached(), Op::Leaf { param: Some(index) }, rg)
    }

    // ----- elementwise -------------------------------------------------

    /// `a + b`, broadcasting `b` over leading axes when its shape is a suffix
    /// of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sa, sb) {
            return Err(Error::dim("add", sa, sb));
        }
        let bd = self.data(b);
        let nb = bd.len();
        let data: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let value = self.out(sa, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim("mul", sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = self.out(sa, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * s).collect();
        let value = self.out(self.shape(x), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, s }, rg)
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF evaluated through erf.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let value = self.out(self.shape(x), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let value = self.out(self.shape(x), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Inverted dropout. Identity when `p == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = self.out(self.shape(x), data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    // ----- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes with matching leading (batch)
    /// axes. With `trans_b`, `b` is read as `[.., n, k]`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut data = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for g in 0..batch {
                let ab = &ad[g * m * k..(g + 1) * m * k];
                let bb = &bd[g * k * n..(g + 1) * k * n];
                let ob = &mut data[g * m * n..(g + 1) * m * n];
                if trans_b {
                    matmul_nt(ab, bb, ob, m, k, n);
                } else {
                    matmul_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = self.out(&shape, data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, inp) = split_rows(&sx);
        if sw.len() != 2 || sw[1] != inp || sx.is_empty() {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::dim("linear bias", &sw, self.shape(b)));
            }
        }
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in data.chunks_mut(out) {
                row.copy_from_slice(bd);
            }
        }
        matmul_nt(self.data(x), self.data(w), &mut data, rows, inp, out);
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out;
        let value = self.out(&shape, data);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    // ----- data movement -----------------------------------------------

    /// Copy blocks of `block` contiguous elements: output block `o` is input
    /// block `index[o]`. Indices may repeat; the backward pass scatter-adds.
    pub fn gather(
        &mut self,
        x: Var,
        index: Arc<Vec<usize>>,
        block: usize,
        shape: &[usize],
    ) -> Result<Var> {
        let xd = self.data(x);
        if block == 0 || !xd.len().is_multiple_of(block) {
            return Err(Error::dim("gather", self.shape(x), &[block]));
        }
        let nblocks = xd.len() / block;
        if index.iter().any(|&i| i >= nblocks) {
            return Err(Error::Contract("gather index out of range".into()));
        }
        let total: usize = shape.iter().product();
        if total != index.len() * block {
            return Err(Error::dim("gather", shape, &[index.len() * block]));
        }
        let mut data = Vec::with_capacity(total);
        for &i in index.iter() {
            data.extend_from_slice(&xd[i * block..(i + 1) * block]);
        }
        let value = self.out(shape, data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, index, block }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r
            || axes
                .iter()
                .any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Contract(format!(
                "invalid permutation {axes:?} for rank {r}"
            )));
        }
        // Trailing axes that stay in place move as contiguous blocks.
        let mut keep = r;
        while keep > 0 && axes[keep - 1] == keep - 1 {
            keep -= 1;
        }
        let block: usize = shape[keep..].iter().product();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let lead_in = &shape[..keep];
        let mut in_strides = vec![1usize; keep];
        for i in (0..keep.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * lead_in[i + 1];
        }
        let lead_out = &out_shape[..keep];
        let count: usize = lead_out.iter().product();
        let mut index = Vec::with_capacity(count);
        let mut coord = vec![0usize; keep];
        for _ in 0..count {
            let src: usize = (0..keep).map(|i| coord[i] * in_strides[axes[i]]).sum();
            index.push(src);
            for i in (0..keep).rev() {
                coord[i] += 1;
                if coord[i] < lead_out[i] {
                    break;
                }
                coord[i] = 0;
            }
        }
        self.gather(x, Arc::new(index), block.max(1), &out_shape)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(Error::dim("concat", &s0, s));
            }
            widths.push(s[axis]);
        }
        let pre: usize = s0[..axis].iter().product();
        let post: usize = s0[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(v)[p * w * post..(p + 1) * w * post]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = self.out(&shape, data);
        let rg = self.rg(xs);
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                pre,
                post,
                widths,
            },
            rg,
        ))
    }

    // ----- normalisation and reductions --------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (_, n) = split_rows(&shape);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = self.out(&shape, data);
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax { x, n }, rg)
    }

    /// Per-row normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, n) = split_rows(&shape);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let eps = T::lit(eps);
        let nt = T::lit(n as f64);
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut data = vec![T::zero(); rows * n];
        let mut rstd = Vec::with_capacity(rows);
        for (xr, yr) in xd.chunks(n).zip(data.chunks_mut(n)) {
            let mean = xr.iter().copied().sum::<T>() / nt;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            for i in 0..n {
                yr[i] = (xr[i] - mean) * rs * g[i] + b[i];
            }
            rstd.push(rs);
        }
        let value = self.out(&shape, data);
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                n,
                rstd,
            },
            rg,
        ))
    }

    /// Mean over one axis (removed from the shape).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "mean axis {axis} out of range for {shape:?}"
            )));
        }
        let pre: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let inv = T::one() / T::lit(len as f64);
        let xd = self.data(x);
        let mut data = vec![T::zero(); pre * post];
        for p in 0..pre {
            let dst = &mut data[p * post..(p + 1) * post];
            for l in 0..len {
                let src = &xd[(p * len + l) * post..(p * len + l + 1) * post];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = self.out(&out_shape, data);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Mean { x, pre, len, post }, rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    // ----- channel attention pieces ------------------------------------

    /// Cross-correlation along the last (channel) axis with a shared odd
    /// kernel and zero padding of `(k-1)/2`, so the length is preserved.
    pub fn conv1d_channels(&mut self, z: Var, kernel: Var) -> Result<Var> {
        let sz = self.shape(z).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sk.len() != 1 {
            return Err(Error::dim("conv1d_channels", &sz, &sk));
        }
        let k = sk[0];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv1d kernel size must be odd, got {k}"
            )));
        }
        let (rows, c) = split_rows(&sz);
        let pad = (k - 1) / 2;
        let (zd, kd) = (self.data(z), self.data(kernel));
        let mut data = vec![T::zero(); rows * c];
        for r in 0..rows {
            let zr = &zd[r * c..(r + 1) * c];
            for (ch, dst) in data[r * c..(r + 1) * c].iter_mut().enumerate() {
                let mut acc = T::zero();
                for (t, &w) in kd.iter().enumerate() {
                    let pos = ch + t;
                    if pos >= pad && pos - pad < c {
                        acc += w * zr[pos - pad];
                    }
                }
                *dst = acc;
            }
        }
        let value = self.out(&sz, data);
        let rg = self.rg(&[z, kernel]);
        Ok(self.push(
            value,
            Op::Conv1d {
                z,
                kernel,
                rows,
                c,
                k,
            },
            rg,
        ))
    }

    /// `x[b, l, c] * w[b, c]`
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[0] || sw[1] != sx[2] {
            return Err(Error::dim("scale_channels", &sx, &sw));
        }
        let (b, l, c) = (sx[0], sx[1], sx[2]);
        let (xd, wd) = (self.data(x), self.data(w));
        let mut data = Vec::with_capacity(xd.len());
        for bi in 0..b {
            let wr = &wd[bi * c..(bi + 1) * c];
            for li in 0..l {
                let xr = &xd[(bi * l + li) * c..(bi * l + li + 1) * c];
                data.extend(xr.iter().zip(wr).map(|(&v, &g)| v * g));
            }
        }
        let value = self.out(&sx, data);
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::ScaleChannels { x, w, b, l, c }, rg))
    }

    // ----- loss --------------------------------------------------------

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &sl, &[labels.len()]));
        }
        let k = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                k,
            },
            rg,
        ))
    }

    // ----- backward ----------------------------------------------------

    /// Propagate gradients from a scalar `loss` to every leaf that requires
    /// them. The tape itself is left intact; call [`Tape::reset`] to reuse it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Gradient slot for an operand, or None if it does not need one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = slot!(*b) {
                    let nb = gb.len();
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = slot!(*x) {
                    axpy(*s, g, gx);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = slot!(*a) {
                    for bt in 0..*batch {
                        let gg = &g[bt * m * n..(bt + 1) * m * n];
                        let bb = &bd[bt * k * n..(bt + 1) * k * n];
                        let oa = &mut ga[bt * m * k..(bt + 1) * m * k];
                        if *trans_b {
                            // dA = G · B  with B stored [n, k]
                            matmul_nn(gg, bb, oa, m, n, k);
                        } else {
                            // dA = G · Bᵀ with B stored [k, n]
                            matmul_nt(gg, bb, oa, m, n, k);
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for bt in 0..*batch {
                        let gg = &g[bt * m * n..(bt + 1) * m * n];
                        let ab = &ad[bt * m * k..(bt + 1) * m * k];
                        let ob = &mut gb[bt * k * n..(bt + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = Gᵀ · A
                            matmul_tn(gg, ab, ob, m, n, k);
                        } else {
                            // dB[k, n] = Aᵀ · G
                            matmul_tn(ab, gg, ob, m, k, n);
                        }
                    }
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = slot!(*x) {
                    matmul_nn(g, wd, gx, *rows, *out, *inp);
                }
                if let Some(gw) = slot!(*w) {
                    matmul_tn(g, xd, gw, *rows, *out, *inp);
                }
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for row in g.chunks(*out) {
                            gb.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::Gather { x, index, block } => {
                if let Some(gx) = slot!(*x) {
                    let bl = *block;
                    for (o, &i) in index.iter().enumerate() {
                        let src = &g[o * bl..(o + 1) * bl];
                        gx[i * bl..(i + 1) * bl]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Concat {
                xs,
                pre,
                post,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if let Some(gx) = slot!(v) {
                        for p in 0..*pre {
                            let src =
                                &g[(p * total + offset) * post..(p * total + offset + w) * post];
                            gx[p * w * post..(p + 1) * w * post]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Softmax { x, n } => {
                let y = node.value.data();
                if let Some(gx) = slot!(*x) {
                    for ((yr, gr), dr) in y.chunks(*n).zip(g.chunks(*n)).zip(gx.chunks_mut(*n)) {
                        let s = dot(yr, gr);
                        for i in 0..*n {
                            dr[i] += yr[i] * (gr[i] - s);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xd = self.data(*x);
                if let Some(gx) = slot!(*x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xd[i]);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                if let Some(gx) = slot!(*x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                n,
                rstd,
            } => {
                let n = *n;
                let nt = T::lit(n as f64);
                let (xd, gd) = (self.data(*x), self.data(*gain));
                // Normalised activations are recomputed from the saved statistics.
                let xhat: Vec<T> = xd
                    .chunks(n)
                    .zip(rstd)
                    .flat_map(|(xr, &rs)| {
                        let mean = xr.iter().copied().sum::<T>() / nt;
                        xr.iter().map(move |&v| (v - mean) * rs)
                    })
                    .collect();
                if let Some(gg) = slot!(*gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for i in 0..n {
                            gg[i] += gr[i] * hr[i];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(d, &s)| *d += s);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for i in 0..n {
                            dxhat[i] = gr[i] * gd[i];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / nt;
                        let m2 = dot(&dxhat, hr) / nt;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for i in 0..n {
                            dst[i] += rs * (dxhat[i] - m1 - hr[i] * m2);
                        }
                    }
                }
            }
            Op::Mean { x, pre, len, post } => {
                if let Some(gx) = slot!(*x) {
                    let inv = T::one() / T::lit(*len as f64);
                    for p in 0..*pre {
                        let src = &g[p * post..(p + 1) * post];
                        for l in 0..*len {
                            let dst = &mut gx[(p * len + l) * post..(p * len + l + 1) * post];
                            axpy(inv, src, dst);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Conv1d {
                z,
                kernel,
                rows,
                c,
                k,
            } => {
                let (c, k) = (*c, *k);
                let pad = (k - 1) / 2;
                let (zd, kd) = (self.data(*z), self.data(*kernel));
                if let Some(gz) = slot!(*z) {
                    for r in 0..*rows {
                        for ch in 0..c {
                            let gv = g[r * c + ch];
                            for (t, &w) in kd.iter().enumerate() {
                                let pos = ch + t;
                                if pos >= pad && pos - pad < c {
                                    gz[r * c + pos - pad] += w * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = slot!(*kernel) {
                    for r in 0..*rows {
                        for ch in 0..c {
                            let gv = g[r * c + ch];
                            for (t, d) in gk.iter_mut().enumerate() {
                                let pos = ch + t;
                                if pos >= pad && pos - pad < c {
                                    *d += zd[r * c + pos - pad] * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::ScaleChannels { x, w, b, l, c } => {
                let (l, c) = (*l, *c);
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = slot!(*x) {
                    for bi in 0..*b {
                        let wr = &wd[bi * c..(bi + 1) * c];
                        for li in 0..l {
                            let o = (bi * l + li) * c;
                            for ch in 0..c {
                                gx[o + ch] += g[o + ch] * wr[ch];
                            }
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for bi in 0..*b {
                        let dst = &mut gw[bi * c..(bi + 1) * c];
                        for li in 0..l {
                            let o = (bi * l + li) * c;
                            for ch in 0..c {
                                dst[ch] += g[o + ch] * xd[o + ch];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                k,
            } => {
                if let Some(gl) = slot!(*logits) {
                    let scale = g[0] / T::lit(labels.len() as f64);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..*k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot!(*x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
