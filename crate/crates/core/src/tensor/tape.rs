use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, gemm, gemm_view, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        shared_rhs: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `b` broadcast over the leading axes of `a`.
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    LeakyRelu { a: Var, slope: f64 },
    Gelu { a: Var },
    Softplus { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, dim: usize },
    Expand { a: Var, count: usize },
    GatherRows { table: Var, idx: Arc<[usize]> },
    Rope { a: Var, cos: Vec<f64>, sin: Vec<f64> },
    KerpleBias { r1: Var, r2: Var, n: usize },
    FireInput { c: Var, n: usize, threshold: usize },
    Dropout { a: Var, scale: Vec<f64> },
    ChannelMlp { x: Var, y: Option<Var>, w1: Var, b1: Option<Var>, w2: Var, b2: Option<Var>, slope: f64 },
}

/// Positions processed per block by the channel MLP.
const MLP_BLOCK: usize = 1024;

/// Shapes of a channel-MLP call: batch, channels of `x` and `y`,
/// positions per channel, hidden width, outputs.
#[derive(Clone, Copy)]
struct MlpDims {
    batch: usize,
    c1: usize,
    c2: usize,
    s: usize,
    d: usize,
    m: usize,
}

/// Pre-activations for positions `p0..p0+r` of batch row `bi`:
/// `w1ᵀ·[x; y] + b1`, written channel-major `[d, r]` into `pre`.
#[allow(clippy::too_many_arguments)]
fn mlp_pre(
    dims: MlpDims,
    x: &[f64],
    y: Option<&[f64]>,
    w1: &[f64],
    b1: Option<&[f64]>,
    bi: usize,
    p0: usize,
    r: usize,
    pre: &mut [f64],
) {
    let MlpDims { c1, c2, s, d, .. } = dims;
    let xb = View { data: &x[bi * c1 * s + p0..], rs: s, cs: 1 };
    gemm_view(d, c1, r, View::cols(&w1[..c1 * d], d), xb, pre, r, 1, false);
    if let Some(y) = y {
        let yb = View { data: &y[p0..], rs: s, cs: 1 };
        gemm_view(d, c2, r, View::cols(&w1[c1 * d..], d), yb, pre, r, 1, true);
    }
    if let Some(b) = b1 {
        for (row, c) in pre[..d * r].chunks_exact_mut(r).zip(b) {
            row.iter_mut().for_each(|z| *z += c);
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic computation tape, rebuilt for every forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient left by the last [`Tape::backward`], if the node needed one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] but multiplies by `bᵀ` (`b` is `[..., n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if kb != k || (!shared_rhs && lead_a != lead_b) {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            if shared_rhs {
                gemm(batch * m, k, n, ad, false, bd, trans_b, &mut out, false);
            } else {
                for t in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[t * m * k..(t + 1) * m * k],
                        false,
                        &bd[t * k * n..(t + 1) * k * n],
                        trans_b,
                        &mut out[t * m * n..(t + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            shared_rhs,
            batch,
            m,
            k,
            n,
        };
        Ok(self.push(shape, out, op, &[a, b]))
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let shape = sa.to_vec();
        let bd = self.data(b);
        let period = bd.len();
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(period)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, factor }, &[a])
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!("leaky slope {slope} outside (0, 1)")));
        }
        Ok(self.leaky(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky(a, 0.0)
    }

    fn leaky(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::LeakyRelu { a, slope }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| kernels::gelu(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu { a }, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| kernels::softplus(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softplus { a }, &[a])
    }

    /// Softmax over the last axis.
    ///
    /// `mask` (true = keep) covers a whole number of rows and is tiled over
    /// the rest of the tensor; masked entries come out exactly zero and their
    /// input values are never read.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("tensors have at least one axis");
        let data = self.data(a);
        if let Some(m) = mask {
            if m.len() % n != 0 || data.len() % m.len() != 0 {
                return Err(shape_err("softmax mask", &shape, &[m.len()]));
            }
        }
        let mut out = vec![0.0; data.len()];
        for (r, (row, orow)) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let mrow = mask.map(|m| {
                let off = (r * n) % m.len();
                &m[off..off + n]
            });
            let keep = |j: usize| mrow.is_none_or(|m| m[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if keep(j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut sum = 0.0;
            for (j, (&x, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (x - max).exp();
                    sum += *o;
                }
            }
            let inv = 1.0 / sum;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.push(shape, out, Op::Softmax { a }, &[a]))
    }

    /// Normalizes each row of the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have at least one axis");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(shape, out, op, &[x, gamma, beta]))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    ///
    /// `logits` is `[..., V]`, flattened to one row per target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let shape = self.shape(logits);
        let v = *shape.last().expect("tensors have at least one axis");
        let data = self.data(logits);
        let rows = data.len() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err("cross_entropy", shape, &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("cross-entropy with every position masked".into()));
        }
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = &data[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / count as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(vec![1], vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, &[a]))
    }

    /// Output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", shape, perm));
        }
        let (out, out_shape) = kernels::permute(self.data(a), shape, perm);
        let op = Op::Permute { a, perm: perm.to_vec() };
        Ok(self.push(out_shape, out, op, &[a]))
    }

    /// Concatenates along `dim`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if dim >= first.len() {
            return Err(shape_err("concat", &first, &[dim]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..dim] != first[..dim] || s[dim + 1..] != first[dim + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[dim];
        }
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[dim] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[dim] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            dim,
        };
        Ok(self.push(shape, out, op, parts))
    }

    /// Repeats `a` along a new leading axis of size `count`.
    pub fn expand(&mut self, a: Var, count: usize) -> Var {
        let d = self.data(a);
        let mut out = Vec::with_capacity(d.len() * count);
        for _ in 0..count {
            out.extend_from_slice(d);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(a));
        self.push(shape, out, Op::Expand { a, count }, &[a])
    }

    /// Row lookup: `table` is `[rows, cols]`, output is `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(shape_err("gather_rows", shape, &[idx.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let d = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather row",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let op = Op::GatherRows {
            table,
            idx: idx.into(),
        };
        Ok(self.push(vec![idx.len(), cols], out, op, &[table]))
    }

    /// Rotates consecutive channel pairs of `a` (`[..., n, d]`) by
    /// `positions[t]·theta_base^(-2i/d)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], theta_base: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("rope", &shape, &[positions.len()]));
        }
        let d = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        if d % 2 != 0 {
            return Err(Error::config(format!("rotary width {d} must be even")));
        }
        if positions.len() != n {
            return Err(shape_err("rope", &shape, &[positions.len()]));
        }
        let half = d / 2;
        let mut cos = vec![0.0; n * half];
        let mut sin = vec![0.0; n * half];
        for (t, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let angle = p as f64 * theta_base.powf(-2.0 * i as f64 / d as f64);
                cos[t * half + i] = angle.cos();
                sin[t * half + i] = angle.sin();
            }
        }
        let out = rotate_pairs(self.data(a), n, d, &cos, &sin, 1.0);
        Ok(self.push(shape, out, Op::Rope { a, cos, sin }, &[a]))
    }

    /// `-r1[k]·ln(1 + r2[k]·|i-j|)` for every head `k`, as `[h, n, n]`.
    pub fn kerple_bias(&mut self, r1: Var, r2: Var, n: usize) -> Result<Var> {
        let h = self.value(r1).numel();
        if self.shape(r1) != [h] || self.shape(r2) != [h] {
            return Err(shape_err("kerple_bias", self.shape(r1), self.shape(r2)));
        }
        let (a, b) = (self.data(r1), self.data(r2));
        let mut out = vec![0.0; h * n * n];
        for k in 0..h {
            for i in 0..n {
                for j in 0..n {
                    let dist = i.abs_diff(j) as f64;
                    out[(k * n + i) * n + j] = -a[k] * (b[k] * dist).ln_1p();
                }
            }
        }
        Ok(self.push(vec![h, n, n], out, Op::KerpleBias { r1, r2, n }, &[r1, r2]))
    }

    /// Normalized distance `ψ(|i-j|) / ψ(max(threshold, i))` with
    /// `ψ(x) = ln(c·x + 1)`, laid out as `[n·n, 1]`.
    pub fn fire_input(&mut self, c: Var, n: usize, threshold: usize) -> Result<Var> {
        if self.shape(c) != [1] {
            return Err(shape_err("fire_input", self.shape(c), &[1]));
        }
        if threshold == 0 {
            return Err(Error::config("FIRE threshold must be positive"));
        }
        let c0 = self.data(c)[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let den = (c0 * i.max(threshold) as f64).ln_1p();
            for j in 0..n {
                out[i * n + j] = (c0 * i.abs_diff(j) as f64).ln_1p() / den;
            }
        }
        Ok(self.push(vec![n * n, 1], out, Op::FireInput { c, n, threshold }, &[c]))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Dropout { a, scale }, &[a])
    }

    /// Two-layer perceptron applied independently at every position over
    /// the channel axis: `x` is `[batch, c1, ...]`, the optional `y` is
    /// `[c2, ...]` shared across the batch, and the output is
    /// `[batch, m, ...]` with `leaky([x, y]·w1 + b1)·w2 + b2` per position.
    ///
    /// Inputs are read through strided views and the hidden layer is
    /// recomputed in the backward pass, so no `[positions, hidden]`
    /// buffer outlives a block.
    #[allow(clippy::too_many_arguments)]
    pub fn channel_mlp(
        &mut self,
        x: Var,
        y: Option<Var>,
        w1: Var,
        b1: Option<Var>,
        w2: Var,
        b2: Option<Var>,
        slope: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::config(format!("leaky slope {slope} outside [0, 1)")));
        }
        let sx = self.shape(x).to_vec();
        let (s1, s2) = (self.shape(w1).to_vec(), self.shape(w2).to_vec());
        if sx.len() < 2 || s1.len() != 2 || s2.len() != 2 || s1[1] != s2[0] {
            return Err(shape_err("channel_mlp", &sx, &s1));
        }
        let c2 = match y {
            Some(y) => {
                let sy = self.shape(y);
                if sy.len() + 1 != sx.len() || sy[1..] != sx[2..] {
                    return Err(shape_err("channel_mlp", &sx, sy));
                }
                sy[0]
            }
            None => 0,
        };
        let dims = MlpDims {
            batch: sx[0],
            c1: sx[1],
            c2,
            s: sx[2..].iter().product(),
            d: s1[1],
            m: s2[1],
        };
        if s1[0] != dims.c1 + c2 {
            return Err(shape_err("channel_mlp", &sx, &s1));
        }
        if b1.is_some_and(|b| self.shape(b) != [dims.d]) || b2.is_some_and(|b| self.shape(b) != [dims.m]) {
            return Err(shape_err("channel_mlp", &s1, &s2));
        }
        let MlpDims { batch, s, d, m, .. } = dims;
        let (xd, w1d, w2d) = (self.data(x), self.data(w1), self.data(w2));
        let yd = y.map(|v| self.data(v));
        let (b1d, b2d) = (b1.map(|b| self.data(b)), b2.map(|b| self.data(b)));
        let mut out = vec![0.0; batch * m * s];
        let mut pre = vec![0.0; MLP_BLOCK.min(s) * d];
        for bi in 0..batch {
            for p0 in (0..s).step_by(MLP_BLOCK) {
                let r = MLP_BLOCK.min(s - p0);
                mlp_pre(dims, xd, yd, w1d, b1d, bi, p0, r, &mut pre);
                let act = &mut pre[..r * d];
                act.iter_mut().for_each(|z| {
                    if *z < 0.0 {
                        *z *= slope
                    }
                });
                let ob = &mut out[bi * m * s + p0..];
                gemm_view(m, d, r, View::cols(w2d, m), View::rows(act, r), ob, s, 1, false);
            }
        }
        if let Some(b) = b2d {
            for (c, row) in out.chunks_exact_mut(s).enumerate() {
                let v = b[c % m];
                row.iter_mut().for_each(|u| *u += v);
            }
        }
        let mut inputs = vec![x, w1, w2];
        inputs.extend(y.into_iter().chain(b1).chain(b2));
        let mut shape = sx;
        shape[1] = m;
        let op = Op::ChannelMlp { x, y, w1, b1, w2, b2, slope };
        Ok(self.push(shape, out, op, &inputs))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires a gradient and is reachable from `loss`
    /// ends up with `grad` populated; fan-out contributions are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                shared_rhs,
                batch,
                m,
                k,
                n,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if rg(a) {
                    let mut da = vec![0.0; ad.len()];
                    if shared_rhs {
                        gemm(batch * m, n, k, g, false, bd, !trans_b, &mut da, false);
                    } else {
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bd[t * k * n..(t + 1) * k * n],
                                !trans_b,
                                &mut da[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                    }
                    accumulate(grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![0.0; bd.len()];
                    let rows = if shared_rhs { 1 } else { batch };
                    let mm = if shared_rhs { batch * m } else { m };
                    for t in 0..rows {
                        let gt = &g[t * mm * n..(t + 1) * mm * n];
                        let at = &ad[t * mm * k..(t + 1) * mm * k];
                        let dbt = &mut db[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            gemm(n, mm, k, gt, true, at, false, dbt, false);
                        } else {
                            gemm(k, mm, n, at, true, gt, false, dbt, false);
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Add { a, b } => {
                if rg(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if rg(b) {
                    let period = self.value(b).numel();
                    let mut db = vec![0.0; period];
                    for chunk in g.chunks_exact(period) {
                        db.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    let da = g.iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, da);
                }
                if rg(b) {
                    let db = g.iter().zip(self.data(a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::Scale { a, factor } => {
                accumulate(grads, a, g.iter().map(|x| x * factor).collect());
            }
            &Op::LeakyRelu { a, slope } => {
                let da = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gx, &x)| if x >= 0.0 { *gx } else { slope * gx })
                    .collect();
                accumulate(grads, a, da);
            }
            &Op::Gelu { a } => {
                let da = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gx, &x)| gx * kernels::gelu(x).1)
                    .collect();
                accumulate(grads, a, da);
            }
            &Op::Softplus { a } => {
                let da = g
                    .iter()
                    .zip(self.data(a))
                    .map(|(gx, &x)| gx * kernels::sigmoid(x))
                    .collect();
                accumulate(grads, a, da);
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(da.chunks_exact_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gm = self.data(*gamma);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xhat.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rs * (gr[j] * gm[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                if rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if rg(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + t] -= scale;
                }
                accumulate(grads, *logits, dl);
            }
            &Op::Sum { a } => {
                let len = self.value(a).numel();
                accumulate(grads, a, vec![g[0]; len]);
            }
            &Op::Mean { a } => {
                let len = self.value(a).numel();
                accumulate(grads, a, vec![g[0] / len as f64; len]);
            }
            &Op::Reshape { a } => accumulate(grads, a, g.to_vec()),
            Op::Permute { a, perm } => {
                let (da, _) = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                accumulate(grads, *a, da);
            }
            Op::Concat { parts, dim } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let mut bufs: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|&p| Vec::with_capacity(self.value(p).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &p) in bufs.iter_mut().zip(parts) {
                        let chunk = self.shape(p)[*dim] * inner;
                        buf.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (buf, &p) in bufs.into_iter().zip(parts) {
                    if rg(p) {
                        accumulate(grads, p, buf);
                    }
                }
            }
            &Op::Expand { a, count } => {
                let len = self.value(a).numel();
                let mut da = vec![0.0; len];
                for chunk in g.chunks_exact(len).take(count) {
                    da.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
                accumulate(grads, a, da);
            }
            Op::GatherRows { table, idx } => {
                let cols = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (t, &row) in idx.iter().enumerate() {
                    let dst = &mut dt[row * cols..(row + 1) * cols];
                    dst.iter_mut().zip(&g[t * cols..(t + 1) * cols]).for_each(|(d, x)| *d += x);
                }
                accumulate(grads, *table, dt);
            }
            Op::Rope { a, cos, sin } => {
                let shape = node.value.shape();
                let d = shape[shape.len() - 1];
                let n = shape[shape.len() - 2];
                accumulate(grads, *a, rotate_pairs(g, n, d, cos, sin, -1.0));
            }
            &Op::KerpleBias { r1, r2, n } => {
                let (a, b) = (self.data(r1), self.data(r2));
                let h = a.len();
                let mut d1 = vec![0.0; h];
                let mut d2 = vec![0.0; h];
                for k in 0..h {
                    for i in 0..n {
                        for j in 0..n {
                            let dist = i.abs_diff(j) as f64;
                            let gk = g[(k * n + i) * n + j];
                            d1[k] -= gk * (b[k] * dist).ln_1p();
                            d2[k] -= gk * a[k] * dist / (1.0 + b[k] * dist);
                        }
                    }
                }
                if rg(r1) {
                    accumulate(grads, r1, d1);
                }
                if rg(r2) {
                    accumulate(grads, r2, d2);
                }
            }
            &Op::FireInput { c, n, threshold } => {
                let c0 = self.data(c)[0];
                let mut dc = 0.0;
                for i in 0..n {
                    let m = i.max(threshold) as f64;
                    let den = (c0 * m).ln_1p();
                    let dden = m / (1.0 + c0 * m);
                    for j in 0..n {
                        let dist = i.abs_diff(j) as f64;
                        let num = (c0 * dist).ln_1p();
                        let dnum = dist / (1.0 + c0 * dist);
                        dc += g[i * n + j] * (dnum * den - num * dden) / (den * den);
                    }
                }
                accumulate(grads, c, vec![dc]);
            }
            &Op::ChannelMlp { x, y, w1, b1, w2, b2, slope } => {
                let (xd, w1d, w2d) = (self.data(x), self.data(w1), self.data(w2));
                let yd = y.map(|v| self.data(v));
                let b1d = b1.map(|b| self.data(b));
                let sx = self.shape(x);
                let dims = MlpDims {
                    batch: sx[0],
                    c1: sx[1],
                    c2: y.map_or(0, |v| self.shape(v)[0]),
                    s: sx[2..].iter().product(),
                    d: self.shape(w1)[1],
                    m: self.shape(w2)[1],
                };
                let MlpDims { batch, c1, c2, s, d, m } = dims;
                let mut dx = rg(x).then(|| vec![0.0; xd.len()]);
                let mut dy = y.filter(|&v| rg(v)).map(|v| vec![0.0; self.value(v).numel()]);
                let mut dw1 = vec![0.0; w1d.len()];
                let mut dw2 = vec![0.0; w2d.len()];
                let mut db1 = vec![0.0; d];
                let mut db2 = vec![0.0; m];
                let block = MLP_BLOCK.min(s);
                let mut pre = vec![0.0; block * d];
                let mut act = vec![0.0; block * d];
                let mut dpre = vec![0.0; block * d];
                for bi in 0..batch {
                    for p0 in (0..s).step_by(MLP_BLOCK) {
                        let r = MLP_BLOCK.min(s - p0);
                        mlp_pre(dims, xd, yd, w1d, b1d, bi, p0, r, &mut pre);
                        let (pre, act, dpre) = (&pre[..r * d], &mut act[..r * d], &mut dpre[..r * d]);
                        for (a, &z) in act.iter_mut().zip(pre) {
                            *a = if z >= 0.0 { z } else { slope * z };
                        }
                        let gb = &g[bi * m * s + p0..];
                        gemm_view(d, r, m, View::rows(act, r), View { data: gb, rs: 1, cs: s }, &mut dw2, m, 1, true);
                        gemm_view(d, m, r, View::rows(w2d, m), View { data: gb, rs: s, cs: 1 }, dpre, r, 1, false);
                        for (dz, &z) in dpre.iter_mut().zip(pre) {
                            if z < 0.0 {
                                *dz *= slope;
                            }
                        }
                        for (t, row) in db1.iter_mut().zip(dpre.chunks_exact(r)) {
                            *t += row.iter().sum::<f64>();
                        }
                        let xv = View { data: &xd[bi * c1 * s + p0..], rs: s, cs: 1 };
                        gemm_view(c1, r, d, xv, View::cols(dpre, r), &mut dw1[..c1 * d], d, 1, true);
                        if let Some(yd) = yd {
                            let yv = View { data: &yd[p0..], rs: s, cs: 1 };
                            gemm_view(c2, r, d, yv, View::cols(dpre, r), &mut dw1[c1 * d..], d, 1, true);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let w1x = View::rows(&w1d[..c1 * d], d);
                            gemm_view(c1, d, r, w1x, View::rows(dpre, r), &mut dx[bi * c1 * s + p0..], s, 1, false);
                        }
                        if let Some(dy) = dy.as_mut() {
                            let w1y = View::rows(&w1d[c1 * d..], d);
                            gemm_view(c2, d, r, w1y, View::rows(dpre, r), &mut dy[p0..], s, 1, true);
                        }
                    }
                }
                for (c, row) in g.chunks_exact(s).enumerate() {
                    db2[c % m] += row.iter().sum::<f64>();
                }
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if let (Some(y), Some(dy)) = (y, dy) {
                    accumulate(grads, y, dy);
                }
                if rg(w1) {
                    accumulate(grads, w1, dw1);
                }
                if rg(w2) {
                    accumulate(grads, w2, dw2);
                }
                if let Some(b) = b1.filter(|&b| rg(b)) {
                    accumulate(grads, b, db1);
                }
                if let Some(b) = b2.filter(|&b| rg(b)) {
                    accumulate(grads, b, db2);
                }
            }
            Op::Dropout { a, scale } => {
                let da = g.iter().zip(scale).map(|(x, s)| x * s).collect();
                accumulate(grads, *a, da);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

fn rotate_pairs(x: &[f64], n: usize, d: usize, cos: &[f64], sin: &[f64], dir: f64) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let t = r % n;
        for i in 0..half {
            let (c, s) = (cos[t * half + i], dir * sin[t * half + i]);
            let (x0, x1) = (xr[2 * i], xr[2 * i + 1]);
            or[2 * i] = x0 * c - x1 * s;
            or[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}
