use super::interp::{bilinear_taps, Taps};
use super::{broadcast_shape, c, numel, strides, Real, Tensor};
use crate::error::{Error, Result};

/// GELU tanh-approximation constant, sqrt(2/pi).
pub const GELU_K: f64 = 0.7978845608;
const GELU_C: f64 = 0.044715;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Gelu,
    Sigmoid,
    Log,
    Exp,
}

enum Op<T> {
    Leaf,
    Binary(Bin, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        dim: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Resize {
        x: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    Sum(Var),
    Mean(Var),
    BceLogits(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it and a reverse sweep is a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if rg { op } else { Op::Leaf },
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let am = bcast_map(&out_shape, &sa);
        let bm = bcast_map(&out_shape, &sb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = av[am.as_ref().map_or(i, |m| m[i])];
            let y = bv[bm.as_ref().map_or(i, |m| m[i])];
            out.push(match kind {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
                Bin::Div => x / y,
            });
        }
        self.push(name, Tensor::from_parts(out_shape, out), Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let name = match kind {
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Exp => "exp",
        };
        if let Unary::Log = kind {
            if let Some(bad) = xv.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let out: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Gelu => gelu(v),
                Unary::Sigmoid => sigmoid(v),
                Unary::Log => v.ln(),
                Unary::Exp => v.exp(),
            })
            .collect();
        self.push(name, Tensor::from_parts(shape, out), Op::Unary(kind, x), &[x])
    }

    /// GELU, tanh approximation with constant [`GELU_K`].
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = c::<T>(s);
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * s).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("scale", t, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = c::<T>(s);
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v + s).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes. Supports `[m,k]·[k,n]`,
    /// batched `[..,m,k]·[..,k,n]` with equal batch extents, and a batched
    /// left operand against a shared `[k,n]` right operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let MatDims { batch, m, k, n, b_shared } = dims;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = &av[bi * m * k..(bi + 1) * m * k];
            let bo = if b_shared { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
            gemm_nn(m, k, n, ao, bo, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// LayerNorm over the last axis followed by the affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "input {shape:?} with gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let inv_d = c::<T>(1.0 / d as f64);
        let eps = c::<T>(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        self.push("layernorm", Tensor::from_parts(shape, out), op, &[x, gamma, beta])
    }

    // ---- shape ops ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", xv.shape()),
            ));
        }
        let t = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape();
        let mut seen = vec![false; sh.len()];
        if axes.len() != sh.len() || axes.iter().any(|&a| a >= sh.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {sh:?}")));
        }
        let (out_shape, map) = permute_map(sh, axes);
        let data = xv.data();
        let out = map.iter().map(|&i| data[i]).collect();
        self.push("permute", Tensor::from_parts(out_shape, out), Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], dim: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if dim >= base.len() {
            return Err(Error::shape("concat", format!("dim {dim} for shape {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == dim || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} with {s:?} along dim {dim}")));
            }
            total += s[dim];
        }
        let outer = numel(&base[..dim]);
        let inner = numel(&base[dim + 1..]);
        let mut out_shape = base.clone();
        out_shape[dim] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[dim] * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push("concat", Tensor::from_parts(out_shape, out), Op::Concat(xs.to_vec(), dim), xs)
    }

    /// Slice `len` entries starting at `start` along `dim`.
    pub fn narrow(&mut self, x: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if dim >= sh.len() || len == 0 || start + len > sh[dim] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) along dim {dim} of {sh:?}", start + len),
            ));
        }
        let outer = numel(&sh[..dim]);
        let inner = numel(&sh[dim + 1..]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sh[dim] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = sh;
        out_shape[dim] = len;
        self.push("narrow", Tensor::from_parts(out_shape, out), Op::Narrow { x, dim, start }, &[x])
    }

    pub fn split(&mut self, x: Var, dim: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let sh = self.shape(x);
        if dim >= sh.len() || sizes.iter().sum::<usize>() != sh[dim] {
            return Err(Error::shape("split", format!("sizes {sizes:?} along dim {dim} of {sh:?}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(x, dim, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// `out[i] = x[idx[i]]` along the first axis. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let rows = *sh.first().ok_or_else(|| Error::shape("gather_rows", "scalar input"))?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {sh:?}")));
        }
        let row = numel(&sh[1..]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&data[i * row..(i + 1) * row]);
        }
        let mut out_shape = sh;
        out_shape[0] = idx.len();
        self.push("gather_rows", Tensor::from_parts(out_shape, out), Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Bilinear resize of a token map `[h*w, c]` on grid `from` to grid `to`,
    /// half-pixel centers (align-corners = false).
    pub fn resize_bilinear(&mut self, x: Var, from: (usize, usize), to: (usize, usize)) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 2 || sh[0] != from.0 * from.1 || to.0 == 0 || to.1 == 0 {
            return Err(Error::shape("resize", format!("{sh:?} on grid {from:?} -> {to:?}")));
        }
        let ch = sh[1];
        let ty = bilinear_taps(from.0, to.0);
        let tx = bilinear_taps(from.1, to.1);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); to.0 * to.1 * ch];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, xx) in tx.iter().enumerate() {
                let dst = &mut out[(oy * to.1 + ox) * ch..(oy * to.1 + ox + 1) * ch];
                for (r, cc, w) in taps4(y, xx) {
                    let w = c::<T>(w);
                    if w == T::zero() {
                        continue;
                    }
                    let src = &data[(r * from.1 + cc) * ch..(r * from.1 + cc + 1) * ch];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * *s;
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![to.0 * to.1, ch], out);
        self.push("resize", t, Op::Resize { x, from, to }, &[x])
    }

    pub fn upsample2x(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        self.resize_bilinear(x, grid, (grid.0 * 2, grid.1 * 2))
    }

    // ---- reductions and losses -------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / c::<T>(v.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Per-element binary cross-entropy on logits against constant targets,
    /// in the stable form `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", xv.shape(), target.shape()),
            ));
        }
        let out = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push("bce_with_logits", t, Op::BceLogits(x, target.data().to_vec()), &[x])
    }

    // ---- backward -------------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clear accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss; populates [`Graph::grad`] for every
    /// node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Backward("graph was built without gradient tracking".into()));
        }
        if self.backward_done {
            return Err(Error::Backward("called twice without zero_grad".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let am = bcast_map(out_shape, sa);
                let bm = bcast_map(out_shape, sb);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, av.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let ia = am.as_ref().map_or(k, |m| m[k]);
                        let ib = bm.as_ref().map_or(k, |m| m[k]);
                        ga[ia] += match kind {
                            Bin::Add | Bin::Sub => gk,
                            Bin::Mul => gk * bv[ib],
                            Bin::Div => gk / bv[ib],
                        };
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let ia = am.as_ref().map_or(k, |m| m[k]);
                        let ib = bm.as_ref().map_or(k, |m| m[k]);
                        gb[ib] += match kind {
                            Bin::Add => gk,
                            Bin::Sub => -gk,
                            Bin::Mul => gk * av[ia],
                            Bin::Div => -gk * av[ia] / (bv[ib] * bv[ib]),
                        };
                    }
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let gx = slot(grads, *x, xv.len());
                for k in 0..g.len() {
                    let d = match kind {
                        Unary::Gelu => gelu_grad(xv[k]),
                        Unary::Sigmoid => yv[k] * (T::one() - yv[k]),
                        Unary::Log => xv[k].recip(),
                        Unary::Exp => yv[k],
                    };
                    gx[k] += g[k] * d;
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.len());
                for (d, &gk) in gx.iter_mut().zip(g) {
                    *d += gk * *s;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                for (d, &gk) in gx.iter_mut().zip(g) {
                    *d += gk;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let MatDims { batch, m, k, n, b_shared } =
                    matmul_dims(sa, sb).expect("validated in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let ga = slot(grads, *a, av.len());
                    for bi in 0..batch {
                        let bo = if b_shared { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        gemm_nt(m, k, n, &g[bi * m * n..(bi + 1) * m * n], bo, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for bi in 0..batch {
                        let dst = if b_shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        gemm_tn(m, k, n, &av[bi * m * k..(bi + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], dst);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let gx = slot(grads, *x, y.len());
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if wants(*x) {
                    let inv_d = c::<T>(1.0 / d as f64);
                    let gx = slot(grads, *x, g.len());
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Permute(x, axes) => {
                let (_, map) = permute_map(self.shape(*x), axes);
                let gx = slot(grads, *x, g.len());
                for (k, &src) in map.iter().enumerate() {
                    gx[src] += g[k];
                }
            }
            Op::Concat(xs, dim) => {
                let out_shape = node.value.shape();
                let outer = numel(&out_shape[..*dim]);
                let inner = numel(&out_shape[dim + 1..]);
                let mut off = 0;
                for o in 0..outer {
                    for &x in xs {
                        let chunk = self.shape(x)[*dim] * inner;
                        if wants(x) {
                            let len = self.value(x).len();
                            let gx = slot(grads, x, len);
                            for (d, &gk) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[off..off + chunk]) {
                                *d += gk;
                            }
                        }
                        off += chunk;
                    }
                }
            }
            Op::Narrow { x, dim, start } => {
                let sh = self.shape(*x);
                let len = node.value.shape()[*dim];
                let outer = numel(&sh[..*dim]);
                let inner = numel(&sh[dim + 1..]);
                let full = sh[*dim];
                let gx = slot(grads, *x, numel(sh));
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &gk) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *d += gk;
                    }
                }
            }
            Op::GatherRows(x, idx) => {
                let sh = self.shape(*x);
                let row = numel(&sh[1..]);
                let gx = slot(grads, *x, numel(sh));
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..row {
                        gx[r * row + j] += g[k * row + j];
                    }
                }
            }
            Op::Resize { x, from, to } => {
                let ch = self.shape(*x)[1];
                let ty = bilinear_taps(from.0, to.0);
                let tx = bilinear_taps(from.1, to.1);
                let gx = slot(grads, *x, from.0 * from.1 * ch);
                for (oy, y) in ty.iter().enumerate() {
                    for (ox, xx) in tx.iter().enumerate() {
                        let src = &g[(oy * to.1 + ox) * ch..(oy * to.1 + ox + 1) * ch];
                        for (r, cc, w) in taps4(y, xx) {
                            let w = c::<T>(w);
                            if w == T::zero() {
                                continue;
                            }
                            let dst = &mut gx[(r * from.1 + cc) * ch..(r * from.1 + cc + 1) * ch];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += w * s;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, self.value(*x).len());
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g[0] / c::<T>(n as f64);
                let gx = slot(grads, *x, n);
                for d in gx.iter_mut() {
                    *d += s;
                }
            }
            Op::BceLogits(x, target) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, xv.len());
                for k in 0..g.len() {
                    gx[k] += g[k] * (sigmoid(xv[k]) - target[k]);
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let k = c::<T>(GELU_K);
    let inner = k * (x + c::<T>(GELU_C) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = c::<T>(GELU_K);
    let cc = c::<T>(GELU_C);
    let t = (k * (x + cc * x * x * x)).tanh();
    let half = c::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * cc * x * x)
}

fn taps4(y: &Taps, x: &Taps) -> [(usize, usize, f64); 4] {
    [
        (y.i0, x.i0, y.w0 * x.w0),
        (y.i0, x.i1, y.w0 * x.w1),
        (y.i1, x.i0, y.w1 * x.w0),
        (y.i1, x.i1, y.w1 * x.w1),
    ]
}

/// Flat input index for each output element under broadcasting; `None` when
/// the shapes already agree.
fn bcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let n = out.len();
    let in_str = strides(inp);
    let lead = n - inp.len();
    let mut st = vec![0usize; n];
    for (k, (&d, &s)) in inp.iter().zip(&in_str).enumerate() {
        if d != 1 {
            st[lead + k] = s;
        }
    }
    Some(strided_offsets(out, &st))
}

/// Offsets `sum(idx[d] * st[d])` for every multi-index of `shape`, row-major.
fn strided_offsets(shape: &[usize], st: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let n = shape.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += st[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_str = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    let map = strided_offsets(&out_shape, &st);
    (out_shape, map)
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatDims> {
    let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
    if sa.len() < 2 || sb.len() < 2 {
        return Err(bad());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(bad());
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let b_shared = bb.is_empty();
    if !b_shared && ba != bb {
        return Err(bad());
    }
    Ok(MatDims {
        batch: numel(ba),
        m,
        k,
        n,
        b_shared,
    })
}

fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] · bᵀ` where `b` is `[k,n]`.
fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, g: &[T], b: &[T], da: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (x, y) in grow.iter().zip(brow) {
                s += *x * *y;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db[k,n] += aᵀ · g` where `a` is `[m,k]` and `g` is `[m,n]`.
fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], g: &[T], db: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}
