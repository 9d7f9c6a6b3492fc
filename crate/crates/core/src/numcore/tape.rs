//! Reverse-mode differentiation tape.
//!
//! Every op appends one node holding its output value. Nodes are created
//! after their inputs, so the node list is already in topological order and
//! [`Tape::backward`] walks it once in reverse.

use super::kernels::{self, ConvGeometry};
use super::tensor::{argmax_first, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Taps = Vec<(usize, usize, f64)>;

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    },
    Upsample {
        x: Var,
        rows: Taps,
        cols: Taps,
    },
    SqDist(Var, Var),
    RegionMean {
        weights: Var,
        x: Var,
        fallback: Option<Var>,
        mass: Vec<T>,
        active: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records ops for one forward pass and replays them backward.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient of the last [`backward`](Self::backward) root w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`; each output entry is one inner product of a row of `a`
    /// with a row of `b`. Counted by [`inner_products`](super::inner_products).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err("matmul_nt", format!("{:?} × {:?}ᵀ", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = kernels::dot(arow, &bd[j * k..(j + 1) * k]);
                super::counter::tick();
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err("mul", format!("{:?} ⊙ {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return shape_err("add_row_bias", format!("{:?} + bias {:?}", self.shape(x), b.shape()));
        }
        let mut out = self.value(x).clone();
        let bd = b.data().to_vec();
        for i in 0..m {
            for (o, &bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        self.push("add_row_bias", out, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return invalid(format!("softmax axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = src[idx(0)];
                for j in 1..len {
                    mx = mx.max(src[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.push("softmax", out, Op::Softmax { x: a, axis }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / T::lit(x.len() as f64));
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Cross-correlation of `x: C_in×H×W` with `w: C_out×C_in×k×k` plus bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let wt = self.value(w);
        let [cout, wcin, kh, kw] = wt.shape()[..] else {
            return shape_err("conv2d", format!("weight must be rank 4, got {:?}", wt.shape()));
        };
        if wcin != cin || kh != kw {
            return shape_err("conv2d", format!("input {:?} with weight {:?}", self.shape(x), wt.shape()));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return shape_err("conv2d", format!("bias {:?} for {cout} filters", self.shape(b)));
            }
        }
        if stride == 0 || dilation == 0 {
            return invalid("conv2d stride and dilation must be positive");
        }
        let geo = ConvGeometry {
            in_channels: cin,
            in_h: h,
            in_w: wd,
            kernel: kh,
            stride,
            padding,
            dilation,
        };
        let Some((oh, ow)) = geo.out_hw() else {
            return invalid(format!("conv2d output extent is non-positive for input {h}×{wd}"));
        };
        let npos = oh * ow;
        let mut cols = vec![T::zero(); geo.patch_len() * npos];
        kernels::im2col(&geo, self.value(x).data(), &mut cols);
        let mut out = vec![T::zero(); cout * npos];
        if let Some(b) = b {
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * npos..(co + 1) * npos].iter_mut().for_each(|v| *v = bv);
            }
        }
        kernels::gemm(cout, geo.patch_len(), npos, self.value(w).data(), &cols, &mut out);
        let out = Tensor::new(&[cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geo }, &inputs)
    }

    /// Group normalization over `(channels-in-group × H × W)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if groups == 0 || c % groups != 0 {
            return invalid(format!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err("group_norm", "affine parameters must have one entry per channel");
        }
        let plane = h * w;
        let per = c / groups * plane;
        let src = self.value(x).data();
        let (g_d, b_d) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); src.len()];
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        let n = T::lit(per as f64);
        for g in 0..groups {
            let chunk = &src[g * per..(g + 1) * per];
            let mu = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::one() / (var + T::lit(eps)).sqrt();
            for (i, (&v, o)) in chunk.iter().zip(&mut out[g * per..(g + 1) * per]).enumerate() {
                let ch = g * (c / groups) + i / plane;
                *o = g_d[ch] * (v - mu) * r + b_d[ch];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = Tensor::new(&[c, h, w], out)?;
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        };
        self.push("group_norm", out, op, &[x, gamma, beta])
    }

    /// Window maximum; gradient goes to the first maximal element.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return invalid(format!("max_pool2d window {kernel} does not fit {h}×{w}"));
        }
        let rows = kernels::pool_windows(h, kernel, stride, false);
        let cols = kernels::pool_windows(w, kernel, stride, false);
        let (oh, ow) = (rows.len(), cols.len());
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let mut window = Vec::with_capacity(kernel * kernel);
        for ch in 0..c {
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    window.clear();
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            window.push((ch * h + y) * w + xx);
                        }
                    }
                    let vals: Vec<T> = window.iter().map(|&i| src[i]).collect();
                    let best = window[argmax_first(&vals)];
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        self.push("max_pool2d", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Window mean. With `ceil_mode` the last window may be clipped at the
    /// edge (or exceed the whole input) and averages only the elements it covers.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, ceil_mode: bool) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if kernel == 0 || stride == 0 || (!ceil_mode && (kernel > h || kernel > w)) {
            return invalid(format!("avg_pool2d window {kernel} does not fit {h}×{w}"));
        }
        let rows = kernels::pool_windows(h, kernel, stride, ceil_mode);
        let cols = kernels::pool_windows(w, kernel, stride, ceil_mode);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * rows.len() * cols.len());
        for ch in 0..c {
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    // mean as offset from the first element: exact on constants
                    let first = src[(ch * h + r0) * w + c0];
                    let mut acc = T::zero();
                    for y in r0..r1 {
                        for xx in c0..c1 {
                            acc += src[(ch * h + y) * w + xx] - first;
                        }
                    }
                    out.push(first + acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let out = Tensor::new(&[c, rows.len(), cols.len()], out)?;
        self.push("avg_pool2d", out, Op::AvgPool { x, rows, cols }, &[x])
    }

    /// Bilinear resize of `C×h×w` to `C×out_h×out_w` (half-pixel centers).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h < h || out_w < w {
            return invalid(format!("bilinear_upsample cannot shrink {h}×{w} to {out_h}×{out_w}"));
        }
        let rows = kernels::linear_taps(h, out_h);
        let cols = kernels::linear_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    // lerp form keeps constant fields exact
                    let fx = T::lit(fx);
                    let (a, b) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                    let top = a + fx * (b - a);
                    let (a, b) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                    let bot = a + fx * (b - a);
                    out[(ch * out_h + oy) * out_w + ox] = top + fy * (bot - top);
                }
            }
        }
        let out = Tensor::new(&[c, out_h, out_w], out)?;
        self.push("bilinear_upsample", out, Op::Upsample { x, rows, cols }, &[x])
    }

    /// Pairwise squared Euclidean distances between rows: `a: n×d`, `b: k×d` → `n×k`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let (k, d2) = self.value(b).dims2()?;
        if d != d2 {
            return shape_err("sq_dist", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * k];
        for j in 0..n {
            let aj = &ad[j * d..(j + 1) * d];
            for c in 0..k {
                let bc = &bd[c * d..(c + 1) * d];
                out[j * k + c] = aj.iter().zip(bc).map(|(&p, &q)| (p - q) * (p - q)).sum();
            }
        }
        let out = Tensor::new(&[n, k], out)?;
        self.push("sq_dist", out, Op::SqDist(a, b), &[a, b])
    }

    /// Weighted per-column means: with `weights: n×k` and `x: n×c`, row `i` of
    /// the `k×c` output is `Σ_j w_ji x_j / Σ_j w_ji`. Columns whose mass does
    /// not exceed `eps` yield the matching `fallback` row, or zeros.
    pub fn region_mean(&mut self, weights: Var, x: Var, fallback: Option<Var>, eps: f64) -> Result<Var> {
        let (n, k) = self.value(weights).dims2()?;
        let (n2, c) = self.value(x).dims2()?;
        if n != n2 {
            return shape_err("region_mean", format!("weights {:?} vs features {:?}", self.shape(weights), self.shape(x)));
        }
        if let Some(f) = fallback {
            if self.shape(f) != [k, c] {
                return shape_err("region_mean", format!("fallback {:?}, expected [{k}, {c}]", self.shape(f)));
            }
        }
        let wd = self.value(weights).data();
        let mut mass = vec![T::zero(); k];
        for j in 0..n {
            for (m, &wv) in mass.iter_mut().zip(&wd[j * k..(j + 1) * k]) {
                *m += wv;
            }
        }
        let mut out = vec![T::zero(); k * c];
        kernels::gemm_tn(k, n, c, wd, self.value(x).data(), &mut out);
        let active: Vec<bool> = mass.iter().map(|&m| m.as_f64() > eps).collect();
        for i in 0..k {
            let row = &mut out[i * c..(i + 1) * c];
            if active[i] {
                row.iter_mut().for_each(|v| *v /= mass[i]);
            } else if let Some(f) = fallback {
                row.copy_from_slice(&self.value(f).data()[i * c..(i + 1) * c]);
            } else {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let out = Tensor::new(&[k, c], out)?;
        let mut inputs = vec![weights, x];
        inputs.extend(fallback);
        let op = Op::RegionMean {
            weights,
            x,
            fallback,
            mass,
            active,
        };
        self.push("region_mean", out, op, &inputs)
    }

    /// Mean of `−log softmax(logits[:, p])[class]` over `(p, class)` targets,
    /// with `logits: C×H×W` (or `C×P`) and `p` a flattened spatial index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if targets.is_empty() {
            return Err(Error::Missing("labeled pixels for cross entropy".into()));
        }
        let classes = shape[0];
        let npix: usize = shape[1..].iter().product();
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(targets.len() * classes);
        let mut total = 0.0f64;
        let mut col = vec![T::zero(); classes];
        for &(p, cls) in targets {
            if p >= npix || cls >= classes {
                return invalid(format!("cross_entropy target ({p}, {cls}) outside {shape:?}"));
            }
            for (ci, v) in col.iter_mut().enumerate() {
                *v = src[ci * npix + p];
            }
            let mx = col.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = col.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            total += (lse - col[cls]).as_f64();
            probs.extend(col.iter().map(|&v| (v - lse).exp()));
        }
        let out = Tensor::scalar(T::lit(total / targets.len() as f64));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", out, op, &[logits])
    }

    // ---- backward -----------------------------------------------------------

    /// Populates gradients of the scalar `root` w.r.t. every leaf that
    /// requires them. Earlier gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return shape_err("backward", format!("root must be scalar, got {:?}", self.shape(root)));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = Tensor::ones(self.shape(root));
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, contrib) in self.local_grads(i, &g)? {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let gd = g.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, gd, self.value(b).data(), &mut da);
                    out.push((a, Tensor::new(&[m, k], da)?));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.value(a).data(), gd, &mut db);
                    out.push((b, Tensor::new(&[k, n], db)?));
                }
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (n, _) = self.value(b).dims2()?;
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, gd, self.value(b).data(), &mut da);
                    out.push((a, Tensor::new(&[m, k], da)?));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::gemm_tn(n, m, k, gd, self.value(a).data(), &mut db);
                    out.push((b, Tensor::new(&[n, k], db)?));
                }
            }
            &Op::Transpose(a) => out.push((a, g.transpose()?)),
            &Op::Reshape(a) => out.push((a, g.clone().reshape(self.shape(a))?)),
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = gd.iter().zip(y.data()).map(|(&g, &v)| g * v).collect();
                    out.push((a, Tensor::new(x.shape(), d)?));
                }
                if self.needs(b) {
                    let d = gd.iter().zip(x.data()).map(|(&g, &v)| g * v).collect();
                    out.push((b, Tensor::new(y.shape(), d)?));
                }
            }
            &Op::Scale(a, s) => out.push((a, g.scale(s))),
            &Op::AddRowBias(x, bias) => {
                let (m, n) = self.value(x).dims2()?;
                out.push((x, g.clone()));
                if self.needs(bias) {
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &v) in db.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *d += v;
                        }
                    }
                    out.push((bias, Tensor::new(self.shape(bias), db)?));
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((a, Tensor::new(x.shape(), d)?));
            }
            &Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, len, inner) = split_axis(y.shape(), axis);
                let yd = y.data();
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + r;
                        let s: T = (0..len).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - s);
                        }
                    }
                }
                out.push((x, Tensor::new(y.shape(), dx)?));
            }
            &Op::Sum(a) => out.push((a, Tensor::full(self.shape(a), gd[0]))),
            &Op::Mean(a) => {
                let n = T::lit(self.value(a).len() as f64);
                out.push((a, Tensor::full(self.shape(a), gd[0] / n)));
            }
            &Op::Conv2d { x, w, b, geo } => {
                let cout = self.shape(w)[0];
                let npos = gd.len() / cout;
                let plen = geo.patch_len();
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = (0..cout).map(|c| gd[c * npos..(c + 1) * npos].iter().copied().sum()).collect();
                        out.push((b, Tensor::new(&[cout], db)?));
                    }
                }
                let need_x = self.needs(x);
                if self.needs(w) || need_x {
                    let mut cols = vec![T::zero(); plen * npos];
                    if self.needs(w) {
                        kernels::im2col(&geo, self.value(x).data(), &mut cols);
                        let mut dw = vec![T::zero(); cout * plen];
                        kernels::gemm_nt(cout, npos, plen, gd, &cols, &mut dw);
                        out.push((w, Tensor::new(self.shape(w), dw)?));
                    }
                    if need_x {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(plen, cout, npos, self.value(w).data(), gd, &mut cols);
                        let mut dx = vec![T::zero(); self.value(x).len()];
                        kernels::col2im(&geo, &cols, &mut dx);
                        out.push((x, Tensor::new(self.shape(x), dx)?));
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (c, h, w) = self.value(x).dims3()?;
                let plane = h * w;
                let cpg = c / groups;
                let per = cpg * plane;
                let xd = self.value(x).data();
                let gam = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];
                let n = T::lit(per as f64);
                for gi in 0..groups {
                    let (mu, r) = (mean[gi], rstd[gi]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for t in gi * per..(gi + 1) * per {
                        let ch = t / plane;
                        let xhat = (xd[t] - mu) * r;
                        dgamma[ch] += gd[t] * xhat;
                        dbeta[ch] += gd[t];
                        let dxhat = gd[t] * gam[ch];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= n;
                    m2 /= n;
                    for t in gi * per..(gi + 1) * per {
                        let ch = t / plane;
                        let xhat = (xd[t] - mu) * r;
                        dx[t] = r * (gd[t] * gam[ch] - m1 - xhat * m2);
                    }
                }
                out.push((x, Tensor::new(&[c, h, w], dx)?));
                out.push((gamma, Tensor::new(self.shape(gamma), dgamma)?));
                out.push((beta, Tensor::new(self.shape(beta), dbeta)?));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                out.push((*x, Tensor::new(self.shape(*x), dx)?));
            }
            Op::AvgPool { x, rows, cols } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let mut dx = vec![T::zero(); c * h * w];
                let mut o = 0;
                for ch in 0..c {
                    for &(r0, r1) in rows {
                        for &(c0, c1) in cols {
                            let share = gd[o] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                            for y in r0..r1 {
                                for xx in c0..c1 {
                                    dx[(ch * h + y) * w + xx] += share;
                                }
                            }
                            o += 1;
                        }
                    }
                }
                out.push((*x, Tensor::new(&[c, h, w], dx)?));
            }
            Op::Upsample { x, rows, cols } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let (oh, ow) = (rows.len(), cols.len());
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        let (wy0, wy1) = (T::lit(1.0 - fy), T::lit(fy));
                        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let (wx0, wx1) = (T::lit(1.0 - fx), T::lit(fx));
                            let gv = gd[(ch * oh + oy) * ow + ox];
                            plane[y0 * w + x0] += gv * wy0 * wx0;
                            plane[y0 * w + x1] += gv * wy0 * wx1;
                            plane[y1 * w + x0] += gv * wy1 * wx0;
                            plane[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                out.push((*x, Tensor::new(&[c, h, w], dx)?));
            }
            &Op::SqDist(a, b) => {
                let (n, d) = self.value(a).dims2()?;
                let (k, _) = self.value(b).dims2()?;
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let two = T::lit(2.0);
                if self.needs(a) {
                    // da_j = 2 Σ_k g_jk (a_j − b_k)
                    let mut da = vec![T::zero(); n * d];
                    kernels::gemm(n, k, d, gd, bd, &mut da);
                    for j in 0..n {
                        let rs: T = gd[j * k..(j + 1) * k].iter().copied().sum();
                        for t in 0..d {
                            da[j * d + t] = two * (rs * ad[j * d + t] - da[j * d + t]);
                        }
                    }
                    out.push((a, Tensor::new(&[n, d], da)?));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * d];
                    kernels::gemm_tn(k, n, d, gd, ad, &mut db);
                    let mut cs = vec![T::zero(); k];
                    for j in 0..n {
                        for (c, &v) in cs.iter_mut().zip(&gd[j * k..(j + 1) * k]) {
                            *c += v;
                        }
                    }
                    for c in 0..k {
                        for t in 0..d {
                            db[c * d + t] = two * (cs[c] * bd[c * d + t] - db[c * d + t]);
                        }
                    }
                    out.push((b, Tensor::new(&[k, d], db)?));
                }
            }
            Op::RegionMean {
                weights,
                x,
                fallback,
                mass,
                active,
            } => {
                let (weights, x) = (*weights, *x);
                let (n, k) = self.value(weights).dims2()?;
                let (_, c) = self.value(x).dims2()?;
                let y = self.nodes[i].value.data();
                // Gradient rows of inactive regions are routed to the fallback only.
                let mut gs = gd.to_vec();
                for r in 0..k {
                    let row = &mut gs[r * c..(r + 1) * c];
                    if active[r] {
                        row.iter_mut().for_each(|v| *v /= mass[r]);
                    } else {
                        row.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                if self.needs(x) {
                    let mut dx = vec![T::zero(); n * c];
                    kernels::gemm(n, k, c, self.value(weights).data(), &gs, &mut dx);
                    out.push((x, Tensor::new(&[n, c], dx)?));
                }
                if self.needs(weights) {
                    // dw_jr = ĝ_r · (x_j − y_r)
                    let mut dw = vec![T::zero(); n * k];
                    kernels::gemm_nt(n, c, k, self.value(x).data(), &gs, &mut dw);
                    let offs: Vec<T> = (0..k)
                        .map(|r| kernels::dot(&gs[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]))
                        .collect();
                    for j in 0..n {
                        for r in 0..k {
                            dw[j * k + r] -= offs[r];
                        }
                    }
                    out.push((weights, Tensor::new(&[n, k], dw)?));
                }
                if let Some(f) = *fallback {
                    let mut df = vec![T::zero(); k * c];
                    for r in (0..k).filter(|&r| !active[r]) {
                        df[r * c..(r + 1) * c].copy_from_slice(&gd[r * c..(r + 1) * c]);
                    }
                    out.push((f, Tensor::new(&[k, c], df)?));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = self.shape(*logits);
                let classes = shape[0];
                let npix: usize = shape[1..].iter().product();
                let scale = gd[0] / T::lit(targets.len() as f64);
                let mut dl = vec![T::zero(); classes * npix];
                for (t, &(p, cls)) in targets.iter().enumerate() {
                    for ci in 0..classes {
                        let mut v = probs[t * classes + ci];
                        if ci == cls {
                            v -= T::one();
                        }
                        dl[ci * npix + p] += scale * v;
                    }
                }
                out.push((*logits, Tensor::new(shape, dl)?));
            }
        }
        Ok(out)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
