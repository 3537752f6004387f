use super::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this value normalize to the zero vector.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Leaf, or any node none of whose inputs require grad.
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Square(Var),
    Relu(Var),
    Log(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        input: Var,
        kx: usize,
        ky: usize,
    },
    /// Output index of every input element.
    SumAxes {
        input: Var,
        map: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Matmul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    L2Normalize {
        input: Var,
        eps: f64,
    },
    Softmax(Var),
    SqDist(Var, Var),
    Pick {
        input: Var,
        idx: Vec<usize>,
    },
    LogSumExpExcept {
        input: Var,
        idx: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_leaf: bool,
}

/// Append-only tape of primitive applications.
///
/// Node ids are issued in creation order, so every node's inputs precede it
/// and the tape is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, filled by `backward`.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank(op: &'static str, t: &Tensor, r: usize) -> Result<()> {
    if t.shape().len() != r {
        return Err(Error::shape(op, format!("expected rank {r}, got {:?}", t.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

/// Splits a shape into (rows, last-axis length).
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap();
    (shape.iter().product::<usize>() / d, d)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_node(t.clone().with_requires_grad(rg), Op::Const, rg, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_node(t.clone().with_requires_grad(false), Op::Const, false, true)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_node(t.clone().with_requires_grad(true), Op::Const, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if it received none.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, is_leaf: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(name, format!("output {} at index {i}", values[i])));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Const };
        Ok(self.push_node(Tensor::from_parts(shape, values), op, rg, false))
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn shp(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ----- elementwise -------------------------------------------------

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shp(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    fn map_unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.val(a).iter().map(|&x| f(x)).collect();
        let shape = self.shp(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map_unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale has shape {:?}", self.shp(s))));
        }
        let c = self.val(s)[0];
        let out: Vec<f64> = self.val(a).iter().map(|&x| c * x).collect();
        let shape = self.shp(a).to_vec();
        self.push("scale_by", shape, out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&x) = self.val(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::numeric("log", format!("non-positive input {x}")));
        }
        self.map_unary("log", a, Op::Log(a), f64::ln)
    }

    // ----- spatial -----------------------------------------------------

    /// 2-D convolution of a `(B, Ci, X, Y)` input with a `(Co, Ci, KX, KY)` kernel,
    /// zero padding on both spatial axes.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shp(input).to_vec();
        let ws = self.shp(weight).to_vec();
        rank("conv2d", self.value(input), 4)?;
        rank("conv2d", self.value(weight), 4)?;
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (b, ci, x, y) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kx, ky) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {ci} vs kernel channels {wci} (input {xs:?}, kernel {ws:?})"),
            ));
        }
        if x + 2 * padding < kx || y + 2 * padding < ky {
            return Err(Error::shape("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(bv) = bias {
            if self.shp(bv) != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {co} filters", self.shp(bv))));
            }
        }
        let ox = (x + 2 * padding - kx) / stride + 1;
        let oy = (y + 2 * padding - ky) / stride + 1;
        let geo = ConvGeometry {
            b,
            ci,
            x,
            y,
            kx,
            ky,
            stride,
            padding,
            ox,
            oy,
        };
        let cols = geo.im2col(self.val(input));
        let wt = transpose_raw(self.val(weight), co, ci * kx * ky);
        let prod = matmul_raw(&cols, &wt, b * ox * oy, ci * kx * ky, co);
        let bias_vals = bias.map(|bv| self.val(bv));
        let mut out = vec![0.0; b * co * ox * oy];
        let plane = ox * oy;
        for bi in 0..b {
            for p in 0..plane {
                let row = &prod[(bi * plane + p) * co..(bi * plane + p + 1) * co];
                for (o, v) in row.iter().enumerate() {
                    out[(bi * co + o) * plane + p] = v + bias_vals.map_or(0.0, |bv| bv[o]);
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            vec![b, co, ox, oy],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Non-overlapping `kx × ky` average pooling over the last two axes of a rank-4 tensor.
    pub fn avg_pool2d(&mut self, input: Var, kx: usize, ky: usize) -> Result<Var> {
        rank("avg_pool2d", self.value(input), 4)?;
        let s = self.shp(input).to_vec();
        if kx == 0 || ky == 0 || !s[2].is_multiple_of(kx) || !s[3].is_multiple_of(ky) {
            return Err(Error::shape("avg_pool2d", format!("window {kx}x{ky} does not tile {s:?}")));
        }
        let (ox, oy) = (s[2] / kx, s[3] / ky);
        let inv = 1.0 / (kx * ky) as f64;
        let inp = self.val(input);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * ox * oy];
        for p in 0..planes {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    out[(p * ox + i / kx) * oy + j / ky] += inv * inp[(p * s[2] + i) * s[3] + j];
                }
            }
        }
        self.push(
            "avg_pool2d",
            vec![s[0], s[1], ox, oy],
            out,
            Op::AvgPool2d { input, kx, ky },
            &[input],
        )
    }

    // ----- reductions and reshapes --------------------------------------

    /// Sums over the given axes, dropping them. Summing every axis yields shape `[1]`.
    pub fn sum_axes(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shp(input).to_vec();
        let r = shape.len();
        let mut pooled = vec![false; r];
        for &a in axes {
            if a >= r || pooled[a] {
                return Err(Error::shape("sum_axes", format!("axis {a} invalid for {shape:?}")));
            }
            pooled[a] = true;
        }
        let mut out_shape: Vec<usize> = (0..r).filter(|&i| !pooled[i]).map(|i| shape[i]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        // output stride of every input axis (0 for pooled axes)
        let mut ostride = vec![0; r];
        let mut acc = 1;
        for i in (0..r).rev() {
            if !pooled[i] {
                ostride[i] = acc;
                acc *= shape[i];
            }
        }
        let n = self.value(input).numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        for _ in 0..n {
            map.push(idx.iter().zip(&ostride).map(|(i, s)| i * s).sum());
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &m) in self.val(input).iter().zip(&map) {
            out[m] += v;
        }
        self.push("sum_axes", out_shape, out, Op::SumAxes { input, map }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.val(input).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let v = self.val(input);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![m], Op::Mean(input), &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(input).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shp(input))));
        }
        let vals = self.val(input).to_vec();
        self.push("reshape", shape.to_vec(), vals, Op::Reshape(input), &[input])
    }

    // ----- linear algebra ------------------------------------------------

    /// `(M, K) @ (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        rank("matmul", self.value(a), 2)?;
        rank("matmul", self.value(b), 2)?;
        let (m, k) = (self.shp(a)[0], self.shp(a)[1]);
        let (k2, n) = (self.shp(b)[0], self.shp(b)[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] @ [{k2}, {n}]")));
        }
        let out = matmul_raw(self.val(a), self.val(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        rank("transpose", self.value(a), 2)?;
        let (m, n) = (self.shp(a)[0], self.shp(a)[1]);
        let out = transpose_raw(self.val(a), m, n);
        self.push("transpose", vec![n, m], out, Op::Transpose(a), &[a])
    }

    /// Adds a length-N row vector to every row of an `(M, N)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        rank("add_row", self.value(a), 2)?;
        let (m, n) = (self.shp(a)[0], self.shp(a)[1]);
        if self.shp(row) != [n] {
            return Err(Error::shape("add_row", format!("[{m}, {n}] + {:?}", self.shp(row))));
        }
        let r = self.val(row);
        let out: Vec<f64> = self
            .val(a)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", vec![m, n], out, Op::AddRow(a, row), &[a, row])
    }

    // ----- normalization and probability ----------------------------------

    /// L2-normalizes along the last axis; rows with norm `<= eps` map to zero.
    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract(format!("l2_normalize epsilon must be positive, got {eps}")));
        }
        let (_, d) = rows_of(self.shp(input));
        let mut out = self.val(input).to_vec();
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n <= eps {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let shape = self.shp(input).to_vec();
        self.push("l2_normalize", shape, out, Op::L2Normalize { input, eps }, &[input])
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (_, d) = rows_of(self.shp(input));
        let mut out = self.val(input).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shp(input).to_vec();
        self.push("softmax", shape, out, Op::Softmax(input), &[input])
    }

    /// Squared Euclidean distance between matching rows (last axis) of two equal-shape tensors.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sq_dist", self.value(a), self.value(b))?;
        let shape = self.shp(a).to_vec();
        let d = *shape.last().unwrap();
        let out: Vec<f64> = self
            .val(a)
            .chunks(d)
            .zip(self.val(b).chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect();
        let out_shape = if shape.len() == 1 { vec![1] } else { shape[..shape.len() - 1].to_vec() };
        self.push("sq_dist", out_shape, out, Op::SqDist(a, b), &[a, b])
    }

    fn check_rows_idx(&self, name: &'static str, input: Var, idx: &[usize]) -> Result<(usize, usize)> {
        rank(name, self.value(input), 2)?;
        let (b, c) = (self.shp(input)[0], self.shp(input)[1]);
        if idx.len() != b {
            return Err(Error::shape(name, format!("{} indices for {b} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::contract(format!("{name}: index {bad} out of {c} columns")));
        }
        Ok((b, c))
    }

    /// Picks `input[b, idx[b]]` from a `(B, C)` matrix.
    pub fn pick(&mut self, input: Var, idx: &[usize]) -> Result<Var> {
        let (b, c) = self.check_rows_idx("pick", input, idx)?;
        let v = self.val(input);
        let out: Vec<f64> = (0..b).map(|r| v[r * c + idx[r]]).collect();
        self.push("pick", vec![b], out, Op::Pick { input, idx: idx.to_vec() }, &[input])
    }

    /// Row-wise `log Σ_{j ≠ idx[b]} exp(input[b, j])` of a `(B, C)` matrix, `C ≥ 2`.
    pub fn logsumexp_except(&mut self, input: Var, idx: &[usize]) -> Result<Var> {
        let (b, c) = self.check_rows_idx("logsumexp_except", input, idx)?;
        if c < 2 {
            return Err(Error::contract("logsumexp_except needs at least two columns"));
        }
        let v = self.val(input);
        let out: Vec<f64> = (0..b)
            .map(|r| {
                let row = &v[r * c..(r + 1) * c];
                let mx = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != idx[r])
                    .map(|(_, &x)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != idx[r])
                    .map(|(_, &x)| (x - mx).exp())
                    .sum();
                mx + s.ln()
            })
            .collect();
        self.push(
            "logsumexp_except",
            vec![b],
            out,
            Op::LogSumExpExcept { input, idx: idx.to_vec() },
            &[input],
        )
    }

    // ----- reverse pass ----------------------------------------------------

    /// Propagates d(seed)/d(node) back through the tape and adds the result into
    /// every differentiable leaf's gradient. Calling it twice accumulates.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.value(seed).numel() != 1 {
            return Err(Error::contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shp(seed)
            )));
        }
        if !self.nodes[seed.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![1.0]);
        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.is_leaf {
                add_into(&mut self.leaf_grads[id], &g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.values();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if rg(v) {
                add_into(&mut grads[v.0], &contrib);
            }
        };
        match &node.op {
            Op::Const => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if rg(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::ScaleBy(a, s) => {
                let c = self.val(*s)[0];
                if rg(*a) {
                    send(*a, g.iter().map(|v| c * v).collect());
                }
                if rg(*s) {
                    let ds = g.iter().zip(self.val(*a)).map(|(g, x)| g * x).sum();
                    send(*s, vec![ds]);
                }
            }
            Op::Square(a) => send(*a, g.iter().zip(self.val(*a)).map(|(g, x)| 2.0 * x * g).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(self.val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Log(a) => send(*a, g.iter().zip(self.val(*a)).map(|(g, x)| g / x).collect()),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (gi, gw, gb) = self.conv2d_backward(*input, *weight, g, *stride, *padding);
                if let Some(gi) = gi {
                    send(*input, gi);
                }
                if let Some(gw) = gw {
                    send(*weight, gw);
                }
                if let (Some(b), true) = (bias, bias.map(rg).unwrap_or(false)) {
                    send(*b, gb);
                }
            }
            Op::AvgPool2d { input, kx, ky } => {
                let s = self.shp(*input);
                let (ox, oy) = (s[2] / kx, s[3] / ky);
                let inv = 1.0 / (kx * ky) as f64;
                let planes = s[0] * s[1];
                let mut gi = vec![0.0; planes * s[2] * s[3]];
                for p in 0..planes {
                    for i in 0..s[2] {
                        for j in 0..s[3] {
                            gi[(p * s[2] + i) * s[3] + j] = inv * g[(p * ox + i / kx) * oy + j / ky];
                        }
                    }
                }
                send(*input, gi);
            }
            Op::SumAxes { input, map } => send(*input, map.iter().map(|&m| g[m]).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shp(*a)[0], self.shp(*a)[1]);
                let n = self.shp(*b)[1];
                if rg(*a) {
                    let bt = transpose_raw(self.val(*b), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if rg(*b) {
                    let at = transpose_raw(self.val(*a), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shp(*a)[0], self.shp(*a)[1]);
                send(*a, transpose_raw(g, n, m));
            }
            Op::AddRow(a, row) => {
                let n = self.shp(*row)[0];
                send(*a, g.to_vec());
                if rg(*row) {
                    let mut gr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(r, v)| *r += v);
                    }
                    send(*row, gr);
                }
            }
            Op::L2Normalize { input, eps } => {
                let (_, d) = rows_of(self.shp(*input));
                let x = self.val(*input);
                let mut gi = vec![0.0; x.len()];
                for ((gx, xr), (yr, gr)) in gi
                    .chunks_mut(d)
                    .zip(x.chunks(d))
                    .zip(y.chunks(d).zip(g.chunks(d)))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n <= *eps {
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in gx.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                send(*input, gi);
            }
            Op::Softmax(a) => {
                let (_, d) = rows_of(self.shp(*a));
                let mut gi = vec![0.0; y.len()];
                for ((o, yr), gr) in gi.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, gi);
            }
            Op::SqDist(a, b) => {
                let d = *self.shp(*a).last().unwrap();
                let ga: Vec<f64> = self
                    .val(*a)
                    .iter()
                    .zip(self.val(*b))
                    .enumerate()
                    .map(|(i, (p, q))| 2.0 * (p - q) * g[i / d])
                    .collect();
                if rg(*b) {
                    send(*b, ga.iter().map(|v| -v).collect());
                }
                send(*a, ga);
            }
            Op::Pick { input, idx } => {
                let c = self.shp(*input)[1];
                let mut gi = vec![0.0; self.value(*input).numel()];
                for (r, &j) in idx.iter().enumerate() {
                    gi[r * c + j] = g[r];
                }
                send(*input, gi);
            }
            Op::LogSumExpExcept { input, idx } => {
                let c = self.shp(*input)[1];
                let x = self.val(*input);
                let mut gi = vec![0.0; x.len()];
                for (r, &skip) in idx.iter().enumerate() {
                    for j in 0..c {
                        if j != skip {
                            gi[r * c + j] = g[r] * (x[r * c + j] - y[r]).exp();
                        }
                    }
                }
                send(*input, gi);
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        g: &[f64],
        stride: usize,
        padding: usize,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
        let xs = self.shp(input);
        let ws = self.shp(weight);
        let (b, ci, x, y) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kx, ky) = (ws[0], ws[2], ws[3]);
        let ox = (x + 2 * padding - kx) / stride + 1;
        let oy = (y + 2 * padding - ky) / stride + 1;
        let geo = ConvGeometry {
            b,
            ci,
            x,
            y,
            kx,
            ky,
            stride,
            padding,
            ox,
            oy,
        };
        let plane = ox * oy;
        let rows = b * plane;
        let ckk = ci * kx * ky;
        // g as (rows, co)
        let mut gm = vec![0.0; rows * co];
        let mut gb = vec![0.0; co];
        for bi in 0..b {
            for o in 0..co {
                let gp = &g[(bi * co + o) * plane..(bi * co + o + 1) * plane];
                for (p, v) in gp.iter().enumerate() {
                    gm[(bi * plane + p) * co + o] = *v;
                    gb[o] += v;
                }
            }
        }
        let gw = self.nodes[weight.0].requires_grad.then(|| {
            let cols = geo.im2col(self.val(input));
            matmul_raw(&transpose_raw(&gm, rows, co), &cols, co, rows, ckk)
        });
        let gi = self.nodes[input.0].requires_grad.then(|| {
            let gcols = matmul_raw(&gm, self.val(weight), rows, co, ckk);
            geo.col2im(&gcols)
        });
        (gi, gw, gb)
    }
}

/// Index bookkeeping shared by the convolution forward and backward passes.
struct ConvGeometry {
    b: usize,
    ci: usize,
    x: usize,
    y: usize,
    kx: usize,
    ky: usize,
    stride: usize,
    padding: usize,
    ox: usize,
    oy: usize,
}

impl ConvGeometry {
    /// Calls `f(col_row_offset, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ckk = self.ci * self.kx * self.ky;
        for bi in 0..self.b {
            for px in 0..self.ox {
                for py in 0..self.oy {
                    let row = ((bi * self.ox + px) * self.oy + py) * ckk;
                    for c in 0..self.ci {
                        let plane = (bi * self.ci + c) * self.x * self.y;
                        for i in 0..self.kx {
                            let ix = (px * self.stride + i) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.x as isize {
                                continue;
                            }
                            for j in 0..self.ky {
                                let iy = (py * self.stride + j) as isize - self.padding as isize;
                                if iy < 0 || iy >= self.y as isize {
                                    continue;
                                }
                                let col = (c * self.kx + i) * self.ky + j;
                                f(row + col, plane + ix as usize * self.y + iy as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `(B·OX·OY, Ci·kx·ky)` patch matrix; out-of-bounds taps stay zero.
    fn im2col(&self, inp: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.b * self.ox * self.oy * self.ci * self.kx * self.ky];
        self.for_each_tap(|k, i| cols[k] = inp[i]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.b * self.ci * self.x * self.y];
        self.for_each_tap(|k, i| out[i] += cols[k]);
        out
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
