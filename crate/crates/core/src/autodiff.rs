//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order, so node indices are a
//! topological order and the reverse pass is a single backwards sweep. Leaves
//! are either constants or variables; only nodes downstream of a variable
//! take part in differentiation.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Scale(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumChannels(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AdaptiveAvgPool(Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    LogSoftmax(Var),
    NormalizeSamples(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Relu(a)
            | Sigmoid(a)
            | Tanh(a)
            | Abs(a)
            | Square(a)
            | Scale(a, _)
            | SumAll(a)
            | MeanAll(a)
            | SumChannels(a)
            | Reshape(a)
            | AdaptiveAvgPool(a)
            | GlobalAvgPool(a)
            | LogSoftmax(a)
            | NormalizeSamples(a) => vec![*a],
            Conv2d {
                input,
                kernel,
                bias,
                ..
            } => std::iter::once(*input)
                .chain(std::iter::once(*kernel))
                .chain(*bias)
                .collect(),
            Linear {
                input,
                weight,
                bias,
            } => std::iter::once(*input)
                .chain(std::iter::once(*weight))
                .chain(*bias)
                .collect(),
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dimension(op, a, b))
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Vec<T>>], active: &[bool], v: Var, contrib: Vec<T>) {
    if !active[v.0] {
        return;
    }
    match &mut adj[v.0] {
        Some(buf) => {
            for (a, c) in buf.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    /// Accumulated gradient of a variable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Number of nodes holding a gradient buffer.
    pub fn grad_buffers(&self) -> usize {
        self.nodes.iter().filter(|n| n.grad.is_some()).count()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        rec: Op<T>,
    ) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, x.shape(), y.shape())?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(out, rec))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let out = self.nodes[a.0].value.map(f);
        self.push(out, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    // ---- reductions and reshaping ------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.nodes[a.0].value.data() {
            s += x;
        }
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut s = T::zero();
        for &v in x.data() {
            s += v;
        }
        let m = s / T::from_usize(x.numel());
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    /// `[N, C, H, W] -> [N, H, W]`, summing channels in ascending order.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let [n, c, h, w] = dims4("sum_channels", x.shape())?;
        let plane = h * w;
        let mut out = vec![T::zero(); n * plane];
        for s in 0..n {
            let dst = &mut out[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let src = &x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let out = Tensor::new(&[n, h, w], out)?;
        Ok(self.push(out, Op::SumChannels(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::dimension("reshape", x.shape(), shape));
        }
        let out = x.reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    // ---- layers ------------------------------------------------------

    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kH, kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let [n, c_in, h, w] = dims4("conv2d", &xs)?;
        let [c_out, kc, kh, kw] = dims4("conv2d", &ks)?;
        if kc != c_in || stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dimension("conv2d", &xs, &ks));
        }
        if let Some(b) = bias {
            same_shape("conv2d bias", self.shape(b), &[c_out])?;
        }
        let geom = ConvGeometry {
            batch: n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.nodes[b.0].value.data()),
        );
        let out = Tensor::new(&[n, c_out, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Average-pool `[N, C, H, W]` down to `[N, C, oh, ow]` with adaptive bins.
    pub fn adaptive_avg_pool(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(a).to_vec();
        let [n, c, h, w] = dims4("adaptive_avg_pool", &xs)?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::dimension("adaptive_avg_pool", &xs, &[oh, ow]));
        }
        let out = kernels::adaptive_avg_pool(self.value(a).data(), n * c, h, w, oh, ow);
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::AdaptiveAvgPool(a)))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let [n, c, h, w] = dims4("global_avg_pool", x.shape())?;
        let plane = h * w;
        let denom = T::from_usize(plane);
        let out: Vec<T> = (0..n * c)
            .map(|p| {
                let mut s = T::zero();
                for &v in &x.data()[p * plane..(p + 1) * plane] {
                    s += v;
                }
                s / denom
            })
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(a)))
    }

    /// `[N, D] x [K, D]^T + b -> [N, K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dimension("linear", &xs, &ws));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            same_shape("linear bias", self.shape(b), &[k])?;
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bv = bias.map(|b| self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            for j in 0..k {
                let mut s = kernels::dot(row, &wt[j * d..(j + 1) * d]);
                if let Some(b) = bv {
                    s += b[j];
                }
                out.push(s);
            }
        }
        let out = Tensor::new(&[n, k], out)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = &self.nodes[logits.0].value;
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::dimension(
                "softmax_cross_entropy",
                x.shape(),
                &[labels.len()],
            ));
        }
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index {
                    what: "class labels",
                    index: label,
                    bound: k,
                });
            }
            let row = &x.data()[i * k..(i + 1) * k];
            let (log_z, m) = log_sum_exp(row);
            for &v in row {
                probs.push((v - m - log_z).exp());
            }
            total += -(row[label] - m - log_z);
        }
        let loss = total / T::from_usize(n);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise log-softmax of `[N, K]`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.rank() != 2 {
            return Err(Error::dimension("log_softmax", x.shape(), &[0, 0]));
        }
        let k = x.shape()[1];
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(k) {
            let (log_z, m) = log_sum_exp(row);
            out.extend(row.iter().map(|&v| v - m - log_z));
        }
        let out = Tensor::new(x.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Divide each sample (leading-axis slice) by its L2 norm. All-zero
    /// samples stay zero.
    pub fn normalize_samples(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let per = x.numel() / x.shape()[0];
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(per) {
            let norm = l2_norm(row);
            if norm == T::zero() {
                out.extend(row.iter().map(|_| T::zero()));
            } else {
                out.extend(row.iter().map(|&v| v / norm));
            }
        }
        let out = Tensor::new(x.shape(), out).expect("shape preserved");
        self.push(out, Op::NormalizeSamples(a))
    }

    // ---- differentiation ---------------------------------------------

    fn check_loss(&self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        Ok(())
    }

    fn adjoints(&self, loss: Var, active: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if active[loss.0] {
            adj[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            if !active[idx] {
                continue;
            }
            let Some(gout) = adj[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                adj[idx] = Some(gout);
                continue;
            }
            self.backprop(idx, &gout, &mut adj, active);
        }
        adj
    }

    /// Reverse sweep from `loss`, accumulating into every variable leaf.
    /// Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_loss(loss)?;
        let active: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let adj = self.adjoints(loss, &active);
        for (idx, a) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(a) = a else { continue };
            match &mut node.grad {
                Some(g) => {
                    for (gv, av) in g.data_mut().iter_mut().zip(a) {
                        *gv += av;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), a).expect("grad shape")),
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to `wrt` only, without touching leaf
    /// gradient buffers. Nodes off every path from `wrt` to `loss` are skipped.
    /// Unreached inputs get an all-zero gradient.
    pub fn gradients(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        self.check_loss(loss)?;
        let mut active = vec![false; self.nodes.len()];
        for v in wrt {
            active[v.0] = true;
        }
        for idx in 0..self.nodes.len() {
            if !active[idx] && self.nodes[idx].op.inputs().iter().any(|v| active[v.0]) {
                active[idx] = true;
            }
        }
        let mut adj = self.adjoints(loss, &active);
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = self.shape(*v);
                match adj.get_mut(v.0).and_then(Option::take) {
                    Some(a) => Tensor::new(shape, a).expect("grad shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    /// Hash of the sign pattern at every `relu`/`abs` input. Two evaluations
    /// with equal signatures lie on the same smooth piece of the program.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                for &v in self.nodes[a.0].value.data() {
                    let class: u8 = if v > T::zero() {
                        2
                    } else if v < T::zero() {
                        0
                    } else {
                        1
                    };
                    class.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    fn backprop(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>], active: &[bool]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let zip_map = |x: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
            x.iter().zip(g).map(|(&xv, &gv)| f(xv, gv)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(adj, active, *a, g.to_vec());
                accumulate(adj, active, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(adj, active, *a, g.to_vec());
                accumulate(adj, active, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if active[a.0] {
                    accumulate(adj, active, *a, zip_map(val(*b), &|y, gv| y * gv));
                }
                if active[b.0] {
                    accumulate(adj, active, *b, zip_map(val(*a), &|x, gv| x * gv));
                }
            }
            Op::Relu(a) => {
                let d = zip_map(val(*a), &|x, gv| if x > T::zero() { gv } else { T::zero() });
                accumulate(adj, active, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(node.value.data(), &|s, gv| gv * s * (T::one() - s));
                accumulate(adj, active, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(node.value.data(), &|t, gv| gv * (T::one() - t * t));
                accumulate(adj, active, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(val(*a), &|x, gv| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                accumulate(adj, active, *a, d);
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                let d = zip_map(val(*a), &|x, gv| two * x * gv);
                accumulate(adj, active, *a, d);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(adj, active, *a, g.iter().map(|&v| v * c).collect());
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate(adj, active, *a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                accumulate(adj, active, *a, vec![g[0] / T::from_usize(n); n]);
            }
            Op::SumChannels(a) => {
                let s = self.nodes[a.0].value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut d = Vec::with_capacity(n * c * plane);
                for smp in 0..n {
                    let src = &g[smp * plane..(smp + 1) * plane];
                    for _ in 0..c {
                        d.extend_from_slice(src);
                    }
                }
                accumulate(adj, active, *a, d);
            }
            Op::Reshape(a) => accumulate(adj, active, *a, g.to_vec()),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need = (
                    active[input.0],
                    active[kernel.0],
                    bias.map(|b| active[b.0]).unwrap_or(false),
                );
                let grads = kernels::conv2d_backward(geom, val(*input), val(*kernel), g, need);
                if let Some(dx) = grads.input {
                    accumulate(adj, active, *input, dx);
                }
                if let Some(dw) = grads.kernel {
                    accumulate(adj, active, *kernel, dw);
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    accumulate(adj, active, *b, db);
                }
            }
            Op::AdaptiveAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let o = node.value.shape();
                let d = kernels::adaptive_avg_pool_backward(g, s[0] * s[1], s[2], s[3], o[2], o[3]);
                accumulate(adj, active, *a, d);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let plane = s[2] * s[3];
                let denom = T::from_usize(plane);
                let mut d = Vec::with_capacity(s[0] * s[1] * plane);
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv / denom, plane));
                }
                accumulate(adj, active, *a, d);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.nodes[input.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let k = self.nodes[weight.0].value.shape()[0];
                let x = val(*input);
                let w = val(*weight);
                if active[input.0] {
                    let mut dx = vec![T::zero(); n * d];
                    for i in 0..n {
                        let row = &mut dx[i * d..(i + 1) * d];
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for (r, &wv) in row.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                                *r += gv * wv;
                            }
                        }
                    }
                    accumulate(adj, active, *input, dx);
                }
                if active[weight.0] {
                    let mut dw = vec![T::zero(); k * d];
                    for i in 0..n {
                        let row = &x[i * d..(i + 1) * d];
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for (r, &xv) in dw[j * d..(j + 1) * d].iter_mut().zip(row) {
                                *r += gv * xv;
                            }
                        }
                    }
                    accumulate(adj, active, *weight, dw);
                }
                if let Some(b) = bias {
                    if active[b.0] {
                        let mut db = vec![T::zero(); k];
                        for i in 0..n {
                            for j in 0..k {
                                db[j] += g[i * k + j];
                            }
                        }
                        accumulate(adj, active, *b, db);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_usize(n);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                accumulate(adj, active, *logits, d);
            }
            Op::LogSoftmax(a) => {
                let k = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (lrow, grow) in node.value.data().chunks(k).zip(g.chunks(k)) {
                    let mut gs = T::zero();
                    for &v in grow {
                        gs += v;
                    }
                    d.extend(lrow.iter().zip(grow).map(|(&l, &gv)| gv - l.exp() * gs));
                }
                accumulate(adj, active, *a, d);
            }
            Op::NormalizeSamples(a) => {
                let x = val(*a);
                let per = x.len() / self.nodes[a.0].value.shape()[0];
                let mut d = Vec::with_capacity(x.len());
                for ((xrow, yrow), grow) in x
                    .chunks(per)
                    .zip(node.value.data().chunks(per))
                    .zip(g.chunks(per))
                {
                    let norm = l2_norm(xrow);
                    if norm == T::zero() {
                        d.extend(std::iter::repeat_n(T::zero(), per));
                        continue;
                    }
                    let mut yg = T::zero();
                    for (&y, &gv) in yrow.iter().zip(grow) {
                        yg += y * gv;
                    }
                    d.extend(yrow.iter().zip(grow).map(|(&y, &gv)| (gv - y * yg) / norm));
                }
                accumulate(adj, active, *a, d);
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> (T, T) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for &v in row {
        s += (v - m).exp();
    }
    (s.ln(), m)
}

fn l2_norm<T: Real>(row: &[T]) -> T {
    let mut s = T::zero();
    for &v in row {
        s += v * v;
    }
    s.sqrt()
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::dimension(op, shape, &[0, 0, 0, 0]))
}
