use super::kernels::{self, Exec};
use super::{axis_split, Tensor};
use crate::error::{DldError, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    /// Scalar output whose gradient w.r.t. `input` was computed in the forward pass.
    Fused { input: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of executed operations.
///
/// Node indices grow with execution order, so walking them from the back
/// replays the operations in exact reverse. Leaf gradients live on the tape
/// and accumulate across [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    exec: Exec,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            exec,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DldError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf that carries gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
            .expect("tensor values must be finite")
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push("param", t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
            .expect("parameter values must be finite")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
            .expect("constant values must be finite")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Accumulated gradient of a leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DldError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DldError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm_nn(self.exec, self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, rg, Op::MatMul(a, b))
    }

    /// `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(DldError::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let out = kernels::bgemm_nn(self.exec, self.value(a), self.value(b), bt, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("bmm", vec![bt, m, n], out, rg, Op::BatchMatMul(a, b))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector to every row along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(DldError::Shape {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let bv = self.value(bias);
        let n = sb[0];
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push("add_row", sx, out, rg, Op::AddRow(x, bias))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", shape, out, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, rg, Op::AddScalar(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, rg, Op::Gelu(x))
    }

    /// Normalizes each slice along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(DldError::contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&1);
        for (name, p) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            if self.shape(p) != [d] {
                return Err(DldError::Shape {
                    op: name,
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
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
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            sx,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, false)?;
        let rg = self.rg(&[x]);
        self.push("softmax", shape, out, rg, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = softmax_along(self.value(x), &shape, axis, true)?;
        let rg = self.rg(&[x]);
        self.push("log_softmax", shape, out, rg, Op::LogSoftmax(x, axis))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Vec::new(), vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Vec::new(), vec![s], rg, Op::Mean(x))
    }

    /// Reduces `axis` with a max-shifted log-sum-exp.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| xv[(o * len + k) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|k| (at(k) - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        self.push("logsumexp", oshape, out, rg, Op::LogSumExp(x, axis))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(DldError::Shape {
                op: "gather_rows",
                lhs: sx,
                rhs: vec![idx.len()],
            });
        }
        let (r, c) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(DldError::contract(format!("gather_rows index {bad} >= {r} rows")));
        }
        if idx.is_empty() {
            return Err(DldError::contract("gather_rows needs at least one index"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        self.push("gather_rows", vec![idx.len(), c], out, rg, Op::GatherRows(x, idx.to_vec()))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (batch, r, c) = match sx.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => {
                return Err(DldError::Shape {
                    op: "transpose",
                    lhs: sx,
                    rhs: vec![],
                })
            }
        };
        let out = transpose_batched(self.value(x), batch, r, c);
        let mut oshape = sx.clone();
        let n = oshape.len();
        oshape.swap(n - 1, n - 2);
        let rg = self.rg(&[x]);
        self.push("transpose", oshape, out, rg, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if shape.iter().product::<usize>() != sx.iter().product::<usize>() {
            return Err(DldError::Shape {
                op: "reshape",
                lhs: sx,
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("reshape", shape.to_vec(), out, rg, Op::Reshape(x))
    }

    /// Records a scalar whose gradient w.r.t. `input` is already known.
    pub(crate) fn fused_scalar(&mut self, name: &'static str, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        debug_assert_eq!(grad.len(), self.value(input).len());
        let rg = self.rg(&[input]);
        self.push(name, Vec::new(), vec![value], rg, Op::Fused { input, grad })
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(DldError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let exec = self.exec;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, contrib: Vec<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| nodes[v.0].value.as_slice();
            let shp = |v: Var| nodes[v.0].shape.as_slice();
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                &Op::MatMul(a, b) => {
                    let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
                    if nodes[a.0].requires_grad {
                        send(a, kernels::gemm_nt(exec, &g, val(b), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(b, kernels::gemm_tn(exec, val(a), &g, k, m, n));
                    }
                }
                &Op::BatchMatMul(a, b) => {
                    let (bt, m, k, n) = (shp(a)[0], shp(a)[1], shp(a)[2], shp(b)[2]);
                    if nodes[a.0].requires_grad {
                        send(a, kernels::bgemm_nt(exec, &g, val(b), bt, m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(b, kernels::bgemm_tn(exec, val(a), &g, bt, k, m, n));
                    }
                }
                &Op::Add(a, b) => {
                    send(a, g.clone());
                    send(b, g);
                }
                &Op::Sub(a, b) => {
                    send(b, g.iter().map(|v| -v).collect());
                    send(a, g);
                }
                &Op::Mul(a, b) => {
                    send(a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                    send(b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
                &Op::AddRow(x, bias) => {
                    let n = shp(bias)[0];
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(bias, gb);
                    send(x, g);
                }
                &Op::Scale(x, c) => send(x, g.iter().map(|v| v * c).collect()),
                &Op::AddScalar(x) => send(x, g),
                &Op::Gelu(x) => {
                    let d = g.iter().zip(val(x)).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                    send(x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = *shp(*x).last().unwrap();
                    let gv = val(*gain);
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.len()];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dgain[j] += gr[j] * h[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    send(*gain, dgain);
                    send(*bias, dbias);
                    send(*x, dx);
                }
                &Op::Softmax(x, axis) => {
                    let y = &node.value;
                    let (outer, len, inner) = axis_split(&node.shape, axis)?;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                    send(x, dx);
                }
                &Op::LogSoftmax(x, axis) => {
                    let y = &node.value;
                    let (outer, len, inner) = axis_split(&node.shape, axis)?;
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let gs: f64 = (0..len).map(|k| g[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                            }
                        }
                    }
                    send(x, dx);
                }
                &Op::Sum(x) => send(x, vec![g[0]; val(x).len()]),
                &Op::Mean(x) => {
                    let n = val(x).len();
                    send(x, vec![g[0] / n as f64; n]);
                }
                &Op::LogSumExp(x, axis) => {
                    let xv = val(x);
                    let (outer, len, inner) = axis_split(shp(x), axis)?;
                    let mut dx = vec![0.0; xv.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let oi = o * inner + i;
                            for k in 0..len {
                                let at = (o * len + k) * inner + i;
                                dx[at] = g[oi] * (xv[at] - node.value[oi]).exp();
                            }
                        }
                    }
                    send(x, dx);
                }
                Op::GatherRows(x, idx) => {
                    let c = shp(*x)[1];
                    let mut dx = vec![0.0; val(*x).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += g[r * c + j];
                        }
                    }
                    send(*x, dx);
                }
                &Op::Transpose(x) => {
                    let s = &node.shape;
                    let (batch, r, c) = match s.as_slice() {
                        [r, c] => (1, *r, *c),
                        [b, r, c] => (*b, *r, *c),
                        _ => unreachable!("transpose output is rank 2 or 3"),
                    };
                    send(x, transpose_batched(&g, batch, r, c));
                }
                &Op::Reshape(x) => send(x, g),
                Op::Fused { input, grad } => {
                    send(*input, grad.iter().map(|v| v * g[0]).collect());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn transpose_batched(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

/// Softmax (or log-softmax) along `axis` with max subtraction.
pub(crate) fn softmax_along(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_split(shape, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..len).map(|k| (x[at(k)] - m).exp()).sum();
            if log {
                let lse = s.ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - m - lse;
                }
            } else {
                for k in 0..len {
                    out[at(k)] = (x[at(k)] - m).exp() / s;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_zero_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.leaf(&Tensor::identity(2));
        let z = tape.leaf(&Tensor::zeros(&[2, 2]));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai), &[1.0, 2.0, 3.0, 4.0]);
        let az = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(az), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[0.0; 4]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s), &[0.25; 4]);
        let big = tape.leaf(&t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s)[0], 1.0);
        assert!(tape.value(s)[1] < 1e-300);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        for j in 0..3 {
            assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-15);
        }
        assert!((v[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[3, 4], 2.5));
        let g = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).chunks(4) {
            assert_eq!(row, &[0.1, 0.2, 0.3, 0.4]);
        }
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn gelu_zero_and_logsumexp_single() {
        assert_eq!(gelu(0.0), 0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[-3.7]));
        let l = tape.logsumexp(x, 0).unwrap();
        assert_eq!(tape.value(l), &[-3.7]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.value(x), &[1.0, 2.0]);
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[1e300]));
        let y = tape.mul_scalar(x, 1e300);
        assert!(matches!(y, Err(DldError::NonFinite { op: "mul_scalar" })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&t(&[2], &[1.0, 2.0]));
        let p = tape.param(&t(&[2], &[3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
    }
}
