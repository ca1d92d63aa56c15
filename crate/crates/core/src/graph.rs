//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and the
//! ids of its inputs. Inputs always precede their consumers, so a single
//! reverse sweep over the node list visits each node exactly once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floating-point storage precision for values produced by graph ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Precision {
    #[default]
    Double,
    /// Values and gradients are rounded to `f32` after every op.
    Single,
}

impl Precision {
    fn round(self, data: &mut [f64]) {
        if self == Precision::Single {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv3x3 { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulScalar(NodeId, f64),
    Mse(NodeId, NodeId),
    Sum(NodeId),
    Softmax(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Bmm(NodeId, NodeId),
    Detach,
    StraightThrough { pass: NodeId },
    Gather { table: NodeId, indices: Vec<usize> },
    Reshape(NodeId),
    ToRows(NodeId),
    FromRows(NodeId),
    Upsample2(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    // out (n×m) += a (n×k) · b (k×m)
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph { nodes: Vec::new(), precision }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient populated by the last [`Graph::backward`], if the node
    /// participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    /// Adds an input tensor. Its own `requires_grad` flag is respected.
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        let rg = tensor.requires_grad();
        self.leaf(tensor, rg)
    }

    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> NodeId {
        self.precision.round(tensor.data_mut());
        let mut t = tensor.with_requires_grad(requires_grad);
        t.clear_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor, false)
    }

    fn push(&mut self, name: &'static str, shape: &[usize], mut data: Vec<f64>, op: Op) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name} forward")));
        }
        self.precision.round(&mut data);
        let requires_grad = match &op {
            Op::Leaf | Op::Detach => false,
            Op::StraightThrough { pass } => self.requires_grad(*pass),
            other => inputs_of(other).iter().any(|&i| self.requires_grad(i)),
        };
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// `x · w + b` for `x: B×I`, `w: I×O`, `b: O`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim("affine", &[&xs, &ws]));
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.iter().product::<usize>() != m {
                return Err(Error::dim("affine", &[&xs, &ws, bs]));
            }
            let bias = self.data(b);
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        matmul_into(self.data(x), self.data(w), &mut out, n, k, m);
        self.push("affine", &[n, m], out, Op::Affine { x, w, b })
    }

    /// 3×3 convolution with zero padding 1. `x: B×C×H×W`, `w: O×C×3×3`, `b: O`.
    pub fn conv2d_3x3(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::dim("conv2d_3x3", &[&xs, &ws]));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Contract(format!("conv2d_3x3 stride must be 1 or 2, got {stride}")));
        }
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let mut out = vec![0.0; bn * o * ho * wo];
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != o {
                return Err(Error::dim("conv2d_3x3", &[&xs, &ws, self.shape(b)]));
            }
            let bias = self.data(b);
            for (chunk, idx) in out.chunks_mut(ho * wo).zip(0..) {
                chunk.fill(bias[idx % o]);
            }
        }
        let xd = self.data(x);
        let wdt = self.data(w);
        for bi in 0..bn {
            for oc in 0..o {
                let obase = (bi * o + oc) * ho * wo;
                for ic in 0..c {
                    let ibase = (bi * c + ic) * h * wd;
                    let wbase = (oc * c + ic) * 9;
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for kh in 0..3 {
                                let r = (i * stride + kh) as isize - 1;
                                if r < 0 || r >= h as isize {
                                    continue;
                                }
                                for kw in 0..3 {
                                    let s = (j * stride + kw) as isize - 1;
                                    if s < 0 || s >= wd as isize {
                                        continue;
                                    }
                                    acc += wdt[wbase + kh * 3 + kw] * xd[ibase + r as usize * wd + s as usize];
                                }
                            }
                            out[obase + i * wo + j] += acc;
                        }
                    }
                }
            }
        }
        self.push("conv2d_3x3", &[bn, o, ho, wo], out, Op::Conv3x3 { x, w, b, stride })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", &shape, out, Op::Relu(x))
    }

    fn broadcast_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).len() == 1 {
            Ok(())
        } else {
            Err(Error::dim(op, &[sa, sb]))
        }
    }

    /// Elementwise sum; `b` may be a one-element tensor broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_check("add", a, b)?;
        let bd = self.data(b);
        let out = self.data(a).iter().enumerate().map(|(i, &v)| v + bd[i % bd.len()]).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", &shape, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_check("sub", a, b)?;
        let bd = self.data(b);
        let out = self.data(a).iter().enumerate().map(|(i, &v)| v - bd[i % bd.len()]).collect();
        let shape = self.shape(a).to_vec();
        self.push("sub", &shape, out, Op::Sub(a, b))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", &shape, out, Op::MulScalar(x, c))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mse", &[self.shape(a), self.shape(b)]));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let total: f64 = ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = vec![total / ad.len() as f64];
        self.push("mse", &[1], out, Op::Mse(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = vec![self.data(x).iter().sum()];
        self.push("sum", &[1], out, Op::Sum(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push("softmax", &shape, out, Op::Softmax(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &[&sa, &sb]));
        }
        let mut out = vec![0.0; sa[0] * sb[1]];
        matmul_into(self.data(a), self.data(b), &mut out, sa[0], sa[1], sb[1]);
        self.push("matmul", &[sa[0], sb[1]], out, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("transpose", &[&s]));
        }
        let out = transpose(self.data(x), s[0], s[1]);
        self.push("transpose", &[s[1], s[0]], out, Op::Transpose(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = match inputs.first() {
            Some(&f) => self.shape(f).to_vec(),
            None => return Err(Error::Contract("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::dim("concat", &[&first]));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.shape(i)).collect();
                return Err(Error::dim("concat", &shapes));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &id in inputs {
                let chunk = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.data(id)[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push("concat", &shape, out, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Batched matrix product `(G×p×q) · (G×q×r) → G×p×r`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", &[&sa, &sb]));
        }
        let (g, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * p * r];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..g {
            matmul_into(
                &ad[i * p * q..(i + 1) * p * q],
                &bd[i * q * r..(i + 1) * q * r],
                &mut out[i * p * r..(i + 1) * p * r],
                p,
                q,
                r,
            );
        }
        self.push("bmm", &[g, p, r], out, Op::Bmm(a, b))
    }

    /// Stop-gradient: identical values, no gradient contribution upstream.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let (shape, out) = (self.shape(x).to_vec(), self.data(x).to_vec());
        self.push("detach", &shape, out, Op::Detach)
    }

    /// Forward value of `value_from`, gradient routed unmodified to `pass`.
    ///
    /// Equivalent to `pass + detach(value_from - pass)` except the forward
    /// value is bit-identical to `value_from`.
    pub fn straight_through(&mut self, pass: NodeId, value_from: NodeId) -> Result<NodeId> {
        if self.shape(pass) != self.shape(value_from) {
            return Err(Error::dim("straight_through", &[self.shape(pass), self.shape(value_from)]));
        }
        let (shape, out) = (self.shape(value_from).to_vec(), self.data(value_from).to_vec());
        self.push("straight_through", &shape, out, Op::StraightThrough { pass })
    }

    /// Selects rows of a matrix: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", &[&s]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Contract(format!("gather index {bad} out of range for {} rows", s[0])));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * s[1]);
        for &i in indices {
            out.extend_from_slice(&td[i * s[1]..(i + 1) * s[1]]);
        }
        self.push("gather_rows", &[indices.len(), s[1]], out, Op::Gather { table, indices: indices.to_vec() })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", &[self.shape(x), shape]));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape(x))
    }

    /// `B×C×H×W → (B·H·W)×C`: one row per spatial position.
    pub fn to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("to_rows", &[&s]));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..h * w {
                    out[(bi * h * w + p) * c + ci] = xd[(bi * c + ci) * h * w + p];
                }
            }
        }
        self.push("to_rows", &[b * h * w, c], out, Op::ToRows(x))
    }

    /// Inverse of [`Graph::to_rows`] for the given batch and grid.
    pub fn from_rows(&mut self, x: NodeId, batch: usize, height: usize, width: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != batch * height * width {
            return Err(Error::dim("from_rows", &[&s, &[batch, height, width]]));
        }
        let c = s[1];
        let hw = height * width;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * c + ci) * hw + p] = xd[(bi * hw + p) * c + ci];
                }
            }
        }
        self.push("from_rows", &[batch, c, height, width], out, Op::FromRows(x))
    }

    /// Nearest-neighbour 2× spatial upsampling of `B×C×H×W`.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("upsample2", &[&s]));
        }
        let (h, w) = (s[2], s[3]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len() * 4];
        for (plane, src) in xd.chunks(h * w).enumerate() {
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.push("upsample2", &[s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2(x))
    }

    /// Reverse sweep from a scalar `loss`. Populates the gradient slot of
    /// every node that requires a gradient; requires-grad leaves the loss
    /// does not depend on receive zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient at node {idx}")));
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let precision = self.precision;
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !node.value.requires_grad() {
                node.value.set_grad(None);
                continue;
            }
            let mut g = grads.get_mut(idx).and_then(Option::take).unwrap_or_else(|| vec![0.0; node.value.len()]);
            precision.round(&mut g);
            node.value.set_grad(Some(g));
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let rg = |id: NodeId| self.requires_grad(id);
        let mut acc = |id: NodeId, contribution: Vec<f64>| match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Affine { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (rows, k, m) = (xs[0], xs[1], ws[1]);
                if rg(*x) {
                    let wt = transpose(self.data(*w), k, m);
                    let mut gx = vec![0.0; rows * k];
                    matmul_into(g, &wt, &mut gx, rows, m, k);
                    acc(*x, gx);
                }
                if rg(*w) {
                    let xt = transpose(self.data(*x), rows, k);
                    let mut gw = vec![0.0; k * m];
                    matmul_into(&xt, g, &mut gw, k, rows, m);
                    acc(*w, gw);
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc(b, gb);
                }
            }
            Op::Conv3x3 { x, w, b, stride } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = ws[0];
                let (ho, wo) = (conv_out(h, *stride), conv_out(wd, *stride));
                let (xd, wdt) = (self.data(*x), self.data(*w));
                let mut gx = vec![0.0; if rg(*x) { xd.len() } else { 0 }];
                let mut gw = vec![0.0; if rg(*w) { wdt.len() } else { 0 }];
                for bi in 0..bn {
                    for oc in 0..o {
                        let obase = (bi * o + oc) * ho * wo;
                        for ic in 0..c {
                            let ibase = (bi * c + ic) * h * wd;
                            let wbase = (oc * c + ic) * 9;
                            for i in 0..ho {
                                for j in 0..wo {
                                    let go = g[obase + i * wo + j];
                                    for kh in 0..3 {
                                        let r = (i * stride + kh) as isize - 1;
                                        if r < 0 || r >= h as isize {
                                            continue;
                                        }
                                        for kw in 0..3 {
                                            let s = (j * stride + kw) as isize - 1;
                                            if s < 0 || s >= wd as isize {
                                                continue;
                                            }
                                            let xi = ibase + r as usize * wd + s as usize;
                                            let wi = wbase + kh * 3 + kw;
                                            if !gx.is_empty() {
                                                gx[xi] += go * wdt[wi];
                                            }
                                            if !gw.is_empty() {
                                                gw[wi] += go * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if rg(*x) {
                    acc(*x, gx);
                }
                if rg(*w) {
                    acc(*w, gw);
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let mut gb = vec![0.0; o];
                    for (chunk, idx) in g.chunks(ho * wo).zip(0..) {
                        gb[idx % o] += chunk.iter().sum::<f64>();
                    }
                    acc(b, gb);
                }
            }
            Op::Relu(x) => {
                let gx = self.data(*x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                acc(*x, gx);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    acc(*a, g.to_vec());
                }
                if rg(*b) {
                    let gb = if self.value(*b).len() == 1 && g.len() != 1 {
                        vec![sign * g.iter().sum::<f64>()]
                    } else {
                        g.iter().map(|v| sign * v).collect()
                    };
                    acc(*b, gb);
                }
            }
            Op::MulScalar(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let scale = 2.0 * g[0] / ad.len() as f64;
                let ga: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| scale * (x - y)).collect();
                if rg(*b) {
                    acc(*b, ga.iter().map(|v| -v).collect());
                }
                if rg(*a) {
                    acc(*a, ga);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Softmax(x) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(width).zip(g.chunks(width)).zip(gx.chunks_mut(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let bt = transpose(self.data(*b), k, m);
                    let mut ga = vec![0.0; n * k];
                    matmul_into(g, &bt, &mut ga, n, m, k);
                    acc(*a, ga);
                }
                if rg(*b) {
                    let at = transpose(self.data(*a), n, k);
                    let mut gb = vec![0.0; k * m];
                    matmul_into(&at, g, &mut gb, k, n, m);
                    acc(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                acc(*x, transpose(g, s[0], s[1]));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> =
                    inputs.iter().map(|&i| Vec::with_capacity(self.value(i).len())).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (part, &id) in parts.iter_mut().zip(inputs) {
                        let chunk = self.shape(id)[*axis] * inner;
                        part.extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (part, &id) in parts.into_iter().zip(inputs) {
                    if rg(id) {
                        acc(id, part);
                    }
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (gn, p, q, r) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let mut ga = vec![0.0; gn * p * q];
                    for i in 0..gn {
                        let bt = transpose(&bd[i * q * r..(i + 1) * q * r], q, r);
                        matmul_into(&g[i * p * r..(i + 1) * p * r], &bt, &mut ga[i * p * q..(i + 1) * p * q], p, r, q);
                    }
                    acc(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; gn * q * r];
                    for i in 0..gn {
                        let at = transpose(&ad[i * p * q..(i + 1) * p * q], p, q);
                        matmul_into(&at, &g[i * p * r..(i + 1) * p * r], &mut gb[i * q * r..(i + 1) * q * r], q, p, r);
                    }
                    acc(*b, gb);
                }
            }
            Op::StraightThrough { pass } => acc(*pass, g.to_vec()),
            Op::Gather { table, indices } => {
                let cols = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).len()];
                for (row, &i) in g.chunks(cols).zip(indices) {
                    gt[i * cols..(i + 1) * cols].iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc(*table, gt);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::ToRows(x) => {
                let s = self.shape(*x);
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            gx[(bi * c + ci) * hw + p] = g[(bi * hw + p) * c + ci];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::FromRows(x) => {
                let s = node.value.shape();
                let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            gx[(bi * hw + p) * c + ci] = g[(bi * c + ci) * hw + p];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![0.0; self.value(*x).len()];
                for (plane, dst) in gx.chunks_mut(h * w).enumerate() {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                acc(*x, gx);
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf | Op::Detach => Vec::new(),
        Op::Affine { x, w, b } | Op::Conv3x3 { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(*b);
            v
        }
        Op::Relu(x) | Op::MulScalar(x, _) | Op::Sum(x) | Op::Softmax(x) | Op::Transpose(x) => vec![*x],
        Op::Reshape(x) | Op::ToRows(x) | Op::FromRows(x) | Op::Upsample2(x) => vec![*x],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mse(a, b) | Op::Matmul(a, b) | Op::Bmm(a, b) => vec![*a, *b],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::StraightThrough { pass } => vec![*pass],
        Op::Gather { table, .. } => vec![*table],
    }
}
