//! Reverse-mode autodiff over dense tensors.
//!
//! The tape records primitives eagerly (forward values are computed at build
//! time) and `backward` walks the record once in reverse, accumulating
//! adjoints. Shape mismatches are programming errors and panic with both
//! shapes. Nodes created via [`Tape::constant`] do not receive adjoints and
//! are skipped during the backward sweep, so using fixed weights or data as
//! constants keeps the backward pass cheap.

use super::{add_in_place, Tensor, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Relu(NodeId),
    Sigmoid(NodeId),
    LogClamped(NodeId),
    Abs(NodeId),
    /// y = mul * x + add, elementwise; only the slope matters going backward
    AffineScalar { x: NodeId, mul: f64 },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// y = x ⊙ c with a constant tensor
    MulConstTensor { x: NodeId, c: Tensor },
    /// y = x * s where s is a one-element node
    Scale { x: NodeId, s: NodeId },
    /// one element of x as a scalar node
    Pick { x: NodeId, index: usize },
    Sum(NodeId),
    SumAxisLast(NodeId),
    /// [B,C,H,W] -> [C]
    SumChannelwise(NodeId),
    /// rows start..start+len of a 2-axis tensor
    SliceRows { x: NodeId, start: usize, len: usize },
    /// y = x · W for a constant W of shape [K, M]
    MatmulConst { x: NodeId, w: Tensor },
    Softmax { x: NodeId, axis: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, dilation: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Upsample2x(NodeId),
    Downsample2x(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward sweep, indexed by node.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adj[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no adjoint is allocated or propagated through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), self.ng(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(super::sigmoid_clamped);
        self.push(v, Op::Sigmoid(x), self.ng(x))
    }

    pub fn log_clamped(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(super::log_clamped);
        self.push(v, Op::LogClamped(x), self.ng(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x), self.ng(x))
    }

    pub fn affine_scalar(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(x).map(|a| mul * a + add);
        self.push(v, Op::AffineScalar { x, mul }, self.ng(x))
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.affine_scalar(x, -1.0, 1.0)
    }

    fn binary_values(&self, a: NodeId, b: NodeId, what: &'static str) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            panic!(
                "shape mismatch in {what}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            );
        }
        (va.shape().to_vec(), va.data().to_vec(), vb.data().to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, da, db) = self.binary_values(a, b, "add");
        let data = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), self.ng(a) || self.ng(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, da, db) = self.binary_values(a, b, "sub");
        let data = da.iter().zip(&db).map(|(x, y)| x - y).collect();
        self.push(Tensor::from_vec(&shape, data), Op::Sub(a, b), self.ng(a) || self.ng(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, da, db) = self.binary_values(a, b, "mul");
        let data = da.iter().zip(&db).map(|(x, y)| x * y).collect();
        self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b), self.ng(a) || self.ng(b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (shape, da, db) = self.binary_values(a, b, "div");
        let data = da.iter().zip(&db).map(|(x, y)| x / y).collect();
        self.push(Tensor::from_vec(&shape, data), Op::Div(a, b), self.ng(a) || self.ng(b))
    }

    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> NodeId {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            panic!("shape mismatch in mul_const: {:?} vs {:?}", vx.shape(), c.shape());
        }
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::from_vec(vx.shape(), data);
        self.push(v, Op::MulConstTensor { x, c }, self.ng(x))
    }

    pub fn scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).numel(), 1, "scale factor must be a scalar node");
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|a| a * sv);
        self.push(v, Op::Scale { x, s }, self.ng(x) || self.ng(s))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = Tensor::scalar(self.value(x).data()[index]);
        self.push(v, Op::Pick { x, index }, self.ng(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x), self.ng(x))
    }

    pub fn sum_axis_last(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let nd = vx.shape().len();
        assert!(nd >= 1, "sum_axis_last needs at least one axis");
        let k = vx.shape()[nd - 1];
        let out_shape = vx.shape()[..nd - 1].to_vec();
        let outer: usize = out_shape.iter().product();
        let mut data = vec![0.0; outer];
        for o in 0..outer {
            data[o] = vx.data()[o * k..(o + 1) * k].iter().sum();
        }
        self.push(Tensor::from_vec(&out_shape, data), Op::SumAxisLast(x), self.ng(x))
    }

    pub fn sum_channelwise(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 4, "sum_channelwise expects [B,C,H,W], got {:?}", vx.shape());
        let (b, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let hw = h * w;
        let mut data = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                data[ci] += vx.data()[base..base + hw].iter().sum::<f64>();
            }
        }
        self.push(Tensor::from_vec(&[c], data), Op::SumChannelwise(x), self.ng(x))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2, "slice_rows expects a 2-axis tensor, got {:?}", vx.shape());
        let (r, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= r, "slice_rows {start}+{len} out of {r} rows");
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        self.push(
            Tensor::from_vec(&[len, c], data),
            Op::SliceRows { x, start, len },
            self.ng(x),
        )
    }

    /// x:[R,K] times a constant W:[K,M].
    pub fn matmul_const(&mut self, x: NodeId, w: Tensor) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2, "matmul_const expects a 2-axis input, got {:?}", vx.shape());
        assert_eq!(w.shape().len(), 2, "matmul_const weight must be 2-axis, got {:?}", w.shape());
        let (r, k) = (vx.shape()[0], vx.shape()[1]);
        let (wk, m) = (w.shape()[0], w.shape()[1]);
        if k != wk {
            panic!("shape mismatch in matmul_const: {:?} vs {:?}", vx.shape(), w.shape());
        }
        let mut data = vec![0.0; r * m];
        for ri in 0..r {
            let xrow = &vx.data()[ri * k..(ri + 1) * k];
            let orow = &mut data[ri * m..(ri + 1) * m];
            for (ki, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w.data()[ki * m..(ki + 1) * m];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
        self.push(Tensor::from_vec(&[r, m], data), Op::MatmulConst { x, w }, self.ng(x))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let vx = self.value(x);
        assert!(axis < vx.shape().len(), "softmax axis {axis} out of range for {:?}", vx.shape());
        let mut v = vx.clone();
        for_each_lane(vx.shape(), axis, |lane| {
            let mut row: Vec<f64> = lane.iter().map(|&i| v.data()[i]).collect();
            super::softmax_row(&mut row);
            for (&i, &val) in lane.iter().zip(&row) {
                v.data_mut()[i] = val;
            }
        });
        self.push(v, Op::Softmax { x, axis }, self.ng(x))
    }

    /// Stride-1 same-padded 2D convolution; kernel sides must be odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, dilation: usize) -> NodeId {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), dilation);
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, dilation }, needs)
    }

    /// Per-(sample, channel) normalization with trainable per-channel affine.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(v, Op::InstanceNorm { x, gamma, beta, eps }, needs)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 4, "upsample2x expects [B,C,H,W], got {:?}", vx.shape());
        let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let mut out = Tensor::zeros(&[bs, c, 2 * h, 2 * w]);
        for b in 0..bs {
            for ci in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        let v = vx.data()[vx.idx4(b, ci, i / 2, j / 2)];
                        let oi = out.idx4(b, ci, i, j);
                        out.data_mut()[oi] = v;
                    }
                }
            }
        }
        self.push(out, Op::Upsample2x(x), self.ng(x))
    }

    pub fn downsample2x(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 4, "downsample2x expects [B,C,H,W], got {:?}", vx.shape());
        let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "downsample2x needs even H,W, got {:?}", vx.shape());
        let mut out = Tensor::zeros(&[bs, c, h / 2, w / 2]);
        for b in 0..bs {
            for ci in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let s = vx.data()[vx.idx4(b, ci, 2 * i, 2 * j)]
                            + vx.data()[vx.idx4(b, ci, 2 * i, 2 * j + 1)]
                            + vx.data()[vx.idx4(b, ci, 2 * i + 1, 2 * j)]
                            + vx.data()[vx.idx4(b, ci, 2 * i + 1, 2 * j + 1)];
                        let oi = out.idx4(b, ci, i, j);
                        out.data_mut()[oi] = 0.25 * s;
                    }
                }
            }
        }
        self.push(out, Op::Downsample2x(x), self.ng(x))
    }

    /// Reverse sweep from a scalar loss node. Returns adjoints for every
    /// node that needs them; constants and their pure fan-in are skipped.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || adj[i].is_none() {
                continue;
            }
            // inputs always precede node i on the tape
            let (head, tail) = adj.split_at_mut(i);
            let dy = tail[0].as_ref().unwrap();
            let mut acc = |id: NodeId, delta: Tensor| {
                if !self.nodes[id.0].needs_grad {
                    return;
                }
                debug_assert!(id.0 < i);
                match &mut head[id.0] {
                    Some(t) => add_in_place(t.data_mut(), delta.data()),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {}
                Op::Relu(x) => {
                    let vx = self.value(*x);
                    let d = Tensor::from_vec(
                        vx.shape(),
                        vx.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                            .collect(),
                    );
                    acc(*x, d);
                }
                Op::Sigmoid(x) => {
                    let s = &self.nodes[i].value;
                    let d = Tensor::from_vec(
                        s.shape(),
                        s.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&sv, &g)| g * sv * (1.0 - sv))
                            .collect(),
                    );
                    acc(*x, d);
                }
                Op::LogClamped(x) => {
                    let vx = self.value(*x);
                    let d = Tensor::from_vec(
                        vx.shape(),
                        vx.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&a, &g)| if a > PROB_EPS { g / a } else { 0.0 })
                            .collect(),
                    );
                    acc(*x, d);
                }
                Op::Abs(x) => {
                    let vx = self.value(*x);
                    let d = Tensor::from_vec(
                        vx.shape(),
                        vx.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&a, &g)| g * sign_zero(a))
                            .collect(),
                    );
                    acc(*x, d);
                }
                Op::AffineScalar { x, mul } => {
                    acc(*x, dy.map(|g| g * mul));
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, dy.clone());
                    acc(*b, dy.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(
                        *a,
                        Tensor::from_vec(
                            vb.shape(),
                            vb.data().iter().zip(dy.data()).map(|(&y, &g)| g * y).collect(),
                        ),
                    );
                    acc(
                        *b,
                        Tensor::from_vec(
                            va.shape(),
                            va.data().iter().zip(dy.data()).map(|(&y, &g)| g * y).collect(),
                        ),
                    );
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(
                        *a,
                        Tensor::from_vec(
                            vb.shape(),
                            vb.data().iter().zip(dy.data()).map(|(&y, &g)| g / y).collect(),
                        ),
                    );
                    let d: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(dy.data())
                        .map(|((&x, &y), &g)| -g * x / (y * y))
                        .collect();
                    acc(*b, Tensor::from_vec(vb.shape(), d));
                }
                Op::MulConstTensor { x, c } => {
                    let d = Tensor::from_vec(
                        c.shape(),
                        c.data().iter().zip(dy.data()).map(|(&cv, &g)| g * cv).collect(),
                    );
                    acc(*x, d);
                }
                Op::Scale { x, s } => {
                    let sv = self.value(*s).data()[0];
                    acc(*x, dy.map(|g| g * sv));
                    let vx = self.value(*x);
                    let dot: f64 = vx.data().iter().zip(dy.data()).map(|(&a, &g)| a * g).sum();
                    acc(*s, Tensor::scalar(dot));
                }
                Op::Pick { x, index } => {
                    let vx = self.value(*x);
                    let mut d = Tensor::zeros(vx.shape());
                    d.data_mut()[*index] = dy.item();
                    acc(*x, d);
                }
                Op::Sum(x) => {
                    let vx = self.value(*x);
                    acc(*x, Tensor::full(vx.shape(), dy.item()));
                }
                Op::SumAxisLast(x) => {
                    let vx = self.value(*x);
                    let nd = vx.shape().len();
                    let k = vx.shape()[nd - 1];
                    let mut d = Tensor::zeros(vx.shape());
                    for (o, &g) in dy.data().iter().enumerate() {
                        for v in &mut d.data_mut()[o * k..(o + 1) * k] {
                            *v = g;
                        }
                    }
                    acc(*x, d);
                }
                Op::SumChannelwise(x) => {
                    let vx = self.value(*x);
                    let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                    let hw = h * w;
                    let mut d = Tensor::zeros(vx.shape());
                    for b in 0..bs {
                        for ci in 0..c {
                            let g = dy.data()[ci];
                            let base = (b * c + ci) * hw;
                            for v in &mut d.data_mut()[base..base + hw] {
                                *v = g;
                            }
                        }
                    }
                    acc(*x, d);
                }
                Op::SliceRows { x, start, len } => {
                    let vx = self.value(*x);
                    let c = vx.shape()[1];
                    let mut d = Tensor::zeros(vx.shape());
                    d.data_mut()[start * c..(start + len) * c].copy_from_slice(dy.data());
                    acc(*x, d);
                }
                Op::MatmulConst { x, w } => {
                    let vx = self.value(*x);
                    let (r, k) = (vx.shape()[0], vx.shape()[1]);
                    let m = w.shape()[1];
                    let mut d = vec![0.0; r * k];
                    for ri in 0..r {
                        let grow = &dy.data()[ri * m..(ri + 1) * m];
                        let drow = &mut d[ri * k..(ri + 1) * k];
                        for ki in 0..k {
                            let wrow = &w.data()[ki * m..(ki + 1) * m];
                            drow[ki] = grow.iter().zip(wrow).map(|(&g, &wv)| g * wv).sum();
                        }
                    }
                    acc(*x, Tensor::from_vec(&[r, k], d));
                }
                Op::Softmax { x, axis } => {
                    let s = &self.nodes[i].value;
                    let mut d = Tensor::zeros(s.shape());
                    for_each_lane(s.shape(), *axis, |lane| {
                        let dot: f64 = lane.iter().map(|&ix| s.data()[ix] * dy.data()[ix]).sum();
                        for &ix in lane {
                            d.data_mut()[ix] = s.data()[ix] * (dy.data()[ix] - dot);
                        }
                    });
                    acc(*x, d);
                }
                Op::Conv2d { x, w, b, dilation } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*x), self.value(*w), dy, *dilation);
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::InstanceNorm { x, gamma, beta, eps } => {
                    let (dx, dg, db) =
                        instance_norm_backward(self.value(*x), self.value(*gamma), dy, *eps);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::Upsample2x(x) => {
                    let vx = self.value(*x);
                    let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                    let mut d = Tensor::zeros(vx.shape());
                    for b in 0..bs {
                        for ci in 0..c {
                            for ii in 0..2 * h {
                                for jj in 0..2 * w {
                                    let di = d.idx4(b, ci, ii / 2, jj / 2);
                                    d.data_mut()[di] += dy.data()
                                        [((b * c + ci) * 2 * h + ii) * 2 * w + jj];
                                }
                            }
                        }
                    }
                    acc(*x, d);
                }
                Op::Downsample2x(x) => {
                    let vx = self.value(*x);
                    let (bs, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                    let mut d = Tensor::zeros(vx.shape());
                    for b in 0..bs {
                        for ci in 0..c {
                            for ii in 0..h {
                                for jj in 0..w {
                                    let g = dy.data()[((b * c + ci) * (h / 2) + ii / 2) * (w / 2) + jj / 2];
                                    let di = d.idx4(b, ci, ii, jj);
                                    d.data_mut()[di] = 0.25 * g;
                                }
                            }
                        }
                    }
                    acc(*x, d);
                }
            }
        }
        Gradients { adj }
    }
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Visit every lane along `axis`, passing flat indices of the lane elements.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let k = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; k];
    for o in 0..outer {
        for inn in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = (o * k + j) * inner + inn;
            }
            f(&lane);
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be [B,C,H,W], got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be [Co,Ci,Kh,Kw], got {ws:?}");
    let (bs, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if ci != wci {
        panic!("shape mismatch in conv2d: input {xs:?} vs weight {ws:?}");
    }
    if b.shape() != [co] {
        panic!("shape mismatch in conv2d bias: expected [{co}], got {:?}", b.shape());
    }
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel sides must be odd, got {ws:?}");
    let (cu, cv) = ((kh / 2) as isize, (kw / 2) as isize);
    let dil = dilation as isize;

    let mut out = Tensor::zeros(&[bs, co, h, wd]);
    for bi in 0..bs {
        for o in 0..co {
            let obase = (bi * co + o) * h * wd;
            let bias = b.data()[o];
            for v in &mut out.data_mut()[obase..obase + h * wd] {
                *v = bias;
            }
            for c in 0..ci {
                let xbase = (bi * ci + c) * h * wd;
                for u in 0..kh {
                    let di = (u as isize - cu) * dil;
                    for vk in 0..kw {
                        let dj = (vk as isize - cv) * dil;
                        let wv = w.data()[((o * ci + c) * kh + u) * kw + vk];
                        if wv == 0.0 {
                            continue;
                        }
                        let j0 = (-dj).max(0) as usize;
                        let j1 = ((wd as isize - dj).min(wd as isize)).max(0) as usize;
                        if j0 >= j1 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let xrow = xbase + si as usize * wd;
                            let orow = obase + i * wd;
                            let (xd, od) = (x.data(), &mut out.data_mut()[..]);
                            let src = &xd[xrow + (j0 as isize + dj) as usize
                                ..xrow + (j1 as isize + dj) as usize];
                            let dst = &mut od[orow + j0..orow + j1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, dilation: usize) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let (bs, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (cu, cv) = ((kh / 2) as isize, (kw / 2) as isize);
    let dil = dilation as isize;

    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(&[co]);

    for bi in 0..bs {
        for o in 0..co {
            let obase = (bi * co + o) * h * wd;
            db.data_mut()[o] += dy.data()[obase..obase + h * wd].iter().sum::<f64>();
            for c in 0..ci {
                let xbase = (bi * ci + c) * h * wd;
                for u in 0..kh {
                    let di = (u as isize - cu) * dil;
                    for vk in 0..kw {
                        let dj = (vk as isize - cv) * dil;
                        let widx = ((o * ci + c) * kh + u) * kw + vk;
                        let wv = w.data()[widx];
                        let j0 = (-dj).max(0) as usize;
                        let j1 = ((wd as isize - dj).min(wd as isize)).max(0) as usize;
                        if j0 >= j1 {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for i in 0..h {
                            let si = i as isize + di;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let xrow = xbase + si as usize * wd + (j0 as isize + dj) as usize;
                            let orow = obase + i * wd + j0;
                            let n = j1 - j0;
                            let gy = &dy.data()[orow..orow + n];
                            // dW accumulates x ⊙ dy; dX scatters w * dy
                            let xsrc = &x.data()[xrow..xrow + n];
                            for (g, xv) in gy.iter().zip(xsrc) {
                                wacc += g * xv;
                            }
                            let dxdst = &mut dx.data_mut()[xrow..xrow + n];
                            for (d, g) in dxdst.iter_mut().zip(gy) {
                                *d += wv * g;
                            }
                        }
                        dw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn instance_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "instance_norm expects [B,C,H,W], got {xs:?}");
    let (bs, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        panic!(
            "shape mismatch in instance_norm affine: expected [{c}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        );
    }
    let hw = h * w;
    let mut out = Tensor::zeros(xs);
    for bi in 0..bs {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let src = &x.data()[base..base + hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let dst = &mut out.data_mut()[base..base + hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = g * (s - mean) * inv + b;
            }
        }
    }
    out
}

fn instance_norm_backward(x: &Tensor, gamma: &Tensor, dy: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let (bs, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let n = hw as f64;
    let mut dx = Tensor::zeros(xs);
    let mut dg = Tensor::zeros(&[c]);
    let mut db = Tensor::zeros(&[c]);
    for bi in 0..bs {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let src = &x.data()[base..base + hw];
            let g = &dy.data()[base..base + hw];
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let gam = gamma.data()[ci];

            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (gv, &sv) in g.iter().zip(src) {
                sum_g += gv;
                sum_gx += gv * (sv - mean) * inv;
            }
            dg.data_mut()[ci] += sum_gx;
            db.data_mut()[ci] += sum_g;

            let mg = sum_g / n;
            let mgx = sum_gx / n;
            let dst = &mut dx.data_mut()[base..base + hw];
            for ((d, &gv), &sv) in dst.iter_mut().zip(g).zip(src) {
                let xh = (sv - mean) * inv;
                *d = gam * inv * (gv - mg - xh * mgx);
            }
        }
    }
    (dx, dg, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, max_rel_err};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_vec(
            shape,
            (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Random tensor with entries bounded away from zero (for relu/abs kinks).
    fn randt_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_vec(
            shape,
            (0..shape.iter().product::<usize>())
                .map(|_| {
                    let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    s * rng.gen_range(0.2..1.0)
                })
                .collect(),
        )
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        let w = tape.constant(k);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(randt(&mut rng, &[2, 3, 4, 4]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.instance_norm(x, g, b, 1e-5);
        let v = tape.value(y);
        for bi in 0..2 {
            for ci in 0..3 {
                let base = (bi * 3 + ci) * 16;
                let row = &v.data()[base..base + 16];
                let mean: f64 = row.iter().sum::<f64>() / 16.0;
                let var: f64 = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3); // eps shrinks variance slightly
            }
        }
    }

    #[test]
    fn up_down_sample_shapes_and_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let up = tape.upsample2x(x);
        assert_eq!(tape.value(up).shape(), &[1, 1, 4, 4]);
        assert_eq!(tape.value(up).data()[0], 1.0);
        assert_eq!(tape.value(up).data()[3], 2.0);
        let down = tape.downsample2x(up);
        assert_eq!(tape.value(down).data(), tape.value(x).data());
    }

    #[test]
    fn softmax_axis_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let s = tape.softmax(x, 1);
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        tape.add(a, b);
    }

    #[test]
    fn constants_do_not_collect_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(a, c);
        let grads = tape.backward(y);
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn linear_function_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = randt(&mut rng, &[3, 4]);
        let report = grad_check(
            |tape, ids| {
                let y = tape.affine_scalar(ids[0], 2.5, -0.5);
                tape.sum(y)
            },
            &[input],
            1e-5,
            1e-9,
        );
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn elementwise_primitives_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [2, 3];
        let weights = randt(&mut rng, &shape);

        // relu / abs checked at inputs bounded away from their kinks
        for case in 0..6 {
            let input = if case < 2 {
                randt_off_kink(&mut rng, &shape)
            } else {
                randt(&mut rng, &shape)
            };
            let w = weights.clone();
            let report = grad_check(
                move |tape, ids| {
                    let x = ids[0];
                    let y = match case {
                        0 => tape.relu(x),
                        1 => tape.abs(x),
                        2 => tape.sigmoid(x),
                        3 => {
                            let s = tape.sigmoid(x);
                            tape.log_clamped(s)
                        }
                        4 => {
                            let a = tape.affine_scalar(x, 0.7, 1.2);
                            tape.mul(x, a)
                        }
                        _ => {
                            let a = tape.affine_scalar(x, 0.3, 2.0);
                            tape.div(x, a)
                        }
                    };
                    let z = tape.mul_const(y, w.clone());
                    tape.sum(z)
                },
                &[input],
                1e-5,
                1e-5,
            );
            assert!(report.max_rel_err < 1e-5, "case {case}: rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn structural_primitives_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = randt(&mut rng, &[4, 6]);
        let probe = randt(&mut rng, &[3, 6]);
        let input = randt(&mut rng, &[3, 4]);
        let report = grad_check(
            move |tape, ids| {
                let y = tape.matmul_const(ids[0], w.clone());
                let z = tape.mul_const(y, probe.clone());
                tape.sum(z)
            },
            &[input.clone()],
            1e-5,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-5, "matmul: {}", report.max_rel_err);

        let probe2 = randt(&mut rng, &[2, 4]);
        let report = grad_check(
            move |tape, ids| {
                let s = tape.slice_rows(ids[0], 1, 2);
                let z = tape.mul_const(s, probe2.clone());
                tape.sum(z)
            },
            &[input.clone()],
            1e-5,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-5, "slice: {}", report.max_rel_err);

        let probe3 = randt(&mut rng, &[3]);
        let report = grad_check(
            move |tape, ids| {
                let s = tape.sum_axis_last(ids[0]);
                let z = tape.mul_const(s, probe3.clone());
                tape.sum(z)
            },
            &[input.clone()],
            1e-5,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-5, "sum_axis_last: {}", report.max_rel_err);

        let report = grad_check(
            |tape, ids| {
                let p = tape.pick(ids[0], 5);
                let q = tape.pick(ids[0], 2);
                let m = tape.mul(p, q);
                tape.sum(m)
            },
            &[input],
            1e-5,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-5, "pick: {}", report.max_rel_err);
    }

    #[test]
    fn softmax_scale_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe = randt(&mut rng, &[2, 5]);
        let input = randt(&mut rng, &[2, 5]);
        let scalar = Tensor::scalar(0.8);
        let report = grad_check(
            move |tape, ids| {
                let s = tape.softmax(ids[0], 1);
                let sc = tape.scale(s, ids[1]);
                let z = tape.mul_const(sc, probe.clone());
                tape.sum(z)
            },
            &[input, scalar],
            1e-5,
            1e-5,
        );
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_norm_resample_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randt(&mut rng, &[1, 2, 4, 4]);
        let w = randt(&mut rng, &[2, 2, 3, 3]);
        let b = randt(&mut rng, &[2]);
        let gamma = randt_off_kink(&mut rng, &[2]);
        let beta = randt(&mut rng, &[2]);
        let probe = randt(&mut rng, &[1, 2, 4, 4]);
        let report = grad_check(
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 1);
                let n = tape.instance_norm(y, ids[3], ids[4], 1e-5);
                let z = tape.mul_const(n, probe.clone());
                tape.sum(z)
            },
            &[x.clone(), w.clone(), b.clone(), gamma.clone(), beta.clone()],
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-4, "conv+norm: {}", report.max_rel_err);

        // dilated separable kernels through resampling
        let w31 = randt(&mut rng, &[2, 2, 3, 1]);
        let w13 = randt(&mut rng, &[2, 2, 1, 3]);
        let probe2 = randt(&mut rng, &[1, 2, 4, 4]);
        let report = grad_check(
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 1);
                let y2 = tape.conv2d(y, ids[3], ids[4], 1);
                let d = tape.downsample2x(y2);
                let u = tape.upsample2x(d);
                let z = tape.mul_const(u, probe2.clone());
                tape.sum(z)
            },
            &[x.clone(), w31, b.clone(), w13, b.clone()],
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-4, "sep+resample: {}", report.max_rel_err);

        let wd = randt(&mut rng, &[1, 2, 3, 3]);
        let bd = randt(&mut rng, &[1]);
        let probe3 = randt(&mut rng, &[1, 1, 4, 4]);
        let report = grad_check(
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 2);
                let z = tape.mul_const(y, probe3.clone());
                tape.sum(z)
            },
            &[x, wd, bd],
            1e-5,
            1e-4,
        );
        assert!(report.max_rel_err < 1e-4, "dilated: {}", report.max_rel_err);
    }

    #[test]
    fn backward_linearity_over_subgraphs() {
        // adjoint of a sum of subgraphs equals the sum of separate adjoints
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv = randt(&mut rng, &[2, 3]);
        let build = |tape: &mut Tape, x: NodeId, which: u8| -> NodeId {
            match which {
                0 => {
                    let s = tape.sigmoid(x);
                    tape.sum(s)
                }
                _ => {
                    let m = tape.mul(x, x);
                    tape.sum(m)
                }
            }
        };
        let mut t_all = Tape::new();
        let x_all = t_all.leaf(xv.clone());
        let f0 = build(&mut t_all, x_all, 0);
        let f1 = build(&mut t_all, x_all, 1);
        let tot = t_all.add(f0, f1);
        let g_all = t_all.backward(tot);

        let mut parts = Tensor::zeros(&[2, 3]);
        for which in 0..2u8 {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let f = build(&mut t, x, which);
            let g = t.backward(f);
            add_in_place(parts.data_mut(), g.get(x).unwrap().data());
        }
        assert!(max_rel_err(g_all.get(x_all).unwrap(), &parts, 1e-9) < 1e-12);
    }

    #[test]
    fn deterministic_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randt(&mut rng, &[1, 2, 4, 4]);
        let w = randt(&mut rng, &[2, 2, 3, 3]);
        let b = randt(&mut rng, &[2]);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            let y = tape.conv2d(xi, wi, bi, 1);
            let r = tape.relu(y);
            let s = tape.sum(r);
            let g = tape.backward(s);
            (
                tape.value(s).item(),
                g.get(xi).unwrap().clone(),
                g.get(wi).unwrap().clone(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
