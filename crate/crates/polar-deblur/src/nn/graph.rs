//! Define-by-run tape: forward ops append nodes, backward walks the tape.

use super::conv::{conv2d_backward, conv2d_forward, out_dim, PadMode};
use super::{Shape, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    },
    InstanceNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Abs(NodeId),
    Square(NodeId),
    ScaleChannels {
        x: NodeId,
        gate: NodeId,
    },
    ConcatChannels(Vec<NodeId>),
    NarrowChannels {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GlobalAvgPool(NodeId),
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    Laplacian(NodeId),
    MeanAll(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op,
}

/// Computation tape. All inputs of a node precede it, so one reverse sweep
/// propagates gradients. Everything is single-threaded and deterministic.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Value of a `[1,1,1,1]` node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        let t = self.value(id);
        assert_eq!(t.shape().numel(), 1, "not a scalar node");
        t.data()[0]
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- forward ops ------------------------------------------------------

    /// 2-D convolution; weight `[Cout, Cin, K, K]`, bias `[1, Cout, 1, 1]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> NodeId {
        let y = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            mode,
        );
        self.push(y, Op::Conv2d { x, w, b, stride, pad, mode })
    }

    /// Per-sample, per-channel normalization over the spatial extent with
    /// affine parameters `gamma`, `beta` of shape `[1, C, 1, 1]`.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xs = self.shape(x);
        assert_eq!(self.shape(gamma).c, xs.c, "instance_norm gamma channels");
        assert_eq!(self.shape(beta).c, xs.c, "instance_norm beta channels");
        let m = xs.h * xs.w;
        let eps_t = T::from_f64(eps);
        let mut y = Tensor::zeros(xs);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let inv_m = T::one() / T::from_f64(m as f64);
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = (n * xs.c + c) * m;
                let plane = &xv[base..base + m];
                let mut mean = T::zero();
                for &v in plane {
                    mean += v;
                }
                mean *= inv_m;
                let mut var = T::zero();
                for &v in plane {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_m;
                let inv_std = T::one() / (var + eps_t).sqrt();
                let (g, b) = (gv[c], bv[c]);
                for (o, &v) in y.data_mut()[base..base + m].iter_mut().zip(plane) {
                    *o = g * (v - mean) * inv_std + b;
                }
            }
        }
        self.push(y, Op::InstanceNorm { x, gamma, beta, eps })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| v.max(T::zero())).collect(),
        );
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::from_vec(
            self.shape(x),
            self.value(x)
                .data()
                .iter()
                .map(|&v| T::one() / (T::one() + (-v).exp()))
                .collect(),
        );
        self.push(y, Op::Sigmoid(x))
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(T, T) -> T) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let y = Tensor::from_vec(
            self.shape(a),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        );
        self.push(y, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_op(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let kt = T::from_f64(k);
        let y = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| v + kt).collect(),
        );
        self.push(y, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let kt = T::from_f64(k);
        let y = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| v * kt).collect(),
        );
        self.push(y, Op::MulScalar(x, k))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| v.abs()).collect(),
        );
        self.push(y, Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let y = Tensor::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|&v| v * v).collect(),
        );
        self.push(y, Op::Square(x))
    }

    /// Multiply `[N,C,H,W]` features by `[N,C,1,1]` per-channel gates.
    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        assert!(
            gs.n == xs.n && gs.c == xs.c && gs.h == 1 && gs.w == 1,
            "gate must be [N,C,1,1]"
        );
        let m = xs.h * xs.w;
        let mut y = Tensor::zeros(xs);
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        for nc in 0..xs.n * xs.c {
            let g = gv[nc];
            for (o, &v) in y.data_mut()[nc * m..(nc + 1) * m]
                .iter_mut()
                .zip(&xv[nc * m..(nc + 1) * m])
            {
                *o = g * v;
            }
        }
        self.push(y, Op::ScaleChannels { x, gate })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]);
        let total_c: usize = parts.iter().map(|&p| self.shape(p).c).sum();
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.n == first.n && s.h == first.h && s.w == first.w,
                "concat spatial/batch mismatch"
            );
        }
        let m = first.h * first.w;
        let mut y = Tensor::zeros(Shape::nchw(first.n, total_c, first.h, first.w));
        for n in 0..first.n {
            let mut c_off = 0usize;
            for &p in parts {
                let s = self.shape(p);
                let src = self.value(p).data();
                let len = s.c * m;
                let dst_base = (n * total_c + c_off) * m;
                y.data_mut()[dst_base..dst_base + len]
                    .copy_from_slice(&src[n * len..(n + 1) * len]);
                c_off += s.c;
            }
        }
        self.push(y, Op::ConcatChannels(parts.to_vec()))
    }

    /// Select channels `[start, start+len)`.
    pub fn narrow_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xs = self.shape(x);
        assert!(start + len <= xs.c, "channel range out of bounds");
        let m = xs.h * xs.w;
        let mut y = Tensor::zeros(Shape::nchw(xs.n, len, xs.h, xs.w));
        let xv = self.value(x).data();
        for n in 0..xs.n {
            let src = (n * xs.c + start) * m;
            let dst = n * len * m;
            y.data_mut()[dst..dst + len * m].copy_from_slice(&xv[src..src + len * m]);
        }
        self.push(y, Op::NarrowChannels { x, start, len })
    }

    /// Mean over the spatial extent, producing `[N,C,1,1]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let m = xs.h * xs.w;
        let inv = T::one() / T::from_f64(m as f64);
        let mut y = Tensor::zeros(Shape::nchw(xs.n, xs.c, 1, 1));
        let xv = self.value(x).data();
        for nc in 0..xs.n * xs.c {
            let mut acc = T::zero();
            for &v in &xv[nc * m..(nc + 1) * m] {
                acc += v;
            }
            y.data_mut()[nc] = acc * inv;
        }
        self.push(y, Op::GlobalAvgPool(x))
    }

    /// 2x2 average pooling with stride 2 (even dimensions required).
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        assert!(xs.h % 2 == 0 && xs.w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (xs.h / 2, xs.w / 2);
        let quarter = T::from_f64(0.25);
        let mut y = Tensor::zeros(Shape::nchw(xs.n, xs.c, oh, ow));
        let xv = self.value(x).data();
        for nc in 0..xs.n * xs.c {
            let src = &xv[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
            let dst = &mut y.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * xs.w + 2 * ox;
                    dst[oy * ow + ox] =
                        (src[i] + src[i + 1] + src[i + xs.w] + src[i + xs.w + 1]) * quarter;
                }
            }
        }
        self.push(y, Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let (oh, ow) = (xs.h * 2, xs.w * 2);
        let mut y = Tensor::zeros(Shape::nchw(xs.n, xs.c, oh, ow));
        let xv = self.value(x).data();
        for nc in 0..xs.n * xs.c {
            let src = &xv[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
            let dst = &mut y.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / 2;
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * xs.w + ox / 2];
                }
            }
        }
        self.push(y, Op::UpsampleNearest2(x))
    }

    /// Discrete 4-neighbour Laplacian per channel with replicate padding.
    pub fn laplacian(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let (h, w) = (xs.h, xs.w);
        let four = T::from_f64(4.0);
        let mut y = Tensor::zeros(xs);
        let xv = self.value(x).data();
        for nc in 0..xs.n * xs.c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut y.data_mut()[nc * h * w..(nc + 1) * h * w];
            for yy in 0..h {
                let up = yy.saturating_sub(1);
                let down = (yy + 1).min(h - 1);
                for xx in 0..w {
                    let left = xx.saturating_sub(1);
                    let right = (xx + 1).min(w - 1);
                    dst[yy * w + xx] = src[up * w + xx] + src[down * w + xx] + src[yy * w + left]
                        + src[yy * w + right]
                        - four * src[yy * w + xx];
                }
            }
        }
        self.push(y, Op::Laplacian(x))
    }

    /// Mean over every element, producing a `[1,1,1,1]` scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.shape(x).numel();
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let y = Tensor::scalar(acc / T::from_f64(n as f64));
        self.push(y, Op::MeanAll(x))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from `root`, seeding with ones. Gradients of all
    /// contributing nodes (including leaves) are available afterwards via
    /// [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = Tensor::filled(self.nodes[root.0].value.shape(), T::one());
        self.nodes[root.0].grad = Some(seed);
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            for (target, contribution) in self.backward_node(id) {
                self.accumulate(target, contribution);
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += *b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn backward_node(&self, id: usize) -> Vec<(NodeId, Tensor<T>)> {
        let node = &self.nodes[id];
        let g = node.grad.as_ref().expect("grad present");
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, stride, pad, mode } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    *mode,
                    b.is_some(),
                );
                let mut out = vec![(*x, dx), (*w, dw)];
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let xs = self.shape(*x);
                let m = xs.h * xs.w;
                let inv_m = T::one() / T::from_f64(m as f64);
                let eps_t = T::from_f64(*eps);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                let mut dgamma = Tensor::zeros(Shape::nchw(1, xs.c, 1, 1));
                let mut dbeta = Tensor::zeros(Shape::nchw(1, xs.c, 1, 1));
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let base = (n * xs.c + c) * m;
                        let plane = &xv[base..base + m];
                        let gout = &gd[base..base + m];
                        let mut mean = T::zero();
                        for &v in plane {
                            mean += v;
                        }
                        mean *= inv_m;
                        let mut var = T::zero();
                        for &v in plane {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_m;
                        let inv_std = T::one() / (var + eps_t).sqrt();
                        // accumulate affine grads and the two reductions
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for i in 0..m {
                            let xh = (plane[i] - mean) * inv_std;
                            sum_g += gout[i];
                            sum_gx += gout[i] * xh;
                        }
                        dbeta.data_mut()[c] += sum_g;
                        dgamma.data_mut()[c] += sum_gx;
                        let gam = gv[c];
                        let mean_g = sum_g * inv_m;
                        let mean_gx = sum_gx * inv_m;
                        let dst = &mut dx.data_mut()[base..base + m];
                        for i in 0..m {
                            let xh = (plane[i] - mean) * inv_std;
                            dst[i] = gam * inv_std * (gout[i] - mean_g - xh * mean_gx);
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu(x) => {
                let dx = Tensor::from_vec(
                    self.shape(*x),
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gg)| if v > T::zero() { gg } else { T::zero() })
                        .collect(),
                );
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = Tensor::from_vec(
                    node.value.shape(),
                    node.value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gg)| gg * y * (T::one() - y))
                        .collect(),
                );
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let neg = Tensor::from_vec(g.shape(), g.data().iter().map(|&v| -v).collect());
                vec![(*a, g.clone()), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv).map(|(&gg, &v)| gg * v).collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(av).map(|(&gg, &v)| gg * v).collect(),
                );
                vec![(*a, da), (*b, db)]
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(bv).map(|(&gg, &v)| gg / v).collect(),
                );
                let db = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gg, (&x, &y))| -gg * x / (y * y))
                        .collect(),
                );
                vec![(*a, da), (*b, db)]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MulScalar(x, k) => {
                let kt = T::from_f64(*k);
                let dx = Tensor::from_vec(g.shape(), g.data().iter().map(|&v| v * kt).collect());
                vec![(*x, dx)]
            }
            Op::Abs(x) => {
                let dx = Tensor::from_vec(
                    g.shape(),
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gg)| {
                            if v > T::zero() {
                                gg
                            } else if v < T::zero() {
                                -gg
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
                vec![(*x, dx)]
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let dx = Tensor::from_vec(
                    g.shape(),
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gg)| two * v * gg)
                        .collect(),
                );
                vec![(*x, dx)]
            }
            Op::ScaleChannels { x, gate } => {
                let xs = self.shape(*x);
                let m = xs.h * xs.w;
                let xv = self.value(*x).data();
                let gatev = self.value(*gate).data();
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                let mut dgate = Tensor::zeros(self.shape(*gate));
                for nc in 0..xs.n * xs.c {
                    let gv = gatev[nc];
                    let mut acc = T::zero();
                    for i in nc * m..(nc + 1) * m {
                        dx.data_mut()[i] = gd[i] * gv;
                        acc += gd[i] * xv[i];
                    }
                    dgate.data_mut()[nc] = acc;
                }
                vec![(*x, dx), (*gate, dgate)]
            }
            Op::ConcatChannels(parts) => {
                let ys = node.value.shape();
                let m = ys.h * ys.w;
                let gd = g.data();
                let mut out = Vec::with_capacity(parts.len());
                let mut c_off = 0usize;
                for &p in parts {
                    let s = self.shape(p);
                    let mut dp = Tensor::zeros(s);
                    let len = s.c * m;
                    for n in 0..ys.n {
                        let src = (n * ys.c + c_off) * m;
                        dp.data_mut()[n * len..(n + 1) * len]
                            .copy_from_slice(&gd[src..src + len]);
                    }
                    c_off += s.c;
                    out.push((p, dp));
                }
                out
            }
            Op::NarrowChannels { x, start, len } => {
                let xs = self.shape(*x);
                let m = xs.h * xs.w;
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * m;
                    let src = n * len * m;
                    dx.data_mut()[dst..dst + len * m].copy_from_slice(&gd[src..src + len * m]);
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let m = xs.h * xs.w;
                let inv = T::one() / T::from_f64(m as f64);
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                for nc in 0..xs.n * xs.c {
                    let v = gd[nc] * inv;
                    for o in &mut dx.data_mut()[nc * m..(nc + 1) * m] {
                        *o = v;
                    }
                }
                vec![(*x, dx)]
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (oh, ow) = (xs.h / 2, xs.w / 2);
                let quarter = T::from_f64(0.25);
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                for nc in 0..xs.n * xs.c {
                    let src = &gd[nc * oh * ow..(nc + 1) * oh * ow];
                    let dst = &mut dx.data_mut()[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = src[oy * ow + ox] * quarter;
                            let i = 2 * oy * xs.w + 2 * ox;
                            dst[i] = v;
                            dst[i + 1] = v;
                            dst[i + xs.w] = v;
                            dst[i + xs.w + 1] = v;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::UpsampleNearest2(x) => {
                let xs = self.shape(*x);
                let (oh, ow) = (xs.h * 2, xs.w * 2);
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                for nc in 0..xs.n * xs.c {
                    let src = &gd[nc * oh * ow..(nc + 1) * oh * ow];
                    let dst = &mut dx.data_mut()[nc * xs.h * xs.w..(nc + 1) * xs.h * xs.w];
                    for oy in 0..oh {
                        let sy = oy / 2;
                        for ox in 0..ow {
                            dst[sy * xs.w + ox / 2] += src[oy * ow + ox];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Laplacian(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs.h, xs.w);
                let four = T::from_f64(4.0);
                let gd = g.data();
                let mut dx = Tensor::zeros(xs);
                for nc in 0..xs.n * xs.c {
                    let src = &gd[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
                    for yy in 0..h {
                        let up = yy.saturating_sub(1);
                        let down = (yy + 1).min(h - 1);
                        for xx in 0..w {
                            let left = xx.saturating_sub(1);
                            let right = (xx + 1).min(w - 1);
                            let gg = src[yy * w + xx];
                            dst[up * w + xx] += gg;
                            dst[down * w + xx] += gg;
                            dst[yy * w + left] += gg;
                            dst[yy * w + right] += gg;
                            dst[yy * w + xx] -= four * gg;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let v = g.data()[0] / T::from_f64(xs.numel() as f64);
                vec![(*x, Tensor::filled(xs, v))]
            }
        }
    }
}

/// Output spatial size of a convolution (re-exported helper for blocks).
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    out_dim(input, k, stride, pad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Finite-difference check of d(mean of readout)/d(leaf) for a graph
    /// builder. Verifies every coordinate of the chosen leaf.
    fn grad_check(
        build: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> NodeId,
        leaves: Vec<Tensor<f64>>,
        target: usize,
        tol: f64,
    ) {
        let eval = |ls: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let root = build(&mut g, ls);
            let m = g.mean_all(root);
            g.scalar_value(m)
        };
        // analytic
        let mut g = Graph::new();
        let root = build(&mut g, &leaves);
        let m = g.mean_all(root);
        g.backward(m);
        // leaves are inserted by the builder in order, ids 0..len
        let analytic = g
            .grad(NodeId(target))
            .expect("missing gradient")
            .clone();
        let h = 1e-5;
        for i in 0..leaves[target].shape().numel() {
            let mut plus = leaves.clone();
            plus[target].data_mut()[i] += h;
            let mut minus = leaves.clone();
            minus[target].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            assert!(
                (fd - a).abs() / denom < tol,
                "coord {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad, mode) in [
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 1, PadMode::Replicate),
            (1, 0, PadMode::Zero),
        ] {
            let x = Tensor::from_vec(Shape::nchw(2, 3, 6, 6), rand_vec(&mut rng, 2 * 3 * 36));
            let w = Tensor::from_vec(Shape::nchw(4, 3, 3, 3), rand_vec(&mut rng, 4 * 27));
            let b = Tensor::from_vec(Shape::nchw(1, 4, 1, 1), rand_vec(&mut rng, 4));
            let build = move |g: &mut Graph<f64>, ls: &[Tensor<f64>]| {
                let x = g.leaf(ls[0].clone());
                let w = g.leaf(ls[1].clone());
                let b = g.leaf(ls[2].clone());
                g.conv2d(x, w, Some(b), stride, pad, mode)
            };
            for target in 0..3 {
                grad_check(build, vec![x.clone(), w.clone(), b.clone()], target, 1e-5);
            }
        }
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec(Shape::nchw(1, 4, 3, 3), rand_vec(&mut rng, 36));
        let w = Tensor::from_vec(Shape::nchw(2, 4, 1, 1), rand_vec(&mut rng, 8));
        let build = |g: &mut Graph<f64>, ls: &[Tensor<f64>]| {
            let x = g.leaf(ls[0].clone());
            let w = g.leaf(ls[1].clone());
            g.conv2d(x, w, None, 1, 0, PadMode::Zero)
        };
        grad_check(build, vec![x.clone(), w.clone()], 0, 1e-5);
        grad_check(build, vec![x, w], 1, 1e-5);
    }

    #[test]
    fn instance_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(Shape::nchw(2, 3, 4, 4), rand_vec(&mut rng, 96));
        let gamma = Tensor::from_vec(Shape::nchw(1, 3, 1, 1), rand_vec(&mut rng, 3));
        let beta = Tensor::from_vec(Shape::nchw(1, 3, 1, 1), rand_vec(&mut rng, 3));
        let build = |g: &mut Graph<f64>, ls: &[Tensor<f64>]| {
            let x = g.leaf(ls[0].clone());
            let ga = g.leaf(ls[1].clone());
            let be = g.leaf(ls[2].clone());
            let y = g.instance_norm(x, ga, be, 1e-5);
            // mix channels so the normalized statistics matter
            g.square(y)
        };
        for target in 0..3 {
            grad_check(
                build,
                vec![x.clone(), gamma.clone(), beta.clone()],
                target,
                1e-4,
            );
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = Tensor::from_vec(Shape::nchw(1, 2, 3, 3), rand_vec(&mut rng, 18));
        // keep divisor away from zero
        let b = Tensor::from_vec(
            Shape::nchw(1, 2, 3, 3),
            rand_vec(&mut rng, 18)
                .into_iter()
                .map(|v| v + 3.0)
                .collect(),
        );
        let build = |g: &mut Graph<f64>, ls: &[Tensor<f64>]| {
            let a = g.leaf(ls[0].clone());
            let b = g.leaf(ls[1].clone());
            let s = g.add(a, b);
            let d = g.sub(s, b);
            let m = g.mul(d, b);
            let q = g.div(m, b);
            let sq = g.square(q);
            let sig = g.sigmoid(sq);
            let sc = g.mul_scalar(sig, 1.7);
            g.add_scalar(sc, 0.3)
        };
        grad_check(build, vec![a.clone(), b.clone()], 0, 1e-5);
        grad_check(build, vec![a, b], 1, 1e-5);
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::from_vec(Shape::nchw(2, 2, 4, 4), rand_vec(&mut rng, 64));
        let b = Tensor::from_vec(Shape::nchw(2, 3, 4, 4), rand_vec(&mut rng, 96));
        let build = |g: &mut Graph<f64>, ls: &[Tensor<f64>]| {
            let a = g.leaf(ls[0].clone());
            let b = g.leaf(ls[1].clone());
            let cat = g.concat_channels(&[a, b]);
            let nar = g.narrow_channels(cat, 1, 3);
            let up = g.upsample_nearest2(nar);
            let down = g.avg_pool2(up);
            let lap = g.laplacian(down);
            let pool = g.global_avg_pool(lap);
            let gate = g.sigmoid(pool);
            g.scale_channels(down, gate)
        };
        grad_check(build, vec![a.clone(), b.clone()], 0, 1e-5);
        grad_check(build, vec![a, b], 1, 1e-5);
    }

    #[test]
    fn abs_and_relu_gradients_away_from_kinks() {
        let a = Tensor::from_vec(
            Shape::nchw(1, 1, 2, 3),
            vec![0.5, -0.7, 1.2, -0.3, 0.9, -1.5],
        );
        let build = |g: &mut Graph<f64>, ls: &[Tensor<f64>]| {
            let a = g.leaf(ls[0].clone());
            let r = g.relu(a);
            let ab = g.abs(a);
            g.add(r, ab)
        };
        grad_check(build, vec![a], 0, 1e-6);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = init::xavier_uniform(&mut rng, Shape::nchw(4, 3, 3, 3), 27, 36);
        let run = || {
            let mut g = Graph::<f32>::new();
            let xl = g.leaf(x.clone());
            let sq = g.square(xl);
            let m = g.mean_all(sq);
            g.backward(m);
            g.grad(xl).unwrap().clone()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1.data(), g2.data());
    }
}
