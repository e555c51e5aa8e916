//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A `Tape` records every operation eagerly; `backward` walks the record in
//! reverse and accumulates gradients. Nodes whose subgraph contains no
//! gradient-requiring leaf are skipped during the sweep, so frozen networks
//! cost only their forward pass. All kernels are sequential and evaluate in
//! a fixed order, which makes repeated runs bitwise identical.

use std::cell::RefCell;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, S),
    Abs(usize),
    Sqrt(usize),
    Ln(usize),
    Relu(usize),
    LeakyRelu(usize, S),
    Tanh(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    /// `[C,H,W] -> [1,H,W]` channel sum.
    SumChan(usize),
    /// Elementwise `a / s` with `s` broadcast over channels.
    DivChan(usize, usize),
    /// Elementwise `a * s` with a one-element `s`.
    MulScalarValue(usize, usize),
    SliceChan {
        x: usize,
        c0: usize,
    },
    ConcatChan(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        /// Forward im2col buffer, kept for the weight-gradient GEMM.
        /// `None` for 1x1/stride-1/no-pad convs, which read `x` directly.
        cols: Option<Vec<S>>,
    },
    ConvT2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: usize,
        istd: Vec<S>,
    },
    UpBilinear(usize),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Value) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Value(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    pub fn leaf(&self, t: Tensor<S>, needs_grad: bool) -> Value {
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&self, t: Tensor<S>) -> Value {
        self.leaf(t, false)
    }

    pub fn get(&self, v: Value) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Value) -> S {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Re-register a computed value as a constant (gradient barrier).
    pub fn detach(&self, v: Value) -> Value {
        let t = self.get(v);
        self.constant(t)
    }

    fn zip_op(&self, a: Value, b: Value, f: impl Fn(S, S) -> S, op: Op<S>) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        self.push(value, op, self.needs(&[a.0, b.0]))
    }

    pub fn add(&self, a: Value, b: Value) -> Value {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Value, b: Value) -> Value {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Value, b: Value) -> Value {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&self, a: Value, b: Value) -> Value {
        self.zip_op(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn map_op(&self, a: Value, f: impl Fn(S) -> S, op: Op<S>) -> Value {
        let value = self.nodes.borrow()[a.0].value.map(f);
        self.push(value, op, self.needs(&[a.0]))
    }

    pub fn add_scalar(&self, a: Value, c: f64) -> Value {
        let c = S::from_f64(c);
        self.map_op(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&self, a: Value, c: f64) -> Value {
        let c = S::from_f64(c);
        self.map_op(a, |x| x * c, Op::MulScalar(a.0, c))
    }

    pub fn neg(&self, a: Value) -> Value {
        self.mul_scalar(a, -1.0)
    }

    pub fn abs(&self, a: Value) -> Value {
        self.map_op(a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn sqrt(&self, a: Value) -> Value {
        self.map_op(a, |x| x.sqrt(), Op::Sqrt(a.0))
    }

    pub fn ln(&self, a: Value) -> Value {
        self.map_op(a, |x| x.ln(), Op::Ln(a.0))
    }

    pub fn relu(&self, a: Value) -> Value {
        self.map_op(a, |x| x.maxv(S::ZERO), Op::Relu(a.0))
    }

    pub fn leaky_relu(&self, a: Value, slope: f64) -> Value {
        let s = S::from_f64(slope);
        self.map_op(
            a,
            |x| if x > S::ZERO { x } else { x * s },
            Op::LeakyRelu(a.0, s),
        )
    }

    pub fn tanh(&self, a: Value) -> Value {
        self.map_op(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    pub fn sigmoid(&self, a: Value) -> Value {
        self.map_op(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn sum(&self, a: Value) -> Value {
        let v = self.nodes.borrow()[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(v), Op::Sum(a.0), self.needs(&[a.0]))
    }

    pub fn mean(&self, a: Value) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mean()
        };
        self.push(Tensor::scalar(value), Op::Mean(a.0), self.needs(&[a.0]))
    }

    /// Channel sum: `[C,H,W] -> [1,H,W]`.
    pub fn sum_chan(&self, a: Value) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let (c, h, w) = t.chw();
            let hw = h * w;
            let mut out = vec![S::ZERO; hw];
            for ci in 0..c {
                let row = &t.data()[ci * hw..(ci + 1) * hw];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            Tensor::new(vec![1, h, w], out)
        };
        self.push(value, Op::SumChan(a.0), self.needs(&[a.0]))
    }

    /// `a[c,p] / s[p]` with `s` of shape `[1,H,W]`.
    pub fn div_chan(&self, a: Value, s: Value) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, ts) = (&nodes[a.0].value, &nodes[s.0].value);
            let (c, h, w) = ta.chw();
            assert_eq!(ts.shape(), &[1, h, w], "broadcast divisor shape");
            let hw = h * w;
            let mut out = vec![S::ZERO; c * hw];
            for ci in 0..c {
                for p in 0..hw {
                    out[ci * hw + p] = ta.data()[ci * hw + p] / ts.data()[p];
                }
            }
            Tensor::new(vec![c, h, w], out)
        };
        self.push(value, Op::DivChan(a.0, s.0), self.needs(&[a.0, s.0]))
    }

    /// `a * s` with `s` a one-element tensor.
    pub fn mul_scalar_value(&self, a: Value, s: Value) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.0].value.item();
            nodes[a.0].value.map(|x| x * sv)
        };
        self.push(
            value,
            Op::MulScalarValue(a.0, s.0),
            self.needs(&[a.0, s.0]),
        )
    }

    pub fn slice_chan(&self, x: Value, c0: usize, c1: usize) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (c, h, w) = t.chw();
            assert!(c0 < c1 && c1 <= c, "channel slice out of range");
            let hw = h * w;
            Tensor::new(
                vec![c1 - c0, h, w],
                t.data()[c0 * hw..c1 * hw].to_vec(),
            )
        };
        self.push(value, Op::SliceChan { x: x.0, c0 }, self.needs(&[x.0]))
    }

    pub fn concat_chan(&self, xs: &[Value]) -> Value {
        assert!(!xs.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let (_, h, w) = nodes[xs[0].0].value.chw();
            let mut data = Vec::new();
            let mut c_total = 0;
            for v in xs {
                let t = &nodes[v.0].value;
                let (c, th, tw) = t.chw();
                assert_eq!((th, tw), (h, w), "concat spatial mismatch");
                c_total += c;
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![c_total, h, w], data)
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(&ids);
        self.push(value, Op::ConcatChan(ids), needs)
    }

    pub fn conv2d(
        &self,
        x: Value,
        w: Value,
        b: Option<Value>,
        stride: usize,
        pad: usize,
    ) -> Value {
        let mut ids = vec![x.0, w.0];
        if let Some(bv) = b {
            ids.push(bv.0);
        }
        let needs = self.needs(&ids);
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let wt = &nodes[w.0].value;
            let bt = b.map(|bv| nodes[bv.0].value.clone());
            // Keep the column buffer only if a backward pass will need it.
            conv2d_forward(xt, wt, bt.as_ref(), stride, pad, needs)
        };
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    pub fn conv_t2d(
        &self,
        x: Value,
        w: Value,
        b: Option<Value>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Value {
        assert!(out_pad < stride, "output padding must be < stride");
        let value = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let wt = &nodes[w.0].value;
            let bt = b.map(|bv| nodes[bv.0].value.clone());
            conv_t2d_forward(xt, wt, bt.as_ref(), stride, pad, out_pad)
        };
        let mut ids = vec![x.0, w.0];
        if let Some(bv) = b {
            ids.push(bv.0);
        }
        let needs = self.needs(&ids);
        self.push(
            value,
            Op::ConvT2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn instance_norm(&self, x: Value, eps: f64) -> Value {
        let (value, istd) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (c, h, w) = t.chw();
            let hw = h * w;
            let n = S::from_f64(hw as f64);
            let mut out = vec![S::ZERO; c * hw];
            let mut istd = vec![S::ZERO; c];
            for ci in 0..c {
                let xs = &t.data()[ci * hw..(ci + 1) * hw];
                let mu = xs.iter().copied().sum::<S>() / n;
                let mut var = S::ZERO;
                for &v in xs {
                    let d = v - mu;
                    var += d * d;
                }
                var /= n;
                let is = S::ONE / (var + S::from_f64(eps)).sqrt();
                istd[ci] = is;
                for (o, &v) in out[ci * hw..(ci + 1) * hw].iter_mut().zip(xs) {
                    *o = (v - mu) * is;
                }
            }
            (Tensor::new(vec![c, h, w], out), istd)
        };
        let needs = self.needs(&[x.0]);
        self.push(value, Op::InstanceNorm { x: x.0, istd }, needs)
    }

    /// Bilinear upsampling to `(oh, ow)`, half-pixel centers (align corners off).
    pub fn up_bilinear(&self, x: Value, oh: usize, ow: usize) -> Value {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (c, h, w) = t.chw();
            let mut out = Tensor::zeros(&[c, oh, ow]);
            for oy in 0..oh {
                let (y0, y1, wy) = bilinear_axis(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1, wx) = bilinear_axis(ox, w, ow);
                    for ci in 0..c {
                        let v00 = t.at(ci, y0, x0).to_f64();
                        let v01 = t.at(ci, y0, x1).to_f64();
                        let v10 = t.at(ci, y1, x0).to_f64();
                        let v11 = t.at(ci, y1, x1).to_f64();
                        let top = v00 + (v01 - v00) * wx;
                        let bot = v10 + (v11 - v10) * wx;
                        out.set(ci, oy, ox, S::from_f64(top + (bot - top) * wy));
                    }
                }
            }
            out
        };
        self.push(value, Op::UpBilinear(x.0), self.needs(&[x.0]))
    }

    // -- composite helpers ---------------------------------------------------

    pub fn mse(&self, a: Value, b: Value) -> Value {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    pub fn l1(&self, a: Value, b: Value) -> Value {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean(ad)
    }

    /// Least-squares GAN objective: `mean((d - target)^2)`.
    pub fn lsgan(&self, d: Value, target: f64) -> Value {
        let shifted = self.add_scalar(d, -target);
        let sq = self.mul(shifted, shifted);
        self.mean(sq)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients for every
    /// node on a path from a gradient-requiring leaf to the root.
    pub fn backward(&self, root: Value) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.scatter(&nodes, i, &g, &mut grads);
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn scatter(
        &self,
        nodes: &[Node<S>],
        i: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let acc = |grads: &mut [Option<Tensor<S>>], id: usize, add: Tensor<S>| {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(t) => {
                    for (o, &v) in t.data_mut().iter_mut().zip(add.data()) {
                        *o += v;
                    }
                }
                slot @ None => *slot = Some(add),
            }
        };
        let val = |id: usize| -> &Tensor<S> { &nodes[id].value };
        let out = val(i);

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(grads, *a, zip_tensors(g, tb, |x, y| x * y));
                acc(grads, *b, zip_tensors(g, ta, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let tb = val(*b);
                acc(grads, *a, zip_tensors(g, tb, |x, y| x / y));
                let mut db = zip_tensors(g, out, |x, o| x * o);
                for (d, &bv) in db.data_mut().iter_mut().zip(tb.data()) {
                    *d = -*d / bv;
                }
                acc(grads, *b, db);
            }
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                acc(grads, *a, g.map(|v| v * c));
            }
            Op::Abs(a) => {
                let ta = val(*a);
                acc(
                    grads,
                    *a,
                    zip_tensors(g, ta, |x, v| {
                        if v > S::ZERO {
                            x
                        } else if v < S::ZERO {
                            -x
                        } else {
                            S::ZERO
                        }
                    }),
                );
            }
            Op::Sqrt(a) => {
                acc(
                    grads,
                    *a,
                    zip_tensors(g, out, |x, o| x * S::from_f64(0.5) / o),
                );
            }
            Op::Ln(a) => {
                let ta = val(*a);
                acc(grads, *a, zip_tensors(g, ta, |x, v| x / v));
            }
            Op::Relu(a) => {
                let ta = val(*a);
                acc(
                    grads,
                    *a,
                    zip_tensors(g, ta, |x, v| if v > S::ZERO { x } else { S::ZERO }),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ta = val(*a);
                acc(
                    grads,
                    *a,
                    zip_tensors(g, ta, |x, v| if v > S::ZERO { x } else { x * s }),
                );
            }
            Op::Tanh(a) => {
                acc(grads, *a, zip_tensors(g, out, |x, o| x * (S::ONE - o * o)));
            }
            Op::Sigmoid(a) => {
                acc(
                    grads,
                    *a,
                    zip_tensors(g, out, |x, o| x * o * (S::ONE - o)),
                );
            }
            Op::Sum(a) => {
                let gv = g.item();
                let shape = val(*a).shape().to_vec();
                acc(grads, *a, Tensor::full(&shape, gv));
            }
            Op::Mean(a) => {
                let ta = val(*a);
                let gv = g.item() / S::from_f64(ta.numel() as f64);
                acc(grads, *a, Tensor::full(ta.shape(), gv));
            }
            Op::SumChan(a) => {
                let ta = val(*a);
                let (c, h, w) = ta.chw();
                let hw = h * w;
                let mut da = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    da.data_mut()[ci * hw..(ci + 1) * hw].copy_from_slice(g.data());
                }
                acc(grads, *a, da);
            }
            Op::DivChan(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let (c, h, w) = ta.chw();
                let hw = h * w;
                let mut da = Tensor::zeros(&[c, h, w]);
                let mut ds = Tensor::zeros(&[1, h, w]);
                for ci in 0..c {
                    for p in 0..hw {
                        let sv = ts.data()[p];
                        let gv = g.data()[ci * hw + p];
                        da.data_mut()[ci * hw + p] = gv / sv;
                        ds.data_mut()[p] -= gv * out.data()[ci * hw + p] / sv;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *s, ds);
            }
            Op::MulScalarValue(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let sv = ts.item();
                acc(grads, *a, g.map(|v| v * sv));
                let dot = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&x, &y)| x * y)
                    .sum::<S>();
                acc(grads, *s, Tensor::scalar(dot));
            }
            Op::SliceChan { x, c0 } => {
                let tx = val(*x);
                let (c, h, w) = tx.chw();
                let hw = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                dx.data_mut()[c0 * hw..c0 * hw + g.numel()].copy_from_slice(g.data());
                acc(grads, *x, dx);
            }
            Op::ConcatChan(ids) => {
                let (_, h, w) = out.chw();
                let hw = h * w;
                let mut off = 0;
                for &id in ids {
                    let c = val(id).chw().0;
                    let part = Tensor::new(
                        vec![c, h, w],
                        g.data()[off..off + c * hw].to_vec(),
                    );
                    off += c * hw;
                    acc(grads, id, part);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (dx, dw, db) = conv2d_backward(
                    tx,
                    tw,
                    g,
                    *stride,
                    *pad,
                    cols.as_deref(),
                    nodes[*x].needs_grad,
                    nodes[*w].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let Some(bid) = b {
                    if nodes[*bid].needs_grad {
                        acc(grads, *bid, db);
                    }
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let (dx, dw, db) = conv_t2d_backward(
                    tx,
                    tw,
                    g,
                    *stride,
                    *pad,
                    nodes[*x].needs_grad,
                    nodes[*w].needs_grad,
                );
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let Some(bid) = b {
                    if nodes[*bid].needs_grad {
                        acc(grads, *bid, db);
                    }
                }
            }
            Op::InstanceNorm { x, istd } => {
                let (c, h, w) = out.chw();
                let hw = h * w;
                let n = S::from_f64(hw as f64);
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let ys = &out.data()[ci * hw..(ci + 1) * hw];
                    let gs = &g.data()[ci * hw..(ci + 1) * hw];
                    let mean_g = gs.iter().copied().sum::<S>() / n;
                    let mean_gy = gs
                        .iter()
                        .zip(ys)
                        .map(|(&gv, &yv)| gv * yv)
                        .sum::<S>()
                        / n;
                    let is = istd[ci];
                    for (p, d) in dx.data_mut()[ci * hw..(ci + 1) * hw]
                        .iter_mut()
                        .enumerate()
                    {
                        *d = is * (gs[p] - mean_g - ys[p] * mean_gy);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::UpBilinear(x) => {
                let tx = val(*x);
                let (c, h, w) = tx.chw();
                let (_, oh, ow) = out.chw();
                let mut dx = Tensor::zeros(&[c, h, w]);
                for oy in 0..oh {
                    let (y0, y1, wy) = bilinear_axis(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1, wx) = bilinear_axis(ox, w, ow);
                        for ci in 0..c {
                            let gv = g.at(ci, oy, ox).to_f64();
                            let add = |t: &mut Tensor<S>, y: usize, x: usize, v: f64| {
                                let cur = t.at(ci, y, x).to_f64();
                                t.set(ci, y, x, S::from_f64(cur + v));
                            };
                            add(&mut dx, y0, x0, gv * (1.0 - wy) * (1.0 - wx));
                            add(&mut dx, y0, x1, gv * (1.0 - wy) * wx);
                            add(&mut dx, y1, x0, gv * wy * (1.0 - wx));
                            add(&mut dx, y1, x1, gv * wy * wx);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn zip_tensors<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn bilinear_axis(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let i0 = src.floor() as usize;
    if i0 >= in_len - 1 {
        return (in_len - 1, in_len - 1, 0.0);
    }
    (i0, i0 + 1, src - i0 as f64)
}

pub(crate) fn conv_out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_len + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn conv_t_out_len(in_len: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (in_len - 1) * stride + k + out_pad - 2 * pad
}

/// Gather `src[ch, sy*stride+ky-pad, sx*stride+kx-pad]` into
/// `cols[(ch,ky,kx)][sy*sw+sx]`, zero where out of bounds.
fn im2col<S: Scalar>(
    src: &[S],
    ch: usize,
    src_h: usize,
    src_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    cols: &mut [S],
) {
    let ghw = gh * gw;
    debug_assert_eq!(cols.len(), ch * k * k * ghw);
    for c in 0..ch {
        let plane = &src[c * src_h * src_w..(c + 1) * src_h * src_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * ghw..((c * k + ky) * k + kx + 1) * ghw];
                for gy in 0..gh {
                    let sy = (gy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[gy * gw..(gy + 1) * gw];
                    if sy < 0 || sy >= src_h as isize {
                        dst.fill(S::ZERO);
                        continue;
                    }
                    let srow = &plane[sy as usize * src_w..(sy as usize + 1) * src_w];
                    for (gx, d) in dst.iter_mut().enumerate() {
                        let sx = (gx * stride + kx) as isize - pad as isize;
                        *d = if sx < 0 || sx >= src_w as isize {
                            S::ZERO
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into `dst`.
fn col2im_add<S: Scalar>(
    cols: &[S],
    ch: usize,
    dst_h: usize,
    dst_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    dst: &mut [S],
) {
    let ghw = gh * gw;
    debug_assert_eq!(cols.len(), ch * k * k * ghw);
    for c in 0..ch {
        let plane = &mut dst[c * dst_h * dst_w..(c + 1) * dst_h * dst_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * ghw..((c * k + ky) * k + kx + 1) * ghw];
                for gy in 0..gh {
                    let dy = (gy * stride + ky) as isize - pad as isize;
                    if dy < 0 || dy >= dst_h as isize {
                        continue;
                    }
                    let drow = &mut plane[dy as usize * dst_w..(dy as usize + 1) * dst_w];
                    for gx in 0..gw {
                        let dx = (gx * stride + kx) as isize - pad as isize;
                        if dx < 0 || dx >= dst_w as isize {
                            continue;
                        }
                        drow[dx as usize] += row[gy * gw + gx];
                    }
                }
            }
        }
    }
}

/// A 1x1 stride-1 unpadded conv is a plain channel GEMM; its column matrix
/// is the input itself, so no gather is needed in either direction.
fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> (Tensor<S>, Option<Vec<S>>) {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,K,K]");
    assert_eq!(ws[1], cin, "conv in-channel mismatch");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let (cout, k) = (ws[0], ws[2]);
    let oh = conv_out_len(h, k, stride, pad).expect("conv input too small");
    let ow = conv_out_len(wd, k, stride, pad).expect("conv input too small");
    assert!(oh > 0 && ow > 0);

    let kk = cin * k * k;
    let ohw = oh * ow;
    let cols_owned: Option<Vec<S>> = if is_pointwise(k, stride, pad) {
        None
    } else {
        let mut cols = vec![S::ZERO; kk * ohw];
        im2col(x.data(), cin, h, wd, k, stride, pad, oh, ow, &mut cols);
        Some(cols)
    };
    let cols_ref: &[S] = cols_owned.as_deref().unwrap_or_else(|| x.data());
    let mut out = vec![S::ZERO; cout * ohw];
    S::gemm(
        cout,
        kk,
        ohw,
        S::ONE,
        w.data(),
        kk as isize,
        1,
        cols_ref,
        ohw as isize,
        1,
        S::ZERO,
        &mut out,
        ohw as isize,
        1,
    );
    if let Some(bias) = b {
        assert_eq!(bias.numel(), cout);
        for c in 0..cout {
            let bv = bias.data()[c];
            for v in &mut out[c * ohw..(c + 1) * ohw] {
                *v += bv;
            }
        }
    }
    let saved = if keep_cols { cols_owned } else { None };
    (Tensor::new(vec![cout, oh, ow], out), saved)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
    pad: usize,
    saved_cols: Option<&[S]>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>, Tensor<S>) {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    let (cout, k) = (ws[0], ws[2]);
    let (_, oh, ow) = g.chw();
    let kk = cin * k * k;
    let ohw = oh * ow;
    let pointwise = is_pointwise(k, stride, pad);

    let mut db = Tensor::zeros(&[cout]);
    for c in 0..cout {
        db.data_mut()[c] = g.data()[c * ohw..(c + 1) * ohw].iter().copied().sum();
    }

    let dw = if need_dw {
        let rebuilt: Option<Vec<S>>;
        let cols_ref: &[S] = if pointwise {
            x.data()
        } else if let Some(c) = saved_cols {
            c
        } else {
            let mut cols = vec![S::ZERO; kk * ohw];
            im2col(x.data(), cin, h, wd, k, stride, pad, oh, ow, &mut cols);
            rebuilt = Some(cols);
            rebuilt.as_deref().unwrap()
        };
        let mut dw = Tensor::zeros(&[cout, cin, k, k]);
        // dW[Cout,K] = g[Cout,OHW] · cols[K,OHW]^T
        S::gemm(
            cout,
            ohw,
            kk,
            S::ONE,
            g.data(),
            ohw as isize,
            1,
            cols_ref,
            1,
            ohw as isize,
            S::ZERO,
            dw.data_mut(),
            kk as isize,
            1,
        );
        Some(dw)
    } else {
        None
    };

    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[cin, h, wd]);
        if pointwise {
            // dX[Cin,HW] = w[Cout,Cin]^T · g[Cout,HW]
            S::gemm(
                cin,
                cout,
                ohw,
                S::ONE,
                w.data(),
                1,
                kk as isize,
                g.data(),
                ohw as isize,
                1,
                S::ZERO,
                dx.data_mut(),
                ohw as isize,
                1,
            );
        } else {
            // dcols[K,OHW] = w[Cout,K]^T · g[Cout,OHW]
            let mut dcols = vec![S::ZERO; kk * ohw];
            S::gemm(
                kk,
                cout,
                ohw,
                S::ONE,
                w.data(),
                1,
                kk as isize,
                g.data(),
                ohw as isize,
                1,
                S::ZERO,
                &mut dcols,
                ohw as isize,
                1,
            );
            col2im_add(&dcols, cin, h, wd, k, stride, pad, oh, ow, dx.data_mut());
        }
        Some(dx)
    } else {
        None
    };

    (dx, dw, db)
}

fn conv_t2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<S> {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv-transpose weight must be [Cin,Cout,K,K]");
    assert_eq!(ws[0], cin, "conv-transpose in-channel mismatch");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let (cout, k) = (ws[1], ws[2]);
    let oh = conv_t_out_len(h, k, stride, pad, out_pad);
    let ow = conv_t_out_len(wd, k, stride, pad, out_pad);

    let kk = cout * k * k;
    let hw = h * wd;
    // cols[CoutK^2, HW] = w[Cin, CoutK^2]^T · x[Cin, HW]
    let mut cols = vec![S::ZERO; kk * hw];
    S::gemm(
        kk,
        cin,
        hw,
        S::ONE,
        w.data(),
        1,
        kk as isize,
        x.data(),
        hw as isize,
        1,
        S::ZERO,
        &mut cols,
        hw as isize,
        1,
    );
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    col2im_add(&cols, cout, oh, ow, k, stride, pad, h, wd, out.data_mut());
    if let Some(bias) = b {
        assert_eq!(bias.numel(), cout);
        let ohw = oh * ow;
        for c in 0..cout {
            let bv = bias.data()[c];
            for v in &mut out.data_mut()[c * ohw..(c + 1) * ohw] {
                *v += bv;
            }
        }
    }
    out
}

fn conv_t2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<S>>, Option<Tensor<S>>, Tensor<S>) {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    let (cout, k) = (ws[1], ws[2]);
    let (_, oh, ow) = g.chw();
    let kk = cout * k * k;
    let hw = h * wd;
    let ohw = oh * ow;

    let mut db = Tensor::zeros(&[cout]);
    for c in 0..cout {
        db.data_mut()[c] = g.data()[c * ohw..(c + 1) * ohw].iter().copied().sum();
    }

    // dcols[CoutK^2, HW]: gather of g at the scatter locations.
    let mut dcols = vec![S::ZERO; kk * hw];
    im2col(g.data(), cout, oh, ow, k, stride, pad, h, wd, &mut dcols);

    let dx = if need_dx {
        let mut dx = Tensor::zeros(&[cin, h, wd]);
        // dX[Cin,HW] = w[Cin,CoutK^2] · dcols[CoutK^2,HW]
        S::gemm(
            cin,
            kk,
            hw,
            S::ONE,
            w.data(),
            kk as isize,
            1,
            &dcols,
            hw as isize,
            1,
            S::ZERO,
            dx.data_mut(),
            hw as isize,
            1,
        );
        Some(dx)
    } else {
        None
    };

    let dw = if need_dw {
        let mut dw = Tensor::zeros(&[cin, cout, k, k]);
        // dW[Cin,CoutK^2] = x[Cin,HW] · dcols[CoutK^2,HW]^T
        S::gemm(
            cin,
            hw,
            kk,
            S::ONE,
            x.data(),
            hw as isize,
            1,
            &dcols,
            1,
            hw as isize,
            S::ZERO,
            dw.data_mut(),
            kk as isize,
            1,
        );
        Some(dw)
    } else {
        None
    };

    (dx, dw, db)
}
