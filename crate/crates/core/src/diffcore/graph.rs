//! Tape-based compute graph.
//!
//! Nodes are appended in creation order, which is a topological order by
//! construction; `backward` walks the tape once in reverse.

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    Concat(Var, Var),
    Upsample(Var),
    Activation(Var, Activation),
    L1(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulChannels { x: Var, gate: Var },
    Scale(Var, f64),
    WeightedSum { weights: Var, comps: Var },
    ResizeBilinear(Var),
    Sum(Var),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![input, kernel, bias],
            Op::GlobalAvgPool(a)
            | Op::Softmax(a)
            | Op::Upsample(a)
            | Op::Activation(a, _)
            | Op::Scale(a, _)
            | Op::ResizeBilinear(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![a],
            Op::Concat(a, b) | Op::L1(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::MulChannels { x, gate } => vec![x, gate],
            Op::WeightedSum { weights, comps } => vec![weights, comps],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf (parameter or differentiable input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` requires grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Smallest |input| over all relu nodes; used to keep gradient checks
    /// away from the kink at zero.
    pub fn min_relu_input_magnitude(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Activation(a, Activation::Relu) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |m| m.min(v))))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let kt = self.value(kernel);
        let (h, w, cin) = x.hwc()?;
        let (k, cout) = match kt.shape() {
            &[k1, k2, kc, co] if k1 == k2 => {
                if kc != cin {
                    return Err(Error::Shape(format!(
                        "conv2d: input has {cin} channels but kernel expects {kc}"
                    )));
                }
                (k1, co)
            }
            other => {
                return Err(Error::Shape(format!(
                    "conv2d: kernel must be [k, k, Cin, Cout], got {other:?}"
                )))
            }
        };
        if !matches!(k, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::InvalidArgument(format!(
                "conv2d: unsupported kernel {k} / stride {stride}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv2d: bias must be [{cout}], got {:?}",
                self.value(bias).shape()
            )));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape(format!("conv2d: {h}x{w} input too small for k={k}")));
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let mut out = vec![T::zero(); geom.oh * geom.ow * cout];
        kernels::conv2d_forward(&geom, x.data(), kt.data(), self.value(bias).data(), &mut out);
        let value = Tensor::new(vec![geom.oh, geom.ow, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.hwc()?;
        let n = h * w;
        if n == 0 {
            return Err(Error::Shape("global_avg_pool: empty spatial extent".into()));
        }
        let mut sums = vec![T::zero(); c];
        for px in x.data().chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s = *s + v;
            }
        }
        let inv = T::of(n as f64);
        let value = Tensor::new(vec![1, 1, c], sums.into_iter().map(|s| s / inv).collect())?;
        Ok(self.push(value, Op::GlobalAvgPool(input)))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let z = self.value(logits);
        if z.shape().len() != 1 || z.is_empty() {
            return Err(Error::Shape(format!("softmax: expected [N>=1], got {:?}", z.shape())));
        }
        let max = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.data().iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let value = Tensor::new(z.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())?;
        Ok(self.push(value, Op::Softmax(logits)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ha, wa, ca) = self.value(a).hwc()?;
        let (hb, wb, cb) = self.value(b).hwc()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape(format!(
                "concat_channels: spatial {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ha * wa * (ca + cb));
        for p in 0..ha * wa {
            out.extend_from_slice(&da[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&db[p * cb..(p + 1) * cb]);
        }
        let value = Tensor::new(vec![ha, wa, ca + cb], out)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.hwc()?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / 2) * w + ox / 2) * c;
                out[(oy * ow + ox) * c..][..c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(value, Op::Upsample(input)))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let value = match kind {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::Gelu => x.map(kernels::gelu),
            Activation::Sigmoid => x.map(kernels::sigmoid),
        };
        self.push(value, Op::Activation(input, kind))
    }

    /// Mean absolute error `(1/n) Σ |target − restored|` as a `[1]` scalar.
    pub fn l1_loss(&mut self, restored: Var, target: Var) -> Result<Var> {
        let (r, t) = (self.value(restored), self.value(target));
        same_shape("l1_loss", r, t)?;
        let n = r.len().max(1);
        let total: T = r.data().iter().zip(t.data()).map(|(&a, &b)| (b - a).abs()).sum();
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(value, Op::L1(restored, target)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `x[H,W,C] * gate[1,1,C]`, broadcasting the gate over space.
    pub fn mul_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (_, _, c) = self.value(x).hwc()?;
        if self.value(gate).shape() != [1, 1, c] {
            return Err(Error::Shape(format!(
                "mul_channels: gate {:?} does not match {c} channels",
                self.value(gate).shape()
            )));
        }
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px.iter().zip(g).map(|(&v, &s)| v * s))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulChannels { x, gate }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let value = self.value(input).map(|v| v * f);
        self.push(value, Op::Scale(input, factor))
    }

    /// `Σ_i weights[i] · comps[i]` for `weights: [N]`, `comps: [N, H, W, C]`.
    pub fn weighted_sum(&mut self, weights: Var, comps: Var) -> Result<Var> {
        let (w, p) = (self.value(weights), self.value(comps));
        let n = match (w.shape(), p.shape()) {
            (&[n], &[pn, _, _, _]) if n == pn => n,
            (ws, ps) => {
                return Err(Error::Shape(format!(
                    "weighted_sum: weights {ws:?} do not match components {ps:?}"
                )))
            }
        };
        let per = p.len() / n;
        let mut out = vec![T::zero(); per];
        for (i, comp) in p.data().chunks_exact(per).enumerate() {
            let wi = w.data()[i];
            for (o, &v) in out.iter_mut().zip(comp) {
                *o = *o + wi * v;
            }
        }
        let value = Tensor::new(p.shape()[1..].to_vec(), out)?;
        Ok(self.push(value, Op::WeightedSum { weights, comps }))
    }

    pub fn resize_bilinear(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        let x = self.value(input);
        let (h, w, c) = x.hwc()?;
        if oh == 0 || ow == 0 {
            return Err(Error::Shape("resize_bilinear: empty target".into()));
        }
        let (ty, tx) = (kernels::bilinear_taps(h, oh), kernels::bilinear_taps(w, ow));
        let mut out = vec![T::zero(); oh * ow * c];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let wts = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let o = &mut out[(oy * ow + ox) * c..][..c];
                for (sy, sx, wt) in wts {
                    let wt = T::of(wt);
                    let src = &x.data()[(sy * w + sx) * c..][..c];
                    for (acc, &v) in o.iter_mut().zip(src) {
                        *acc = *acc + wt * v;
                    }
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(value, Op::ResizeBilinear(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: T = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    ///
    /// Every node that requires grad ends up with a (possibly zero) gradient.
    /// A graph can be differentiated once; rebuild it for another pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![T::one()]);
            for i in (0..=loss.0).rev() {
                let Some(g) = self.grads[i].take() else { continue };
                self.propagate(i, &g);
                self.grads[i] = Some(g);
            }
        }
        for (slot, node) in self.grads.iter_mut().zip(&self.nodes) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    /// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no grad.
    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&mut self, v: Var, src: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(dst) => {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            None => self.grads[v.0] = Some(src.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut gi = self.acc(input).map(std::mem::take);
                let mut gk = vec![T::zero(); self.value(kernel).len()];
                let mut gb = vec![T::zero(); self.value(bias).len()];
                kernels::conv2d_backward(
                    &geom,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    gi.as_deref_mut(),
                    &mut gk,
                    &mut gb,
                );
                if gi.is_some() {
                    self.grads[input.0] = gi;
                }
                self.accumulate(kernel, &gk);
                self.accumulate(bias, &gb);
            }
            Op::GlobalAvgPool(a) => {
                let (h, w, c) = self.value(a).hwc().expect("validated at forward");
                let inv = T::of((h * w) as f64);
                if let Some(ga) = self.acc(a) {
                    for px in ga.chunks_exact_mut(c) {
                        for (d, &v) in px.iter_mut().zip(g) {
                            *d = *d + v / inv;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let dotp: T = y.iter().zip(g).map(|(&p, &q)| p * q).sum();
                if let Some(ga) = self.acc(a) {
                    for ((d, &yi), &gi) in ga.iter_mut().zip(&y).zip(g) {
                        *d = *d + yi * (gi - dotp);
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(a).shape()[2];
                let cb = self.value(b).shape()[2];
                let c = ca + cb;
                if let Some(ga) = self.acc(a) {
                    for (p, px) in ga.chunks_exact_mut(ca.max(1)).enumerate() {
                        for (d, &v) in px.iter_mut().zip(&g[p * c..p * c + ca]) {
                            *d = *d + v;
                        }
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for (p, px) in gb.chunks_exact_mut(cb.max(1)).enumerate() {
                        for (d, &v) in px.iter_mut().zip(&g[p * c + ca..(p + 1) * c]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Upsample(a) => {
                let (_, w, c) = self.value(a).hwc().expect("validated at forward");
                let (oh, ow) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                if let Some(ga) = self.acc(a) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dst = ((oy / 2) * w + ox / 2) * c;
                            let src = (oy * ow + ox) * c;
                            for ch in 0..c {
                                ga[dst + ch] = ga[dst + ch] + g[src + ch];
                            }
                        }
                    }
                }
            }
            Op::Activation(a, kind) => {
                let local: Vec<T> = match kind {
                    Activation::Relu => self
                        .value(a)
                        .data()
                        .iter()
                        .map(|&x| if x > T::zero() { T::one() } else { T::zero() })
                        .collect(),
                    Activation::Gelu => self.value(a).data().iter().map(|&x| kernels::gelu_grad(x)).collect(),
                    Activation::Sigmoid => self.nodes[i]
                        .value
                        .data()
                        .iter()
                        .map(|&y| y * (T::one() - y))
                        .collect(),
                };
                if let Some(ga) = self.acc(a) {
                    for ((d, &l), &v) in ga.iter_mut().zip(&local).zip(g) {
                        *d = *d + l * v;
                    }
                }
            }
            Op::L1(r, t) => {
                let n = T::of(self.value(r).len().max(1) as f64);
                let signs: Vec<T> = self
                    .value(r)
                    .data()
                    .iter()
                    .zip(self.value(t).data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let scale = g[0] / n;
                if let Some(gr) = self.acc(r) {
                    for (d, &s) in gr.iter_mut().zip(&signs) {
                        *d = *d + s * scale;
                    }
                }
                if let Some(gt) = self.acc(t) {
                    for (d, &s) in gt.iter_mut().zip(&signs) {
                        *d = *d - s * scale;
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Mul(a, b) => {
                let ga: Vec<T> = self.value(b).data().iter().zip(g).map(|(&y, &v)| y * v).collect();
                let gb: Vec<T> = self.value(a).data().iter().zip(g).map(|(&x, &v)| x * v).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::MulChannels { x, gate } => {
                let c = self.value(gate).len();
                let gv = self.value(gate).data().to_vec();
                let mut ggate = vec![T::zero(); c];
                for (px, gp) in self.value(x).data().chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ((acc, &xv), &v) in ggate.iter_mut().zip(px).zip(gp) {
                        *acc = *acc + xv * v;
                    }
                }
                if let Some(gx) = self.acc(x) {
                    for (dp, gp) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((d, &s), &v) in dp.iter_mut().zip(&gv).zip(gp) {
                            *d = *d + s * v;
                        }
                    }
                }
                self.accumulate(gate, &ggate);
            }
            Op::Scale(a, factor) => {
                let f = T::of(factor);
                if let Some(ga) = self.acc(a) {
                    for (d, &v) in ga.iter_mut().zip(g) {
                        *d = *d + f * v;
                    }
                }
            }
            Op::WeightedSum { weights, comps } => {
                let n = self.value(weights).len();
                let per = self.value(comps).len() / n;
                let gw: Vec<T> = self
                    .value(comps)
                    .data()
                    .chunks_exact(per)
                    .map(|comp| comp.iter().zip(g).map(|(&p, &v)| p * v).sum())
                    .collect();
                let w = self.value(weights).data().to_vec();
                if let Some(gc) = self.acc(comps) {
                    for (chunk, &wi) in gc.chunks_exact_mut(per).zip(&w) {
                        for (d, &v) in chunk.iter_mut().zip(g) {
                            *d = *d + wi * v;
                        }
                    }
                }
                self.accumulate(weights, &gw);
            }
            Op::ResizeBilinear(a) => {
                let (h, w, c) = self.value(a).hwc().expect("validated at forward");
                let (oh, ow) = (self.nodes[i].value.shape()[0], self.nodes[i].value.shape()[1]);
                let (ty, tx) = (kernels::bilinear_taps(h, oh), kernels::bilinear_taps(w, ow));
                if let Some(ga) = self.acc(a) {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let wts = [
                                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                (y0, x1, (1.0 - fy) * fx),
                                (y1, x0, fy * (1.0 - fx)),
                                (y1, x1, fy * fx),
                            ];
                            let go = &g[(oy * ow + ox) * c..][..c];
                            for (sy, sx, wt) in wts {
                                let wt = T::of(wt);
                                let dst = &mut ga[(sy * w + sx) * c..][..c];
                                for (d, &v) in dst.iter_mut().zip(go) {
                                    *d = *d + wt * v;
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(a, g),
        }
    }
}
