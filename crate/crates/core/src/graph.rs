//! A small define-by-run reverse-mode autodiff tape over NCHW `f32` tensors.
//!
//! Every forward call appends a node; [`Graph::backward`] walks the tape in
//! reverse. Parameters are bound from a [`ParamStore`] once per graph and their
//! gradients are read back with [`Graph::param_grads`].

use std::collections::{HashMap, HashSet};

use crate::losses::nce_forward_backward;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col of `x`, kept when `w` needs a gradient.
        col: Option<Vec<f32>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Silu(Var),
    Tanh(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    GlobalAvgPool(Var),
    Mean(Var),
    MseConst(Var, f32),
    Mse(Var, Var),
    Gather {
        x: Var,
        locs: Vec<usize>,
    },
    L2Normalize(Var),
    PatchNce {
        q: Var,
        k: Var,
        groups: usize,
        tau: f32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, ParamId), Var>,
    frozen: HashSet<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds every parameter of `store` as a constant for this graph.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.uid());
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = !store.is_frozen() && !self.frozen.contains(&store.uid());
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.bound.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, c, h, wd) = xv.dims4();
        let (o, ci, k, k2) = wv.dims4();
        assert_eq!(c, ci, "conv input channels");
        assert_eq!(k, k2);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let l = ho * wo;
        let ckk = c * k * k;
        let col = im2col(xv, k, stride, pad, ho, wo);
        let mut out_t = vec![0.0; o * n * l];
        gemm(o, ckk, n * l, wv.data(), false, &col, false, &mut out_t, 0.0);
        let mut out = vec![0.0; n * o * l];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oc in 0..o {
            let bv = bias.as_ref().map_or(0.0, |b| b[oc]);
            for s in 0..n {
                let src = &out_t[oc * n * l + s * l..oc * n * l + (s + 1) * l];
                let dst = &mut out[(s * o + oc) * l..(s * o + oc + 1) * l];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bv;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let col = self.ng(w).then_some(col);
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
            needs,
        )
    }

    /// `x [n, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, i2) = self.value(w).dims2();
        assert_eq!(i, i2, "linear input features");
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (r, bb) in row.iter_mut().zip(bv) {
                    *r += bb;
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(av.shape(), data);
        let needs = self.ng(a) || self.ng(b);
        self.push(t, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = self.value(x).map(f);
        let needs = self.ng(x);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v / (1.0 + (-v).exp()), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    /// Feature-wise affine modulation `x·(1 + scale) + shift` with per-(sample, channel) terms.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(scale).shape(), &[n, c]);
        assert_eq!(self.value(shift).shape(), &[n, c]);
        let l = h * w;
        let xv = self.value(x).data();
        let sv = self.value(scale).data();
        let bv = self.value(shift).data();
        let mut out = vec![0.0; xv.len()];
        for nc in 0..n * c {
            let (s, b) = (1.0 + sv[nc], bv[nc]);
            for (o, &v) in out[nc * l..(nc + 1) * l].iter_mut().zip(&xv[nc * l..(nc + 1) * l]) {
                *o = v * s + b;
            }
        }
        let needs = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::Modulate { x, scale, shift },
            needs,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * h * w * 4];
        for nc in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[nc * 4 * h * w + y * 2 * w + xx] = xv[nc * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            needs,
        )
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (n2, cb, h2, w2) = self.value(b).dims4();
        assert_eq!((n, h, w), (n2, h2, w2), "concat spatial mismatch");
        let l = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * l);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * l..(s + 1) * ca * l]);
            out.extend_from_slice(&self.value(b).data()[s * cb * l..(s + 1) * cb * l]);
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_vec(&[n, ca + cb, h, w], out),
            Op::Concat(a, b),
            needs,
        )
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (n, c, h, w) = self.value(x).dims4();
        let l = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * c];
        for nc in 0..n * c {
            let seg = &xv[nc * l..(nc + 1) * l];
            let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
            let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / l as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[nc] = inv as f32;
            for (o, &v) in out[nc * l..(nc + 1) * l].iter_mut().zip(seg) {
                *o = ((v as f64 - mean) * inv) as f32;
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out),
            Op::InstanceNorm { x, inv_std },
            needs,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let l = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(l)
            .map(|seg| seg.iter().sum::<f32>() / l as f32)
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let needs = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// `mean((x − target)²)` against a constant.
    pub fn mse_const(&mut self, x: Var, target: f32) -> Var {
        let xv = self.value(x).data();
        let s = xv.iter().map(|&v| ((v - target) as f64).powi(2)).sum::<f64>() / xv.len() as f64;
        let needs = self.ng(x);
        self.push(Tensor::scalar(s as f32), Op::MseConst(x, target), needs)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        assert_eq!(av.len(), bv.len());
        let s = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / av.len() as f64;
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s as f32), Op::Mse(a, b), needs)
    }

    /// Picks feature vectors at flat spatial positions `locs` of every sample:
    /// `[n, c, h, w] → [n·|locs|, c]`.
    pub fn gather(&mut self, x: Var, locs: &[usize]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let l = h * w;
        let p = locs.len();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * p * c];
        for s in 0..n {
            for (pi, &loc) in locs.iter().enumerate() {
                assert!(loc < l);
                for ch in 0..c {
                    out[(s * p + pi) * c + ch] = xv[(s * c + ch) * l + loc];
                }
            }
        }
        let needs = self.ng(x);
        self.push(
            Tensor::from_vec(&[n * p, c], out),
            Op::Gather {
                x,
                locs: locs.to_vec(),
            },
            needs,
        )
    }

    /// Scales every row of a 2-d tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt() + NORM_EPS;
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::from_vec(&[r, c], out), Op::L2Normalize(x), needs)
    }

    /// Patchwise InfoNCE between aligned query/key rows, split into `groups` images.
    pub fn patch_nce(&mut self, q: Var, k: Var, groups: usize, tau: f32) -> Var {
        let (r, c) = self.value(q).dims2();
        assert_eq!(self.value(k).shape(), &[r, c], "patch stacks misaligned");
        assert_eq!(r % groups, 0);
        let qd: Vec<f64> = self.value(q).data().iter().map(|&v| v as f64).collect();
        let kd: Vec<f64> = self.value(k).data().iter().map(|&v| v as f64).collect();
        let res = nce_forward_backward(&qd, &kd, groups, r / groups, c, tau as f64);
        let needs = self.ng(q) || self.ng(k);
        self.push(
            Tensor::scalar(res.loss as f32),
            Op::PatchNce { q, k, groups, tau },
            needs,
        )
    }

    /// Mean softmax cross-entropy of `logits [n, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(n, labels.len());
        let lv = self.value(logits).data();
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            loss += max + z.ln() - row[y] as f64;
        }
        let needs = self.ng(logits);
        self.push(
            Tensor::scalar((loss / n as f64) as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let needs = self.ng(x);
        self.push(t, Op::Reshape(x), needs)
    }

    /// Copies the value of `x` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = xv.dims4();
                let (o, _, k, _) = wv.dims4();
                let (_, _, ho, wo) = y.dims4();
                let l = ho * wo;
                let ckk = c * k * k;
                // dy as [o, n·l]
                let mut gyt = vec![0.0; o * n * l];
                for s in 0..n {
                    for oc in 0..o {
                        gyt[oc * n * l + s * l..oc * n * l + (s + 1) * l]
                            .copy_from_slice(&gy.data()[(s * o + oc) * l..(s * o + oc + 1) * l]);
                    }
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db: Vec<f32> = gyt.chunks(n * l).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
                if self.ng(*w) {
                    let col = col.as_ref().expect("im2col kept for weight gradient");
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, n * l, ckk, &gyt, false, col, true, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if self.ng(*x) {
                    let mut dcol = vec![0.0; ckk * n * l];
                    gemm(ckk, o, n * l, wv.data(), true, &gyt, false, &mut dcol, 0.0);
                    let dx = col2im(&dcol, (n, c, h, wd), k, *stride, *pad, ho, wo);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, gy.data(), false, self.value(*w).data(), false, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, i], dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, gy.data(), true, self.value(*x).data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, i], dw));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; o];
                        for row in gy.data().chunks(o) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], db));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(av.shape(), d));
                }
                if self.ng(*b) {
                    let d = gy.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, gy.map(|v| v * s)),
            Op::Modulate { x, scale, shift } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let l = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let g = gy.data();
                if self.ng(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for nc in 0..n * c {
                        let s = 1.0 + sv[nc];
                        for (d, gg) in dx[nc * l..(nc + 1) * l].iter_mut().zip(&g[nc * l..(nc + 1) * l]) {
                            *d = gg * s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                if self.ng(*scale) {
                    let ds = (0..n * c)
                        .map(|nc| {
                            g[nc * l..(nc + 1) * l]
                                .iter()
                                .zip(&xv[nc * l..(nc + 1) * l])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *scale, Tensor::from_vec(&[n, c], ds));
                }
                if self.ng(*shift) {
                    let db = g.chunks(l).map(|s| s.iter().sum()).collect();
                    self.accumulate(grads, *shift, Tensor::from_vec(&[n, c], db));
                }
            }
            Op::Relu(x) => {
                let d = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * (s * (1.0 + v * (1.0 - s)))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::Tanh(x) => {
                let d = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![0.0; n * c * h * w];
                let g = gy.data();
                for nc in 0..n * c {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[nc * h * w + (yy / 2) * w + xx / 2] += g[nc * 4 * h * w + yy * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let l = h * w;
                let g = gy.data();
                let mut da = Vec::with_capacity(n * ca * l);
                let mut db = Vec::with_capacity(n * cb * l);
                for s in 0..n {
                    let base = s * (ca + cb) * l;
                    da.extend_from_slice(&g[base..base + ca * l]);
                    db.extend_from_slice(&g[base + ca * l..base + (ca + cb) * l]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da));
                self.accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], db));
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = y.dims4();
                let l = h * w;
                let g = gy.data();
                let yv = y.data();
                let mut dx = vec![0.0; yv.len()];
                for nc in 0..n * c {
                    let gs = &g[nc * l..(nc + 1) * l];
                    let ys = &yv[nc * l..(nc + 1) * l];
                    let mg = gs.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / l as f64;
                    let inv = inv_std[nc] as f64;
                    for ((d, &gg), &yy) in dx[nc * l..(nc + 1) * l].iter_mut().zip(gs).zip(ys) {
                        *d = (inv * (gg as f64 - mg - yy as f64 * mgy)) as f32;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let l = h * w;
                let mut dx = vec![0.0; n * c * l];
                for (nc, &g) in gy.data().iter().enumerate() {
                    dx[nc * l..(nc + 1) * l].fill(g / l as f32);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = gy.data()[0] / xv.len() as f32;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::MseConst(x, target) => {
                let xv = self.value(*x);
                let s = 2.0 * gy.data()[0] / xv.len() as f32;
                self.accumulate(grads, *x, xv.map(|v| s * (v - target)));
            }
            Op::Mse(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let s = 2.0 * gy.data()[0] / av.len() as f32;
                let d: Vec<f32> = av.data().iter().zip(bv.data()).map(|(x, y)| s * (x - y)).collect();
                if self.ng(*b) {
                    self.accumulate(
                        grads,
                        *b,
                        Tensor::from_vec(bv.shape(), d.iter().map(|v| -v).collect()),
                    );
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), d));
            }
            Op::Gather { x, locs } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let l = h * w;
                let p = locs.len();
                let g = gy.data();
                let mut dx = vec![0.0; n * c * l];
                for s in 0..n {
                    for (pi, &loc) in locs.iter().enumerate() {
                        for ch in 0..c {
                            dx[(s * c + ch) * l + loc] += g[(s * p + pi) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::L2Normalize(x) => {
                let (r, c) = y.dims2();
                let xv = self.value(*x).data();
                let g = gy.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                    let rr = n + NORM_EPS;
                    let gx: f32 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                    let corr = if n > 0.0 { gx / (rr * rr * n) } else { 0.0 };
                    for j in 0..c {
                        dx[i * c + j] = gr[j] / rr - row[j] * corr;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[r, c], dx));
            }
            Op::PatchNce { q, k, groups, tau } => {
                let qv = self.value(*q);
                let (r, c) = qv.dims2();
                let qd: Vec<f64> = qv.data().iter().map(|&v| v as f64).collect();
                let kd: Vec<f64> = self.value(*k).data().iter().map(|&v| v as f64).collect();
                let res = nce_forward_backward(&qd, &kd, *groups, r / groups, c, *tau as f64);
                let s = gy.data()[0] as f64;
                let to_t = |v: Vec<f64>| Tensor::from_vec(&[r, c], v.into_iter().map(|g| (g * s) as f32).collect());
                self.accumulate(grads, *q, to_t(res.grad_q));
                self.accumulate(grads, *k, to_t(res.grad_k));
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (n, k) = lv.dims2();
                let s = gy.data()[0] / n as f32;
                let mut d = vec![0.0; n * k];
                for (i, &lab) in labels.iter().enumerate() {
                    let row = &lv.data()[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - max).exp() / z;
                        d[i * k + j] = s * (p - if j == lab { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, k], d));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, gy.clone().reshape(&shape));
            }
        }
    }

    /// Gradients for every parameter of `store` bound in this graph, in store order.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len())
            .map(|i| {
                self.bound
                    .get(&(store.uid(), ParamId(i)))
                    .and_then(|v| grads.wrt(*v).cloned())
            })
            .collect()
    }
}

const NORM_EPS: f32 = 1e-7;

/// Unfolds `x [n, c, h, w]` into a `[c·k·k, n·ho·wo]` patch matrix.
/// Output positions `ox` whose input column `ox·stride + kx − pad` lies in `0..w`.
fn valid_range(kx: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f32> {
    let (n, c, h, w) = x.dims4();
    let l = ho * wo;
    let cols = n * l;
    let xv = x.data();
    let mut col = vec![0.0; c * k * k * cols];
    for ch in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, stride, pad, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, stride, pad, w, wo);
                let row = (ch * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for s in 0..n {
                    let src = &xv[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let base = iy * w + ox_lo * stride + kx - pad;
                        let dst = &mut dst_row[s * l + oy * wo + ox_lo..s * l + oy * wo + ox_hi];
                        if stride == 1 {
                            dst.copy_from_slice(&src[base..base + dst.len()]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src[base + i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &[f32],
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (n, c, h, w) = dims;
    let l = ho * wo;
    let cols = n * l;
    let mut x = vec![0.0; n * c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, stride, pad, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, stride, pad, w, wo);
                let row = (ch * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for s in 0..n {
                    let dst = &mut x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let base = iy * w + ox_lo * stride + kx - pad;
                        let src = &src_row[s * l + oy * wo + ox_lo..s * l + oy * wo + ox_hi];
                        if stride == 1 {
                            for (d, v) in dst[base..base + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (i, v) in src.iter().enumerate() {
                                dst[base + i * stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(y * probe))/d(input) for a graph builder.
    fn check_grad(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let probe = Tensor::randn(g.value(y).shape(), 1.0, &mut rng);
        let p = g.constant(probe.clone());
        let prod = g.mul(y, p);
        let loss = g.mean(prod);
        let grads = g.backward(loss);
        let analytic = grads.wrt(x).unwrap().clone();

        let eval = |xt: Tensor| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(xt);
            let y = build(&mut g, x);
            let yv = g.value(y).data();
            yv.iter().zip(probe.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / yv.len() as f64
        };
        let h = 1e-2f32;
        for i in (0..x0.len()).step_by((x0.len() / 13).max(1)) {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(xp) - eval(xm)) / (2.0 * h as f64);
            let an = analytic.data()[i] as f64;
            assert!(
                (fd - an).abs() <= tol * (fd.abs() + an.abs()).max(1e-3),
                "grad mismatch at {i}: fd={fd} analytic={an}"
            );
        }
    }

    fn weight(g: &mut Graph, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(Tensor::randn(shape, 0.3, &mut rng))
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let (n, c, h, wd, o) = (2, 3, 9, 8, 4);
        for (k, stride, pad) in [(3, 2, 1), (3, 1, 1), (7, 1, 3), (4, 2, 1), (1, 1, 0), (4, 1, 0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = Tensor::randn(&[n, c, h, wd], 1.0, &mut rng);
            let w = Tensor::randn(&[o, c, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[o], 1.0, &mut rng);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wd + 2 * pad - k) / stride + 1;
            let out = g.value(y);
            assert_eq!(out.shape(), &[n, o, ho, wo]);
            for s in 0..n {
                for oc in 0..o {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = b.data()[oc] as f64;
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                            as f64
                                            * w.data()[((oc * c + ci) * k + ky) * k + kx] as f64;
                                    }
                                }
                            }
                            let got = out.data()[((s * o + oc) * ho + oy) * wo + ox] as f64;
                            assert!((got - acc).abs() < 1e-4, "k={k} s={stride} p={pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        check_grad(
            &[2, 3, 6, 6],
            |g, x| {
                let w = weight(g, &[4, 3, 3, 3], 5);
                g.conv2d(x, w, None, 1, 1)
            },
            2e-2,
        );
        check_grad(
            &[4, 2, 3, 3],
            |g, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let x = g.constant(Tensor::randn(&[2, 2, 7, 7], 1.0, &mut rng));
                g.conv2d(x, w, None, 2, 1)
            },
            2e-2,
        );
        check_grad(
            &[2, 3, 8, 8],
            |g, x| {
                let w = weight(g, &[2, 3, 4, 4], 6);
                g.conv2d(x, w, None, 2, 1)
            },
            2e-2,
        );
        check_grad(
            &[1, 2, 6, 6],
            |g, x| {
                let w = weight(g, &[3, 2, 7, 7], 8);
                g.conv2d(x, w, None, 1, 3)
            },
            2e-2,
        );
    }

    #[test]
    fn elementwise_and_shape_op_gradients() {
        check_grad(&[2, 3, 4, 4], |g, x| g.instance_norm(x), 3e-2);
        check_grad(&[2, 3, 2, 2], |g, x| g.upsample2x(x), 1e-2);
        check_grad(&[2, 3, 4, 4], |g, x| g.silu(x), 1e-2);
        check_grad(&[2, 3, 4, 4], |g, x| g.tanh(x), 1e-2);
        check_grad(&[2, 3, 4, 4], |g, x| g.global_avg_pool(x), 1e-2);
        check_grad(&[2, 3, 4, 4], |g, x| g.concat(x, x), 1e-2);
        check_grad(
            &[2, 3, 4, 4],
            |g, x| {
                let s = weight(g, &[2, 3], 1);
                let b = weight(g, &[2, 3], 2);
                g.modulate(x, s, b)
            },
            1e-2,
        );
        check_grad(
            &[2, 3, 4, 4],
            |g, x| {
                let f = g.gather(x, &[0, 5, 7]);
                g.l2_normalize(f)
            },
            2e-2,
        );
        check_grad(
            &[3, 5],
            |g, x| {
                let w = weight(g, &[4, 5], 3);
                let b = weight(g, &[4], 4);
                g.linear(x, w, Some(b))
            },
            1e-2,
        );
    }

    #[test]
    fn modulation_gradients_reach_scale_and_shift() {
        check_grad(
            &[2, 3],
            |g, s| {
                let x = weight(g, &[2, 3, 2, 2], 8);
                let b = weight(g, &[2, 3], 2);
                g.modulate(x, s, b)
            },
            1e-2,
        );
    }

    #[test]
    fn frozen_store_produces_no_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::randn(&[2, 3], 1.0, &mut rng));
        store.set_frozen(true);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[4, 3], 1.0, &mut rng));
        let w = g.param(&store, id);
        let y = g.linear(x, w, None);
        let loss = g.mean(y);
        let grads = g.backward(loss);
        assert!(g.param_grads(&grads, &store)[0].is_none());
        assert!(grads.wrt(x).is_some());
    }
}
