//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op evaluates eagerly and records what its backward rule needs.
//! Nodes are stored in creation order, so a reverse sweep is a valid
//! topological order.

use std::collections::HashMap;

use super::ops::{self, ConvGeometry};
use super::{Module, Parameter, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul(Var, Var),
    MulConst {
        a: Var,
        mask: Tensor<F>,
    },
    Scale(Var, F),
    Gelu {
        a: Var,
        cdf: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Softmax(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeometry,
        c_out: usize,
    },
    GlobalAvgPool(Var),
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    SoftKl {
        teacher: Var,
        student: Var,
        temperature: F,
        p_t: Vec<F>,
        log_ratio: Vec<F>,
        p_s: Vec<F>,
        live: Vec<bool>,
        row_kl: Vec<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Floor applied to student probabilities inside the KL logarithm.
pub const KL_PROB_FLOOR: f64 = 1e-12;

pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<u64, Var>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A graph that never records gradients; parameters bind as constants.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted (sensitivity studies, tests).
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; binding the same parameter twice reuses the node.
    pub fn param(&mut self, p: &Parameter<F>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let needs_grad = self.grad_enabled && p.is_trainable();
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.id(), v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing extents of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let tail = &av.shape()[av.rank().saturating_sub(bv.rank())..];
        if bv.rank() > av.rank() || tail != bv.shape() {
            return Err(Error::dim(format!("cannot broadcast {:?} onto {:?}", bv.shape(), av.shape())));
        }
        let mut value = av.clone();
        let n = bv.len();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddBroadcast { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor<F>) -> Result<Var> {
        let value = self.value(a).zip_map(&mask, |x, y| x * y)?;
        Ok(self.push(value, Op::MulConst { a, mask }, &[a]))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let cdf: Vec<F> = xv.data().iter().map(|&x| ops::normal_cdf(x)).collect();
        let data = xv.data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { a, cdf }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = ops::softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if g.len() != d || b.len() != d {
            return Err(Error::dim(format!("layer_norm width {d} vs gain {:?} / bias {:?}", g.shape(), b.shape())));
        }
        let mut value = xv.clone();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (row, hat) in value.data_mut().chunks_mut(d).zip(xhat.chunks_mut(d)) {
            let (mean, is) = ops::moments(row, eps);
            inv_std.push(is);
            for j in 0..d {
                hat[j] = (row[j] - mean) * is;
                row[j] = g.data()[j] * hat[j] + b.data()[j];
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Per-sample, per-channel normalisation over spatial positions of a
    /// `[b×c×h×w]` map, with per-channel gain and bias.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let &[_, c, h, w] = xv.shape() else {
            return Err(Error::dim(format!("instance_norm expects [b,c,h,w], got {:?}", xv.shape())));
        };
        if g.len() != c || b.len() != c {
            return Err(Error::dim(format!("instance_norm channels {c} vs gain {:?}", g.shape())));
        }
        let n = h * w;
        let mut value = xv.clone();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / n);
        for (idx, (plane, hat)) in value.data_mut().chunks_mut(n).zip(xhat.chunks_mut(n)).enumerate() {
            let ch = idx % c;
            let (mean, is) = ops::moments(plane, eps);
            inv_std.push(is);
            for j in 0..n {
                hat[j] = (plane[j] - mean) * is;
                plane[j] = g.data()[ch] * hat[j] + b.data()[ch];
            }
        }
        Ok(self.push(value, Op::InstanceNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[b×n×3D]` holding queries, keys and values side by side;
    /// the result is `[b×n×D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let xv = self.value(qkv);
        let &[batch, n, width] = xv.shape() else {
            return Err(Error::dim(format!("attention expects [b,n,3D], got {:?}", xv.shape())));
        };
        if width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::dim(format!("width {width} not divisible into 3 x {heads} heads")));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let data = xv.data();
        let mut out = vec![F::zero(); batch * n * d];
        let mut probs = vec![F::zero(); batch * heads * n * n];
        for b in 0..batch {
            let base = b * n * width;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                for i in 0..n {
                    let q = &data[base + i * width + h * dh..][..dh];
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k = &data[base + j * width + d + h * dh..][..dh];
                        *s = q.iter().zip(k).map(|(&a, &c)| a * c).sum::<F>() * scale;
                    }
                    ops::softmax_in_place(row);
                    let o = &mut out[(b * n + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let v = &data[base + j * width + 2 * d + h * dh..][..dh];
                        for (oo, &vv) in o.iter_mut().zip(v) {
                            *oo += pij * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([batch, n, d], out)?;
        Ok(self.push(value, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Attention probabilities `[b×heads×n×n]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Batched convolution of `[b×c×h×w]` with `[c_out×c×k×k]` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[batch, c, h, width] = xv.shape() else {
            return Err(Error::dim(format!("conv2d expects [b,c,h,w], got {:?}", xv.shape())));
        };
        let &[c_out, c_in, k, k2] = wv.shape() else {
            return Err(Error::dim(format!("conv2d kernels must be rank 4, got {:?}", wv.shape())));
        };
        if c_in != c || k != k2 {
            return Err(Error::dim(format!(
                "conv2d kernels {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let geo = ConvGeometry::new(c, h, width, k, stride, pad)?;
        let out = ops::conv2d_forward(xv.data(), batch, &geo, wv.data(), c_out);
        let value = Tensor::new([batch, c_out, geo.out_height(), geo.out_width()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geo, c_out }, &[x, w]))
    }

    /// `[b×c×h×w] → [b×c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, c, h, w] = xv.shape() else {
            return Err(Error::dim(format!("global_avg_pool expects [b,c,h,w], got {:?}", xv.shape())));
        };
        let n = F::from_usize(h * w).unwrap();
        let data: Vec<F> = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<F>() / n).collect();
        let value = Tensor::new([b, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `[b×n×D]` plus a `[D]` token placed at index 0 of every sequence.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        let &[b, n, d] = xv.shape() else {
            return Err(Error::dim(format!("prepend_token expects [b,n,D], got {:?}", xv.shape())));
        };
        if tv.len() != d {
            return Err(Error::dim(format!("token {:?} does not match width {d}", tv.shape())));
        }
        let mut data = Vec::with_capacity(b * (n + 1) * d);
        for seq in xv.data().chunks(n * d) {
            data.extend_from_slice(tv.data());
            data.extend_from_slice(seq);
        }
        let value = Tensor::new([b, n + 1, d], data)?;
        Ok(self.push(value, Op::PrependToken { x, token }, &[x, token]))
    }

    /// Row `index` of every sequence: `[b×n×D] → [b×D]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let &[b, n, d] = xv.shape() else {
            return Err(Error::dim(format!("select_token expects [b,n,D], got {:?}", xv.shape())));
        };
        if index >= n {
            return Err(Error::dim(format!("token index {index} out of {n}")));
        }
        let data: Vec<F> = xv.data().chunks(n * d).flat_map(|s| s[index * d..(index + 1) * d].to_vec()).collect();
        let value = Tensor::new([b, d], data)?;
        Ok(self.push(value, Op::SelectToken { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Batch-mean cross-entropy of `[b×C]` logits against class indices,
    /// via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2()?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!("label {bad} outside 0..{c}")));
        }
        let mut total = F::zero();
        let mut probs = Vec::with_capacity(b * c);
        for (row, &y) in lv.data().chunks(c).zip(labels) {
            let logp = ops::log_softmax_row(row);
            total -= logp[y];
            probs.extend(logp.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(total / F::from_usize(b).unwrap());
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Batch-mean `KL(softmax(teacher/T) ‖ softmax(student/T))` over rows.
    ///
    /// Teacher terms with zero probability contribute nothing; student
    /// probabilities are floored at [`KL_PROB_FLOOR`] inside the log.
    pub fn soft_kl(&mut self, teacher: Var, student: Var, temperature: F) -> Result<Var> {
        if temperature <= F::zero() {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let (tv, sv) = (self.value(teacher), self.value(student));
        tv.expect_same_shape(sv)?;
        let (b, d) = tv.dims2()?;
        let floor = F::lit(KL_PROB_FLOOR.ln());
        let (mut p_t, mut log_ratio, mut p_s, mut live, mut row_kl) = (
            Vec::with_capacity(b * d),
            Vec::with_capacity(b * d),
            Vec::with_capacity(b * d),
            Vec::with_capacity(b * d),
            Vec::with_capacity(b),
        );
        for (trow, srow) in tv.data().chunks(d).zip(sv.data().chunks(d)) {
            let lt = ops::log_softmax_row(&trow.iter().map(|&v| v / temperature).collect::<Vec<_>>());
            let ls = ops::log_softmax_row(&srow.iter().map(|&v| v / temperature).collect::<Vec<_>>());
            let mut kl = F::zero();
            for j in 0..d {
                let pt = lt[j].exp();
                let alive = ls[j] > floor;
                let ratio = lt[j] - if alive { ls[j] } else { floor };
                if pt > F::zero() {
                    kl += pt * ratio;
                }
                p_t.push(pt);
                log_ratio.push(ratio);
                p_s.push(ls[j].exp());
                live.push(alive);
            }
            row_kl.push(kl);
        }
        let value = Tensor::scalar(row_kl.iter().copied().sum::<F>() / F::from_usize(b).unwrap());
        Ok(self.push(
            value,
            Op::SoftKl { teacher, student, temperature, p_t, log_ratio, p_s, live, row_kl },
            &[teacher, student],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::Evaluation(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(dy);
                continue;
            }
            self.backward_node(i, &dy, &mut grads);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    /// Borrow-or-create the gradient buffer of `v`, or `None` if `v` needs
    /// no gradient.
    fn slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut [F]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice())
    }

    fn backward_node(&self, i: usize, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if let Some(dx) = self.slot(grads, *x) {
                    F::gemm(
                        rows,
                        d_out,
                        d_in,
                        F::one(),
                        dy,
                        d_out as isize,
                        1,
                        wv.data(),
                        d_in as isize,
                        1,
                        F::one(),
                        dx,
                        d_in as isize,
                        1,
                    );
                }
                if let Some(dw) = self.slot(grads, *w) {
                    F::gemm(
                        d_out,
                        rows,
                        d_in,
                        F::one(),
                        dy,
                        1,
                        d_out as isize,
                        xv.data(),
                        d_in as isize,
                        1,
                        F::one(),
                        dw,
                        d_in as isize,
                        1,
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in dy.chunks(d_out) {
                            for (g, &v) in db.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        dy,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        F::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        av.data(),
                        1,
                        k as isize,
                        dy,
                        n as isize,
                        1,
                        F::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        axpy(g, dy, F::one());
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if let Some(g) = self.slot(grads, *a) {
                    axpy(g, dy, F::one());
                }
                let n = self.value(*b).len();
                if let Some(g) = self.slot(grads, *b) {
                    for chunk in dy.chunks(n) {
                        axpy(g, chunk, F::one());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::MulConst { a, mask } => {
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &m) in g.iter_mut().zip(dy).zip(mask.data()) {
                        *g += d * m;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.slot(grads, *a) {
                    axpy(g, dy, *s);
                }
            }
            Op::Gelu { a, cdf } => {
                let xv = self.value(*a).data();
                if let Some(g) = self.slot(grads, *a) {
                    for (((g, &d), &x), &c) in g.iter_mut().zip(dy).zip(xv).zip(cdf) {
                        *g += d * (c + x * ops::normal_pdf(x));
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(g) = self.slot(grads, *a) {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let dot: F = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data().to_vec();
                if let Some(dg) = self.slot(grads, *gain) {
                    for (dr, hr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for dr in dy.chunks(d) {
                        axpy(db, dr, F::one());
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dhat = vec![F::zero(); d];
                    for (r, ((gx, dr), hr)) in dx.chunks_mut(d).zip(dy.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dhat[j] = dr[j] * gv[j];
                        }
                        norm_backward(gx, &dhat, hr, inv_std[r]);
                    }
                }
            }
            Op::InstanceNorm { x, gain, bias, xhat, inv_std } => {
                let &[_, c, h, w] = node.value.shape() else { unreachable!() };
                let n = h * w;
                let gv = self.value(*gain).data().to_vec();
                if let Some(dg) = self.slot(grads, *gain) {
                    for (idx, (dr, hr)) in dy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        dg[idx % c] += dr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<F>();
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (idx, dr) in dy.chunks(n).enumerate() {
                        db[idx % c] += dr.iter().copied().sum::<F>();
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dhat = vec![F::zero(); n];
                    for (idx, ((gx, dr), hr)) in dx.chunks_mut(n).zip(dy.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let g = gv[idx % c];
                        for j in 0..n {
                            dhat[j] = dr[j] * g;
                        }
                        norm_backward(gx, &dhat, hr, inv_std[idx]);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let xv = self.value(*qkv);
                let &[batch, n, width] = xv.shape() else { unreachable!() };
                let d = width / 3;
                let dh = d / heads;
                let scale = F::lit(1.0 / (dh as f64).sqrt());
                let data = xv.data();
                let Some(dx) = self.slot(grads, *qkv) else { return };
                let mut dp = vec![F::zero(); n];
                for b in 0..batch {
                    let base = b * n * width;
                    for h in 0..*heads {
                        let p = &probs[(b * heads + h) * n * n..][..n * n];
                        for i in 0..n {
                            let dout = &dy[(b * n + i) * d + h * dh..][..dh];
                            let prow = &p[i * n..(i + 1) * n];
                            for j in 0..n {
                                let v = &data[base + j * width + 2 * d + h * dh..][..dh];
                                dp[j] = dout.iter().zip(v).map(|(&a, &c)| a * c).sum();
                                let dv = &mut dx[base + j * width + 2 * d + h * dh..][..dh];
                                for (g, &o) in dv.iter_mut().zip(dout) {
                                    *g += prow[j] * o;
                                }
                            }
                            let dot: F = dp.iter().zip(prow).map(|(&a, &c)| a * c).sum();
                            for j in 0..n {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == F::zero() {
                                    continue;
                                }
                                for t in 0..dh {
                                    let qi = base + i * width + h * dh + t;
                                    let kj = base + j * width + d + h * dh + t;
                                    let (qv, kv) = (data[qi], data[kj]);
                                    dx[qi] += ds * kv;
                                    dx[kj] += ds * qv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geo, c_out } => {
                use rayon::prelude::*;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let batch = xv.shape()[0];
                let positions = geo.out_positions();
                let patch = geo.patch_len();
                let in_len = geo.in_channels * geo.height * geo.width;
                let out_len = c_out * positions;
                let want_w = self.nodes[w.0].needs_grad;
                let want_x = self.nodes[x.0].needs_grad;
                let c_out = *c_out;
                let (xd, wd) = (xv.data(), wv.data());
                let cols_len = patch * positions;
                if want_w {
                    // Per-sample partials summed in sample order keep the
                    // result independent of the thread count.
                    let mut parts = vec![F::zero(); batch * c_out * patch];
                    parts.par_chunks_mut(c_out * patch).enumerate().for_each_init(
                        || vec![F::zero(); cols_len],
                        |cols, (b, dw)| {
                            geo.im2col(&xd[b * in_len..(b + 1) * in_len], cols);
                            let dyb = &dy[b * out_len..(b + 1) * out_len];
                            F::gemm(
                                c_out,
                                positions,
                                patch,
                                F::one(),
                                dyb,
                                positions as isize,
                                1,
                                cols,
                                1,
                                positions as isize,
                                F::zero(),
                                dw,
                                patch as isize,
                                1,
                            );
                        },
                    );
                    if let Some(gw) = self.slot(grads, *w) {
                        for dw in parts.chunks(c_out * patch) {
                            axpy(gw, dw, F::one());
                        }
                    }
                }
                if want_x {
                    let dx = if geo.stride == 1 && geo.pad < geo.kernel {
                        ops::conv2d_input_grad(dy, batch, geo, wd, c_out)
                    } else {
                        let mut dx = vec![F::zero(); batch * in_len];
                        dx.par_chunks_mut(in_len).enumerate().for_each_init(
                            || vec![F::zero(); cols_len],
                            |dcols, (b, dxb)| {
                                let dyb = &dy[b * out_len..(b + 1) * out_len];
                                F::gemm(
                                    patch,
                                    c_out,
                                    positions,
                                    F::one(),
                                    wd,
                                    1,
                                    patch as isize,
                                    dyb,
                                    positions as isize,
                                    1,
                                    F::zero(),
                                    dcols,
                                    positions as isize,
                                    1,
                                );
                                geo.col2im(dcols, dxb);
                            },
                        );
                        dx
                    };
                    if let Some(gx) = self.slot(grads, *x) {
                        axpy(gx, &dx, F::one());
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let &[_, _, h, w] = self.value(*x).shape() else { unreachable!() };
                let n = h * w;
                let inv = F::from_usize(n).unwrap().recip();
                if let Some(g) = self.slot(grads, *x) {
                    for (plane, &d) in g.chunks_mut(n).zip(dy) {
                        plane.iter_mut().for_each(|v| *v += d * inv);
                    }
                }
            }
            Op::PrependToken { x, token } => {
                let &[_, n1, d] = node.value.shape() else { unreachable!() };
                if let Some(g) = self.slot(grads, *x) {
                    for (gs, ds) in g.chunks_mut((n1 - 1) * d).zip(dy.chunks(n1 * d)) {
                        axpy(gs, &ds[d..], F::one());
                    }
                }
                if let Some(g) = self.slot(grads, *token) {
                    for ds in dy.chunks(n1 * d) {
                        axpy(g, &ds[..d], F::one());
                    }
                }
            }
            Op::SelectToken { x, index } => {
                let &[_, n, d] = self.value(*x).shape() else { unreachable!() };
                if let Some(g) = self.slot(grads, *x) {
                    for (gs, ds) in g.chunks_mut(n * d).zip(dy.chunks(d)) {
                        axpy(&mut gs[index * d..(index + 1) * d], ds, F::one());
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    axpy(g, dy, F::one());
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().for_each(|v| *v += dy[0]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).last_dim();
                let s = dy[0] / F::from_usize(labels.len()).unwrap();
                if let Some(g) = self.slot(grads, *logits) {
                    for (r, (gr, pr)) in g.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            let target = if j == labels[r] { F::one() } else { F::zero() };
                            gr[j] += s * (pr[j] - target);
                        }
                    }
                }
            }
            Op::SoftKl { teacher, student, temperature, p_t, log_ratio, p_s, live, row_kl } => {
                let d = self.value(*teacher).last_dim();
                let rows = row_kl.len();
                let s = dy[0] / (F::from_usize(rows).unwrap() * *temperature);
                if let Some(g) = self.slot(grads, *teacher) {
                    for r in 0..rows {
                        for j in 0..d {
                            let k = r * d + j;
                            if p_t[k] > F::zero() {
                                g[k] += s * p_t[k] * (log_ratio[k] - row_kl[r]);
                            }
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *student) {
                    for r in 0..rows {
                        let range = r * d..(r + 1) * d;
                        let live_mass: F = range.clone().filter(|&k| live[k]).map(|k| p_t[k]).sum();
                        for k in range {
                            let own = if live[k] { p_t[k] } else { F::zero() };
                            g[k] += s * (p_s[k] * live_mass - own);
                        }
                    }
                }
            }
        }
    }
}

/// dx += inv_std·(dx̂ − mean(dx̂) − x̂·mean(dx̂⊙x̂)) for one normalised group.
fn norm_backward<F: Scalar>(dx: &mut [F], dhat: &[F], xhat: &[F], inv_std: F) {
    let n = F::from_usize(dx.len()).unwrap();
    let mean_d = dhat.iter().copied().sum::<F>() / n;
    let mean_dx = dhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<F>() / n;
    for j in 0..dx.len() {
        dx[j] += inv_std * (dhat[j] - mean_d - xhat[j] * mean_dx);
    }
}

fn axpy<F: Scalar>(dst: &mut [F], src: &[F], alpha: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient matches value shape"))
    }

    /// Adds leaf gradients into the `grad` buffers of every trainable
    /// parameter of `module` that was bound in `graph`. Frozen parameters
    /// are never touched.
    pub fn accumulate<M: Module<F> + ?Sized>(&self, graph: &Graph<F>, module: &mut M) {
        module.visit_mut("", &mut |_, p| {
            if !p.is_trainable() {
                return;
            }
            if let Some(&v) = graph.params.get(&p.id()) {
                if let Some(g) = &self.grads[v.0] {
                    for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        });
    }
}
