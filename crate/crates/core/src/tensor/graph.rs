//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backpropagation is a single reverse sweep.
//! Parameters are borrowed from a [`ParamSet`] for the lifetime of the graph;
//! their gradients come back in [`Gradients`] and are applied afterwards.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::kernels::{self, BilinearTap, ConvShape};
use super::param::{ParamId, ParamSet};
use super::{mismatch, Tensor4, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Add(Var, Var),
    Concat(Var, Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    Coherence {
        l: Var,
        r: Var,
        eps: f64,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    RoiAlign {
        x: Var,
        taps: Vec<BilinearTap>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        beta: f64,
        count: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
    ScaleGrad {
        x: Var,
        k: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor4,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor4>>,
    params: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor4> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor4> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub(crate) fn into_params(self) -> Vec<Option<Tensor4>> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor4, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.expect("param node without a parameter set")[id].value,
            _ => &self.nodes[v.0].value,
        }
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor4) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "graph has no parameter set");
        self.push(Op::Param(id), Tensor4::zeros([0, 0, 0, 0]), true)
    }

    /// Copies the value into a constant, cutting gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.input(v)
    }

    /// Identity in the forward pass; multiplies the gradient by `k`.
    pub fn scale_grad(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x).clone();
        let ng = self.needs(x);
        self.push(Op::ScaleGrad { x, k }, v, ng)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let xd = self.value(x).dims();
        let wd = self.value(w).dims();
        if wd[1] != xd[1] || wd[2] != wd[3] {
            return Err(mismatch(
                "conv2d",
                format!("input {:?} vs weights {:?}", xd, wd),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != wd[0] {
                return Err(mismatch("conv2d", format!("bias for {} outputs", wd[0])));
            }
        }
        let shape = ConvShape::new(xd[1], xd[2], xd[3], wd[2], stride, pad)
            .ok_or(TensorError::BadGeometry)?;
        let (kk, p, co) = (shape.col_rows(), shape.col_cols(), wd[0]);
        let mut cols = vec![0.0; xd[0] * kk * p];
        let mut out = Tensor4::zeros([xd[0], co, shape.h_out, shape.w_out]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let item = xd[1] * xd[2] * xd[3];
            for n in 0..xd[0] {
                let col = &mut cols[n * kk * p..(n + 1) * kk * p];
                kernels::im2col(&xv[n * item..(n + 1) * item], &shape, col);
                let dst = &mut out.data_mut()[n * co * p..(n + 1) * co * p];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (c, row) in dst.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v = bv[c]);
                    }
                }
                let beta = if b.is_some() { 1.0 } else { 0.0 };
                kernels::gemm(
                    co,
                    kk,
                    p,
                    wv,
                    (kk as isize, 1),
                    col,
                    (p as isize, 1),
                    beta,
                    dst,
                );
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                shape,
                cols,
            },
            out,
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| {
            if *a < 0.0 {
                *a = 0.0
            }
        });
        let ng = self.needs(x);
        self.push(Op::Relu(x), v, ng)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.value(x).dims();
        if d[2] < 2 || d[3] < 2 {
            return Err(mismatch("maxpool2", format!("input {:?} too small", d)));
        }
        let mut out = Tensor4::zeros([d[0], d[1], d[2] / 2, d[3] / 2]);
        let argmax = kernels::maxpool2(
            self.value(x).data(),
            d[0] * d[1],
            d[2],
            d[3],
            out.data_mut(),
        );
        let ng = self.needs(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, out, ng))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let d = self.value(x).dims();
        let mut out = Tensor4::zeros([d[0], d[1], 2 * d[2], 2 * d[3]]);
        kernels::upsample2(
            self.value(x).data(),
            d[0] * d[1],
            d[2],
            d[3],
            out.data_mut(),
        );
        let ng = self.needs(x);
        self.push(Op::Upsample2(x), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(mismatch("add", format!("{:?} vs {:?}", da, db)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da[0] != db[0] || da[2] != db[2] || da[3] != db[3] {
            return Err(mismatch("concat", format!("{:?} vs {:?}", da, db)));
        }
        let (ia, ib) = (da[1] * da[2] * da[3], db[1] * db[2] * db[3]);
        let mut data = Vec::with_capacity(da[0] * (ia + ib));
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for n in 0..da[0] {
                data.extend_from_slice(&va[n * ia..(n + 1) * ia]);
                data.extend_from_slice(&vb[n * ib..(n + 1) * ib]);
            }
        }
        let out = Tensor4::from_vec([da[0], da[1] + db[1], da[2], da[3]], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat(a, b), out, ng))
    }

    /// Scales channel `c` of item `n` by `s[n, c]`; `s` has dims `(n, c, 1, 1)`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (dx, ds) = (self.value(x).dims(), self.value(s).dims());
        if ds != [dx[0], dx[1], 1, 1] {
            return Err(mismatch("channel_scale", format!("{:?} by {:?}", dx, ds)));
        }
        let plane = dx[2] * dx[3];
        let mut v = self.value(x).clone();
        {
            let sv = self.value(s).data();
            for (k, chunk) in v.data_mut().chunks_mut(plane.max(1)).enumerate() {
                chunk.iter_mut().for_each(|a| *a *= sv[k]);
            }
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Op::ChannelScale { x, s }, v, ng))
    }

    /// Per-channel cosine similarity of two equally shaped maps, each channel
    /// flattened to a vector; output dims `(n, c, 1, 1)`.
    pub fn coherence(&mut self, l: Var, r: Var, eps: f64) -> Result<Var, TensorError> {
        let (dl, dr) = (self.value(l).dims(), self.value(r).dims());
        if dl != dr {
            return Err(mismatch("coherence", format!("{:?} vs {:?}", dl, dr)));
        }
        let plane = dl[2] * dl[3];
        let mut out = Tensor4::zeros([dl[0], dl[1], 1, 1]);
        {
            let (lv, rv) = (self.value(l).data(), self.value(r).data());
            for (k, o) in out.data_mut().iter_mut().enumerate() {
                let seg = k * plane..(k + 1) * plane;
                *o = kernels::cosine(&lv[seg.clone()], &rv[seg], eps).0;
            }
        }
        let ng = self.needs(l) || self.needs(r);
        Ok(self.push(Op::Coherence { l, r, eps }, out, ng))
    }

    /// `y = x·wᵀ + b` with `x` flattened per item, `w` of dims
    /// `(out, in, 1, 1)` and `b` of `out` values. Output `(n, out, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (dx, dw) = (self.value(x).dims(), self.value(w).dims());
        let (n, fan_in, out) = (dx[0], dx[1] * dx[2] * dx[3], dw[0]);
        if dw[1] * dw[2] * dw[3] != fan_in {
            return Err(mismatch(
                "linear",
                format!("input {:?} vs weights {:?}", dx, dw),
            ));
        }
        let mut y = Tensor4::zeros([n, out, 1, 1]);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != out {
                return Err(mismatch("linear", format!("bias for {} outputs", out)));
            }
            for row in y.data_mut().chunks_mut(out.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(
            n,
            fan_in,
            out,
            self.value(x).data(),
            (fan_in as isize, 1),
            self.value(w).data(),
            (1, fan_in as isize),
            beta,
            y.data_mut(),
        );
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        Ok(self.push(Op::Linear { x, w, b }, y, ng))
    }

    /// Crops `rois` (`[x0, y0, x1, y1]` in feature pixels) from a single-item
    /// map and resamples each to `out_h × out_w` with one bilinear sample at
    /// every bin center. Output dims `(rois, c, out_h, out_w)`.
    pub fn roi_align(
        &mut self,
        x: Var,
        rois: &[[f64; 4]],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let d = self.value(x).dims();
        if d[0] != 1 {
            return Err(mismatch(
                "roi_align",
                format!("expects one map, got {:?}", d),
            ));
        }
        let mut taps = Vec::with_capacity(rois.len() * out_h * out_w);
        for r in rois {
            let (w, h) = (r[2] - r[0], r[3] - r[1]);
            if !(w >= 1e-3 && h >= 1e-3) {
                return Err(TensorError::DegenerateRoi {
                    width: w,
                    height: h,
                });
            }
            kernels::roi_taps(*r, d[2], d[3], out_h, out_w, &mut taps);
        }
        let bins = out_h * out_w;
        let (c, plane) = (d[1], d[2] * d[3]);
        let mut out = Tensor4::zeros([rois.len(), c, out_h, out_w]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for ri in 0..rois.len() {
                let rt = &taps[ri * bins..(ri + 1) * bins];
                for ch in 0..c {
                    let p = &src[ch * plane..(ch + 1) * plane];
                    let o = &mut dst[(ri * c + ch) * bins..(ri * c + ch + 1) * bins];
                    for (v, t) in o.iter_mut().zip(rt.iter()) {
                        *v = t.wt[0] * p[t.idx[0] as usize]
                            + t.wt[1] * p[t.idx[1] as usize]
                            + t.wt[2] * p[t.idx[2] as usize]
                            + t.wt[3] * p[t.idx[3] as usize];
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::RoiAlign { x, taps }, out, ng))
    }

    /// Mean softmax cross-entropy over the channel axis at every `(n, h, w)`
    /// position with a label; `labels` is ordered `(n, h, w)` row-major and
    /// `None` entries are ignored.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[Option<usize>],
    ) -> Result<Var, TensorError> {
        let d = self.value(logits).dims();
        let (k, plane) = (d[1], d[2] * d[3]);
        if labels.len() != d[0] * plane || labels.iter().flatten().any(|&l| l >= k) {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", d, labels.len()),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        let mut count = 0;
        for n in 0..d[0] {
            for pos in 0..plane {
                let at = |c: usize| (n * k + c) * plane + pos;
                let m = (0..k).map(|c| lv[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (lv[at(c)] - m).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = (lv[at(c)] - m).exp() / z;
                }
                if let Some(l) = labels[n * plane + pos] {
                    loss += z.ln() + m - lv[at(l)];
                    count += 1;
                }
            }
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            Tensor4::scalar(value),
            ng,
        ))
    }

    /// Smooth-L1 (Huber with transition `beta`), summed within each item
    /// selected by `mask` and averaged over those items.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: &[f64],
        mask: &[bool],
        beta: f64,
    ) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        let (n, item) = (pv.n(), pv.item_len());
        if target.len() != pv.len() || mask.len() != n {
            return Err(mismatch(
                "smooth_l1",
                format!(
                    "pred {:?} vs {} targets, {} mask rows",
                    pv.dims(),
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            for j in r * item..(r + 1) * item {
                let x = (pv.data()[j] - target[j]).abs();
                loss += if x < beta {
                    0.5 * x * x / beta
                } else {
                    x - 0.5 * beta
                };
            }
            count += 1;
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let ng = self.needs(pred);
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                beta,
                count,
            },
            Tensor4::scalar(value),
            ng,
        ))
    }

    /// `Σ k_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let mut total = 0.0;
        for &(v, k) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(mismatch(
                    "weighted_sum",
                    format!("non-scalar {:?}", t.dims()),
                ));
            }
            total += k * t.item();
        }
        let ng = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Op::WeightedSum(terms.to_vec()), Tensor4::scalar(total), ng))
    }

    /// Scalar `Σ w_i · x_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(mismatch(
                "dot_const",
                format!("{} values vs {} weights", xv.len(), weights.len()),
            ));
        }
        let v: f64 = xv
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.needs(x);
        Ok(self.push(Op::DotConst { x, weights }, Tensor4::scalar(v), ng))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n_params = self.params.map_or(0, |p| p.len());
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor4>> = (0..n_params).map(|_| None).collect();
        let ld = self.value(loss).dims();
        grads[loss.0] = Some(Tensor4::filled(ld, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        accumulate(&mut pgrads[id.index()], g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(&node.op, &node.value, g, &mut grads);
        }
        Gradients {
            nodes: grads,
            params: pgrads,
        }
    }

    fn send(&self, grads: &mut [Option<Tensor4>], to: Var, g: Tensor4) {
        if self.needs(to) {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn backward_node(&self, op: &Op, out: &Tensor4, g: Tensor4, grads: &mut [Option<Tensor4>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::ScaleGrad { x, k } => {
                let mut g = g;
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                self.send(grads, *x, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                shape,
                cols,
            } => {
                let xd = self.value(*x).dims();
                let wv = self.value(*w);
                let (kk, p, co) = (shape.col_rows(), shape.col_cols(), wv.n());
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = Tensor4::zeros(self.value(*b).dims());
                        for n in 0..xd[0] {
                            for c in 0..co {
                                let row = &g.data()[(n * co + c) * p..(n * co + c + 1) * p];
                                gb.data_mut()[c] += row.iter().sum::<f64>();
                            }
                        }
                        self.send(grads, *b, gb);
                    }
                }
                if self.needs(*w) {
                    let mut gw = Tensor4::zeros(wv.dims());
                    for n in 0..xd[0] {
                        kernels::gemm(
                            co,
                            p,
                            kk,
                            &g.data()[n * co * p..(n + 1) * co * p],
                            (p as isize, 1),
                            &cols[n * kk * p..(n + 1) * kk * p],
                            (1, p as isize),
                            1.0,
                            gw.data_mut(),
                        );
                    }
                    self.send(grads, *w, gw);
                }
                if self.needs(*x) {
                    let mut gx = Tensor4::zeros(xd);
                    let mut dcol = vec![0.0; kk * p];
                    let item = xd[1] * xd[2] * xd[3];
                    for n in 0..xd[0] {
                        kernels::gemm(
                            kk,
                            co,
                            p,
                            wv.data(),
                            (1, kk as isize),
                            &g.data()[n * co * p..(n + 1) * co * p],
                            (p as isize, 1),
                            0.0,
                            &mut dcol,
                        );
                        kernels::col2im(&dcol, shape, &mut gx.data_mut()[n * item..(n + 1) * item]);
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::Relu(x) => {
                let mut g = g;
                for (gv, o) in g.data_mut().iter_mut().zip(out.data().iter()) {
                    if *o <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.send(grads, *x, g);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor4::zeros(self.value(*x).dims());
                for (gv, &idx) in g.data().iter().zip(argmax.iter()) {
                    gx.data_mut()[idx as usize] += gv;
                }
                self.send(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let d = self.value(*x).dims();
                let mut gx = Tensor4::zeros(d);
                kernels::upsample2_backward(g.data(), d[0] * d[1], d[2], d[3], gx.data_mut());
                self.send(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Concat(a, b) => {
                let (da, db) = (self.value(*a).dims(), self.value(*b).dims());
                let (ia, ib) = (da[1] * da[2] * da[3], db[1] * db[2] * db[3]);
                let mut ga = Vec::with_capacity(da[0] * ia);
                let mut gb = Vec::with_capacity(db[0] * ib);
                for n in 0..da[0] {
                    let row = &g.data()[n * (ia + ib)..(n + 1) * (ia + ib)];
                    ga.extend_from_slice(&row[..ia]);
                    gb.extend_from_slice(&row[ia..]);
                }
                self.send(grads, *a, Tensor4::from_vec(da, ga).expect("concat grad"));
                self.send(grads, *b, Tensor4::from_vec(db, gb).expect("concat grad"));
            }
            Op::ChannelScale { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let plane = (xv.h() * xv.w()).max(1);
                if self.needs(*s) {
                    let mut gs = Tensor4::zeros(sv.dims());
                    for (k, gsv) in gs.data_mut().iter_mut().enumerate() {
                        let seg = k * plane..(k + 1) * plane;
                        *gsv = xv.data()[seg.clone()]
                            .iter()
                            .zip(g.data()[seg].iter())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    self.send(grads, *s, gs);
                }
                if self.needs(*x) {
                    let mut gx = g;
                    for (k, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= sv.data()[k]);
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::Coherence { l, r, eps } => {
                let (lv, rv) = (self.value(*l), self.value(*r));
                let plane = lv.h() * lv.w();
                let mut gl = Tensor4::zeros(lv.dims());
                let mut gr = Tensor4::zeros(rv.dims());
                for k in 0..lv.n() * lv.c() {
                    let seg = k * plane..(k + 1) * plane;
                    let (a, b) = (&lv.data()[seg.clone()], &rv.data()[seg.clone()]);
                    let (s, nl, nr, denom) = kernels::cosine(a, b, *eps);
                    let gk = g.data()[k];
                    let floored = denom <= *eps;
                    for j in 0..plane {
                        let (dl, dr) = if floored {
                            (b[j] / denom, a[j] / denom)
                        } else {
                            (
                                b[j] / denom - s * a[j] / (nl * nl),
                                a[j] / denom - s * b[j] / (nr * nr),
                            )
                        };
                        gl.data_mut()[k * plane + j] = gk * dl;
                        gr.data_mut()[k * plane + j] = gk * dr;
                    }
                }
                self.send(grads, *l, gl);
                self.send(grads, *r, gr);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fan_in, nout) = (xv.n(), xv.item_len(), wv.n());
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = Tensor4::zeros(self.value(*b).dims());
                        for row in g.data().chunks(nout.max(1)) {
                            for (a, v) in gb.data_mut().iter_mut().zip(row.iter()) {
                                *a += v;
                            }
                        }
                        self.send(grads, *b, gb);
                    }
                }
                if self.needs(*w) {
                    let mut gw = Tensor4::zeros(wv.dims());
                    kernels::gemm(
                        nout,
                        n,
                        fan_in,
                        g.data(),
                        (1, nout as isize),
                        xv.data(),
                        (fan_in as isize, 1),
                        0.0,
                        gw.data_mut(),
                    );
                    self.send(grads, *w, gw);
                }
                if self.needs(*x) {
                    let mut gx = Tensor4::zeros(xv.dims());
                    kernels::gemm(
                        n,
                        nout,
                        fan_in,
                        g.data(),
                        (nout as isize, 1),
                        wv.data(),
                        (fan_in as isize, 1),
                        0.0,
                        gx.data_mut(),
                    );
                    self.send(grads, *x, gx);
                }
            }
            Op::RoiAlign { x, taps } => {
                let xv = self.value(*x);
                let (c, plane) = (xv.c(), xv.h() * xv.w());
                let (bins, n_roi) = (out.h() * out.w(), out.n());
                let mut gx = Tensor4::zeros(xv.dims());
                let dst = gx.data_mut();
                for ri in 0..n_roi {
                    let rt = &taps[ri * bins..(ri + 1) * bins];
                    for ch in 0..c {
                        let p = &mut dst[ch * plane..(ch + 1) * plane];
                        let gs = &g.data()[(ri * c + ch) * bins..(ri * c + ch + 1) * bins];
                        for (gv, t) in gs.iter().zip(rt.iter()) {
                            for q in 0..4 {
                                p[t.idx[q] as usize] += t.wt[q] * gv;
                            }
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                count,
            } => {
                let d = self.value(*logits).dims();
                let mut gl = Tensor4::zeros(d);
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    let (k, plane) = (d[1], d[2] * d[3]);
                    for n in 0..d[0] {
                        for pos in 0..plane {
                            if let Some(l) = labels[n * plane + pos] {
                                for c in 0..k {
                                    let at = (n * k + c) * plane + pos;
                                    let hot = if c == l { 1.0 } else { 0.0 };
                                    gl.data_mut()[at] = scale * (probs[at] - hot);
                                }
                            }
                        }
                    }
                }
                self.send(grads, *logits, gl);
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
                count,
            } => {
                let pv = self.value(*pred);
                let item = pv.item_len();
                let mut gp = Tensor4::zeros(pv.dims());
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    for (r, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for j in r * item..(r + 1) * item {
                            let d = pv.data()[j] - target[j];
                            let dd = if d.abs() < *beta {
                                d / beta
                            } else {
                                d.signum()
                            };
                            gp.data_mut()[j] = scale * dd;
                        }
                    }
                }
                self.send(grads, *pred, gp);
            }
            Op::WeightedSum(terms) => {
                for &(v, k) in terms {
                    self.send(grads, v, Tensor4::scalar(k * g.item()));
                }
            }
            Op::DotConst { x, weights } => {
                let d = self.value(*x).dims();
                let gi = g.item();
                let data = weights.iter().map(|w| w * gi).collect();
                self.send(grads, *x, Tensor4::from_vec(d, data).expect("dot grad"));
            }
        }
    }
}

/// Row-wise softmax over the channel axis of `(n, k, 1, 1)` logits.
pub fn softmax_rows(logits: &Tensor4) -> Vec<Vec<f64>> {
    let k = logits.c();
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}
