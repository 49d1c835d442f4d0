//! Reverse-mode differentiation over an append-only node arena.
//!
//! A [`Graph`] records one forward computation; [`Var`]s are indices into
//! it. Construction order is a topological order by definition (an op can
//! only consume vars that already exist), so the backward sweep is a single
//! reverse iteration that visits each node exactly once, accumulating into
//! per-node gradient buffers. Fan-out therefore sums gradients naturally.
//!
//! Bind trainable tensors with [`Graph::leaf`]; the graph recognises a
//! tensor bound twice (same storage) and reuses the node, so a parameter
//! always has exactly one gradient buffer. Values captured into the graph
//! share storage with the caller's tensors — binding is cheap.
//!
//! The engine is single-threaded by design: one graph per training step (or
//! per sample), built, differentiated, and dropped. Determinism comes from
//! doing everything in construction order with no reduction reordering.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose2d(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Silu(Var),
    Conv3x3 { x: Var, w: Var, b: Var, stride: usize },
    Conv1x1 { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
    AvgPool2d { x: Var, fh: usize, fw: usize },
    UpsampleNearest { x: Var, fh: usize, fw: usize },
    Concat(Var, Var),
    // Cached softmax of the logits; backward is (probs - onehot) * g.
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    SumAll(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bind a tensor as a graph input. Gradient is tracked if the tensor
    /// has `requires_grad` set. Binding the same storage again returns the
    /// existing var.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&t.buffer_id()) {
            return v;
        }
        let needs = t.requires_grad();
        let v = self.push(t.clone(), Op::Leaf, needs);
        self.bound.insert(t.buffer_id(), v);
        v
    }

    /// Bind a value the gradient should never flow into (inputs, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert!(self.nodes[v.0].value.is_scalar());
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient buffer of a var after `backward`. `None` when the node does
    /// not track gradients or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient for a bound tensor, looked up by storage identity. Zeros if
    /// the leaf tracks gradients but was never reached from the loss.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        self.bound.get(&t.buffer_id()).and_then(|&v| self.grad(v))
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs });
        Var(self.nodes.len() - 1)
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs_need: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, inputs_need))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    // ---- ops ------------------------------------------------------------

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.result(shape, data, Op::Add(a, b), needs)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.result(shape, data, Op::Mul(a, b), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.result(shape, data, Op::MulScalar(a, c), needs)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let &[m, k] = two(ta.shape(), "matmul")?;
        let &[k2, n] = two(tb.shape(), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: [{},{}] x [{},{}]", m, k, k2, n),
            ));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.result(vec![m, n], out, Op::Matmul(a, b), needs)
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[m, n] = two(ta.shape(), "transpose2d")?;
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.result(vec![n, m], out, Op::Transpose2d(a), needs)
    }

    /// Same data, new shape; products must agree.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let want: usize = shape.iter().product();
        if want != ta.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} values) cannot become {:?}", ta.shape(), ta.len(), shape),
            ));
        }
        let data = ta.data().to_vec();
        let needs = self.needs(a);
        self.result(shape.to_vec(), data, Op::Reshape(a), needs)
    }

    /// Row-wise softmax of a `[m,n]` matrix, max-shifted for stability.
    /// Non-finite inputs are a numeric error rather than NaN propagation.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let &[m, n] = two(ta.shape(), "softmax_rows")?;
        if n == 0 {
            return Err(Error::shape("softmax_rows", "zero-width rows"));
        }
        let d = ta.data();
        if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax_rows", format!("non-finite input {}", bad)));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(a);
        self.result(vec![m, n], out, Op::SoftmaxRows(a), needs)
    }

    /// x * sigmoid(x). Smooth, so finite-difference checks of anything built
    /// on top are well conditioned (no kink like a hard rectifier).
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.result(shape, data, Op::Silu(a), needs)
    }

    /// 3x3 convolution, padding 1, channels-last. Weight layout is
    /// `[3, 3, c_in, c_out]`, output `[ceil(h/stride), ceil(w/stride), c_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv3x3 stride must be >= 1".into()));
        }
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let &[h, wd, ci] = three(tx.shape(), "conv3x3")?;
        let ws = tw.shape();
        let ok = ws.len() == 4 && ws[0] == 3 && ws[1] == 3 && ws[2] == ci;
        if !ok || tb.shape().len() != 1 || tb.shape()[0] != ws[3] {
            return Err(Error::shape(
                "conv3x3",
                format!(
                    "input {:?} needs weight [3,3,{},c_out] and matching bias, got {:?} / {:?}",
                    tx.shape(),
                    ci,
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let co = ws[3];
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let (dx, dw, db) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; ho * wo * co];
        for oh in 0..ho {
            for ow in 0..wo {
                let acc = &mut out[(oh * wo + ow) * co..(oh * wo + ow + 1) * co];
                acc.copy_from_slice(db);
                for kh in 0..3usize {
                    let ih = (oh * stride + kh) as isize - 1;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..3usize {
                        let iw = (ow * stride + kw) as isize - 1;
                        if iw < 0 || iw >= wd as isize {
                            continue;
                        }
                        let xrow = &dx[((ih as usize * wd) + iw as usize) * ci..][..ci];
                        let wbase = (kh * 3 + kw) * ci * co;
                        for (c, &xv) in xrow.iter().enumerate() {
                            let wrow = &dw[wbase + c * co..][..co];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.result(vec![ho, wo, co], out, Op::Conv3x3 { x, w, b, stride }, needs)
    }

    /// Pointwise (1x1) convolution: per-pixel linear map `c_in -> c_out`.
    /// Weight `[c_in, c_out]`, bias `[c_out]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let &[h, wd, ci] = three(tx.shape(), "conv1x1")?;
        let ws = tw.shape();
        if ws.len() != 2 || ws[0] != ci || tb.shape().len() != 1 || tb.shape()[0] != ws[1] {
            return Err(Error::shape(
                "conv1x1",
                format!(
                    "input channels {} need weight [{},c_out] and matching bias, got {:?} / {:?}",
                    ci,
                    ci,
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let co = ws[1];
        let (dx, dw, db) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; h * wd * co];
        for p in 0..h * wd {
            let xrow = &dx[p * ci..(p + 1) * ci];
            let orow = &mut out[p * co..(p + 1) * co];
            orow.copy_from_slice(db);
            for (c, &xv) in xrow.iter().enumerate() {
                let wrow = &dw[c * co..(c + 1) * co];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.result(vec![h, wd, co], out, Op::Conv1x1 { x, w, b }, needs)
    }

    /// Vector-in, vector-out affine map. `x: [i]`, `w: [i,o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let &[i] = one(tx.shape(), "linear")?;
        let ws = tw.shape();
        if ws.len() != 2 || ws[0] != i || tb.shape().len() != 1 || tb.shape()[0] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input [{}] needs weight [{},o] and bias [o], got {:?} / {:?}", i, i, tw.shape(), tb.shape()),
            ));
        }
        let o = ws[1];
        let (dx, dw, db) = (tx.data(), tw.data(), tb.data());
        let mut out = db.to_vec();
        for (c, &xv) in dx.iter().enumerate() {
            let wrow = &dw[c * o..(c + 1) * o];
            for (acc, &wv) in out.iter_mut().zip(wrow) {
                *acc += xv * wv;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.result(vec![o], out, Op::Linear { x, w, b }, needs)
    }

    /// `[h,w,c] -> [c]`, mean over all pixels.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[h, w, c] = three(tx.shape(), "global_avg_pool")?;
        let d = tx.data();
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; c];
        for p in 0..h * w {
            for (o, &v) in out.iter_mut().zip(&d[p * c..(p + 1) * c]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let needs = self.needs(x);
        self.result(vec![c], out, Op::GlobalAvgPool(x), needs)
    }

    /// Block-mean downscale by integer factors; dimensions must divide.
    pub fn avg_pool2d(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let tx = self.value(x);
        let &[h, w, c] = three(tx.shape(), "avg_pool2d")?;
        if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("factors ({},{}) must divide spatial dims ({},{})", fh, fw, h, w),
            ));
        }
        let (ho, wo) = (h / fh, w / fw);
        let d = tx.data();
        let inv = 1.0 / (fh * fw) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for oh in 0..ho {
            for ow in 0..wo {
                let orow = &mut out[(oh * wo + ow) * c..(oh * wo + ow + 1) * c];
                for ih in oh * fh..(oh + 1) * fh {
                    for iw in ow * fw..(ow + 1) * fw {
                        for (o, &v) in orow.iter_mut().zip(&d[(ih * w + iw) * c..(ih * w + iw + 1) * c]) {
                            *o += v;
                        }
                    }
                }
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let needs = self.needs(x);
        self.result(vec![ho, wo, c], out, Op::AvgPool2d { x, fh, fw }, needs)
    }

    /// Nearest-neighbour upscale by integer factors (each pixel repeated).
    pub fn upsample_nearest(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let tx = self.value(x);
        let &[h, w, c] = three(tx.shape(), "upsample_nearest")?;
        if fh == 0 || fw == 0 {
            return Err(Error::shape("upsample_nearest", "factors must be >= 1"));
        }
        let (ho, wo) = (h * fh, w * fw);
        let d = tx.data();
        let mut out = vec![0.0; ho * wo * c];
        for oh in 0..ho {
            for ow in 0..wo {
                let src = ((oh / fh) * w + ow / fw) * c;
                out[(oh * wo + ow) * c..(oh * wo + ow + 1) * c].copy_from_slice(&d[src..src + c]);
            }
        }
        let needs = self.needs(x);
        self.result(vec![ho, wo, c], out, Op::UpsampleNearest { x, fh, fw }, needs)
    }

    /// Concatenate two vectors. Either side may be empty.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let &[n] = one(ta.shape(), "concat")?;
        let &[m] = one(tb.shape(), "concat")?;
        let mut data = Vec::with_capacity(n + m);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let needs = self.needs(a) || self.needs(b);
        self.result(vec![n + m], data, Op::Concat(a, b), needs)
    }

    /// Cross-entropy of a logit vector against a class index, computed as
    /// `logsumexp(logits) - logits[target]` so extreme logits stay exact.
    /// Requires at least two categories.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let tl = self.value(logits);
        let &[k] = one(tl.shape(), "cross_entropy")?;
        if k < 2 {
            return Err(Error::shape("cross_entropy", format!("needs >= 2 categories, got {}", k)));
        }
        if target >= k {
            return Err(Error::Contract(format!(
                "cross_entropy: target index {} out of range for {} categories",
                target, k
            )));
        }
        let d = tl.data();
        if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric("cross_entropy", format!("non-finite logit {}", bad)));
        }
        let mx = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // ln(sum exp(l - mx)) = ln_1p(sum of the non-max terms): the max term
        // contributes exactly 1, so the small-argument path stays accurate.
        let mut rest = 0.0;
        let mut seen_max = false;
        for &v in d {
            if !seen_max && v == mx {
                seen_max = true;
                continue;
            }
            rest += (v - mx).exp();
        }
        // Grouped so a confident correct logit (target == max) cancels exactly
        // instead of losing the tiny ln_1p term inside `mx + ...`.
        let loss = (mx - d[target]) + rest.ln_1p();
        let lse = mx + rest.ln_1p();
        let probs = d.iter().map(|&v| (v - lse).exp()).collect();
        let needs = self.needs(logits);
        self.result(vec![], vec![loss], Op::CrossEntropy { logits, target, probs }, needs)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum();
        let needs = self.needs(x);
        self.result(vec![], vec![s], Op::SumAll(x), needs)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. After this, every reachable
    /// gradient-tracking leaf has a gradient; tracked leaves that do not
    /// feed the loss keep a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = if node.needs { Some(vec![0.0; node.value.len()]) } else { None };
        }
        if !self.nodes[loss.0].needs {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().expect("needs-node without grad buffer");
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(before, a, g, |gi, gv| gi + gv);
                    accumulate(before, b, g, |gi, gv| gi + gv);
                }
                Op::Mul(a, b) => {
                    // values read before mutating grads; a and b may alias
                    let da = before[a.0].value.clone();
                    let db = before[b.0].value.clone();
                    if before[a.0].needs {
                        let ga = before[a.0].grad.as_mut().unwrap();
                        for ((gi, &gv), &bv) in ga.iter_mut().zip(g).zip(db.data()) {
                            *gi += gv * bv;
                        }
                    }
                    if before[b.0].needs {
                        let gb = before[b.0].grad.as_mut().unwrap();
                        for ((gi, &gv), &av) in gb.iter_mut().zip(g).zip(da.data()) {
                            *gi += gv * av;
                        }
                    }
                }
                Op::MulScalar(a, c) => {
                    accumulate(before, a, g, |gi, gv| gi + gv * c);
                }
                Op::Matmul(a, b) => {
                    let [m, k] = [before[a.0].value.shape()[0], before[a.0].value.shape()[1]];
                    let n = before[b.0].value.shape()[1];
                    let da = before[a.0].value.clone();
                    let db = before[b.0].value.clone();
                    if before[a.0].needs {
                        let ga = before[a.0].grad.as_mut().unwrap();
                        let bd = db.data();
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                ga[i2 * k + p] += s;
                            }
                        }
                    }
                    if before[b.0].needs {
                        let gb = before[b.0].grad.as_mut().unwrap();
                        let ad = da.data();
                        for i2 in 0..m {
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            for p in 0..k {
                                let aip = ad[i2 * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += aip * grow[j];
                                }
                            }
                        }
                    }
                }
                Op::Transpose2d(a) => {
                    if before[a.0].needs {
                        let [m, n] = [before[a.0].value.shape()[0], before[a.0].value.shape()[1]];
                        let ga = before[a.0].grad.as_mut().unwrap();
                        for i2 in 0..m {
                            for j in 0..n {
                                ga[i2 * n + j] += g[j * m + i2];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    accumulate(before, a, g, |gi, gv| gi + gv);
                }
                Op::SoftmaxRows(a) => {
                    if before[a.0].needs {
                        let y = node.value.clone();
                        let n = y.shape()[1];
                        let ga = before[a.0].grad.as_mut().unwrap();
                        let yd = y.data();
                        for (grow, (yrow, garow)) in
                            g.chunks(n).zip(yd.chunks(n).zip(ga.chunks_mut(n)))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                            for ((gi, &yv), &gv) in garow.iter_mut().zip(yrow).zip(grow) {
                                *gi += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::Silu(a) => {
                    if before[a.0].needs {
                        let xa = before[a.0].value.clone();
                        let ga = before[a.0].grad.as_mut().unwrap();
                        for ((gi, &gv), &x) in ga.iter_mut().zip(g).zip(xa.data()) {
                            let s = sigmoid(x);
                            *gi += gv * s * (1.0 + x * (1.0 - s));
                        }
                    }
                }
                Op::Conv3x3 { x, w, b, stride } => {
                    backward_conv3x3(before, g, node.value.shape(), x, w, b, stride);
                }
                Op::Conv1x1 { x, w, b } => {
                    let ci = before[x.0].value.shape()[2];
                    let co = before[w.0].value.shape()[1];
                    let pixels = before[x.0].value.len() / ci;
                    let dx = before[x.0].value.clone();
                    let dw = before[w.0].value.clone();
                    for p in 0..pixels {
                        let grow = &g[p * co..(p + 1) * co];
                        if before[x.0].needs {
                            let gx = before[x.0].grad.as_mut().unwrap();
                            for c in 0..ci {
                                let wrow = &dw.data()[c * co..(c + 1) * co];
                                let mut s = 0.0;
                                for j in 0..co {
                                    s += wrow[j] * grow[j];
                                }
                                gx[p * ci + c] += s;
                            }
                        }
                        if before[w.0].needs {
                            let gw = before[w.0].grad.as_mut().unwrap();
                            let xrow = &dx.data()[p * ci..(p + 1) * ci];
                            for (c, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let gwrow = &mut gw[c * co..(c + 1) * co];
                                for j in 0..co {
                                    gwrow[j] += xv * grow[j];
                                }
                            }
                        }
                        if before[b.0].needs {
                            let gb = before[b.0].grad.as_mut().unwrap();
                            for j in 0..co {
                                gb[j] += grow[j];
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let i = before[x.0].value.shape()[0];
                    let o = before[w.0].value.shape()[1];
                    let dx = before[x.0].value.clone();
                    let dw = before[w.0].value.clone();
                    if before[x.0].needs {
                        let gx = before[x.0].grad.as_mut().unwrap();
                        for c in 0..i {
                            let wrow = &dw.data()[c * o..(c + 1) * o];
                            let mut s = 0.0;
                            for j in 0..o {
                                s += wrow[j] * g[j];
                            }
                            gx[c] += s;
                        }
                    }
                    if before[w.0].needs {
                        let gw = before[w.0].grad.as_mut().unwrap();
                        for (c, &xv) in dx.data().iter().enumerate() {
                            let gwrow = &mut gw[c * o..(c + 1) * o];
                            for j in 0..o {
                                gwrow[j] += xv * g[j];
                            }
                        }
                    }
                    if before[b.0].needs {
                        let gb = before[b.0].grad.as_mut().unwrap();
                        for j in 0..o {
                            gb[j] += g[j];
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    if before[x.0].needs {
                        let [h, w2, c] = [
                            before[x.0].value.shape()[0],
                            before[x.0].value.shape()[1],
                            before[x.0].value.shape()[2],
                        ];
                        let inv = 1.0 / (h * w2) as f64;
                        let gx = before[x.0].grad.as_mut().unwrap();
                        for p in 0..h * w2 {
                            for j in 0..c {
                                gx[p * c + j] += g[j] * inv;
                            }
                        }
                    }
                }
                Op::AvgPool2d { x, fh, fw } => {
                    if before[x.0].needs {
                        let [_, w2, c] = [
                            before[x.0].value.shape()[0],
                            before[x.0].value.shape()[1],
                            before[x.0].value.shape()[2],
                        ];
                        let wo = w2 / fw;
                        let inv = 1.0 / (fh * fw) as f64;
                        let gx = before[x.0].grad.as_mut().unwrap();
                        for (pix, gi) in gx.chunks_mut(c).enumerate() {
                            let (ih, iw) = (pix / w2, pix % w2);
                            let src = ((ih / fh) * wo + iw / fw) * c;
                            for j in 0..c {
                                gi[j] += g[src + j] * inv;
                            }
                        }
                    }
                }
                Op::UpsampleNearest { x, fh, fw } => {
                    if before[x.0].needs {
                        let [h, w2, c] = [
                            before[x.0].value.shape()[0],
                            before[x.0].value.shape()[1],
                            before[x.0].value.shape()[2],
                        ];
                        let wo = w2 * fw;
                        let gx = before[x.0].grad.as_mut().unwrap();
                        for oh in 0..h * fh {
                            for ow in 0..wo {
                                let dst = ((oh / fh) * w2 + ow / fw) * c;
                                let grow = &g[(oh * wo + ow) * c..(oh * wo + ow + 1) * c];
                                for j in 0..c {
                                    gx[dst + j] += grow[j];
                                }
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let n = before[a.0].value.len();
                    accumulate(before, a, &g[..n], |gi, gv| gi + gv);
                    accumulate(before, b, &g[n..], |gi, gv| gi + gv);
                }
                Op::CrossEntropy { logits, target, ref probs } => {
                    if before[logits.0].needs {
                        let gl = before[logits.0].grad.as_mut().unwrap();
                        let gs = g[0];
                        for (j, (gi, &p)) in gl.iter_mut().zip(probs).enumerate() {
                            let ind = if j == target { 1.0 } else { 0.0 };
                            *gi += gs * (p - ind);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gs = g[0];
                    accumulate(before, x, &[], |gi, _| gi + gs);
                }
            }
        }
        Ok(())
    }
}

/// Add into an input's gradient buffer. When `g` is empty the combine
/// closure is expected to ignore its second argument (broadcast case).
fn accumulate(nodes: &mut [Node], v: Var, g: &[f64], combine: impl Fn(f64, f64) -> f64) {
    if !nodes[v.0].needs {
        return;
    }
    let buf = nodes[v.0].grad.as_mut().expect("needs-node without grad buffer");
    if g.is_empty() {
        for gi in buf.iter_mut() {
            *gi = combine(*gi, 0.0);
        }
    } else {
        debug_assert_eq!(buf.len(), g.len());
        for (gi, &gv) in buf.iter_mut().zip(g) {
            *gi = combine(*gi, gv);
        }
    }
}

fn backward_conv3x3(nodes: &mut [Node], g: &[f64], out_shape: &[usize], x: Var, w: Var, b: Var, stride: usize) {
    let [ho, wo, co] = [out_shape[0], out_shape[1], out_shape[2]];
    let [h, wd, ci] = [
        nodes[x.0].value.shape()[0],
        nodes[x.0].value.shape()[1],
        nodes[x.0].value.shape()[2],
    ];
    let dx = nodes[x.0].value.clone();
    let dw = nodes[w.0].value.clone();
    let need_x = nodes[x.0].needs;
    let need_w = nodes[w.0].needs;
    let need_b = nodes[b.0].needs;

    if need_b {
        let gb = nodes[b.0].grad.as_mut().unwrap();
        for grow in g.chunks(co) {
            for (gi, &gv) in gb.iter_mut().zip(grow) {
                *gi += gv;
            }
        }
    }
    if !need_x && !need_w {
        return;
    }
    // One pass over output positions, pushing into grad-x and grad-w. The
    // two buffers belong to different nodes, so take them out, work, put back.
    let mut gx = if need_x { nodes[x.0].grad.take() } else { None };
    let mut gw = if need_w { nodes[w.0].grad.take() } else { None };
    for oh in 0..ho {
        for ow in 0..wo {
            let grow = &g[(oh * wo + ow) * co..(oh * wo + ow + 1) * co];
            for kh in 0..3usize {
                let ih = (oh * stride + kh) as isize - 1;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kw in 0..3usize {
                    let iw = (ow * stride + kw) as isize - 1;
                    if iw < 0 || iw >= wd as isize {
                        continue;
                    }
                    let xoff = ((ih as usize * wd) + iw as usize) * ci;
                    let wbase = (kh * 3 + kw) * ci * co;
                    if let Some(gx) = gx.as_mut() {
                        let wd2 = dw.data();
                        for c in 0..ci {
                            let wrow = &wd2[wbase + c * co..][..co];
                            let mut s = 0.0;
                            for j in 0..co {
                                s += wrow[j] * grow[j];
                            }
                            gx[xoff + c] += s;
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xd = dx.data();
                        for c in 0..ci {
                            let xv = xd[xoff + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw[wbase + c * co..][..co];
                            for j in 0..co {
                                gwrow[j] += xv * grow[j];
                            }
                        }
                    }
                }
            }
        }
    }
    if need_x {
        nodes[x.0].grad = gx;
    }
    if need_w {
        nodes[w.0].grad = gw;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn one<'a>(shape: &'a [usize], op: &'static str) -> Result<&'a [usize; 1]> {
    shape.try_into().map_err(|_| Error::shape(op, format!("expected rank 1, got {:?}", shape)))
}

fn two<'a>(shape: &'a [usize], op: &'static str) -> Result<&'a [usize; 2]> {
    shape.try_into().map_err(|_| Error::shape(op, format!("expected rank 2, got {:?}", shape)))
}

fn three<'a>(shape: &'a [usize], op: &'static str) -> Result<&'a [usize; 3]> {
    shape.try_into().map_err(|_| Error::shape(op, format!("expected rank 3, got {:?}", shape)))
}
