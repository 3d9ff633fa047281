//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Nodes that do not depend on a gradient-carrying leaf are
//! skipped during the backward sweep.

use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatCols(Var, Var),
    ModConv {
        x: Var,
        w: Var,
        style: Option<Var>,
        demod: bool,
        // Per-sample effective weights and demodulation coefficients.
        eff: Vec<f64>,
        dcoef: Vec<f64>,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    AvgPool2(Var),
    MeanSpatial(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SliceBatch {
        x: Var,
        index: usize,
    },
    Separable {
        x: Var,
        rows: Tensor,
        cols: Tensor,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of `like`'s shape when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x @ w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, din) = (xv.dim(0), xv.dim(1));
        let dout = wv.dim(0);
        assert_eq!(wv.dim(1), din, "linear: input width mismatch");
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = xv.row(r);
            for o in 0..dout {
                let wr = wv.row(o);
                out[r * dout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..n {
                for o in 0..dout {
                    out[r * dout + o] += bv[o];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.dim(0);
        assert_eq!(bv.dim(0), n, "concat: row mismatch");
        let (da, db) = (av.dim(1), bv.dim(1));
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n, da + db], out), Op::ConcatCols(a, b), rg)
    }

    /// Same-padded stride-1 convolution. With `style = Some(s)` the kernel is
    /// scaled per sample and input channel by `s: [n, cin]`, then optionally
    /// demodulated to unit norm per output channel.
    pub fn mod_conv(&mut self, x: Var, w: Var, style: Option<Var>, demod: bool) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        assert_eq!(wv.dim(1), cin, "conv: channel mismatch");
        let geom = ConvGeom {
            cin,
            cout,
            height: h,
            width: wd,
            kernel: k,
        };
        let wlen = wv.numel();
        let plane_in = cin * h * wd;
        let plane_out = cout * h * wd;
        let mut out = vec![0.0; n * plane_out];
        let mut eff = Vec::new();
        let mut dcoef = Vec::new();
        match style {
            None => {
                for s in 0..n {
                    tensor::conv_forward(
                        geom,
                        &xv.data()[s * plane_in..(s + 1) * plane_in],
                        wv.data(),
                        &mut out[s * plane_out..(s + 1) * plane_out],
                    );
                }
            }
            Some(sv) => {
                let st = self.value(sv);
                assert_eq!(st.shape(), &[n, cin], "conv: style shape");
                eff = vec![0.0; n * wlen];
                dcoef = vec![1.0; n * cout];
                let per_o = cin * k * k;
                for s in 0..n {
                    let srow = st.row(s);
                    let e = &mut eff[s * wlen..(s + 1) * wlen];
                    for o in 0..cout {
                        let mut ss = 0.0;
                        for i in 0..cin {
                            for kk in 0..k * k {
                                let idx = o * per_o + i * k * k + kk;
                                let u = wv.data()[idx] * srow[i];
                                e[idx] = u;
                                ss += u * u;
                            }
                        }
                        if demod {
                            let d = 1.0 / (ss + 1e-8).sqrt();
                            dcoef[s * cout + o] = d;
                            for v in &mut e[o * per_o..(o + 1) * per_o] {
                                *v *= d;
                            }
                        }
                    }
                    tensor::conv_forward(
                        geom,
                        &xv.data()[s * plane_in..(s + 1) * plane_in],
                        e,
                        &mut out[s * plane_out..(s + 1) * plane_out],
                    );
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || style.is_some_and(|s| self.rg(s));
        self.push(
            Tensor::from_vec(&[n, cout, h, wd], out),
            Op::ModConv {
                x,
                w,
                style,
                demod,
                eff,
                dcoef,
            },
            rg,
        )
    }

    pub fn conv(&mut self, x: Var, w: Var) -> Var {
        self.mod_conv(x, w, None, false)
    }

    /// Adds `b: [c]` along axis 1 of `x: [n, c, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b).data();
        let (n, c) = (xv.dim(0), xv.dim(1));
        let inner = xv.numel() / (n * c).max(1);
        let mut out = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for v in &mut out.data_mut()[off..off + inner] {
                    *v += bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::ChannelBias { x, b }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| tensor::leaky_relu(v, slope));
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(tensor::softplus);
        let rg = self.rg(x);
        self.push(out, Op::Softplus(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for s in 0..n {
            tensor::avg_pool2(
                c,
                h,
                w,
                &xv.data()[s * c * h * w..(s + 1) * c * h * w],
                &mut out[s * c * oh * ow..(s + 1) * c * oh * ow],
            );
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::AvgPool2(x), rg)
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let inner = xv.numel() / (n * c);
        let out: Vec<f64> = xv
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], out), Op::MeanSpatial(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "sub: shape mismatch");
        out.axpy(-1.0, self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `[n, d] -> [n, 1]` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        let out: Vec<f64> = (0..n).map(|r| xv.row(r).iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, 1], out), Op::SumCols(x), rg)
    }

    /// The `index`-th sample of a batch, keeping a leading axis of 1.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::from_vec(&shape, xv.row(index).to_vec());
        let rg = self.rg(x);
        self.push(out, Op::SliceBatch { x, index }, rg)
    }

    /// Applies `rows · X · colsᵀ` to every `[h, w]` plane of `x: [n, c, h, w]`.
    pub fn separable(&mut self, x: Var, rows: Tensor, cols: Tensor) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        assert_eq!(rows.dim(1), h, "separable: row operator width");
        assert_eq!(cols.dim(1), w, "separable: column operator width");
        let (oh, ow) = (rows.dim(0), cols.dim(0));
        let mut out = vec![0.0; n * c * oh * ow];
        for (plane, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            apply_separable(plane, h, w, &rows, &cols, dst);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out),
            Op::Separable { x, rows, cols },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits: [n, k]` against class indices.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), n, "xent: target count");
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[targets[r]];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    /// Backpropagates an explicit cotangent `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * din];
                    for r in 0..n {
                        let gr = g.row(r);
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, wv) in dxr.iter_mut().zip(wv.row(o)) {
                                *d += go * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, din], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for r in 0..n {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for o in 0..dout {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *d += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(&[dout, din], dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..n {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[dout], db));
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (da, db) = (self.value(*a).dim(1), self.value(*b).dim(1));
                let n = g.dim(0);
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for r in 0..n {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, da], ga));
                self.accumulate(grads, *b, Tensor::from_vec(&[n, db], gb));
            }
            Op::ModConv {
                x,
                w,
                style,
                demod,
                eff,
                dcoef,
            } => self.mod_conv_backward(*x, *w, *style, *demod, eff, dcoef, g, grads),
            Op::ChannelBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let (n, c) = (g.dim(0), g.dim(1));
                    let inner = g.numel() / (n * c);
                    let mut db = vec![0.0; c];
                    for (j, chunk) in g.data().chunks(inner).enumerate() {
                        db[j % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[c], db));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| if *v >= 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Tanh(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Softplus(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, v)| gv * tensor::sigmoid(*v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::Abs(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, v)| {
                        if *v > 0.0 {
                            *gv
                        } else if *v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
            }
            Op::AvgPool2(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; xv.numel()];
                for p in 0..n * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let v = 0.25 * gp[y * ow + xx];
                            dp[2 * y * w + 2 * xx] += v;
                            dp[2 * y * w + 2 * xx + 1] += v;
                            dp[(2 * y + 1) * w + 2 * xx] += v;
                            dp[(2 * y + 1) * w + 2 * xx + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::MeanSpatial(x) => {
                let xv = self.value(*x);
                let inner = xv.numel() / g.numel();
                let mut dx = Vec::with_capacity(xv.numel());
                for gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / inner as f64, inner));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape(), d));
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape(), d));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.item() / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::SumCols(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.dim(0), xv.dim(1));
                let mut dx = Vec::with_capacity(n * d);
                for r in 0..n {
                    dx.extend(std::iter::repeat_n(g.data()[r], d));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, d], dx));
            }
            Op::SliceBatch { x, index } => {
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    dx.row_mut(*index).copy_from_slice(g.data());
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Separable { x, rows, cols } => {
                let xv = self.value(*x);
                let (h, w) = (xv.dim(2), xv.dim(3));
                let (oh, ow) = (rows.dim(0), cols.dim(0));
                let rows_t = transpose(rows);
                let cols_t = transpose(cols);
                let mut dx = vec![0.0; xv.numel()];
                for (gp, dp) in g.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
                    apply_separable(gp, oh, ow, &rows_t, &cols_t, dp);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.dim(0), lv.dim(1));
                let scale = g.item() / n as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, k], d));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn mod_conv_backward(
        &self,
        x: Var,
        w: Var,
        style: Option<Var>,
        demod: bool,
        eff: &[f64],
        dcoef: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (cout, k) = (wv.dim(0), wv.dim(2));
        let geom = ConvGeom {
            cin,
            cout,
            height: h,
            width: wd,
            kernel: k,
        };
        let wlen = wv.numel();
        let plane_in = cin * h * wd;
        let plane_out = cout * h * wd;
        let need_w = self.rg(w) || style.is_some_and(|s| self.rg(s));

        if self.rg(x) {
            let mut dx = vec![0.0; xv.numel()];
            for s in 0..n {
                let weights = match style {
                    None => wv.data(),
                    Some(_) => &eff[s * wlen..(s + 1) * wlen],
                };
                tensor::conv_backward_input(
                    geom,
                    &g.data()[s * plane_out..(s + 1) * plane_out],
                    weights,
                    &mut dx[s * plane_in..(s + 1) * plane_in],
                );
            }
            self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx));
        }
        if !need_w {
            return;
        }
        let mut dw = vec![0.0; wlen];
        match style {
            None => {
                for s in 0..n {
                    tensor::conv_backward_weight(
                        geom,
                        &xv.data()[s * plane_in..(s + 1) * plane_in],
                        &g.data()[s * plane_out..(s + 1) * plane_out],
                        &mut dw,
                    );
                }
            }
            Some(sv) => {
                let st = self.value(sv);
                let per_o = cin * k * k;
                let mut dstyle = vec![0.0; n * cin];
                let mut geff = vec![0.0; wlen];
                for s in 0..n {
                    geff.iter_mut().for_each(|v| *v = 0.0);
                    tensor::conv_backward_weight(
                        geom,
                        &xv.data()[s * plane_in..(s + 1) * plane_in],
                        &g.data()[s * plane_out..(s + 1) * plane_out],
                        &mut geff,
                    );
                    let srow = st.row(s);
                    let e = &eff[s * wlen..(s + 1) * wlen];
                    for o in 0..cout {
                        let range = o * per_o..(o + 1) * per_o;
                        let d = dcoef[s * cout + o];
                        // e = u * d, so u = e / d; d/du of (u d) handled below.
                        let proj = if demod {
                            geff[range.clone()]
                                .iter()
                                .zip(&e[range.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                        } else {
                            0.0
                        };
                        for i in 0..cin {
                            for kk in 0..k * k {
                                let idx = o * per_o + i * k * k + kk;
                                // du = d * (g' - e * <g', e>)  since e = u d.
                                let du = if demod {
                                    d * (geff[idx] - e[idx] * proj)
                                } else {
                                    geff[idx]
                                };
                                dw[idx] += du * srow[i];
                                dstyle[s * cin + i] += du * wv.data()[idx];
                            }
                        }
                    }
                }
                self.accumulate(grads, sv, Tensor::from_vec(&[n, cin], dstyle));
            }
        }
        self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw));
    }
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.dim(0), m.dim(1));
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// `dst = rows · src · colsᵀ` for a single `[h, w]` plane.
pub(crate) fn apply_separable(
    src: &[f64],
    h: usize,
    w: usize,
    rows: &Tensor,
    cols: &Tensor,
    dst: &mut [f64],
) {
    let (oh, ow) = (rows.dim(0), cols.dim(0));
    // tmp = src · colsᵀ : [h, ow]
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let srow = &src[y * w..(y + 1) * w];
        for j in 0..ow {
            tmp[y * ow + j] = srow.iter().zip(cols.row(j)).map(|(a, b)| a * b).sum();
        }
    }
    for i in 0..oh {
        let rrow = rows.row(i);
        let drow = &mut dst[i * ow..(i + 1) * ow];
        drow.iter_mut().for_each(|v| *v = 0.0);
        for (y, &r) in rrow.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            for j in 0..ow {
                drow[j] += r * tmp[y * ow + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Central differences of a scalar function of one leaf tensor.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let mut diff = a.clone();
        diff.axpy(-1.0, b);
        diff.sq_norm().sqrt() / a.sq_norm().sqrt().max(b.sq_norm().sqrt()).max(1e-12)
    }

    #[test]
    fn modulated_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let s = Tensor::randn(&[2, 3], 1.0, &mut rng).map(|v| v + 1.5);
        let probe = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
        for demod in [false, true] {
            let eval = |xx: &Tensor, ww: &Tensor, ss: &Tensor| -> (f64, Gradients, [Var; 3]) {
                let mut g = Graph::new();
                let xv = g.input(xx.clone());
                let wv = g.input(ww.clone());
                let sv = g.input(ss.clone());
                let y = g.mod_conv(xv, wv, Some(sv), demod);
                let p = g.constant(probe.clone());
                let m = g.mul(y, p);
                let l = g.sum(m);
                let val = g.value(l).item();
                (val, g.backward(l), [xv, wv, sv])
            };
            let (_, grads, vars) = eval(&x, &w, &s);
            let gx = numeric_grad(&|t| eval(t, &w, &s).0, &x);
            let gw = numeric_grad(&|t| eval(&x, t, &s).0, &w);
            let gs = numeric_grad(&|t| eval(&x, &w, t).0, &s);
            assert!(rel_err(grads.get(vars[0]).unwrap(), &gx) < 1e-7);
            assert!(rel_err(grads.get(vars[1]).unwrap(), &gw) < 1e-7);
            assert!(rel_err(grads.get(vars[2]).unwrap(), &gs) < 1e-7);
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let rows = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let cols = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let f = |xx: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let v = g.input(xx.clone());
            let a = g.leaky_relu(v, 0.2);
            let p = g.avg_pool2(a);
            let t = g.tanh(p);
            let sp = g.separable(v, rows.clone(), cols.clone());
            let sp = g.softplus(sp);
            let sp = g.mean_spatial(sp);
            let m = g.mean_spatial(t);
            let c = g.concat_cols(m, sp);
            let s1 = g.slice_batch(c, 1);
            let s1 = g.abs(s1);
            let l1 = g.sum(s1);
            let l2 = g.mean(c);
            let l = g.add(l1, l2);
            let val = g.value(l).item();
            let grads = g.backward(l);
            (val, grads.get(v).unwrap().clone())
        };
        let (_, analytic) = f(&x);
        let numeric = numeric_grad(&|t| f(t).0, &x);
        assert!(rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn linear_and_xent_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let f = |ww: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.input(ww.clone());
            let bv = g.input(b.clone());
            let y = g.linear(xv, wv, Some(bv));
            let l = g.softmax_xent(y, &[0, 3, 4]);
            let val = g.value(l).item();
            (val, g.backward(l).get(wv).unwrap().clone())
        };
        let (_, analytic) = f(&w);
        let numeric = numeric_grad(&|t| f(t).0, &w);
        assert!(rel_err(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.input(Tensor::full(&[2], 2.0));
        let m = g.mul(c, x);
        let l = g.sum(m);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
