//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Parameters are read straight out of a [`ParamStore`]; every use of the
//! same [`ParamId`] maps to one tape node, so gradients of tied layers
//! accumulate automatically.

use std::collections::{HashMap, HashSet};

use crate::error::{dim_err, Result};
use crate::kernels::{self, ConvDims, Geometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, d: ConvDims },
    ConvT { x: Var, w: Var, b: Option<Var>, d: ConvDims },
    Linear { x: Var, w: Var, b: Option<Var>, n: usize, din: usize, dout: usize },
    MaxPool { x: Var, arg: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F>, n: usize, c: usize, p: usize, training: bool },
    Act { x: Var, kind: Pointwise },
    Softmax { x: Var, rows: usize, cols: usize },
    Dropout { x: Var, mask: Vec<F> },
    Add { a: Var, b: Var },
    Reshape { x: Var },
    Scale { x: Var, c: F },
    Sum { xs: Vec<Var> },
    HalfMeanSquare { x: Var },
    L1Mean { a: Var, b: Var },
    MeanLog { x: Var, eps: F },
    MeanLog1m { x: Var, eps: F },
    Nll { probs: Var, labels: Vec<usize>, classes: usize, eps: F },
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    grad: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Grads<F> {
    pub map: HashMap<ParamId, Tensor<F>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.map.get(&id)
    }
    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

/// Recorded computation. Forward values are computed eagerly.
pub struct Tape<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    all_frozen: bool,
    buffer_updates: Vec<(ParamId, Vec<F>)>,
}

impl<'s, F: Real> Tape<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            all_frozen: false,
            buffer_updates: Vec::new(),
        }
    }

    /// A tape on which no parameter requires a gradient.
    pub fn no_grad(store: &'s ParamStore<F>) -> Self {
        let mut t = Self::new(store);
        t.all_frozen = true;
        t
    }

    /// Excludes parameters from differentiation. Must precede their first use.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant copy of another node's value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let grad = !self.all_frozen && !self.frozen.contains(&id) && self.store.is_trainable(id);
        self.nodes.push(Node { value: None, op: Op::Param(id), grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Running-statistic updates queued by training-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<F>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn queue_buffer_update(&mut self, id: ParamId, v: Vec<F>) {
        self.buffer_updates.push((id, v));
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 {
            return Err(dim_err!("conv weight {:?} vs input channels {}", self.shape(w), c_in));
        }
        let g = Geometry { kernel: k, stride, pad };
        let (oh, ow) = match (g.conv_out(h), g.conv_out(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(dim_err!("kernel {} does not fit {}x{} (pad {})", k, h, wd, pad)),
        };
        let d = ConvDims { n, c_in, h, w: wd, c_out, oh, ow, g };
        let y = kernels::conv2d(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), d);
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::from_vec(&[n, c_out, oh, ow], y)?, Op::Conv { x, w, b, d }, grad))
    }

    pub fn conv_t2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (wc, c_out, k, k2) = self.value(w).dims4()?;
        if wc != c_in || k != k2 {
            return Err(dim_err!("deconv weight {:?} vs input channels {}", self.shape(w), c_in));
        }
        let g = Geometry { kernel: k, stride, pad };
        let (oh, ow) = match (g.deconv_out(h, output_pad), g.deconv_out(wd, output_pad)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(dim_err!("deconv output empty for {}x{}", h, wd)),
        };
        let d = ConvDims { n, c_in, h, w: wd, c_out, oh, ow, g };
        let y = kernels::conv_t2d(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), d);
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::from_vec(&[n, c_out, oh, ow], y)?, Op::ConvT { x, w, b, d }, grad))
    }

    /// Fully connected layer; inputs of any rank are flattened per sample.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let n = xs[0];
        let din: usize = xs[1..].iter().product();
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != din {
            return Err(dim_err!("linear weight {:?} vs {} input features", ws, din));
        }
        let dout = ws[0];
        let mut y = vec![F::zero(); n * dout];
        gemm(Mat::new(self.value(x).data(), n, din), Mat::t(self.value(w).data(), dout, din), F::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            y.chunks_mut(dout).for_each(|r| r.iter_mut().zip(bv).for_each(|(a, &c)| *a += c));
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::from_vec(&[n, dout], y)?, Op::Linear { x, w, b, n, din, dout }, grad))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h < k || w < k {
            return Err(dim_err!("pool window {} larger than {}x{}", k, h, w));
        }
        let (y, arg, oh, ow) = kernels::max_pool(self.value(x).data(), n, c, h, w, k, s);
        let grad = self.g(x);
        Ok(self.push(Tensor::from_vec(&[n, c, oh, ow], y)?, Op::MaxPool { x, arg }, grad))
    }

    /// Batch normalization over all but the channel axis (axis 1).
    ///
    /// In training mode batch statistics are used and new running statistics
    /// are queued for `(running_mean, running_var)`; in inference mode the
    /// running statistics are applied as a fixed affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        training: bool,
        momentum: F,
        eps: F,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("batch norm needs [N, C, ...], got {:?}", shape));
        }
        let (n, c) = (shape[0], shape[1]);
        let p: usize = shape[2..].iter().product();
        let xv = self.value(x).data();
        let (xhat, inv_std) = if training {
            let st = kernels::batch_norm_train(xv, n, c, p, eps);
            let m = (n * p) as f64;
            let unbias = if m > 1.0 { F::of(m / (m - 1.0)) } else { F::one() };
            let rm = self.store.value(running.0).data();
            let rv = self.store.value(running.1).data();
            let new_m: Vec<F> = rm.iter().zip(&st.mean).map(|(&r, &b)| (F::one() - momentum) * r + momentum * b).collect();
            let new_v: Vec<F> = rv
                .iter()
                .zip(&st.var)
                .map(|(&r, &b)| (F::one() - momentum) * r + momentum * b * unbias)
                .collect();
            self.queue_buffer_update(running.0, new_m);
            self.queue_buffer_update(running.1, new_v);
            (st.xhat, st.inv_std)
        } else {
            let rm = self.store.value(running.0).data();
            let inv_std: Vec<F> = self.store.value(running.1).data().iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![F::zero(); xv.len()];
            for s in 0..n {
                for ch in 0..c {
                    let r = (s * c + ch) * p..(s * c + ch + 1) * p;
                    for (o, &v) in xhat[r.clone()].iter_mut().zip(&xv[r]) {
                        *o = (v - rm[ch]) * inv_std[ch];
                    }
                }
            }
            (xhat, inv_std)
        };
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut y = xhat.clone();
        for s in 0..n {
            for ch in 0..c {
                y[(s * c + ch) * p..(s * c + ch + 1) * p].iter_mut().for_each(|v| *v = *v * gv[ch] + bv[ch]);
            }
        }
        let grad = self.g(x) || self.g(gamma) || self.g(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, n, c, p, training };
        Ok(self.push(Tensor::from_vec(&shape, y)?, op, grad))
    }

    pub fn act(&mut self, x: Var, kind: Pointwise) -> Var {
        let y = match kind {
            Pointwise::LeakyRelu(s) => {
                let s = F::of(s);
                self.value(x).map(|v| if v > F::zero() { v } else { v * s })
            }
            Pointwise::Relu => self.value(x).map(|v| v.max(F::zero())),
            Pointwise::Tanh => self.value(x).map(|v| v.tanh()),
            Pointwise::Sigmoid => self.value(x).map(|v| F::one() / (F::one() + (-v).exp())),
        };
        let grad = self.g(x);
        self.push(y, Op::Act { x, kind }, grad)
    }

    /// Row-wise softmax over the last axis of a `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("softmax expects [N, K], got {:?}", s));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut y = self.value(x).data().to_vec();
        for r in y.chunks_mut(cols) {
            let m = r.iter().copied().fold(F::neg_infinity(), F::max);
            r.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: F = r.iter().copied().sum();
            r.iter_mut().for_each(|v| *v /= z);
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::from_vec(&s, y)?, Op::Softmax { x, rows, cols }, grad))
    }

    /// Inverted dropout with an explicit keep mask (already scaled).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err!("dropout mask size"));
        }
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        let grad = self.g(x);
        Ok(self.push(y, Op::Dropout { x, mask }, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let grad = self.g(a) || self.g(b);
        Ok(self.push(y, Op::Add { a, b }, grad))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let grad = self.g(x);
        Ok(self.push(y, Op::Reshape { x }, grad))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::of(c);
        let y = self.value(x).map(|v| v * c);
        let grad = self.g(x);
        self.push(y, Op::Scale { x, c }, grad)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let total: F = xs.iter().map(|&v| self.value(v).item()).sum();
        let grad = xs.iter().any(|&v| self.g(v));
        self.push(Tensor::scalar(total), Op::Sum { xs: xs.to_vec() }, grad)
    }

    /// `0.5 * mean(x^2)`
    pub fn half_mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|&a| a * a).sum::<F>() / F::of(2.0 * t.len() as f64);
        let grad = self.g(x);
        self.push(Tensor::scalar(v), Op::HalfMeanSquare { x }, grad)
    }

    /// `mean |a - b|`
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("l1 {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let v = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum::<F>() / F::of(ta.len() as f64);
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::scalar(v), Op::L1Mean { a, b }, grad))
    }

    /// `mean ln(max(x, eps))`
    pub fn mean_log(&mut self, x: Var, eps: f64) -> Var {
        let eps = F::of(eps);
        let t = self.value(x);
        let v = t.data().iter().map(|&p| p.max(eps).ln()).sum::<F>() / F::of(t.len() as f64);
        let grad = self.g(x);
        self.push(Tensor::scalar(v), Op::MeanLog { x, eps }, grad)
    }

    /// `mean ln(max(1 - x, eps))`
    pub fn mean_log1m(&mut self, x: Var, eps: f64) -> Var {
        let eps = F::of(eps);
        let t = self.value(x);
        let v = t.data().iter().map(|&p| (F::one() - p).max(eps).ln()).sum::<F>() / F::of(t.len() as f64);
        let grad = self.g(x);
        self.push(Tensor::scalar(v), Op::MeanLog1m { x, eps }, grad)
    }

    /// `-mean_n ln(max(probs[n, label_n], eps))`
    pub fn nll(&mut self, probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err!("nll probs {:?} vs {} labels", s, labels.len()));
        }
        let classes = s[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(crate::error::UnitError::Domain(format!("label {} outside 0..{}", l, classes)));
        }
        let eps = F::of(eps);
        let p = self.value(probs).data();
        let v = -labels.iter().enumerate().map(|(i, &l)| p[i * classes + l].max(eps).ln()).sum::<F>()
            / F::of(labels.len() as f64);
        let grad = self.g(probs);
        Ok(self.push(Tensor::scalar(v), Op::Nll { probs, labels: labels.to_vec(), classes, eps }, grad))
    }

    /// Back-propagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads { map: HashMap::new() };
        if !self.g(loss) {
            return out;
        }
        grads[loss.0] = Some(vec![F::one(); self.value(loss).len()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            self.backprop_node(i, dy, &mut grads, &mut out);
        }
        out
    }

    fn backprop_node(&self, i: usize, dy: Vec<F>, grads: &mut [Option<Vec<F>>], out: &mut Grads<F>) {
        let acc = |grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.store.value(*id).shape();
                out.map.insert(*id, Tensor::from_vec(shape, dy).expect("param grad shape"));
            }
            Op::Conv { x, w, b, d } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), &dy, *d, self.g(*x), self.g(*w));
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    acc(grads, *b, db);
                }
            }
            Op::ConvT { x, w, b, d } => {
                let (dx, dw, db) =
                    kernels::conv_t2d_backward(self.value(*x).data(), self.value(*w).data(), &dy, *d, self.g(*x), self.g(*w));
                if let Some(dx) = dx {
                    acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b, n, din, dout } => {
                let (n, din, dout) = (*n, *din, *dout);
                if self.g(*x) {
                    let mut dx = vec![F::zero(); n * din];
                    gemm(Mat::new(&dy, n, dout), Mat::new(self.value(*w).data(), dout, din), F::zero(), &mut dx);
                    acc(grads, *x, dx);
                }
                if self.g(*w) {
                    let mut dw = vec![F::zero(); dout * din];
                    gemm(Mat::t(&dy, n, dout), Mat::new(self.value(*x).data(), n, din), F::zero(), &mut dw);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![F::zero(); dout];
                    dy.chunks(dout).for_each(|r| db.iter_mut().zip(r).for_each(|(a, &g)| *a += g));
                    acc(grads, *b, db);
                }
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (&a, &g) in arg.iter().zip(&dy) {
                    dx[a] += g;
                }
                acc(grads, *x, dx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, n, c, p, training } => {
                let (n, c, p) = (*n, *c, *p);
                let gv = self.value(*gamma).data();
                if !training {
                    let mut dx = vec![F::zero(); dy.len()];
                    let mut dg = vec![F::zero(); c];
                    let mut db = vec![F::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = inv_std[ch] * gv[ch];
                            for j in (s * c + ch) * p..(s * c + ch + 1) * p {
                                dx[j] = dy[j] * k;
                                dg[ch] += dy[j] * xhat[j];
                                db[ch] += dy[j];
                            }
                        }
                    }
                    acc(grads, *x, dx);
                    acc(grads, *gamma, dg);
                    acc(grads, *beta, db);
                } else {
                    let (dx, dg, db) = kernels::batch_norm_train_backward(&dy, xhat, inv_std, gv, n, c, p);
                    acc(grads, *x, dx);
                    acc(grads, *gamma, dg);
                    acc(grads, *beta, db);
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let yv = self.nodes[i].value.as_ref().unwrap().data();
                let dx: Vec<F> = match kind {
                    Pointwise::LeakyRelu(s) => {
                        let s = F::of(*s);
                        dy.iter().zip(xv).map(|(&g, &v)| if v > F::zero() { g } else { g * s }).collect()
                    }
                    Pointwise::Relu => dy.iter().zip(xv).map(|(&g, &v)| if v > F::zero() { g } else { F::zero() }).collect(),
                    Pointwise::Tanh => dy.iter().zip(yv).map(|(&g, &y)| g * (F::one() - y * y)).collect(),
                    Pointwise::Sigmoid => dy.iter().zip(yv).map(|(&g, &y)| g * y * (F::one() - y)).collect(),
                };
                acc(grads, *x, dx);
            }
            Op::Softmax { x, rows, cols } => {
                let yv = self.nodes[i].value.as_ref().unwrap().data();
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    let ys = &yv[r * cols..(r + 1) * cols];
                    let gs = &dy[r * cols..(r + 1) * cols];
                    let dot: F = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..*cols {
                        dx[r * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                acc(grads, *x, dy.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Add { a, b } => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy);
            }
            Op::Reshape { x } => acc(grads, *x, dy),
            Op::Scale { x, c } => acc(grads, *x, dy.iter().map(|&g| g * *c).collect()),
            Op::Sum { xs } => {
                for &v in xs {
                    acc(grads, v, vec![dy[0]]);
                }
            }
            Op::HalfMeanSquare { x } => {
                let t = self.value(*x);
                let k = dy[0] / F::of(t.len() as f64);
                acc(grads, *x, t.data().iter().map(|&v| v * k).collect());
            }
            Op::L1Mean { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = dy[0] / F::of(ta.len() as f64);
                let da: Vec<F> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > F::zero() {
                            k
                        } else if d < F::zero() {
                            -k
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                if self.g(*b) {
                    acc(grads, *b, da.iter().map(|&v| -v).collect());
                }
                acc(grads, *a, da);
            }
            Op::MeanLog { x, eps } => {
                let t = self.value(*x);
                let k = dy[0] / F::of(t.len() as f64);
                let dx = t.data().iter().map(|&p| if p > *eps { k / p } else { F::zero() }).collect();
                acc(grads, *x, dx);
            }
            Op::MeanLog1m { x, eps } => {
                let t = self.value(*x);
                let k = dy[0] / F::of(t.len() as f64);
                let dx = t
                    .data()
                    .iter()
                    .map(|&p| if F::one() - p > *eps { -k / (F::one() - p) } else { F::zero() })
                    .collect();
                acc(grads, *x, dx);
            }
            Op::Nll { probs, labels, classes, eps } => {
                let p = self.value(*probs).data();
                let k = -dy[0] / F::of(labels.len() as f64);
                let mut dx = vec![F::zero(); p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let q = p[r * classes + l];
                    if q > *eps {
                        dx[r * classes + l] = k / q;
                    }
                }
                acc(grads, *probs, dx);
            }
        }
    }
}
