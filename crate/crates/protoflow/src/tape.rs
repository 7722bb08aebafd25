//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records operations during the forward pass; [`Tape::backward`]
//! replays them in reverse to accumulate gradients. Nodes are appended in
//! topological order by construction, so the reverse sweep is a single pass.
//!
//! Besides elementwise and linear-algebra primitives, the tape provides a
//! few fused kernels for isotropic Gaussian mixtures (negative
//! log-likelihood, mixture mean, responsibilities, assignment entropy).
//! Their hand-derived adjoints are covered by the central finite-difference
//! suite in this module's tests and in the acceptance tests.

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, sigmoid, softplus, Tensor};

/// A handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    AddN(Vec<usize>),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MatVec { w: usize, x: usize },
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    SqNorm(usize),
    Concat(usize, usize),
    Slice { src: usize, start: usize, len: usize },
    Softplus(usize),
    MaxConst(usize, f64),
    LogSumExp(usize),
    XLogX(usize),
    MeanTopK { src: usize, count: usize, picked: Vec<usize> },
    MixtureMean { logits: usize, means: usize },
    GmNllLogits { logits: usize, means: usize, target: usize, std: f64 },
    GmNllFixedW { means: usize, target: usize, log_w: Vec<f64>, std: f64 },
    GmEntropy { means: usize, point: usize, log_w: Vec<f64>, std: f64 },
    GmResponsibilities { means: usize, point: usize, log_w: Vec<f64>, std: f64 },
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`.
    ///
    /// A zero tensor is returned for vars the root does not depend on.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], idx: usize) -> &'a mut [f64] {
    grads[idx]
        .get_or_insert_with(|| Tensor::zeros(nodes[idx].value.shape().to_vec()))
        .data_mut()
}

/// The recording tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Drops all nodes but keeps the allocation; lets a training loop
    /// reuse one tape across iterations.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_vector(&mut self, data: &[f64]) -> Var {
        self.leaf(Tensor::vector(data.to_vec()))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("add shape");
        self.push(t, Op::Add(a.0, b.0))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of empty list");
        let shape = self.nodes[vars[0].0].value.shape().to_vec();
        let mut data = vec![0.0; shape.iter().product()];
        for v in vars {
            debug_assert_eq!(self.nodes[v.0].value.shape(), &shape[..]);
            for (acc, x) in data.iter_mut().zip(self.nodes[v.0].value.data()) {
                *acc += x;
            }
        }
        let t = Tensor::new(shape, data).expect("add_n shape");
        self.push(t, Op::AddN(vars.iter().map(|v| v.0).collect()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("sub shape");
        self.push(t, Op::Sub(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| -x).collect())
            .expect("neg shape");
        self.push(t, Op::Neg(a.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("mul shape");
        self.push(t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())
            .expect("scale shape");
        self.push(t, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x + c).collect())
            .expect("add_const shape");
        self.push(t, Op::AddConst(a.0))
    }

    /// `w` is a `[m, n]` matrix node, `x` an `[n]` vector node; result `[m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (vw, vx) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (m, n) = (vw.shape()[0], vw.shape()[1]);
        debug_assert_eq!(vx.len(), n);
        let wd = vw.data();
        let xd = vx.data();
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * xd[j];
            }
            *o = s;
        }
        self.push(Tensor::vector(out), Op::MatVec { w: w.0, x: x.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.tanh()).collect(),
        )
        .expect("tanh shape");
        self.push(t, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(0.0)).collect(),
        )
        .expect("relu shape");
        self.push(t, Op::Relu(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let s: f64 = va.data().iter().sum();
        let n = va.len() as f64;
        self.push(Tensor::scalar(s / n), Op::Mean(a.0))
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::SqNorm(a.0))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        self.push(Tensor::vector(data), Op::Concat(a.0, b.0))
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let vs = &self.nodes[src.0].value;
        debug_assert!(start + len <= vs.len());
        let data = vs.data()[start..start + len].to_vec();
        self.push(
            Tensor::vector(data),
            Op::Slice {
                src: src.0,
                start,
                len,
            },
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| softplus(*x)).collect(),
        )
        .expect("softplus shape");
        self.push(t, Op::Softplus(a.0))
    }

    /// Elementwise `max(a, c)` for a constant `c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(c)).collect(),
        )
        .expect("max_const shape");
        self.push(t, Op::MaxConst(a.0, c))
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = logsumexp(self.nodes[a.0].value.data());
        self.push(Tensor::scalar(v), Op::LogSumExp(a.0))
    }

    /// Elementwise `x ln x` with the `0 ln 0 = 0` convention.
    pub fn x_log_x(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .map(|&x| if x == 0.0 { 0.0 } else { x * x.ln() })
                .collect(),
        )
        .expect("x_log_x shape");
        self.push(t, Op::XLogX(a.0))
    }

    /// Mean of the `count` largest entries; ties broken toward the lower
    /// index so selection is deterministic.
    pub fn mean_top_k(&mut self, src: Var, count: usize) -> Var {
        let vs = &self.nodes[src.0].value;
        assert!(count >= 1 && count <= vs.len(), "mean_top_k count");
        let data = vs.data();
        let mut idx: Vec<usize> = (0..vs.len()).collect();
        idx.sort_by(|&a, &b| {
            data[b]
                .partial_cmp(&data[a])
                .expect("non-finite patch score")
                .then(a.cmp(&b))
        });
        let picked: Vec<usize> = idx[..count].to_vec();
        let mean = picked.iter().map(|&i| data[i]).sum::<f64>() / count as f64;
        self.push(
            Tensor::scalar(mean),
            Op::MeanTopK {
                src: src.0,
                count,
                picked,
            },
        )
    }

    /// Mixture mean `sum_k softmax(logits)_k * means_k` for `means` laid out
    /// row-major `[k * dim]`.
    pub fn mixture_mean(&mut self, logits: Var, means: Var) -> Var {
        let k = self.nodes[logits.0].value.len();
        let md = &self.nodes[means.0].value;
        debug_assert_eq!(md.len() % k, 0);
        let dim = md.len() / k;
        let w = softmax(self.nodes[logits.0].value.data());
        let mut out = vec![0.0; dim];
        for (ki, wk) in w.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += wk * md.data()[ki * dim + j];
            }
        }
        self.push(
            Tensor::vector(out),
            Op::MixtureMean {
                logits: logits.0,
                means: means.0,
            },
        )
    }

    /// Negative log-likelihood of `target` under the isotropic Gaussian
    /// mixture with weight logits `logits`, stacked means `means` (`[k*dim]`)
    /// and shared standard deviation `std`.
    pub fn gm_nll_logits(&mut self, logits: Var, means: Var, target: Var, std: f64) -> Var {
        let k = self.nodes[logits.0].value.len();
        let dim = self.nodes[target.0].value.len();
        debug_assert_eq!(self.nodes[means.0].value.len(), k * dim);
        let log_w = log_softmax(self.nodes[logits.0].value.data());
        let nll = gm_nll_value(
            &log_w,
            self.nodes[means.0].value.data(),
            self.nodes[target.0].value.data(),
            std,
        );
        self.push(
            Tensor::scalar(nll),
            Op::GmNllLogits {
                logits: logits.0,
                means: means.0,
                target: target.0,
                std,
            },
        )
    }

    /// Like [`Tape::gm_nll_logits`] but with fixed log-weights (frozen
    /// mixture weights).
    pub fn gm_nll_fixed_w(&mut self, means: Var, target: Var, log_w: &[f64], std: f64) -> Var {
        let dim = self.nodes[target.0].value.len();
        debug_assert_eq!(self.nodes[means.0].value.len(), log_w.len() * dim);
        let nll = gm_nll_value(
            log_w,
            self.nodes[means.0].value.data(),
            self.nodes[target.0].value.data(),
            std,
        );
        self.push(
            Tensor::scalar(nll),
            Op::GmNllFixedW {
                means: means.0,
                target: target.0,
                log_w: log_w.to_vec(),
                std,
            },
        )
    }

    /// Entropy of the posterior component assignment of `point` under the
    /// mixture (fixed log-weights): `-sum_k p_k ln p_k`.
    pub fn gm_entropy(&mut self, means: Var, point: Var, log_w: &[f64], std: f64) -> Var {
        let (_, lp) = gm_posterior(
            log_w,
            self.nodes[means.0].value.data(),
            self.nodes[point.0].value.data(),
            std,
        );
        let ent = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        self.push(
            Tensor::scalar(ent),
            Op::GmEntropy {
                means: means.0,
                point: point.0,
                log_w: log_w.to_vec(),
                std,
            },
        )
    }

    /// Posterior responsibilities `p(c=k | point)` as a `[k]` vector node.
    pub fn gm_responsibilities(&mut self, means: Var, point: Var, log_w: &[f64], std: f64) -> Var {
        let (p, _) = gm_posterior(
            log_w,
            self.nodes[means.0].value.data(),
            self.nodes[point.0].value.data(),
            std,
        );
        self.push(
            Tensor::vector(p),
            Op::GmResponsibilities {
                means: means.0,
                point: point.0,
                log_w: log_w.to_vec(),
                std,
            },
        )
    }

    /// Reverse sweep from a scalar node; errors if `root` is not scalar.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::ContractViolation(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let nodes = &self.nodes;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in &[*a, *b] {
                    let dst = slot(grads, nodes, p);
                    for (d, &x) in dst.iter_mut().zip(gd) {
                        *d += x;
                    }
                }
            }
            Op::AddN(parents) => {
                for &p in parents {
                    let dst = slot(grads, nodes, p);
                    for (d, &x) in dst.iter_mut().zip(gd) {
                        *d += x;
                    }
                }
            }
            Op::Sub(a, b) => {
                let dst = slot(grads, nodes, *a);
                for (d, &x) in dst.iter_mut().zip(gd) {
                    *d += x;
                }
                let dst = slot(grads, nodes, *b);
                for (d, &x) in dst.iter_mut().zip(gd) {
                    *d -= x;
                }
            }
            Op::Neg(a) => {
                let dst = slot(grads, nodes, *a);
                for (d, &x) in dst.iter_mut().zip(gd) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let dst = slot(grads, nodes, *a);
                for ((d, &x), &y) in dst.iter_mut().zip(gd).zip(nodes[*b].value.data()) {
                    *d += x * y;
                }
                let dst = slot(grads, nodes, *b);
                for ((d, &x), &y) in dst.iter_mut().zip(gd).zip(nodes[*a].value.data()) {
                    *d += x * y;
                }
            }
            Op::Scale(a, c) => {
                let dst = slot(grads, nodes, *a);
                for (d, &x) in dst.iter_mut().zip(gd) {
                    *d += x * c;
                }
            }
            Op::AddConst(a) => {
                let dst = slot(grads, nodes, *a);
                for (d, &x) in dst.iter_mut().zip(gd) {
                    *d += x;
                }
            }
            Op::MatVec { w, x } => {
                let (m, n) = (nodes[*w].value.shape()[0], nodes[*w].value.shape()[1]);
                {
                    let dst = slot(grads, nodes, *w);
                    let xd = nodes[*x].value.data();
                    for i2 in 0..m {
                        let gi = gd[i2];
                        let row = &mut dst[i2 * n..(i2 + 1) * n];
                        for j in 0..n {
                            row[j] += gi * xd[j];
                        }
                    }
                }
                {
                    let dst = slot(grads, nodes, *x);
                    let wd = nodes[*w].value.data();
                    for i2 in 0..m {
                        let gi = gd[i2];
                        let row = &wd[i2 * n..(i2 + 1) * n];
                        for j in 0..n {
                            dst[j] += row[j] * gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let y = nodes[i].value.data();
                let dst = slot(grads, nodes, *a);
                for ((d, &x), &t) in dst.iter_mut().zip(gd).zip(y) {
                    *d += x * (1.0 - t * t);
                }
            }
            Op::Relu(a) => {
                let xa = nodes[*a].value.data();
                let dst = slot(grads, nodes, *a);
                for ((d, &x), &v) in dst.iter_mut().zip(gd).zip(xa) {
                    if v > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::Sum(a) => {
                let dst = slot(grads, nodes, *a);
                for d in dst.iter_mut() {
                    *d += gd[0];
                }
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                let dst = slot(grads, nodes, *a);
                for d in dst.iter_mut() {
                    *d += gd[0] / n;
                }
            }
            Op::SqNorm(a) => {
                let xa = nodes[*a].value.data();
                let dst = slot(grads, nodes, *a);
                for (d, &v) in dst.iter_mut().zip(xa) {
                    *d += 2.0 * v * gd[0];
                }
            }
            Op::Concat(a, b) => {
                let la = nodes[*a].value.len();
                let dst = slot(grads, nodes, *a);
                for (d, &x) in dst.iter_mut().zip(&gd[..la]) {
                    *d += x;
                }
                let dst = slot(grads, nodes, *b);
                for (d, &x) in dst.iter_mut().zip(&gd[la..]) {
                    *d += x;
                }
            }
            Op::Slice { src, start, len } => {
                let dst = slot(grads, nodes, *src);
                for j in 0..*len {
                    dst[start + j] += gd[j];
                }
            }
            Op::Softplus(a) => {
                let xa = nodes[*a].value.data();
                let dst = slot(grads, nodes, *a);
                for ((d, &x), &v) in dst.iter_mut().zip(gd).zip(xa) {
                    *d += x * sigmoid(v);
                }
            }
            Op::MaxConst(a, c) => {
                let xa = nodes[*a].value.data();
                let dst = slot(grads, nodes, *a);
                for ((d, &x), &v) in dst.iter_mut().zip(gd).zip(xa) {
                    if v > *c {
                        *d += x;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let p = softmax(nodes[*a].value.data());
                let dst = slot(grads, nodes, *a);
                for (d, &w) in dst.iter_mut().zip(&p) {
                    *d += gd[0] * w;
                }
            }
            Op::XLogX(a) => {
                let xa = nodes[*a].value.data();
                let dst = slot(grads, nodes, *a);
                for ((d, &x), &v) in dst.iter_mut().zip(gd).zip(xa) {
                    if v > 0.0 {
                        *d += x * (v.ln() + 1.0);
                    }
                }
            }
            Op::MeanTopK { src, count, picked } => {
                let share = gd[0] / *count as f64;
                let dst = slot(grads, nodes, *src);
                for &j in picked {
                    dst[j] += share;
                }
            }
            Op::MixtureMean { logits, means } => {
                let w = softmax(nodes[*logits].value.data());
                let md = nodes[*means].value.data();
                let out = nodes[i].value.data();
                let dim = out.len();
                {
                    let dst = slot(grads, nodes, *logits);
                    for (ki, wk) in w.iter().enumerate() {
                        let mut dot = 0.0;
                        for j in 0..dim {
                            dot += (md[ki * dim + j] - out[j]) * gd[j];
                        }
                        dst[ki] += wk * dot;
                    }
                }
                {
                    let dst = slot(grads, nodes, *means);
                    for (ki, wk) in w.iter().enumerate() {
                        for j in 0..dim {
                            dst[ki * dim + j] += wk * gd[j];
                        }
                    }
                }
            }
            Op::GmNllLogits {
                logits,
                means,
                target,
                std,
            } => {
                let lw = log_softmax(nodes[*logits].value.data());
                let w: Vec<f64> = lw.iter().map(|l| l.exp()).collect();
                let md = nodes[*means].value.data();
                let td = nodes[*target].value.data();
                let (q, _) = gm_posterior(&lw, md, td, *std);
                let k = q.len();
                let dim = td.len();
                let inv_var = 1.0 / (std * std);
                {
                    let dst = slot(grads, nodes, *logits);
                    for ki in 0..k {
                        dst[ki] += gd[0] * (w[ki] - q[ki]);
                    }
                }
                {
                    let dst = slot(grads, nodes, *means);
                    for ki in 0..k {
                        for j in 0..dim {
                            dst[ki * dim + j] += gd[0] * q[ki] * (md[ki * dim + j] - td[j]) * inv_var;
                        }
                    }
                }
                {
                    let dst = slot(grads, nodes, *target);
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            acc += q[ki] * (td[j] - md[ki * dim + j]);
                        }
                        dst[j] += gd[0] * acc * inv_var;
                    }
                }
            }
            Op::GmNllFixedW {
                means,
                target,
                log_w,
                std,
            } => {
                let md = nodes[*means].value.data();
                let td = nodes[*target].value.data();
                let (q, _) = gm_posterior(log_w, md, td, *std);
                let k = log_w.len();
                let dim = td.len();
                let inv_var = 1.0 / (std * std);
                {
                    let dst = slot(grads, nodes, *means);
                    for ki in 0..k {
                        for j in 0..dim {
                            dst[ki * dim + j] += gd[0] * q[ki] * (md[ki * dim + j] - td[j]) * inv_var;
                        }
                    }
                }
                {
                    let dst = slot(grads, nodes, *target);
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            acc += q[ki] * (td[j] - md[ki * dim + j]);
                        }
                        dst[j] += gd[0] * acc * inv_var;
                    }
                }
            }
            Op::GmEntropy {
                means,
                point,
                log_w,
                std,
            } => {
                let md = nodes[*means].value.data();
                let yd = nodes[*point].value.data();
                let (p, lp) = gm_posterior(log_w, md, yd, *std);
                let ent = nodes[i].value.item();
                let k = log_w.len();
                let dim = yd.len();
                let inv_var = 1.0 / (std * std);
                // dE/dr_k = -p_k (ln p_k + E), r_k the component log-posterior
                // numerator; chain through r_k into means and point.
                let dr: Vec<f64> = (0..k).map(|ki| -(p[ki] * lp[ki] + p[ki] * ent)).collect();
                {
                    let dst = slot(grads, nodes, *means);
                    for ki in 0..k {
                        for j in 0..dim {
                            dst[ki * dim + j] +=
                                gd[0] * dr[ki] * (yd[j] - md[ki * dim + j]) * inv_var;
                        }
                    }
                }
                {
                    let dst = slot(grads, nodes, *point);
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            acc += dr[ki] * (md[ki * dim + j] - yd[j]);
                        }
                        dst[j] += gd[0] * acc * inv_var;
                    }
                }
            }
            Op::GmResponsibilities {
                means,
                point,
                log_w,
                std,
            } => {
                let md = nodes[*means].value.data();
                let yd = nodes[*point].value.data();
                let (p, _) = gm_posterior(log_w, md, yd, *std);
                let k = log_w.len();
                let dim = yd.len();
                let inv_var = 1.0 / (std * std);
                let dot: f64 = gd.iter().zip(&p).map(|(g2, pk)| g2 * pk).sum();
                // dL/dr_k = p_k (g_k - <g, p>)
                let dr: Vec<f64> = (0..k).map(|ki| p[ki] * (gd[ki] - dot)).collect();
                {
                    let dst = slot(grads, nodes, *means);
                    for ki in 0..k {
                        for j in 0..dim {
                            dst[ki * dim + j] += dr[ki] * (yd[j] - md[ki * dim + j]) * inv_var;
                        }
                    }
                }
                {
                    let dst = slot(grads, nodes, *point);
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for ki in 0..k {
                            acc += dr[ki] * (md[ki * dim + j] - yd[j]);
                        }
                        dst[j] += acc * inv_var;
                    }
                }
            }
        }
    }
}

/// Softmax of a slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Log-softmax of a slice.
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// `-log sum_k exp(log_w_k + log N(target; means_k, std^2 I))`.
pub(crate) fn gm_nll_value(log_w: &[f64], means: &[f64], target: &[f64], std: f64) -> f64 {
    let k = log_w.len();
    let dim = target.len();
    let inv_two_var = 0.5 / (std * std);
    let log_norm = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * std * std).ln();
    let mut terms = Vec::with_capacity(k);
    for ki in 0..k {
        let mut d2 = 0.0;
        for j in 0..dim {
            let d = target[j] - means[ki * dim + j];
            d2 += d * d;
        }
        terms.push(log_w[ki] - d2 * inv_two_var);
    }
    -(logsumexp(&terms) - log_norm)
}

/// Posterior responsibilities and their logs for a point under an isotropic
/// shared-std mixture: softmax over `log_w_k - ||y - mu_k||^2 / (2 std^2)`.
pub(crate) fn gm_posterior(
    log_w: &[f64],
    means: &[f64],
    point: &[f64],
    std: f64,
) -> (Vec<f64>, Vec<f64>) {
    let k = log_w.len();
    let dim = point.len();
    let inv_two_var = 0.5 / (std * std);
    let mut terms = Vec::with_capacity(k);
    for ki in 0..k {
        let mut d2 = 0.0;
        for j in 0..dim {
            let d = point[j] - means[ki * dim + j];
            d2 += d * d;
        }
        terms.push(log_w[ki] - d2 * inv_two_var);
    }
    let lp = log_softmax(&terms);
    let p = lp.iter().map(|l| l.exp()).collect();
    (p, lp)
}

/// Central finite-difference gradient check.
///
/// `build` must construct a deterministic scalar loss from leaf vars that
/// mirror `params` in order. Returns the maximum over all parameter
/// components of `|analytic - numeric| / (|numeric| + 1e-12)` with the
/// numeric side a central difference of width `2 * step`.
pub fn finite_diff_check<F>(params: &[Tensor], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let v0 = tape.item(loss);
    let grads = tape.backward(loss)?;

    let value_only = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.item(l))
    };

    // Determinism guard: the same inputs must reproduce the same value.
    let v1 = value_only(params)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::ContractViolation(
            "loss is not deterministic under identical inputs".into(),
        ));
    }

    let mut max_rel: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let g = grads.get_opt(vars[pi]);
        for j in 0..p.len() {
            let orig = p.data()[j];
            perturbed[pi].data_mut()[j] = orig + step;
            let plus = value_only(&perturbed)?;
            perturbed[pi].data_mut()[j] = orig - step;
            let minus = value_only(&perturbed)?;
            perturbed[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = g.map(|t| t.data()[j]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
