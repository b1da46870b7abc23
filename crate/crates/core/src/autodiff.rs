//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass and
//! replays the record in reverse to accumulate exact analytic gradients.
//! Graphs are rebuilt per forward pass and consumed by a single
//! [`Graph::backward`] call. Everything is single-threaded and
//! deterministic: the same inputs replay to bit-identical values and
//! gradients.
//!
//! The primitive inventory is deliberately small — just enough to express
//! two-layer tanh encoders, a temperature softmax router, mixture
//! aggregation, cosine-similarity logits and a cross-entropy loss, plus
//! the sign/clamp steps a projected L∞ attack needs.

use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn with_grad(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    /// Gradient buffer populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// 2-D index helper; row-major.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }
}

/// `sign` with `sign(0) = 0`, shared by the graph primitive and the
/// projected-attack step.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Recorded primitive. Variants keep whatever the backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    /// matrix (R,C) + row vector (C) broadcast over rows
    AddBias(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sign(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Max(Var),
    L2Norm(Var),
    /// rowwise softmax(x / tau) over the last axis
    SoftmaxTemp(Var, f64),
    /// (B,d) x (B,N,d) -> (B,N) cosine similarities
    CosineRows(Var, Var),
    /// mean over rows of -sum_n y_in log softmax(logits)_in; probs saved
    CrossEntropyMean { logits: Var, targets: Var, probs: Vec<f64> },
    /// K context matrices (M,e) + class tokens (N,e) -> (K*N, (M+1)*e)
    PromptRows { contexts: Vec<Var>, class_tokens: Var },
    Reshape(Var),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Define-by-run computation record.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a copy of `t` as a leaf, keeping its requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    /// Insert an owned tensor as a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient of the last backward target w.r.t. `v`, if populated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn result(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        let mut t = Tensor::new(shape, data).expect("internal: op produced invalid shape");
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    // ── primitives ──────────────────────────────────────────────────

    /// 2-D matrix product (m,k) @ (k,n) -> (m,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("incompatible shapes {sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.result(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("add", format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.result(shape, data, rg, Op::Add(a, b)))
    }

    /// (R,C) matrix plus a length-C bias row added to every row.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (sm, sb) = (self.value(m).shape(), self.value(bias).shape());
        if sm.len() != 2 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(Error::shape("add_bias", format!("matrix {sm:?} + bias {sb:?}")));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mut data = self.value(m).data().to_vec();
        let bd = self.value(bias).data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bd[c];
            }
        }
        let rg = self.req(m) || self.req(bias);
        Ok(self.result(vec![rows, cols], data, rg, Op::AddBias(m, bias)))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("mul", format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.result(shape, data, rg, Op::MulElem(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self.value(a).data().iter().map(|x| c * x).collect();
        let rg = self.req(a);
        self.result(shape, data, rg, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Elementwise sign, sign(0) = 0. Gradient is zero everywhere.
    pub fn sign_op(&mut self, a: Var) -> Var {
        self.unary(a, sign, Op::Sign(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let op = Op::Clamp(a, lo, hi);
        self.unary(a, |x| x.clamp(lo, hi), op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.req(a);
        self.result(shape, data, rg, op)
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.req(a);
        self.result(vec![1], vec![s], rg, Op::Sum(a))
    }

    /// Maximum element -> scalar. Subgradient flows to the first argmax.
    pub fn max(&mut self, a: Var) -> Var {
        let m = self.value(a).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rg = self.req(a);
        self.result(vec![1], vec![m], rg, Op::Max(a))
    }

    /// Euclidean norm of all elements -> scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.req(a);
        self.result(vec![1], vec![s.sqrt()], rg, Op::L2Norm(a))
    }

    /// Rowwise softmax(x / tau) over the last axis, max-subtracted for
    /// stability. Accepts rank-1 (one row) or rank-2 tensors.
    pub fn softmax_temp(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("softmax_temp: tau must be > 0, got {tau}")));
        }
        let t = self.value(a);
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("softmax_temp: non-finite logits".to_string()));
        }
        let shape = t.shape().to_vec();
        if shape.len() > 2 {
            return Err(Error::shape("softmax_temp", format!("rank must be 1 or 2, got {shape:?}")));
        }
        let cols = *shape.last().unwrap();
        let rows = t.numel() / cols;
        let mut data = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            softmax_row_into(row, tau, &mut data[r * cols..(r + 1) * cols]);
        }
        let rg = self.req(a);
        Ok(self.result(shape, data, rg, Op::SoftmaxTemp(a, tau)))
    }

    /// Cosine similarity between image row i and every text vector (i, n):
    /// (B,d) x (B,N,d) -> (B,N). Fails on any vector with norm < 1e-12.
    pub fn cosine_rows(&mut self, images: Var, texts: Var) -> Result<Var> {
        let (si, st) = (self.value(images).shape(), self.value(texts).shape());
        if si.len() != 2 || st.len() != 3 || si[0] != st[0] || si[1] != st[2] {
            return Err(Error::shape(
                "cosine_rows",
                format!("want (B,d) x (B,N,d), got {si:?} x {st:?}"),
            ));
        }
        let (b, d, n) = (si[0], si[1], st[1]);
        let (di, dt) = (self.value(images).data(), self.value(texts).data());
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            let u = &di[i * d..(i + 1) * d];
            let nu = norm(u);
            if nu < 1e-12 {
                return Err(Error::invalid(format!("cosine_rows: zero-norm image row {i}")));
            }
            for j in 0..n {
                let v = &dt[(i * n + j) * d..(i * n + j + 1) * d];
                let nv = norm(v);
                if nv < 1e-12 {
                    return Err(Error::invalid(format!(
                        "cosine_rows: zero-norm text vector at (image {i}, class {j})"
                    )));
                }
                out[i * n + j] = dot(u, v) / (nu * nv);
            }
        }
        let rg = self.req(images) || self.req(texts);
        Ok(self.result(vec![b, n], out, rg, Op::CosineRows(images, texts)))
    }

    /// Mean over the batch of the one-hot cross entropy
    /// -sum_n y_in log softmax(logits)_in -> scalar.
    ///
    /// Targets must be a constant one-hot matrix of the same shape.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (sl, st) = (self.value(logits).shape(), self.value(targets).shape());
        if sl.len() != 2 || sl != st {
            return Err(Error::shape(
                "cross_entropy_mean",
                format!("want matching (B,N) shapes, got {sl:?} vs {st:?}"),
            ));
        }
        if self.req(targets) {
            return Err(Error::invalid(
                "cross_entropy_mean: targets must not require gradients".to_string(),
            ));
        }
        let (b, n) = (sl[0], sl[1]);
        let td = self.value(targets).data();
        for r in 0..b {
            let row = &td[r * n..(r + 1) * n];
            let ones = row.iter().filter(|&&x| x == 1.0).count();
            if ones != 1 || row.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::invalid(format!(
                    "cross_entropy_mean: row {r} is not one-hot: {row:?}"
                )));
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * n..(r + 1) * n];
            let pr = &mut probs[r * n..(r + 1) * n];
            softmax_row_into(row, 1.0, pr);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for c in 0..n {
                if td[r * n + c] == 1.0 {
                    loss -= row[c] - lse;
                }
            }
        }
        loss /= b as f64;
        let rg = self.req(logits);
        Ok(self.result(vec![1], vec![loss], rg, Op::CrossEntropyMean { logits, targets, probs }))
    }

    /// Assemble the full prompt rows for every (bank k, class n) pair:
    /// K contexts of shape (M,e) and class tokens (N,e) yield a
    /// (K*N, (M+1)*e) matrix whose row k*N + n is [context_k ; token_n].
    pub fn prompt_rows(&mut self, contexts: &[Var], class_tokens: Var) -> Result<Var> {
        if contexts.is_empty() {
            return Err(Error::shape("prompt_rows", "no context matrices".to_string()));
        }
        let s0 = self.value(contexts[0]).shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::shape("prompt_rows", format!("context must be (M,e), got {s0:?}")));
        }
        for &c in contexts {
            if self.value(c).shape() != s0.as_slice() {
                return Err(Error::shape(
                    "prompt_rows",
                    format!("context shape {:?} differs from {:?}", self.value(c).shape(), s0),
                ));
            }
        }
        let st = self.value(class_tokens).shape();
        if st.len() != 2 || st[1] != s0[1] {
            return Err(Error::shape(
                "prompt_rows",
                format!("class tokens {st:?} incompatible with context {s0:?}"),
            ));
        }
        let (m, e, n_classes, k) = (s0[0], s0[1], st[0], contexts.len());
        let row_len = (m + 1) * e;
        let mut data = vec![0.0; k * n_classes * row_len];
        for (ki, &cv) in contexts.iter().enumerate() {
            let cd = self.value(cv).data().to_vec();
            let tokens = self.value(class_tokens).data();
            for n in 0..n_classes {
                let row = &mut data[(ki * n_classes + n) * row_len..(ki * n_classes + n + 1) * row_len];
                row[..m * e].copy_from_slice(&cd);
                row[m * e..].copy_from_slice(&tokens[n * e..(n + 1) * e]);
            }
        }
        let rg = contexts.iter().any(|&c| self.req(c)) || self.req(class_tokens);
        Ok(self.result(
            vec![k * n_classes, row_len],
            data,
            rg,
            Op::PromptRows { contexts: contexts.to_vec(), class_tokens },
        ))
    }

    /// Reinterpret the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.value(a).shape()),
            ));
        }
        let data = self.value(a).data().to_vec();
        let rg = self.req(a);
        Ok(self.result(shape, data, rg, Op::Reshape(a)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar. Populates the grad buffer of every
    /// requires_grad tensor in the graph (zeros where the loss does not
    /// depend on it). Consumes the graph: a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "graph already consumed by a previous backward; rebuild the forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if node.tensor.requires_grad {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.tensor.numel()]);
                node.tensor.grad = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tensor.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].tensor.numel()]);
        add(buf);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Clones of parent values are taken where the rule needs them;
        // buffers are small at desk scale.
        match self.nodes[idx].op.clone() {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = self.value(a).data().to_vec();
                let db = self.value(b).data().to_vec();
                self.accumulate(grads, a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += da[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, |ga| axpy(ga, g, 1.0));
                self.accumulate(grads, b, |gb| axpy(gb, g, 1.0));
            }
            Op::AddBias(m, bias) => {
                let cols = self.value(bias).numel();
                let rows = g.len() / cols;
                self.accumulate(grads, m, |gm| axpy(gm, g, 1.0));
                self.accumulate(grads, bias, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::MulElem(a, b) => {
                let da = self.value(a).data().to_vec();
                let db = self.value(b).data().to_vec();
                self.accumulate(grads, a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * db[i];
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i] += gi * da[i];
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, a, |ga| axpy(ga, g, c)),
            Op::Tanh(a) => {
                let y = self.nodes[idx].tensor.data().to_vec();
                self.accumulate(grads, a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.nodes[idx].tensor.data().to_vec();
                self.accumulate(grads, a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(a).data().to_vec();
                self.accumulate(grads, a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi / x[i];
                    }
                });
            }
            // sign is flat almost everywhere; nothing to propagate
            Op::Sign(_a) => {}
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data().to_vec();
                self.accumulate(grads, a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        if x[i] >= lo && x[i] <= hi {
                            ga[i] += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.accumulate(grads, a, |ga| {
                    for v in ga.iter_mut() {
                        *v += s;
                    }
                });
            }
            Op::Max(a) => {
                let x = self.value(a).data();
                let arg = x
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                        if v > acc.1 {
                            (i, v)
                        } else {
                            acc
                        }
                    })
                    .0;
                let s = g[0];
                self.accumulate(grads, a, |ga| ga[arg] += s);
            }
            Op::L2Norm(a) => {
                let y = self.nodes[idx].tensor.item();
                let x = self.value(a).data().to_vec();
                let s = g[0];
                self.accumulate(grads, a, |ga| {
                    if y > 0.0 {
                        for (i, xi) in x.iter().enumerate() {
                            ga[i] += s * xi / y;
                        }
                    }
                });
            }
            Op::SoftmaxTemp(a, tau) => {
                let p = self.nodes[idx].tensor.data().to_vec();
                let cols = *self.nodes[idx].tensor.shape().last().unwrap();
                let rows = p.len() / cols;
                self.accumulate(grads, a, |ga| {
                    for r in 0..rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dotgp: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += pr[c] * (gr[c] - dotgp) / tau;
                        }
                    }
                });
            }
            Op::CosineRows(images, texts) => {
                let si = self.value(images).shape().to_vec();
                let st = self.value(texts).shape().to_vec();
                let (b, d, n) = (si[0], si[1], st[1]);
                let di = self.value(images).data().to_vec();
                let dt = self.value(texts).data().to_vec();
                let cosv = self.nodes[idx].tensor.data().to_vec();
                self.accumulate(grads, images, |gi| {
                    for i in 0..b {
                        let u = &di[i * d..(i + 1) * d];
                        let nu = norm(u);
                        for j in 0..n {
                            let v = &dt[(i * n + j) * d..(i * n + j + 1) * d];
                            let nv = norm(v);
                            let c = cosv[i * n + j];
                            let gij = g[i * n + j];
                            for t in 0..d {
                                gi[i * d + t] += gij * (v[t] / (nu * nv) - c * u[t] / (nu * nu));
                            }
                        }
                    }
                });
                self.accumulate(grads, texts, |gt| {
                    for i in 0..b {
                        let u = &di[i * d..(i + 1) * d];
                        let nu = norm(u);
                        for j in 0..n {
                            let v = &dt[(i * n + j) * d..(i * n + j + 1) * d];
                            let nv = norm(v);
                            let c = cosv[i * n + j];
                            let gij = g[i * n + j];
                            for t in 0..d {
                                gt[(i * n + j) * d + t] +=
                                    gij * (u[t] / (nu * nv) - c * v[t] / (nv * nv));
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyMean { logits, targets, probs } => {
                let td = self.value(targets).data().to_vec();
                let b = self.value(logits).shape()[0] as f64;
                let s = g[0];
                self.accumulate(grads, logits, |gl| {
                    for (i, p) in probs.iter().enumerate() {
                        gl[i] += s * (p - td[i]) / b;
                    }
                });
            }
            Op::PromptRows { contexts, class_tokens } => {
                let (m, e) = {
                    let s = self.value(contexts[0]).shape();
                    (s[0], s[1])
                };
                let n_classes = self.value(class_tokens).shape()[0];
                let row_len = (m + 1) * e;
                for (ki, &cv) in contexts.iter().enumerate() {
                    self.accumulate(grads, cv, |gc| {
                        for n in 0..n_classes {
                            let row = &g[(ki * n_classes + n) * row_len..][..m * e];
                            axpy(gc, row, 1.0);
                        }
                    });
                }
                let k = contexts.len();
                self.accumulate(grads, class_tokens, |gt| {
                    for ki in 0..k {
                        for n in 0..n_classes {
                            let row = &g[(ki * n_classes + n) * row_len + m * e..][..e];
                            for t in 0..e {
                                gt[n * e + t] += row[t];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, a, |ga| axpy(ga, g, 1.0)),
        }
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (dst, src) in acc.iter_mut().zip(x) {
        *dst += a * src;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn softmax_row_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let v = ((x - mx) / tau).exp();
        *o = v;
        sum += v;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
