//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is built eagerly: every op allocates a new node holding its
//! forward value and a closure that routes the output gradient to its
//! parents. `backward` walks the nodes in reverse topological order and
//! accumulates gradients into every reachable leaf marked `requires_grad`.
//!
//! Everything is `f64` and row-major. There is no broadcasting beyond
//! bias-add over the last axis; shape mismatches are hard errors.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexError(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the differentiation graph. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length disagree"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Self {
        Self::from_parts(shape.to_vec(), data, false, vec![], None)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Self {
        Self::from_parts(shape.to_vec(), data, true, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Overwrite leaf data in place (used by the optimizer and grad_check).
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel());
        *self.inner.data.borrow_mut() = data;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data()[0]
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn any_grad(parents: &[&Tensor]) -> bool {
        parents.iter().any(|p| p.inner.requires_grad)
    }

    /// Rows × last-axis view: every op here treats a tensor as `rows` slices
    /// of length `last`.
    fn rows_last(&self) -> (usize, usize) {
        let last = *self.inner.shape.last().expect("0-dim tensor");
        (self.numel() / last, last)
    }

    // ─── backward driver ───────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every `requires_grad` tensor in the graph (leaves keep theirs until
    /// `zero_grad`).
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() on non-scalar");
        // Reverse postorder over the parent DAG is a topological order in
        // which every consumer precedes the tensors it reads.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let parent = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if parent.inner.requires_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let grad = match node.inner.grad.borrow().clone() {
                    Some(g) => g,
                    None => continue,
                };
                let data = node.inner.data.borrow().clone();
                back(&grad, &data, &node.inner.parents);
                // Interior activations are fresh per step; free the buffer.
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    // ─── elementwise and linear ops ────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_parts(
            self.shape().to_vec(),
            data,
            Self::any_grad(&[self, other]),
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, _out, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            })),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_parts(
            self.shape().to_vec(),
            data,
            Self::any_grad(&[self, other]),
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, _out, parents| {
                let a = parents[0].data().clone();
                let b = parents[1].data().clone();
                let da: Vec<f64> = g.iter().zip(&b).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(&a).map(|(gi, ai)| gi * ai).collect();
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            })),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        Tensor::from_parts(
            self.shape().to_vec(),
            data,
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(move |g, _out, parents| {
                let dg: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                parents[0].accumulate_grad(&dg);
            })),
        )
    }

    /// `[rows × d] + [d]`, the only broadcast supported.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let (rows, d) = self.rows_last();
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "add_bias {:?} vs {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let b = bias.data().clone();
        let mut data = self.data().clone();
        for r in 0..rows {
            for j in 0..d {
                data[r * d + j] += b[j];
            }
        }
        Ok(Tensor::from_parts(
            self.shape().to_vec(),
            data,
            Self::any_grad(&[self, bias]),
            vec![self.clone(), bias.clone()],
            Some(Box::new(move |g, _out, parents| {
                parents[0].accumulate_grad(g);
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
                parents[1].accumulate_grad(&db);
            })),
        ))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {sa:?} vs {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.data(), &other.data(), m, k, n, false);
        Ok(Tensor::from_parts(
            vec![m, n],
            data,
            Self::any_grad(&[self, other]),
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _out, parents| {
                let a = parents[0].data().clone();
                let b = parents[1].data().clone();
                // dA = G·Bᵀ ; dB = Aᵀ·G
                let da = matmul_raw(g, &b, m, n, k, true);
                let db = matmul_t_left(&a, g, m, k, n);
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            })),
        ))
    }

    /// `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul_nt {sa:?} vs {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = matmul_raw(&self.data(), &other.data(), m, k, n, true);
        Ok(Tensor::from_parts(
            vec![m, n],
            data,
            Self::any_grad(&[self, other]),
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g, _out, parents| {
                let a = parents[0].data().clone();
                let b = parents[1].data().clone();
                // C = A·Bᵀ: dA = G·B ; dB = Gᵀ·A
                let da = matmul_raw(g, &b, m, n, k, false);
                let db = matmul_t_left(g, &a, m, n, k);
                parents[0].accumulate_grad(&da);
                parents[1].accumulate_grad(&db);
            })),
        ))
    }

    // ─── nonlinearities ────────────────────────────────────────────────

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let (rows, n) = self.rows_last();
        let mut data = self.data().clone();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor::from_parts(
            self.shape().to_vec(),
            data,
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(move |g, out, parents| {
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        dx[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                parents[0].accumulate_grad(&dx);
            })),
        )
    }

    /// Exact-erf GELU: `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        Tensor::from_parts(
            self.shape().to_vec(),
            data,
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(|g, _out, parents| {
                let x = parents[0].data().clone();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, &xi)| {
                        let phi = (-xi * xi / 2.0).exp() / (2.0 * PI).sqrt();
                        gi * (std_normal_cdf(xi) + xi * phi)
                    })
                    .collect();
                parents[0].accumulate_grad(&dx);
            })),
        )
    }

    /// Layer normalization over the last axis, epsilon 1e-5.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        const EPS: f64 = 1e-5;
        let (rows, d) = self.rows_last();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm x {:?} gain {:?} bias {:?}",
                self.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let x = self.data().clone();
        let ga = gain.data().clone();
        let bi = bias.data().clone();
        let mut data = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j] - mean) * istd;
                xhat[r * d + j] = h;
                data[r * d + j] = ga[j] * h + bi[j];
            }
        }
        Ok(Tensor::from_parts(
            self.shape().to_vec(),
            data,
            Self::any_grad(&[self, gain, bias]),
            vec![self.clone(), gain.clone(), bias.clone()],
            Some(Box::new(move |g, _out, parents| {
                let ga = parents[1].data().clone();
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut m1 = 0.0; // mean(gain·g)
                    let mut m2 = 0.0; // mean(gain·g·xhat)
                    for j in 0..d {
                        let gg = ga[j] * gr[j];
                        m1 += gg;
                        m2 += gg * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = (ga[j] * gr[j] - m1 - hr[j] * m2) * inv_std[r];
                    }
                }
                parents[0].accumulate_grad(&dx);
                parents[1].accumulate_grad(&dgain);
                parents[2].accumulate_grad(&dbias);
            })),
        ))
    }

    // ─── lookup / reshaping ────────────────────────────────────────────

    /// Row lookup into an embedding table `[V×d]`; gradient scatters back.
    pub fn embedding(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("embedding table {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexError(format!(
                "embedding index {bad} out of table size {v}"
            )));
        }
        let table = self.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&table[i * d..(i + 1) * d]);
        }
        drop(table);
        let idx = indices.to_vec();
        Ok(Tensor::from_parts(
            vec![indices.len(), d],
            data,
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(move |g, _out, parents| {
                let mut dt = vec![0.0; parents[0].numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                parents[0].accumulate_grad(&dt);
            })),
        ))
    }

    /// Gather rows of a 2D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor, TensorError> {
        self.embedding(rows)
    }

    /// Columns `[start, start+len)` of a 2D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "slice_cols [{start}, {}) of {s:?}",
                start + len
            )));
        }
        let (rows, d) = (s[0], s[1]);
        let src = self.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        drop(src);
        Ok(Tensor::from_parts(
            vec![rows, len],
            data,
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(move |g, _out, parents| {
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                parents[0].accumulate_grad(&dx);
            })),
        ))
    }

    /// Concatenate 2D tensors along the last axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptySelection("concat_cols of nothing".into()));
        }
        let rows = parts[0].shape()[0];
        if parts.iter().any(|p| p.shape().len() != 2 || p.shape()[0] != rows) {
            return Err(TensorError::ShapeMismatch(
                "concat_cols row counts disagree".into(),
            ));
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let w = p.shape()[1];
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let requires = parts.iter().any(|p| p.inner.requires_grad);
        let w2 = widths.clone();
        Ok(Tensor::from_parts(
            vec![rows, total],
            data,
            requires,
            parts.to_vec(),
            Some(Box::new(move |g, _out, parents| {
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(&w2) {
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    p.accumulate_grad(&dp);
                    offset += w;
                }
            })),
        ))
    }

    /// Replace rows of a 2D tensor with the rows of `rows` at the given
    /// indices. The replaced base rows receive no gradient.
    pub fn overwrite_rows(&self, rows: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || rows.shape().len() != 2 || rows.shape()[1] != s[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "overwrite_rows base {s:?} rows {:?}",
                rows.shape()
            )));
        }
        if rows.shape()[0] != indices.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} replacement rows vs {} indices",
                rows.shape()[0],
                indices.len()
            )));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexError(format!(
                "row index {bad} out of {n}"
            )));
        }
        let mut data = self.data().clone();
        for (r, &i) in indices.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&rows.data()[r * d..(r + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_parts(
            vec![n, d],
            data,
            Self::any_grad(&[self, rows]),
            vec![self.clone(), rows.clone()],
            Some(Box::new(move |g, _out, parents| {
                let mut dbase = g.to_vec();
                let mut drows = vec![0.0; idx.len() * d];
                for (r, &i) in idx.iter().enumerate() {
                    drows[r * d..(r + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    dbase[i * d..(i + 1) * d].fill(0.0);
                }
                parents[0].accumulate_grad(&dbase);
                parents[1].accumulate_grad(&drows);
            })),
        ))
    }

    // ─── losses / reductions ───────────────────────────────────────────

    /// Per-row negative log likelihood: `[n×V]` logits with one target
    /// index per row gives an `[n]` vector of `−log softmax(row)[target]`.
    pub fn nll_rows(&self, targets: &[usize]) -> Result<Tensor, TensorError> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "nll_rows logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let (n, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexError(format!(
                "target {bad} out of vocab {v}"
            )));
        }
        let logits = self.data().clone();
        let mut data = vec![0.0; n];
        let mut probs = vec![0.0; n * v];
        for r in 0..n {
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[r * v + j] /= sum;
            }
            data[r] = -(row[targets[r]] - max - sum.ln());
        }
        let tgt = targets.to_vec();
        Ok(Tensor::from_parts(
            vec![n],
            data,
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(move |g, _out, parents| {
                let mut dl = vec![0.0; n * v];
                for r in 0..n {
                    for j in 0..v {
                        dl[r * v + j] = g[r] * probs[r * v + j];
                    }
                    dl[r * v + tgt[r]] -= g[r];
                }
                parents[0].accumulate_grad(&dl);
            })),
        ))
    }

    /// `−log softmax(logits)[target]` for a single logit vector.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor, TensorError> {
        let n = self.numel();
        let row = Tensor::from_parts(
            vec![1, n],
            self.data().clone(),
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(|g, _out, parents| parents[0].accumulate_grad(g))),
        );
        row.nll_rows(&[target])?.sum_all()
    }

    /// Mean over positions where `mask` is true.
    pub fn mean_masked(&self, mask: &[bool]) -> Result<Tensor, TensorError> {
        if mask.len() != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "mask length {} vs {} elements",
                mask.len(),
                self.numel()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptySelection("mean over empty mask".into()));
        }
        let sum: f64 = self
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let m2 = mask.to_vec();
        Ok(Tensor::from_parts(
            vec![1],
            vec![sum / count as f64],
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(move |g, _out, parents| {
                let dv: Vec<f64> = m2
                    .iter()
                    .map(|&m| if m { g[0] / count as f64 } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&dv);
            })),
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor, TensorError> {
        let sum: f64 = self.data().iter().sum();
        Ok(Tensor::from_parts(
            vec![1],
            vec![sum],
            self.inner.requires_grad,
            vec![self.clone()],
            Some(Box::new(|g, _out, parents| {
                let dv = vec![g[0]; parents[0].numel()];
                parents[0].accumulate_grad(&dv);
            })),
        ))
    }
}

/// Standard normal CDF via erf.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `a[m×k] · b` with `b` either `[k×n]` or, when `b_transposed`, `[n×k]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, b_transposed: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if b_transposed {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                c[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
    } else {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            let cr = &mut c[i * n..(i + 1) * n];
            for (p, &av) in ar.iter().enumerate() {
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    cr[j] += av * br[j];
                }
            }
        }
    }
    c
}

/// `aᵀ·b` for `a[m×k]`, `b[m×n]` → `[k×n]`.
fn matmul_t_left(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for r in 0..m {
        let ar = &a[r * k..(r + 1) * k];
        let br = &b[r * n..(r + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let cr = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
    c
}

/// Max relative error between analytic gradients and central finite
/// differences, over up to `max_coords` sampled coordinates per parameter.
///
/// `f` must rebuild its graph from the leaf parameters on every call and be
/// deterministic.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    max_coords: usize,
) -> Result<f64, TensorError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, TensorError>,
{
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    for p in params {
        p.zero_grad();
    }
    let loss = f(params)?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite(format!("loss = {}", loss.item())));
    }
    loss.backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(max_coords);
            all
        };
        for c in coords {
            let orig = p.data()[c];
            let mut d = p.data().clone();
            d[c] = orig + eps;
            p.set_data(d);
            let up = f(params)?.item();
            let mut d = p.data().clone();
            d[c] = orig - eps;
            p.set_data(d);
            let down = f(params)?.item();
            let mut d = p.data().clone();
            d[c] = orig;
            p.set_data(d);
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite("perturbed loss".into()));
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[pi][c] - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::param(shape, data)
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(*out.data(), vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::constant(&[2, 1], vec![0.0, 1.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(*out.data(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::constant(&[2, 3], vec![0.0; 6]);
        let b = Tensor::constant(&[2, 3], vec![0.0; 6]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let err = grad_check(
            |ps| ps[0].matmul(&ps[1])?.sum_all(),
            &[a, b],
            1e-4,
            64,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul grad err {err}");
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[5, 4]);
        let err = grad_check(
            |ps| ps[0].matmul_nt(&ps[1])?.sum_all(),
            &[a, b],
            1e-4,
            64,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul_nt grad err {err}");
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let t = Tensor::constant(&[3], vec![0.0, 0.0, 0.0]).softmax();
        for v in t.data().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = Tensor::constant(&[2], vec![1000.0, 0.0]).softmax();
        assert!(big.data()[0] > 1.0 - 1e-9);
        assert!(big.data()[1] < 1e-9);
        assert!(big.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = randn(&mut rng, &[4, 5]).softmax();
        for r in 0..4 {
            let s: f64 = t.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 5]);
        let w = Tensor::constant(&[1, 5], vec![0.3, -0.7, 1.1, 0.2, -0.4]);
        // project onto a fixed direction to get a scalar through the softmax
        let err = grad_check(
            |ps| ps[0].softmax().mul(&w)?.sum_all(),
            &[x],
            1e-4,
            32,
        )
        .unwrap();
        assert!(err < 1e-4, "softmax grad err {err}");
    }

    #[test]
    fn gelu_endpoints() {
        let t = Tensor::constant(&[3], vec![0.0, 10.0, -10.0]).gelu();
        let d = t.data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-6);
        assert!(d[2].abs() < 1e-6);
    }

    #[test]
    fn gelu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3]);
        let err = grad_check(|ps| ps[0].gelu().sum_all(), &[x], 1e-4, 16).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn layer_norm_constant_slice() {
        let x = Tensor::constant(&[1, 4], vec![5.0; 4]);
        let gain = Tensor::constant(&[4], vec![1.0; 4]);
        let bias = Tensor::constant(&[4], vec![0.0; 4]);
        let out = x.layer_norm(&gain, &bias).unwrap();
        for v in out.data().iter() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[1, 16]);
        let gain = Tensor::constant(&[16], vec![1.0; 16]);
        let bias = Tensor::constant(&[16], vec![0.0; 16]);
        let out = x.layer_norm(&gain, &bias).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 16.0;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
        // [1,-1] is already normalized up to epsilon
        let pair = Tensor::constant(&[1, 2], vec![1.0, -1.0]);
        let g2 = Tensor::constant(&[2], vec![1.0; 2]);
        let b2 = Tensor::constant(&[2], vec![0.0; 2]);
        let out = pair.layer_norm(&g2, &b2).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-4);
        assert!((out.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[3, 6]);
        let gain = randn(&mut rng, &[6]);
        let bias = randn(&mut rng, &[6]);
        let w = Tensor::constant(
            &[3, 6],
            (0..18).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let err = grad_check(
            |ps| ps[0].layer_norm(&ps[1], &ps[2])?.mul(&w)?.sum_all(),
            &[x, gain, bias],
            1e-4,
            32,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm grad err {err}");
    }

    #[test]
    fn cross_entropy_uniform_1001() {
        let logits = Tensor::constant(&[1001], vec![0.0; 1001]);
        let loss = logits.cross_entropy(17).unwrap();
        assert!((loss.item() - (1001.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut v = vec![0.0; 8];
        v[3] = 30.0;
        let loss = Tensor::constant(&[8], v).cross_entropy(3).unwrap();
        assert!(loss.item() < 1e-10);
    }

    #[test]
    fn cross_entropy_out_of_range() {
        let logits = Tensor::constant(&[4], vec![0.0; 4]);
        assert!(matches!(
            logits.cross_entropy(4),
            Err(TensorError::IndexError(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[7]);
        let err = grad_check(|ps| ps[0].cross_entropy(2), &[x], 1e-4, 16).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn grad_check_polynomial() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let err = grad_check(|ps| ps[0].mul(&ps[0])?.sum_all(), &[x.clone()], 1e-5, 4).unwrap();
        assert!(err < 1e-8, "sum(x^2) err {err}");
        // analytic gradient is 2x
        x.zero_grad();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn grad_check_constant_function() {
        let x = Tensor::param(&[3], vec![0.5; 3]);
        let err = grad_check(|_| Ok(Tensor::scalar(4.0)), &[x], 1e-4, 8).unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn reuse_accumulates_both_contributions() {
        // y = x·x (elementwise) + x summed: dy/dx = 2x + 1, via two uses of x
        let x = Tensor::param(&[3], vec![0.3, -1.2, 0.9]);
        let err = grad_check(
            |ps| ps[0].mul(&ps[0])?.sum_all()?.add(&ps[0].sum_all()?),
            &[x],
            1e-4,
            8,
        )
        .unwrap();
        assert!(err < 1e-6, "reuse grad err {err}");
    }

    #[test]
    fn embedding_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = randn(&mut rng, &[5, 4]);
        let err = grad_check(
            |ps| {
                let a = ps[0].embedding(&[0, 2, 2])?;
                let b = ps[0].embedding(&[4, 1, 0])?;
                Tensor::concat_cols(&[a, b])?.gelu().sum_all()
            },
            &[table],
            1e-4,
            32,
        )
        .unwrap();
        assert!(err < 1e-4, "embedding grad err {err}");
    }

    #[test]
    fn slice_and_select_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[4, 6]);
        let err = grad_check(
            |ps| {
                ps[0]
                    .select_rows(&[3, 1])?
                    .slice_cols(2, 3)?
                    .mul(&ps[0].select_rows(&[0, 0])?.slice_cols(0, 3)?)?
                    .sum_all()
            },
            &[x],
            1e-4,
            32,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn mean_masked_matches_manual() {
        let v = Tensor::constant(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let m = v.mean_masked(&[true, false, true, false]).unwrap();
        assert_eq!(m.item(), 2.0);
        assert!(matches!(
            v.mean_masked(&[false; 4]),
            Err(TensorError::EmptySelection(_))
        ));
    }
}
