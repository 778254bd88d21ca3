//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every forward computation builds a dynamic graph of ref-counted nodes;
//! `backward()` on a scalar loss walks the graph in reverse topological
//! order and accumulates gradients into every tensor created with
//! `Tensor::param`. Graphs are rebuilt per training instance, so nodes are
//! cheap and freed as soon as the instance's tensors drop.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataShape { len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("grad check: eps {0:e} outside [1e-7, 1e-4]")]
    BadEps(f64),
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    consumed: bool,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
pub struct Tensor(Rc<RefCell<Node>>);

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.borrow();
        write!(f, "Tensor{:?}{:?}", n.shape, n.data)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, grad: bool) -> Tensor {
        Tensor(Rc::new(RefCell::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            grad: grad.then(|| vec![0.0; data.len()]),
            shape,
            data,
            parents: Vec::new(),
            backward: None,
            consumed: false,
        })))
    }

    /// Constant tensor; excluded from gradient accumulation.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, AdError> {
        if data.len() != numel(shape) {
            return Err(AdError::DataShape {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::from_node(shape.to_vec(), data, false))
    }

    /// Trainable leaf: receives an accumulated gradient after `backward()`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, AdError> {
        if data.len() != numel(shape) {
            return Err(AdError::DataShape {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::from_node(shape.to_vec(), data, true))
    }

    /// Rank-1 constant.
    pub fn vector(data: Vec<f64>) -> Tensor {
        let shape = vec![data.len()];
        Tensor::from_node(shape, data, false)
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::from_node(vec![1], vec![x], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_node(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    fn op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.0.borrow().grad.is_some());
        let t = Tensor::from_node(shape, data, needs_grad);
        if needs_grad {
            let mut n = t.0.borrow_mut();
            n.parents = parents;
            n.backward = Some(backward);
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.0.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Scalar payload. Panics when the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert!(n.data.len() == 1, "item() on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().grad.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Mutate data with the accumulated gradient in view (optimizer hook).
    pub fn update<F: FnOnce(&mut [f64], &[f64])>(&self, f: F) {
        let mut n = self.0.borrow_mut();
        let Node { data, grad, .. } = &mut *n;
        let zero;
        let g: &[f64] = match grad {
            Some(g) => g,
            None => {
                zero = vec![0.0; data.len()];
                &zero
            }
        };
        f(data, g);
    }

    /// Overwrite a single coordinate (finite-difference perturbations).
    pub fn set_coord(&self, i: usize, x: f64) {
        self.0.borrow_mut().data[i] = x;
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.0.borrow().data[i]
    }

    fn accumulate(&self, contrib: &[f64]) {
        if let Some(g) = self.0.borrow_mut().grad.as_mut() {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
    }

    // ── ops ─────────────────────────────────────────────────────────

    /// Matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.value();
        let b = rhs.value();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = a[i * k + l];
                for j in 0..n {
                    out[i * n + j] += av * b[l * n + j];
                }
            }
        }
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                let a = pa.value();
                let b = pb.value();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let u = up[i * n + j];
                        for l in 0..k {
                            da[i * k + l] += u * b[l * n + j];
                            db[l * n + j] += a[i * k + l] * u;
                        }
                    }
                }
                pa.accumulate(&da);
                pb.accumulate(&db);
            }),
        ))
    }

    /// Matrix-vector product [m×k]·[k] → [m].
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor, AdError> {
        let (ls, rs) = (self.shape(), v.shape());
        if ls.len() != 2 || rs.len() != 1 || ls[1] != rs[0] {
            return Err(AdError::ShapeMismatch {
                op: "matvec",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k) = (ls[0], ls[1]);
        let a = self.value();
        let x = v.value();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += a[i * k + j] * x[j];
            }
            out[i] = acc;
        }
        let (pa, px) = (self.clone(), v.clone());
        Ok(Tensor::op(
            vec![m],
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |up| {
                let a = pa.value();
                let x = px.value();
                let mut da = vec![0.0; m * k];
                let mut dx = vec![0.0; k];
                for i in 0..m {
                    let u = up[i];
                    for j in 0..k {
                        da[i * k + j] += u * x[j];
                        dx[j] += a[i * k + j] * u;
                    }
                }
                pa.accumulate(&da);
                px.accumulate(&dx);
            }),
        ))
    }

    fn zip_shapes(
        &self,
        rhs: &Tensor,
        op: &'static str,
    ) -> Result<(Vec<usize>, bool, bool), AdError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let lhs_scalar = self.len() == 1 && rhs.len() != 1;
        let rhs_scalar = rhs.len() == 1 && self.len() != 1;
        if ls == rs || lhs_scalar || rhs_scalar {
            let shape = if lhs_scalar { rs } else { ls };
            Ok((shape, lhs_scalar, rhs_scalar))
        } else {
            Err(AdError::ShapeMismatch {
                op,
                lhs: ls,
                rhs: rs,
            })
        }
    }

    /// Elementwise sum; one side may be a scalar broadcast.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (shape, ls, rs) = self.zip_shapes(rhs, "add")?;
        let a = self.value();
        let b = rhs.value();
        let n = numel(&shape);
        let out: Vec<f64> = (0..n)
            .map(|i| a[if ls { 0 } else { i }] + b[if rs { 0 } else { i }])
            .collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                if ls {
                    pa.accumulate(&[up.iter().sum()]);
                } else {
                    pa.accumulate(up);
                }
                if rs {
                    pb.accumulate(&[up.iter().sum()]);
                } else {
                    pb.accumulate(up);
                }
            }),
        ))
    }

    /// Elementwise difference; one side may be a scalar broadcast.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (shape, ls, rs) = self.zip_shapes(rhs, "sub")?;
        let a = self.value();
        let b = rhs.value();
        let n = numel(&shape);
        let out: Vec<f64> = (0..n)
            .map(|i| a[if ls { 0 } else { i }] - b[if rs { 0 } else { i }])
            .collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                if ls {
                    pa.accumulate(&[up.iter().sum()]);
                } else {
                    pa.accumulate(up);
                }
                let neg: Vec<f64> = up.iter().map(|u| -u).collect();
                if rs {
                    pb.accumulate(&[neg.iter().sum()]);
                } else {
                    pb.accumulate(&neg);
                }
            }),
        ))
    }

    /// Elementwise (Hadamard) product; one side may be a scalar broadcast.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (shape, ls, rs) = self.zip_shapes(rhs, "mul")?;
        let a = self.value();
        let b = rhs.value();
        let n = numel(&shape);
        let out: Vec<f64> = (0..n)
            .map(|i| a[if ls { 0 } else { i }] * b[if rs { 0 } else { i }])
            .collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                let a = pa.value();
                let b = pb.value();
                let da: Vec<f64> = if ls {
                    vec![up
                        .iter()
                        .enumerate()
                        .map(|(i, u)| u * b[if rs { 0 } else { i }])
                        .sum()]
                } else {
                    up.iter()
                        .enumerate()
                        .map(|(i, u)| u * b[if rs { 0 } else { i }])
                        .collect()
                };
                let db: Vec<f64> = if rs {
                    vec![up
                        .iter()
                        .enumerate()
                        .map(|(i, u)| u * a[if ls { 0 } else { i }])
                        .sum()]
                } else {
                    up.iter()
                        .enumerate()
                        .map(|(i, u)| u * a[if ls { 0 } else { i }])
                        .collect()
                };
                pa.accumulate(&da);
                pb.accumulate(&db);
            }),
        ))
    }

    pub fn tanh(&self) -> Result<Tensor, AdError> {
        let out: Vec<f64> = self.value().iter().map(|x| x.tanh()).collect();
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let d: Vec<f64> = up
                    .iter()
                    .zip(&y)
                    .map(|(u, yi)| u * (1.0 - yi * yi))
                    .collect();
                p.accumulate(&d);
            }),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor, AdError> {
        let out: Vec<f64> = self
            .value()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let d: Vec<f64> = up
                    .iter()
                    .zip(&y)
                    .map(|(u, yi)| u * yi * (1.0 - yi))
                    .collect();
                p.accumulate(&d);
            }),
        ))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&self) -> Result<Tensor, AdError> {
        let shape = self.shape();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(AdError::BadRank {
                op: "softmax",
                expected: "non-empty rank-1 tensor",
                got: shape,
            });
        }
        let x = self.value();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite { op: "softmax" });
        }
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let dot: f64 = up.iter().zip(&y).map(|(u, yi)| u * yi).sum();
                let d: Vec<f64> = up.iter().zip(&y).map(|(u, yi)| yi * (u - dot)).collect();
                p.accumulate(&d);
            }),
        ))
    }

    /// Concatenate two rank-1 tensors; backward splits the gradient.
    pub fn concat(&self, rhs: &Tensor) -> Result<Tensor, AdError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 1 || rs.len() != 1 {
            return Err(AdError::ShapeMismatch {
                op: "concat",
                lhs: ls,
                rhs: rs,
            });
        }
        let (p, q) = (ls[0], rs[0]);
        let mut out = self.value();
        out.extend(rhs.value());
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            vec![p + q],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                pa.accumulate(&up[..p]);
                pb.accumulate(&up[p..]);
            }),
        ))
    }

    /// Element `i` of a rank-1 tensor as a scalar tensor.
    pub fn index(&self, i: usize) -> Result<Tensor, AdError> {
        let shape = self.shape();
        if shape.len() != 1 || i >= shape[0] {
            return Err(AdError::OutOfBounds {
                op: "index",
                index: i,
                shape,
            });
        }
        let x = self.coord(i);
        let p = self.clone();
        let n = self.len();
        Ok(Tensor::op(
            vec![1],
            vec![x],
            vec![self.clone()],
            Box::new(move |up| {
                let mut d = vec![0.0; n];
                d[i] = up[0];
                p.accumulate(&d);
            }),
        ))
    }

    /// Contiguous sub-vector `[start, start+len)` of a rank-1 tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor, AdError> {
        let shape = self.shape();
        if shape.len() != 1 || start + len > shape[0] {
            return Err(AdError::OutOfBounds {
                op: "slice",
                index: start + len,
                shape,
            });
        }
        let out = self.value()[start..start + len].to_vec();
        let p = self.clone();
        let n = self.len();
        Ok(Tensor::op(
            vec![len],
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let mut d = vec![0.0; n];
                d[start..start + len].copy_from_slice(up);
                p.accumulate(&d);
            }),
        ))
    }

    /// Row `r` of a rank-2 tensor as a rank-1 tensor (embedding lookup).
    pub fn row(&self, r: usize) -> Result<Tensor, AdError> {
        let shape = self.shape();
        if shape.len() != 2 || r >= shape[0] {
            return Err(AdError::OutOfBounds {
                op: "row",
                index: r,
                shape,
            });
        }
        let cols = shape[1];
        let out = self.value()[r * cols..(r + 1) * cols].to_vec();
        let p = self.clone();
        let n = self.len();
        Ok(Tensor::op(
            vec![cols],
            out,
            vec![self.clone()],
            Box::new(move |up| {
                let mut d = vec![0.0; n];
                d[r * cols..(r + 1) * cols].copy_from_slice(up);
                p.accumulate(&d);
            }),
        ))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor, AdError> {
        let total: f64 = self.value().iter().sum();
        let p = self.clone();
        let n = self.len();
        Ok(Tensor::op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |up| {
                p.accumulate(&vec![up[0]; n]);
            }),
        ))
    }

    /// Negative log-likelihood of `label` under softmax(logits), computed
    /// in log-sum-exp form. Gradient is softmax(logits) − onehot(label).
    pub fn cross_entropy(&self, label: usize) -> Result<Tensor, AdError> {
        let shape = self.shape();
        if shape.len() != 1 || label >= shape[0] {
            return Err(AdError::OutOfBounds {
                op: "cross_entropy",
                index: label,
                shape,
            });
        }
        let x = self.value();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite { op: "cross_entropy" });
        }
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - x[label];
        let probs: Vec<f64> = x.iter().map(|v| (v - max).exp() / sum).collect();
        let p = self.clone();
        Ok(Tensor::op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |up| {
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| up[0] * (pi - if i == label { 1.0 } else { 0.0 }))
                    .collect();
                p.accumulate(&d);
            }),
        ))
    }

    /// Reverse pass from a scalar loss. Each graph may be consumed once.
    pub fn backward(&self) -> Result<(), AdError> {
        if self.len() != 1 {
            return Err(AdError::NonScalarLoss(self.shape()));
        }
        if self.0.borrow().consumed {
            return Err(AdError::GraphConsumed);
        }
        self.0.borrow_mut().consumed = true;
        if self.0.borrow().grad.is_none() {
            // Loss does not depend on any trainable tensor.
            return Ok(());
        }

        // Post-order DFS: every node lands after all of its parents, so the
        // reversed order visits consumers before producers exactly once.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, idx)) = stack.pop() {
            let parent = node.0.borrow().parents.get(idx).cloned();
            match parent {
                Some(p) => {
                    stack.push((node, idx + 1));
                    if visited.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(node),
            }
        }

        if let Some(g) = self.0.borrow_mut().grad.as_mut() {
            g[0] = 1.0;
        }
        for node in order.iter().rev() {
            let n = node.0.borrow();
            if let (Some(f), Some(g)) = (n.backward.as_ref(), n.grad.as_ref()) {
                let upstream = g.clone();
                f(&upstream);
            }
        }
        Ok(())
    }
}

/// Concatenate scalars (or vectors) into one rank-1 tensor.
pub fn stack(parts: &[Tensor]) -> Result<Tensor, AdError> {
    let mut it = parts.iter();
    let first = it
        .next()
        .ok_or(AdError::BadRank {
            op: "stack",
            expected: "at least one tensor",
            got: vec![0],
        })?
        .clone();
    it.try_fold(first, |acc, t| acc.concat(t))
}

// ── gradient checking ───────────────────────────────────────────────

/// Outcome of a finite-difference sweep over parameter coordinates.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    /// Parameter name and coordinate of the worst relative error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // Scale floor keeps central-difference roundoff on near-zero gradients
    // from registering as a spurious mismatch.
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compare analytic gradients of `f` against central finite differences on
/// up to `max_coords` evenly spaced coordinates per parameter.
pub fn grad_check<F>(
    mut f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport, AdError>
where
    F: FnMut() -> Result<Tensor, AdError>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(AdError::BadEps(eps));
    }
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        tol,
        worst: None,
    };
    for ((name, p), grad) in params.iter().zip(&analytic) {
        let n = p.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let step = n as f64 / max_coords as f64;
            (0..max_coords).map(|i| (i as f64 * step) as usize).collect()
        };
        for i in coords {
            let original = p.coord(i);
            p.set_coord(i, original + eps);
            let plus = f()?.item();
            p.set_coord(i, original - eps);
            let minus = f()?.item();
            p.set_coord(i, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AdError::NonFinite { op: "grad_check" });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(grad[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap().value(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let z = Tensor::new(vec![0.0, 0.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&z).unwrap().value(), vec![0.0, 0.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] × [5,6]ᵀ = [17, 39]
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().value(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
        let b = Tensor::new(vec![0.0; 4], &[2, 2]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elementwise_closed_forms() {
        assert_eq!(Tensor::scalar(0.0).tanh().unwrap().item(), 0.0);
        assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().item(), 0.5);
        assert_close(Tensor::scalar(1.0).tanh().unwrap().item(), 0.761594, 1e-6);
    }

    #[test]
    fn softmax_single_and_uniform() {
        assert_eq!(Tensor::vector(vec![3.7]).softmax().unwrap().value(), vec![1.0]);
        let u = Tensor::vector(vec![2.5, 2.5, 2.5]).softmax().unwrap().value();
        for v in u {
            assert_close(v, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let y = Tensor::vector(vec![2.0f64.ln(), 0.0]).softmax().unwrap().value();
        assert_close(y[0], 2.0 / 3.0, 1e-12);
        assert_close(y[1], 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(Tensor::vector(vec![f64::NAN, 0.0]).softmax().is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).softmax().is_err());
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        assert_eq!(a.concat(&b).unwrap().value(), vec![1.0, 2.0, 3.0]);
        let empty = Tensor::vector(vec![]);
        assert_eq!(empty.concat(&b).unwrap().value(), vec![3.0]);
        let c = Tensor::vector(vec![0.5]);
        let d = Tensor::vector(vec![0.25, 0.125]);
        assert_eq!(c.concat(&d).unwrap().value(), vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let confident = Tensor::vector(vec![20.0, -20.0]).cross_entropy(0).unwrap();
        assert!(confident.item() < 1e-9);
        let even = Tensor::vector(vec![0.0, 0.0]).cross_entropy(1).unwrap();
        assert_eq!(even.item(), 2.0f64.ln());
        let skew = Tensor::vector(vec![0.0, 3.0f64.ln()]).cross_entropy(0).unwrap();
        assert_close(skew.item(), 4.0f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_zero_logits_is_ln2_for_both_labels() {
        for label in 0..2 {
            let loss = Tensor::vector(vec![0.0, 0.0]).cross_entropy(label).unwrap();
            assert_eq!(loss.item(), 2.0f64.ln());
        }
    }

    #[test]
    fn backward_square() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_tanh_at_zero() {
        let x = Tensor::param(vec![0.0], &[1]).unwrap();
        let loss = x.tanh().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_shared_node() {
        // loss = x² + x → dloss/dx = 2x + 1 = 7 at x = 3
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.tanh().unwrap();
        assert!(matches!(y.backward(), Err(AdError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_rejects_second_pass() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(AdError::GraphConsumed)));
    }

    #[test]
    fn grad_accumulates_across_instances_until_zeroed() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        for _ in 0..2 {
            let loss = x.mul(&x).unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn concat_then_split_roundtrips_values_and_grads() {
        let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::param(vec![5.0], &[1]).unwrap();
        let joined = a.concat(&b).unwrap();
        let left = joined.slice(0, 2).unwrap();
        let right = joined.slice(2, 1).unwrap();
        assert_eq!(left.value(), a.value());
        assert_eq!(right.value(), b.value());
        // Σ(left·[1,2]) + Σ(right·3): grads should route back untouched.
        let w1 = Tensor::vector(vec![1.0, 2.0]);
        let w2 = Tensor::vector(vec![3.0]);
        let loss = left
            .mul(&w1)
            .unwrap()
            .sum()
            .unwrap()
            .add(&right.mul(&w2).unwrap().sum().unwrap())
            .unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Tensor::param(vec![1.5, -0.7, 2.0, 0.9], &[4]).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        let report = grad_check(|| x.mul(&x)?.sum(), &params, 1e-5, 1e-4, 16).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err < 1e-8, "err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let params = vec![("x".to_string(), x.clone())];
        assert!(matches!(
            grad_check(|| x.sum(), &params, 1e-2, 1e-4, 4),
            Err(AdError::BadEps(_))
        ));
    }

    #[test]
    fn grad_check_composite_graph() {
        // One composite loss touching most differentiable primitives.
        let m = Tensor::param(vec![0.3, -1.2, 0.8, 0.5, -0.4, 1.1], &[2, 3]).unwrap();
        let v = Tensor::param(vec![0.7, -0.3, 0.9], &[3]).unwrap();
        let w = Tensor::param(vec![-0.6, 0.4], &[2]).unwrap();
        let params = vec![
            ("m".to_string(), m.clone()),
            ("v".to_string(), v.clone()),
            ("w".to_string(), w.clone()),
        ];
        let f = || {
            let mv = m.matvec(&v)?; // matvec
            let r0 = m.row(0)?; // row
            let joined = mv.concat(&w)?; // concat
            let t = joined.tanh()?; // tanh
            let s = t.sigmoid()?; // sigmoid
            let sm = s.softmax()?; // softmax
            let first = sm.index(0)?; // index
            let mid = sm.slice(1, 2)?; // slice
            let prod = mid.mul(&w)?; // mul
            let diff = prod.sub(&w)?; // sub
            let bump = diff.add(&first)?; // add (scalar broadcast)
            let partial = bump.sum()?; // sum
            let ce = r0.cross_entropy(1)?; // cross_entropy (3-way)
            partial.add(&ce)
        };
        let report = grad_check(f, &params, 1e-5, 1e-4, 64).unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_check_matmul() {
        let a = Tensor::param(vec![0.5, -1.1, 0.3, 0.9, -0.2, 1.4], &[2, 3]).unwrap();
        let b = Tensor::param(vec![1.2, -0.8, 0.4, 0.6, -1.5, 0.7], &[3, 2]).unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let report = grad_check(
            || a.matmul(&b)?.tanh()?.sum(),
            &params,
            1e-5,
            1e-4,
            16,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
