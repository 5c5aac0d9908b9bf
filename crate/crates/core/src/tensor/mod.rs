//! Dense N-dimensional `f64` tensor with tape-based reverse-mode
//! differentiation.
//!
//! Tensors are row-major and contiguous. Every op validates shapes, checks
//! its output for NaN/Inf (failing fast instead of propagating poison) and,
//! when gradients are enabled, records a backward closure on the implicit
//! tape formed by parent links. [`Tensor::backward`] replays the tape in
//! reverse topological order and frees the graph afterwards.
//!
//! A tensor is a cheap handle (`Rc`); cloning shares storage. Data is
//! immutable once written except through the optimizer in [`optim`].

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

mod ops;
pub mod optim;

/// Backward closure: receives the upstream gradient of the node's output and
/// the node's parents, and accumulates into each parent's grad buffer.
type BackpropFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Edge {
    parents: Vec<Tensor>,
    backprop: BackpropFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    edge: Option<Edge>,
}

/// Handle to a tensor node. Clone is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

thread_local! {
    static GRAD_MODE: Cell<bool> = const { Cell::new(true) };
}

/// True when ops record the backward tape (the default).
pub fn is_grad_enabled() -> bool {
    GRAD_MODE.with(|m| m.get())
}

/// Runs `f` without recording the tape. Used for inference and evaluation.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_MODE.with(|m| {
        let prev = m.replace(false);
        let out = f();
        m.set(prev);
        out
    })
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    // ── construction ────────────────────────────────────────────────

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("from_vec", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor::raw(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![1], vec![value], false)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad,
                edge: None,
            })),
        }
    }

    /// Marks this tensor as a differentiation leaf (gradients accumulate here).
    pub fn requires_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    /// Wraps an op result: validates finiteness and records the tape edge
    /// when gradients are enabled and any parent participates.
    fn result_of(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backprop: impl Fn(&[f64], &[Tensor]) + 'static,
    ) -> Result<Tensor> {
        check_finite(op, &data)?;
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad_set());
        let out = Tensor::raw(shape, data, track);
        if track {
            out.inner.borrow_mut().edge = Some(Edge {
                parents,
                backprop: Box::new(backprop),
            });
        }
        Ok(out)
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.data.len(), 1, "item() on tensor with {} elements", n.data.len());
        n.data[0]
    }

    /// Element at a multi-dimensional index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(index.len(), n.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(n.shape.iter()).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} (extent {dim})");
            flat = flat * dim + ix;
        }
        n.data[flat]
    }

    pub fn requires_grad_set(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrites the data buffer in place, keeping the shape. Meant for
    /// checkpoint restore and targeted weight surgery; everything else
    /// treats tensors as immutable once written.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("tensor holds {} elements, got {}", self.numel(), data.len()),
            ));
        }
        check_finite("set_data", data)?;
        self.inner.borrow_mut().data.copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut n = self.inner.borrow_mut();
        if !n.requires_grad {
            return;
        }
        let len = n.data.len();
        debug_assert_eq!(g.len(), len, "gradient length mismatch");
        let buf = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    // ── reverse-mode differentiation ────────────────────────────────

    /// Backpropagates from a scalar loss: populates the grad of every
    /// reachable leaf with `requires_grad`, accumulating additively across
    /// calls. The recorded graph is freed afterwards, so a new forward pass
    /// is needed before the next backward.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Postorder DFS so parents precede children in `topo`.
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut topo: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<usize> = HashSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.key()) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    if let Some(edge) = &t.inner.borrow().edge {
                        for p in &edge.parents {
                            if p.requires_grad_set() {
                                stack.push(Visit::Enter(p.clone()));
                            }
                        }
                    }
                }
                Visit::Exit(t) => topo.push(t),
            }
        }

        self.accumulate_grad(&[1.0]);

        for node in topo.iter().rev() {
            let edge = node.inner.borrow_mut().edge.take();
            let Some(edge) = edge else { continue };
            let grad = node
                .inner
                .borrow()
                .grad
                .clone()
                .expect("interior node visited without gradient");
            (edge.backprop)(&grad, &edge.parents);
            // Interior grads are only staging buffers; free them with the graph.
            node.inner.borrow_mut().grad = None;
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.inner.borrow();
        let head: Vec<f64> = n.data.iter().copied().take(8).collect();
        let ellipsis = if n.data.len() > 8 { ", ..." } else { "" };
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data={:?}{})",
            n.shape, n.requires_grad, head, ellipsis
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::from_vec(&[1], vec![f64::INFINITY]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = w.mul(&w).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w ⊙ w), w = [1, 2] → grad [2, 4]
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let w = Tensor::from_vec(&[1], vec![0.0]).unwrap().requires_grad();
        let loss = w.sigmoid().unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        let g = w.grad().unwrap()[0];
        assert!((g - 0.25).abs() < 1e-12, "σ'(0) = 0.25, got {g}");
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        for _ in 0..2 {
            let loss = w.mul(&w).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn no_grad_skips_taping() {
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = no_grad(|| w.mul(&w).unwrap());
        assert!(!y.requires_grad_set());
        assert!(y.inner.borrow().edge.is_none());
    }

    #[test]
    fn graph_is_freed_after_backward() {
        let w = Tensor::from_vec(&[1], vec![3.0]).unwrap().requires_grad();
        let y = w.mul(&w).unwrap();
        let loss = y.sum_all().unwrap();
        loss.backward().unwrap();
        assert!(y.inner.borrow().edge.is_none());
        assert!(y.inner.borrow().grad.is_none());
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }
}
