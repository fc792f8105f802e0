use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::graph::Op;
use super::{NumResult, TensorError};

pub(super) struct Inner {
    pub(super) rows: usize,
    pub(super) cols: usize,
    pub(super) data: Vec<f64>,
    pub(super) grad: Option<Vec<f64>>,
    pub(super) requires_grad: bool,
    /// How this tensor was produced; None for leaves and detached values.
    /// Cleared by backward, which makes graphs single-use.
    pub(super) op: Option<Op>,
    /// Set on the root once backward has consumed its graph.
    pub(super) spent: bool,
}

/// A 2-D row-major f64 matrix behind a shared handle.
///
/// Cloning a `Tensor` clones the handle, not the storage; the same value can
/// therefore appear at several places in a compute graph. Values are
/// immutable once produced by an operation. Leaves (parameters, inputs) may
/// be mutated in place through [`Tensor::set_data`] / [`Tensor::add_scaled`],
/// which is sound because graphs never outlive the backward call that
/// consumes them.
#[derive(Clone)]
pub struct Tensor(pub(super) Rc<RefCell<Inner>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor({}x{}, requires_grad={})",
            inner.rows, inner.cols, inner.requires_grad
        )
    }
}

impl Tensor {
    pub(super) fn new(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor(Rc::new(RefCell::new(Inner {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            op,
            spent: false,
        })))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, vec![0.0; rows * cols], false, None)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor::new(rows, cols, vec![value; rows * cols], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(1, 1, vec![value], false, None)
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> NumResult<Tensor> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                len: data.len(),
                rows,
                cols,
            });
        }
        Ok(Tensor::new(rows, cols, data, false, None))
    }

    /// Builds a tensor from equal-length rows. Intended for tests and small
    /// hand-written fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> NumResult<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::Dimension {
                    op: "from_rows",
                    msg: format!("ragged rows: expected {}, got {}", c, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor::new(r, c, data, false, None))
    }

    /// Marks a freshly constructed leaf as trainable. Consumes and returns
    /// the handle so parameter definitions read as one expression.
    pub fn with_grad(self) -> Tensor {
        self.0.borrow_mut().requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.0.borrow();
        (inner.rows, inner.cols)
    }

    pub fn numel(&self) -> usize {
        let inner = self.0.borrow();
        inner.rows * inner.cols
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Element accessor for tests and small readers; panics out of range.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let inner = self.0.borrow();
        assert!(row < inner.rows && col < inner.cols, "index out of range");
        inner.data[row * inner.cols + col]
    }

    /// The single element of a 1x1 tensor; panics on anything larger.
    /// Loss operations guarantee 1x1 outputs, so misuse is a programming
    /// error rather than a runtime condition.
    pub fn item(&self) -> f64 {
        let inner = self.0.borrow();
        assert!(
            inner.rows == 1 && inner.cols == 1,
            "item() on a {}x{} tensor",
            inner.rows,
            inner.cols
        );
        inner.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn row_to_vec(&self, row: usize) -> Vec<f64> {
        let inner = self.0.borrow();
        assert!(row < inner.rows, "row out of range");
        inner.data[row * inner.cols..(row + 1) * inner.cols].to_vec()
    }

    /// Copy of the accumulated gradient, if any backward has reached this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// A gradient-free copy of the current values. The copy is a fresh leaf
    /// with no history; nothing flows back through it.
    pub fn detach(&self) -> Tensor {
        let inner = self.0.borrow();
        Tensor::new(inner.rows, inner.cols, inner.data.clone(), false, None)
    }

    /// Overwrites the values of a leaf. Rejects shape changes.
    pub fn set_data(&self, values: &[f64]) -> NumResult<()> {
        let mut inner = self.0.borrow_mut();
        if values.len() != inner.data.len() {
            return Err(TensorError::DataLength {
                len: values.len(),
                rows: inner.rows,
                cols: inner.cols,
            });
        }
        inner.data.copy_from_slice(values);
        Ok(())
    }

    /// data += scale * delta, elementwise. The optimizer's update primitive.
    pub fn add_scaled(&self, delta: &[f64], scale: f64) -> NumResult<()> {
        let mut inner = self.0.borrow_mut();
        if delta.len() != inner.data.len() {
            return Err(TensorError::DataLength {
                len: delta.len(),
                rows: inner.rows,
                cols: inner.cols,
            });
        }
        for (x, d) in inner.data.iter_mut().zip(delta) {
            *x += scale * d;
        }
        Ok(())
    }

    pub(super) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Single-coordinate perturbation used by the finite-difference checker.
    pub(super) fn nudge(&self, index: usize, delta: f64) {
        let mut inner = self.0.borrow_mut();
        inner.data[index] += delta;
    }

    pub(super) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(contrib.len(), inner.data.len());
        match inner.grad.as_mut() {
            Some(grad) => {
                for (g, c) in grad.iter_mut().zip(contrib) {
                    *g += c;
                }
            }
            None => inner.grad = Some(contrib.to_vec()),
        }
    }
}
