//! Minimal reverse-mode automatic differentiation over 5-D tensors
//! `(batch, channels, x, y, z)`, x fastest.
//!
//! A [`Tensor`] is a reference-counted graph node holding its value, a lazily
//! allocated gradient slot, and (when any input requires a gradient) its
//! parents together with the backward rule of the operation that produced it.
//! Nodes built only from non-differentiable inputs keep no parents, so
//! inference graphs free intermediate buffers as soon as they go out of scope.

mod checkpoint;
mod conv;
mod ops;

pub use checkpoint::{read_params, read_params_from, write_params, write_params_to, NamedArray, PARAM_MAGIC};
pub use ops::{
    add, affine, channel_softmax, concat_channels, conv3d, conv_transpose3d, crop, dropout, mul,
    relu, select_channel, soft_dice, sum, ConvParams, DICE_EPS,
};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub type Shape = [usize; 5];

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    shape: Shape,
    value: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: ops::Op,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.name())
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Shape, value: Vec<f64>, requires_grad: bool, op: ops::Op) -> Self {
        debug_assert_eq!(value.len(), numel(&shape));
        // Without a differentiable input there is nothing to propagate to.
        let op = if requires_grad { op } else { ops::Op::Leaf };
        Tensor(Rc::new(Node { shape, value, grad: RefCell::new(None), requires_grad, op }))
    }

    /// Constant input (no gradient).
    pub fn new(shape: Shape, value: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, value, false)
    }

    /// Differentiable leaf, e.g. a network parameter.
    pub fn param(shape: Shape, value: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, value, true)
    }

    fn leaf(shape: Shape, value: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if value.len() != numel(&shape) {
            return Err(Error::invalid(format!(
                "value length {} does not match shape {shape:?}",
                value.len()
            )));
        }
        Ok(Self::from_parts(shape, value, requires_grad, ops::Op::Leaf))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_parts(shape, vec![0.0; numel(&shape)], false, ops::Op::Leaf)
    }

    /// Single-channel tensor `(1, 1, nx, ny, nz)` holding a volume's data.
    pub fn from_volume(v: &Volume) -> Self {
        let [nx, ny, nz] = v.dims();
        Self::from_parts([1, 1, nx, ny, nz], v.data().to_vec(), false, ops::Op::Leaf)
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0.shape[2], self.0.shape[3], self.0.shape[4]]
    }

    pub fn channels(&self) -> usize {
        self.0.shape[1]
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn value(&self) -> &[f64] {
        &self.0.value
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.0.value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    /// Gradient copied out, zeros when none was accumulated.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.0.grad.borrow().clone().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            None => *slot = Some(g),
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        }
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from this scalar. Leaves that require gradients keep
    /// `d self / d leaf` (accumulated with `+=` across calls until
    /// [`zero_grad`](Self::zero_grad)); intermediate gradients are released.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate(vec![1.0]);
        for node in order.iter().rev() {
            let is_leaf = matches!(node.0.op, ops::Op::Leaf);
            if is_leaf {
                continue;
            }
            // The root keeps its unit gradient; interior gradients are released.
            let g = if node.id() == self.id() {
                node.0.grad.borrow().clone()
            } else {
                node.0.grad.borrow_mut().take()
            };
            if let Some(g) = g {
                node.0.op.backward(node, &g);
            }
        }
        Ok(())
    }

    /// Post-order (parents before children) over nodes that require gradients.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Copy channel `c` of batch 0 into a volume on `grid`.
    pub fn channel_volume(&self, c: usize, grid: crate::volume::Grid) -> Result<Volume> {
        if grid.dims != self.spatial() {
            return Err(Error::invalid(format!(
                "grid dims {:?} do not match tensor spatial dims {:?}",
                grid.dims,
                self.spatial()
            )));
        }
        if c >= self.channels() {
            return Err(Error::invalid(format!("channel {c} out of range")));
        }
        let n = grid.len();
        Volume::new(grid, self.0.value[c * n..(c + 1) * n].to_vec())
    }
}
