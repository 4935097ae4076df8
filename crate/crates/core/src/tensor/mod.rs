//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Feature maps are stored `N, C, H, W` row-major. A [`Tensor`] is an
//! immutable value; ops return new tensors. When any input of an op is
//! tracked on a [`Tape`], the op is recorded so [`Tensor::backward`] can
//! populate gradients of the tape's leaves.

mod conv;
pub mod counter;
mod element;
pub mod gradcheck;
mod loss;
mod norm;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use conv::{conv2d, upsample_nearest, Conv2dParams};
pub use element::{DType, Element};
pub(crate) use element::{gemm, MatMut, MatRef};
pub use gradcheck::{gradcheck, gradcheck_coords, GradcheckReport};
pub use loss::{bce_with_logits, gather_cells, ltrb_iou_loss};
pub use norm::{batch_norm, BatchNormOutput};
pub use ops::{concat, softmax};
pub use tape::Tape;

use crate::error::{Error, Result};
use tape::Node;

/// Dense N-dimensional array with optional tape participation.
#[derive(Clone)]
pub struct Tensor<T: Element = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Node<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn first_non_finite<T: Element>(data: &[T]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                "element count",
                numel_of(&shape),
                data.len(),
            ));
        }
        if let Some(index) = first_non_finite(&data) {
            return Err(Error::NonFinite {
                op: "from_vec",
                index,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Build an untracked tensor from data already known to be finite.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(&mut f).collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", "element count", 1, self.numel()));
        }
        Ok(self.data[0])
    }

    /// Extents of a rank-4 `N, C, H, W` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::shape(op, "rank", 4, other.len())),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, not tracked on any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Gradient accumulated for this leaf by the last backward pass on its tape.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let node = self.node.as_ref()?;
        let g = node.tape.grad_of(node.id)?;
        Some(Tensor {
            shape: self.shape.clone(),
            data: g,
            node: None,
        })
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Seed with ones and run reverse accumulation. The output must be a scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward without a seed requires a scalar output, got shape {:?}",
                self.shape
            )));
        }
        self.backward_with(&Tensor::ones(self.shape.clone()))
    }

    pub fn backward_with(&self, seed: &Tensor<T>) -> Result<()> {
        let node = self
            .node
            .as_ref()
            .ok_or_else(|| Error::Usage("backward on a tensor that is not on any tape".into()))?;
        if seed.shape != self.shape {
            return Err(Error::shape(
                "backward",
                "seed shape",
                format!("{:?}", self.shape),
                format!("{:?}", seed.shape),
            ));
        }
        node.tape.run_backward(node.id, seed.to_vec())
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| acc * e + i)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    /// Copy with one flat element replaced; untracked.
    pub fn with_value(&self, flat: usize, value: T) -> Result<Self> {
        let mut data = self.to_vec();
        data[flat] = value;
        Self::from_vec(self.shape.clone(), data)
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Cast to another element type (untracked).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::DTYPE, self.shape)?;
        if self.requires_grad() {
            write!(f, " (tracked)")?;
        }
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    /// Bitwise value equality; tape participation is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }
}

/// Record an op's output, attaching it to the inputs' tape when any of them is tracked.
///
/// `backward` receives the output gradient and returns one optional gradient per
/// input, in the order of `inputs`.
pub(crate) fn record<T: Element, F>(
    op: &'static str,
    inputs: &[&Tensor<T>],
    shape: Vec<usize>,
    data: Vec<T>,
    backward: F,
) -> Result<Tensor<T>>
where
    F: FnOnce(&[T]) -> Vec<Option<Vec<T>>> + Send + 'static,
{
    debug_assert_eq!(numel_of(&shape), data.len());
    if let Some(index) = first_non_finite(&data) {
        return Err(Error::NonFinite { op, index });
    }
    let mut tape: Option<&Tape<T>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) if !existing.same_as(&node.tape) => {
                    return Err(Error::Usage(format!("{op}: inputs tracked on different tapes")));
                }
                _ => {}
            }
        }
    }
    let node = match tape {
        None => None,
        Some(tape) => {
            let ids = inputs.iter().map(|t| t.node_id()).collect();
            Some(tape.push(op, ids, Box::new(backward))?)
        }
    };
    Ok(Tensor {
        shape,
        data: Arc::new(data),
        node,
    })
}

pub(crate) fn any_tracked<T: Element>(inputs: &[&Tensor<T>]) -> bool {
    inputs.iter().any(|t| t.requires_grad())
}
