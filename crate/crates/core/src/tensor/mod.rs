//! Dense row-major tensors and the reverse-mode autodiff tape built on them.

mod autodiff;
mod element;
pub mod gradcheck;
mod kernels;

pub use autodiff::{BackwardFn, Gradients, NodeId, Tape, Var};
pub use element::{DType, Element};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub(crate) use kernels::permute_data;

use crate::error::{Error, Result};

/// An n-dimensional array with row-major storage.
///
/// A rank-0 tensor (empty shape) is a scalar holding one element. Every axis
/// length is at least one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "axis lengths must be at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on a zero-length axis; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = check_shape(shape).expect("invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel = check_shape(shape).expect("invalid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "item() requires exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        validate_permutation(axes, self.ndim())?;
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        Ok(Self {
            data: permute_data(&self.data, &self.shape, axes),
            shape,
        })
    }

    /// Reorders axes and then reshapes in one step.
    pub fn permute_reshape(&self, axes: &[usize], new_shape: &[usize]) -> Result<Self> {
        self.permute(axes)?.reshape(new_shape)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits along axis 1 at `at`, returning the prefix and the suffix.
    pub fn split_axis1(&self, at: usize) -> Result<(Self, Self)> {
        if self.ndim() < 2 || at == 0 || at >= self.shape[1] {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("cannot split axis 1 at {at}"),
            });
        }
        let outer = self.shape[0];
        let len = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut head = Vec::with_capacity(outer * at * inner);
        let mut tail = Vec::with_capacity(outer * (len - at) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            head.extend_from_slice(&self.data[base..base + at * inner]);
            tail.extend_from_slice(&self.data[base + at * inner..base + len * inner]);
        }
        let mut head_shape = self.shape.clone();
        head_shape[1] = at;
        let mut tail_shape = self.shape.clone();
        tail_shape[1] = len - at;
        Ok((
            Self {
                shape: head_shape,
                data: head,
            },
            Self {
                shape: tail_shape,
                data: tail,
            },
        ))
    }

    /// Concatenates tensors along axis 1; all other axes must agree.
    pub fn concat_axis1(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        if first.ndim() < 2 {
            return Err(Error::InvalidShape {
                shape: first.shape.clone(),
                reason: "concat along axis 1 needs rank >= 2".into(),
            });
        }
        let outer = first.shape[0];
        let tail = &first.shape[2..];
        for p in parts {
            if p.ndim() != first.ndim() || p.shape[0] != outer || &p.shape[2..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_axis1",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let inner: usize = tail.iter().product();
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[1] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = total;
        Ok(Self { shape, data })
    }

    /// Selects entries `range` of axis 0.
    pub fn slice_axis0(&self, start: usize, end: usize) -> Result<Self> {
        if self.ndim() == 0 || start >= end || end > self.shape[0] {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("bad axis-0 slice {start}..{end}"),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Gathers the listed entries of axis 0, in order.
    pub fn gather_axis0(&self, indices: &[usize]) -> Result<Self> {
        if self.ndim() == 0 || indices.is_empty() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "gather needs rank >= 1 and at least one index".into(),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: format!("index {i} out of range"),
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

pub(crate) fn validate_permutation(axes: &[usize], ndim: usize) -> Result<()> {
    let mut seen = vec![false; ndim];
    if axes.len() != ndim {
        return Err(Error::InvalidShape {
            shape: axes.to_vec(),
            reason: format!("permutation of length {} for rank {ndim}", axes.len()),
        });
    }
    for &a in axes {
        if a >= ndim || seen[a] {
            return Err(Error::InvalidShape {
                shape: axes.to_vec(),
                reason: "not a permutation".into(),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

/// The permutation undoing `axes`.
pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
