use std::fmt;
use std::sync::Arc;

use crate::error::{ensure, Error, Result};

/// Dense row-major array of `f64` values.
///
/// Image batches use NCHW layout. The value buffer is shared and never
/// mutated after construction, so cloning a tensor is cheap and tensors can
/// be handed between threads freely.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

/// Branch-free scan over fixed blocks so the check vectorizes.
pub(crate) fn all_finite(data: &[f64]) -> bool {
    data.chunks(256)
        .all(|c| c.iter().fold(true, |ok, v| ok & v.is_finite()))
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor",
            "shape {shape:?} has a zero extent"
        );
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "tensor",
            "shape {shape:?} needs {numel} values, got {}",
            data.len()
        );
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Like [`Tensor::new`] but additionally rejects non-finite values.
    pub fn finite(op: &'static str, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if !all_finite(&data) {
            let bad = data.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::domain(
                op,
                format!("non-finite value {} at flat index {bad}", data[bad]),
            ));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: shape must be positive")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        ensure!(
            self.numel() == 1,
            "item",
            "tensor of shape {:?} is not a scalar",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.numel() && shape.iter().all(|&d| d > 0),
            "reshape",
            "cannot view {:?} as {shape:?}",
            self.shape
        );
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Extents of a 4-D tensor as `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::contract(
                op,
                format!("expected NCHW tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        ensure!(!items.is_empty(), "stack", "nothing to stack");
        let inner = items[0].shape().to_vec();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            ensure!(
                t.shape() == inner,
                "stack",
                "shape {:?} differs from {inner:?}",
                t.shape()
            );
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self::new(&shape, data)
    }

    /// Splits off the leading axis; the inverse of [`Tensor::stack`].
    pub fn unstack(&self) -> Vec<Tensor> {
        let inner = &self.shape[1..];
        let inner = if inner.is_empty() {
            vec![1]
        } else {
            inner.to_vec()
        };
        let len: usize = inner.iter().product();
        self.data
            .chunks(len)
            .map(|chunk| Tensor {
                shape: inner.clone(),
                data: Arc::new(chunk.to_vec()),
            })
            .collect()
    }

    /// Bitwise equality of shape and every value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let shown: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, " {:?}", shown)?;
        if self.numel() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn finite_constructor_flags_nan() {
        let err = Tensor::finite("probe", &[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "probe", .. }));
    }

    #[test]
    fn stack_unstack_inverse() {
        let a = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1]);
        let parts = s.unstack();
        assert!(parts[0].bit_eq(&a) && parts[1].bit_eq(&b));
    }
}
