//! Dense row-major `f64` tensors and shape validation.

use std::fmt;

use rand::Rng;

/// Error raised when a tensor is constructed from inconsistent data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeError {
    /// The flat value buffer does not match the product of the dimensions.
    LenMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    /// A dimension is zero; empty tensors are not representable.
    ZeroDim { shape: Vec<usize> },
    /// The element count overflows `usize`.
    Overflow { shape: Vec<usize> },
    /// A rank-0 shape was supplied; scalars are rank-1 tensors of length 1.
    EmptyShape,
}

impl fmt::Display for ShapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeError::LenMismatch {
                shape,
                expected,
                got,
            } => write!(
                f,
                "value buffer of length {got} does not fill shape {shape:?} (needs {expected})"
            ),
            ShapeError::ZeroDim { shape } => {
                write!(f, "shape {shape:?} has a zero dimension")
            }
            ShapeError::Overflow { shape } => {
                write!(f, "element count of shape {shape:?} overflows usize")
            }
            ShapeError::EmptyShape => write!(f, "tensor shape must have at least one dimension"),
        }
    }
}

impl std::error::Error for ShapeError {}

/// Checked product of dimensions.
pub fn numel_of(shape: &[usize]) -> Result<usize, ShapeError> {
    if shape.is_empty() {
        return Err(ShapeError::EmptyShape);
    }
    if shape.contains(&0) {
        return Err(ShapeError::ZeroDim {
            shape: shape.to_vec(),
        });
    }
    let mut n: usize = 1;
    for &d in shape {
        n = n.checked_mul(d).ok_or(ShapeError::Overflow {
            shape: shape.to_vec(),
        })?;
    }
    Ok(n)
}

/// A dense row-major tensor of `f64` values.
///
/// `requires_grad` marks parameters: when a tensor is placed on a
/// [`crate::tape::Tape`] as a leaf, this flag decides whether the backward
/// sweep accumulates a gradient for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating that `values` exactly fills `shape`.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, ShapeError> {
        let expected = numel_of(&shape)?;
        if values.len() != expected {
            return Err(ShapeError::LenMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
        })
    }

    /// All-zero tensor of the given shape. Panics on an invalid shape; use
    /// [`Tensor::new`] for externally supplied shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = numel_of(shape).expect("zeros: invalid shape");
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
        }
    }

    /// Rank-1 scalar wrapper.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
        }
    }

    /// Gaussian-initialized tensor, Box-Muller over the supplied RNG.
    pub fn randn<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let n = numel_of(shape).expect("randn: invalid shape");
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            values.push(mean + std * r * theta.cos());
            if values.len() < n {
                values.push(mean + std * r * theta.sin());
            }
        }
        Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
        }
    }

    /// Uniform-initialized tensor on `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = numel_of(shape).expect("uniform: invalid shape");
        let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}
