//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records every operation
//! produced through [`Value`] handles during the forward pass, and
//! [`Value::backward`] replays the records in reverse, accumulating
//! gradients into every leaf that asked for them. The operator set is
//! exactly what the restoration networks and objectives need: 2-D
//! convolution, upsampling, pooling, instance normalisation, pointwise
//! activations, and a handful of reductions.
//!
//! All arithmetic is sequential `f64`; given identical inputs a forward
//! and backward pass is bitwise reproducible.
//!
//! Shape errors are programming errors and panic with a diagnostic that
//! includes the offending shapes.

mod kernels;
mod tape;

pub mod gradcheck;

pub use tape::{Tape, Value};

/// Dense row-major tensor of 64-bit reals.
///
/// `data.len() == shape.iter().product()` holds at all times; a rank-0
/// tensor (empty shape) is a scalar with a single element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expect: usize = shape.iter().product();
        assert!(
            data.len() == expect,
            "tensor data length {} does not match shape {:?} (expects {})",
            data.len(),
            shape,
            expect
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a scalar (rank-0 or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on non-scalar tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        let expect: usize = shape.iter().product();
        assert!(
            expect == self.data.len(),
            "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
            self.shape,
            self.data.len(),
            shape,
            expect
        );
        Tensor { shape, data: self.data.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn assert_same_shape(what: &str, a: &[usize], b: &[usize]) {
    assert!(
        a == b,
        "{}: shape mismatch {:?} vs {:?}",
        what,
        a,
        b
    );
}
