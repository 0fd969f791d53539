//! Dense rank-4 tensor engine: the value type that flows through the whole
//! detection graph, the operator set needed by FN-YOLO, and a tape-based
//! reverse-mode autodiff over that operator set.
//!
//! Storage is `f64` row-major in (n, c, h, w) order. The on-disk format
//! ([`io`]) stores `f32`, so round-tripping narrows precision; everything
//! in memory stays at 64 bits so the gradient checks have headroom.

pub(crate) mod shape;

pub mod io;
pub mod ops;
pub mod tape;


pub use shape::Shape4;

use thiserror::Error;

/// Errors produced by tensor construction and operator shape checks.
#[derive(Debug, Error)]
pub enum TensorError {
    /// A dimension did not match what the operator requires. `axis` names the
    /// offending axis ("n", "c", "h", "w", "k", ...).
    #[error("dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// Structural misconfiguration (bad stride, groups, channel split...).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Output spatial dims would be zero or negative.
    #[error("conv produces empty output: input {in_dim} with k={k}, pad={pad}, stride={stride}")]
    EmptyOutput {
        in_dim: usize,
        k: usize,
        pad: usize,
        stride: usize,
    },
    /// NaN or infinity found by the finiteness validator.
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    /// Autodiff state errors (backward without a recorded forward, non-scalar
    /// loss, stale ids).
    #[error("autodiff state error: {0}")]
    TapeState(String),
    /// Binary (de)serialization failures.
    #[error("tensor io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense rank-4 tensor, row-major (n, c, h, w), with an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::DimMismatch {
                axis: "data",
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    /// Scalar (1,1,1,1) tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![value]).unwrap()
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// The value at flat index 0; panics unless the tensor is (1,1,1,1).
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.shape.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::DimMismatch {
                axis: "grad",
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rejects NaN/Inf anywhere in the data buffer. Used by tests and the
    /// trainer's numeric guard.
    pub fn validate_finite(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i, value: v });
            }
        }
        Ok(())
    }

    /// Contiguous row (fixed n, c, y) as a slice of length w.
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[f64] {
        let start = self.shape.idx(n, c, y, 0);
        &self.data[start..start + self.shape.w]
    }

    /// One full channel plane (fixed n, c) as a slice of length h*w.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = self.shape.idx(n, c, 0, 0);
        &self.data[start..start + self.shape.h * self.shape.w]
    }
}

/// Convolution weights: kernel laid out (c_out, c_in_per_group, k, k) plus
/// optional per-output-channel bias and the geometry of the sliding window.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvWeights {
    pub fn new(
        kernel: Tensor4,
        bias: Option<Vec<f64>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let s = kernel.shape();
        if s.h != s.w {
            return Err(TensorError::Config(format!(
                "kernel must be square, got {}x{}",
                s.h, s.w
            )));
        }
        if s.h < 1 {
            return Err(TensorError::Config("kernel size must be >= 1".into()));
        }
        if stride < 1 {
            return Err(TensorError::Config("stride must be >= 1".into()));
        }
        if groups < 1 || s.n % groups != 0 {
            return Err(TensorError::Config(format!(
                "groups {} must divide c_out {}",
                groups, s.n
            )));
        }
        if let Some(b) = &bias {
            if b.len() != s.n {
                return Err(TensorError::DimMismatch {
                    axis: "bias",
                    expected: s.n,
                    got: b.len(),
                });
            }
        }
        Ok(ConvWeights {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn c_in_per_group(&self) -> usize {
        self.kernel.shape().c
    }

    /// Declared input channel count (groups * c_in_per_group).
    pub fn c_in(&self) -> usize {
        self.groups * self.c_in_per_group()
    }

    pub fn k(&self) -> usize {
        self.kernel.shape().h
    }
}

/// Batch-norm parameters and running statistics for one channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, v) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != c {
                return Err(TensorError::DimMismatch {
                    axis: name,
                    expected: c,
                    got: v.len(),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(TensorError::Config("bn eps must be > 0".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(TensorError::Config("bn momentum must be in (0,1)".into()));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(TensorError::Config("bn running_var must be >= 0".into()));
        }
        Ok(())
    }
}

/// Elementwise activation kinds available to the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Silu,
    Sigmoid,
}

impl Act {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Act::Relu => x.max(0.0),
            Act::Silu => x * sigmoid(x),
            Act::Sigmoid => sigmoid(x),
        }
    }

    /// d(act)/dx at input x.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Act::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x), stable for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
