//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors, with exactly the op set the networks in this workspace need.
//!
//! Storage is `f32` in normal runs; every kernel is generic over [`Scalar`]
//! so gradient checks can run the same code paths in `f64`, where central
//! finite differences are meaningful.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

mod conv;
mod tape;

pub mod checkpoint;
pub mod layers;

pub use conv::{conv_out_dim, conv_transposed_out_dim};
pub use tape::{AddKind, NodeId, OpSpec, Tape};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: output contains a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape; rebuild the graph before calling it again")]
    BackwardConsumed,
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tensor. Implemented for `f32` (storage) and `f64`
/// (verification mode).
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![S::ZERO; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Option<Vec<S>>) {
        debug_assert!(g.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = g;
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

impl Tensor<f32> {
    /// Truncated normal init (resample beyond two standard deviations),
    /// the DCGAN convention used for every weight in this workspace.
    pub fn trunc_normal<R: rand::Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0f32, std).expect("std must be positive");
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                data.push(v);
            }
        }
        Self { shape, data, requires_grad: true, grad: None }
    }
}

/// Adam optimizer with bias correction. State is one (m, v) pair per
/// parameter, in binding order.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Result<Self> {
        if lr <= 0.0 {
            return Err(TensorError::Optimizer(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(TensorError::Optimizer("betas must lie in [0, 1)".into()));
        }
        Ok(Self { lr, beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Parameters without a gradient are
    /// treated as having a zero gradient (their moments still decay).
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Optimizer(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(TensorError::Optimizer(format!(
                    "parameter {i} changed size: state {} vs tensor {}",
                    self.m[i].len(),
                    p.numel()
                )));
            }
            let g: Vec<f32> = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.numel()],
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Flatten optimizer state for checkpointing: (t, per-param m, per-param v).
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn adam_rejects_bad_lr() {
        assert!(Adam::new(0.0, 0.9, 0.999).is_err());
        assert!(Adam::new(-1.0, 0.9, 0.999).is_err());
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        p.set_grad(Some(vec![0.0; 3]));
        let before = p.data().to_vec();
        let mut adam = Adam::new(0.1, 0.9, 0.999).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // Constant gradient of 1 with lr 0.1: the bias-corrected first step
        // moves the parameter by almost exactly -lr.
        let mut p = Tensor::from_vec(vec![1], vec![0.0f32]).unwrap();
        p.set_grad(Some(vec![1.0]));
        let mut adam = Adam::new(0.1, 0.9, 0.999).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6, "got {}", p.data()[0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::from_vec(vec![2], vec![0.3f32, -0.7]).unwrap();
            let mut adam = Adam::new(0.01, 0.9, 0.999).unwrap();
            for step in 0..50 {
                let g = vec![(step as f32).sin(), (step as f32).cos()];
                p.set_grad(Some(g));
                adam.step(&mut [&mut p]).unwrap();
            }
            p.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn trunc_normal_respects_bound() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        let t = Tensor::trunc_normal(vec![64, 64], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }
}
