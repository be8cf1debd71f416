//! Minimal layer library with explicit forward and backward passes.
//!
//! Every layer keeps its parameters in [`Param`] values that carry both the
//! weights and an accumulated gradient buffer. Backward passes add into the
//! gradient buffers; callers zero them between optimizer steps.

mod adam;
mod conv;
mod dense;
mod gru;

pub use adam::{Adam, AdamConfig};
pub use conv::{upsample2x, upsample2x_backward, Activation, Conv2d, ConvBlock, ConvStack, StackTrace, Tensor4};
pub use dense::{Dense, Mat};
pub use gru::{Gru, GruCache};

use rand::Rng;

use crate::real::Real;

/// A named trainable array.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// L2 weight decay applies to this array (convolution kernels only).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
            decay: false,
        }
    }

    /// He-uniform initialisation: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
    pub fn he_uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(name, shape);
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        for v in &mut p.value {
            *v = T::c(rng.gen_range(-limit..limit));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning parameters. Visiting order is stable and defines the
/// order used by optimizers and checkpoints.
pub trait Parameterized<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self)
    where
        T: Real,
    {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    fn all_finite(&self) -> bool
    where
        T: Real,
    {
        let mut ok = true;
        self.visit(&mut |p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }
}
