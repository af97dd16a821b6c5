use std::cell::Cell;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

thread_local! {
    /// Mutation-testing switch: when set, ReLU backward passes every
    /// gradient through, ignoring the mask. Per thread so tests stay isolated.
    static BROKEN_RELU_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn set_broken_relu_backward(on: bool) -> bool {
    BROKEN_RELU_BACKWARD.with(|c| c.replace(on))
}

/// `max(0, x)`; the subgradient at 0 is 0.
#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Element> Relu<T> {
    pub fn apply(x: &Tensor<T>) -> Result<Tensor<T>> {
        x.max_scalar(T::zero())
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = Self::apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| Error::MissingCache { layer: "relu".into() })?;
        if x.shape() != grad_out.shape() {
            return Err(Error::ShapeMismatch { op: "relu backward", left: x.shape().to_vec(), right: grad_out.shape().to_vec() });
        }
        let broken = BROKEN_RELU_BACKWARD.with(Cell::get);
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&xv, &g)| if xv > T::zero() || broken { g } else { T::zero() })
            .collect();
        Tensor::new(x.shape(), data)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` so eval
/// mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    rate: f64,
    mask: Option<Tensor<T>>,
}

impl<T: Element> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate must be in [0,1), got {rate}")));
        }
        Ok(Dropout { rate, mask: None })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward_train(&mut self, x: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let mask = if self.rate == 0.0 {
            Tensor::ones(x.shape())
        } else {
            let keep = 1.0 - self.rate;
            let scale = T::cast_from(1.0 / keep);
            Tensor::from_fn(x.shape(), |_| if rng.bernoulli(keep) { scale } else { T::zero() })
        };
        let y = x.mul(&mask)?;
        self.mask = Some(mask);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or_else(|| Error::MissingCache { layer: "dropout".into() })?;
        grad_out.mul(mask)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}
