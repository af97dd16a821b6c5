//! Differentiable layer primitives, each with a forward pass and an analytic
//! backward pass.
//!
//! A layer is built from a [`LayerKind`] (pure configuration) and owns its
//! parameters, their gradients and the forward cache its backward pass needs.
//! Train-mode forward populates the cache; eval-mode inference goes through
//! `&self` and never mutates the layer.

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod merge;
mod pool;
mod softmax;

use serde::{Deserialize, Serialize};

pub use activation::{Dropout, Relu};
pub(crate) use activation::set_broken_relu_backward;
pub use batchnorm::BatchNorm2d;
pub use conv::{conv_output_dim, Conv2d, ConvSpec, Padding};
pub use linear::FullyConnected;
pub use merge::{concat_channels, split_channels, Add, Concat};
pub use pool::GlobalAvgPool;
pub use softmax::{softmax, softmax_cross_entropy, SoftmaxLoss, SoftmaxOutput};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Configuration of one layer, independent of its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(ConvSpec),
    BatchNorm2d { channels: usize, epsilon: f64, momentum: f64 },
    Relu,
    Dropout { rate: f64 },
    Concat,
    Add,
    GlobalAvgPool,
    FullyConnected { in_features: usize, out_features: usize },
    SoftmaxOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by the optimizer.
    Learnable,
    /// Running statistic, updated by forward passes only.
    Statistic,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub role: ParamRole,
}

impl<T: Element> Param<T> {
    pub fn learnable(value: Tensor<T>) -> Self {
        Param { value, grad: None, role: ParamRole::Learnable }
    }

    pub fn statistic(value: Tensor<T>) -> Self {
        Param { value, grad: None, role: ParamRole::Statistic }
    }
}

/// He-normal initialisation, `std = sqrt(2 / fan_in)`.
pub fn he_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::cast_from(rng.normal::<f64>() * std))
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm2d(BatchNorm2d<T>),
    Relu(Relu<T>),
    Dropout(Dropout<T>),
    Concat(Concat),
    Add(Add),
    GlobalAvgPool(GlobalAvgPool),
    FullyConnected(FullyConnected<T>),
    SoftmaxOutput(SoftmaxOutput),
}

fn single<'a, T>(inputs: &[&'a Tensor<T>], layer: &str) -> Result<&'a Tensor<T>> {
    match inputs {
        [x] => Ok(x),
        _ => Err(Error::InvalidConfig(format!("{layer} takes exactly one input, got {}", inputs.len()))),
    }
}

fn single_shape<'a>(inputs: &[&'a [usize]], layer: &str) -> Result<&'a [usize]> {
    match inputs {
        [s] => Ok(s),
        _ => Err(Error::InvalidConfig(format!("{layer} takes exactly one input, got {}", inputs.len()))),
    }
}

impl<T: Element> Layer<T> {
    /// Builds a freshly initialised layer.
    pub fn from_kind(kind: &LayerKind, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            LayerKind::Conv2d(spec) => Layer::Conv2d(Conv2d::new(spec.clone(), rng)?),
            LayerKind::BatchNorm2d { channels, epsilon, momentum } => {
                Layer::BatchNorm2d(BatchNorm2d::new(*channels, *epsilon, *momentum)?)
            }
            LayerKind::Relu => Layer::Relu(Relu::default()),
            LayerKind::Dropout { rate } => Layer::Dropout(Dropout::new(*rate)?),
            LayerKind::Concat => Layer::Concat(Concat::default()),
            LayerKind::Add => Layer::Add(Add::default()),
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            LayerKind::FullyConnected { in_features, out_features } => {
                Layer::FullyConnected(FullyConnected::new(*in_features, *out_features, rng)?)
            }
            LayerKind::SoftmaxOutput => Layer::SoftmaxOutput(SoftmaxOutput),
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(l) => LayerKind::Conv2d(l.spec().clone()),
            Layer::BatchNorm2d(l) => LayerKind::BatchNorm2d {
                channels: l.channels(),
                epsilon: l.epsilon(),
                momentum: l.momentum(),
            },
            Layer::Relu(_) => LayerKind::Relu,
            Layer::Dropout(l) => LayerKind::Dropout { rate: l.rate() },
            Layer::Concat(_) => LayerKind::Concat,
            Layer::Add(_) => LayerKind::Add,
            Layer::GlobalAvgPool(_) => LayerKind::GlobalAvgPool,
            Layer::FullyConnected(l) => LayerKind::FullyConnected {
                in_features: l.in_features(),
                out_features: l.out_features(),
            },
            Layer::SoftmaxOutput(_) => LayerKind::SoftmaxOutput,
        }
    }

    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(l) => l.output_shape(single_shape(inputs, "conv2d")?),
            Layer::BatchNorm2d(l) => l.output_shape(single_shape(inputs, "batchnorm")?),
            Layer::Relu(_) | Layer::Dropout(_) => Ok(single_shape(inputs, "activation")?.to_vec()),
            Layer::Concat(_) => Concat::output_shape(inputs),
            Layer::Add(_) => Add::output_shape(inputs),
            Layer::GlobalAvgPool(_) => GlobalAvgPool::output_shape(single_shape(inputs, "gap")?),
            Layer::FullyConnected(l) => l.output_shape(single_shape(inputs, "fully_connected")?),
            Layer::SoftmaxOutput(_) => SoftmaxOutput::output_shape(single_shape(inputs, "softmax")?),
        }
    }

    /// Forward pass. In [`Mode::Train`] the cache needed by
    /// [`Layer::backward`] is populated; in [`Mode::Eval`] nothing is mutated.
    pub fn forward(&mut self, inputs: &[&Tensor<T>], mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        if mode == Mode::Eval {
            return self.infer(inputs);
        }
        match self {
            Layer::Conv2d(l) => l.forward(single(inputs, "conv2d")?),
            Layer::BatchNorm2d(l) => l.forward_train(single(inputs, "batchnorm")?),
            Layer::Relu(l) => l.forward(single(inputs, "relu")?),
            Layer::Dropout(l) => l.forward_train(single(inputs, "dropout")?, rng),
            Layer::Concat(l) => l.forward(inputs),
            Layer::Add(l) => l.forward(inputs),
            Layer::GlobalAvgPool(l) => l.forward(single(inputs, "gap")?),
            Layer::FullyConnected(l) => l.forward(single(inputs, "fully_connected")?),
            Layer::SoftmaxOutput(l) => l.forward(single(inputs, "softmax")?),
        }
    }

    /// Eval-mode forward.
    pub fn infer(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.infer(single(inputs, "conv2d")?),
            Layer::BatchNorm2d(l) => l.infer(single(inputs, "batchnorm")?),
            Layer::Relu(_) => Relu::apply(single(inputs, "relu")?),
            Layer::Dropout(_) => Ok(single(inputs, "dropout")?.clone()),
            Layer::Concat(_) => concat_channels(inputs),
            Layer::Add(_) => Add::sum(inputs),
            Layer::GlobalAvgPool(_) => GlobalAvgPool::apply(single(inputs, "gap")?),
            Layer::FullyConnected(l) => l.infer(single(inputs, "fully_connected")?),
            Layer::SoftmaxOutput(l) => l.forward(single(inputs, "softmax")?),
        }
    }

    /// Backward pass. Fills parameter gradients and, when `need_input_grad`
    /// is set, returns one gradient per forward input.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Vec<Tensor<T>>> {
        let one = |g: Option<Tensor<T>>| g.into_iter().collect::<Vec<_>>();
        match self {
            Layer::Conv2d(l) => l.backward(grad_out, need_input_grad).map(one),
            Layer::BatchNorm2d(l) => l.backward(grad_out).map(|g| vec![g]),
            Layer::Relu(l) => l.backward(grad_out).map(|g| vec![g]),
            Layer::Dropout(l) => l.backward(grad_out).map(|g| vec![g]),
            Layer::Concat(l) => l.backward(grad_out),
            Layer::Add(l) => l.backward(grad_out),
            Layer::GlobalAvgPool(l) => l.backward(grad_out).map(|g| vec![g]),
            Layer::FullyConnected(l) => l.backward(grad_out, need_input_grad).map(one),
            Layer::SoftmaxOutput(_) => Ok(vec![grad_out.clone()]),
        }
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        match self {
            Layer::Conv2d(l) => l.params(),
            Layer::BatchNorm2d(l) => l.params(),
            Layer::FullyConnected(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        match self {
            Layer::Conv2d(l) => l.params_mut(),
            Layer::BatchNorm2d(l) => l.params_mut(),
            Layer::FullyConnected(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.clear_cache(),
            Layer::BatchNorm2d(l) => l.clear_cache(),
            Layer::Relu(l) => l.clear_cache(),
            Layer::Dropout(l) => l.clear_cache(),
            Layer::FullyConnected(l) => l.clear_cache(),
            _ => {}
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv2d(_))
    }
}
