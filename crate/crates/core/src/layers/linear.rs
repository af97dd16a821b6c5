use super::{he_normal, Param};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::gemm::{gemm, Lhs};
use crate::tensor::{Element, Tensor};

/// `y = x·W + b` with `W: Din×Dout`.
#[derive(Debug, Clone)]
pub struct FullyConnected<T> {
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Element> FullyConnected<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::InvalidConfig("fully connected layer needs positive widths".into()));
        }
        Ok(FullyConnected {
            weight: Param::learnable(he_normal(&[in_features, out_features], in_features, rng)),
            bias: Param::learnable(Tensor::zeros(&[out_features])),
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight.value
    }

    pub fn set_weight(&mut self, weight: Tensor<T>, bias: Tensor<T>) -> Result<()> {
        if weight.shape() != self.weight.value.shape() || bias.shape() != self.bias.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_weight",
                left: self.weight.value.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        self.weight.value = weight;
        self.bias.value = bias;
        Ok(())
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n, d] if *d == self.in_features() => Ok(vec![*n, self.out_features()]),
            _ => Err(Error::ShapeMismatch { op: "fully_connected", left: vec![self.in_features()], right: input.to_vec() }),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let n = x.shape()[0];
        let (din, dout) = (self.in_features(), self.out_features());
        let mut out = vec![T::zero(); n * dout];
        gemm(n, dout, din, Lhs::normal(x.data(), din), self.weight.value.data(), &mut out, false);
        for row in out.chunks_exact_mut(dout) {
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        Tensor::new(&[n, dout], out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self.input.as_ref().ok_or_else(|| Error::MissingCache { layer: "fully_connected".into() })?;
        let n = x.shape()[0];
        let (din, dout) = (self.in_features(), self.out_features());
        if grad_out.shape() != [n, dout] {
            return Err(Error::ShapeMismatch { op: "fully_connected backward", left: vec![n, dout], right: grad_out.shape().to_vec() });
        }
        let mut gw = vec![T::zero(); din * dout];
        gemm(din, dout, n, Lhs::transposed(x.data(), din), grad_out.data(), &mut gw, false);
        let mut gb = vec![T::zero(); dout];
        for row in grad_out.data().chunks_exact(dout) {
            for (acc, &g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        self.weight.grad = Some(Tensor::new(&[din, dout], gw)?);
        self.bias.grad = Some(Tensor::new(&[dout], gb)?);
        if need_input_grad {
            Ok(Some(grad_out.matmul(&self.weight.value.transpose2()?)?))
        } else {
            Ok(None)
        }
    }
}
