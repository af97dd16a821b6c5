//! Per-channel batch normalisation over the N, H and W axes.

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
enum Cache<T> {
    /// Normalised with batch statistics; backward includes their dependence on x.
    Batch { x_hat: Vec<T>, inv_std: Vec<f64>, shape: Vec<usize> },
    /// Normalised with running statistics (frozen layer in train mode).
    Running { x_hat: Vec<T>, inv_std: Vec<f64>, shape: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    channels: usize,
    epsilon: f64,
    momentum: f64,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Param<T>,
    running_var: Param<T>,
    frozen: bool,
    cache: Option<Cache<T>>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if channels == 0 || !(epsilon > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "batchnorm needs channels > 0, epsilon > 0, momentum in [0,1); got {channels}, {epsilon}, {momentum}"
            )));
        }
        Ok(BatchNorm2d {
            channels,
            epsilon,
            momentum,
            gamma: Param::learnable(Tensor::ones(&[channels])),
            beta: Param::learnable(Tensor::zeros(&[channels])),
            running_mean: Param::statistic(Tensor::zeros(&[channels])),
            running_var: Param::statistic(Tensor::ones(&[channels])),
            frozen: false,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// A frozen layer normalises with its running statistics even in train mode.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn gamma(&self) -> &Tensor<T> {
        &self.gamma.value
    }

    pub fn beta(&self) -> &Tensor<T> {
        &self.beta.value
    }

    pub fn running_mean(&self) -> &Tensor<T> {
        &self.running_mean.value
    }

    pub fn running_var(&self) -> &Tensor<T> {
        &self.running_var.value
    }

    pub fn set_affine(&mut self, gamma: Tensor<T>, beta: Tensor<T>) -> Result<()> {
        self.check_channels(gamma.shape())?;
        self.check_channels(beta.shape())?;
        self.gamma.value = gamma;
        self.beta.value = beta;
        Ok(())
    }

    pub fn set_running(&mut self, mean: Tensor<T>, var: Tensor<T>) -> Result<()> {
        self.check_channels(mean.shape())?;
        self.check_channels(var.shape())?;
        if var.data().iter().any(|&v| !(v > T::zero())) {
            return Err(Error::InvalidConfig("running variance must be strictly positive".into()));
        }
        self.running_mean.value = mean;
        self.running_var.value = var;
        Ok(())
    }

    fn check_channels(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.channels] {
            return Err(Error::ShapeMismatch { op: "batchnorm", left: vec![self.channels], right: shape.to_vec() });
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [_, _, _, c] if *c == self.channels => Ok(input.to_vec()),
            _ => Err(Error::ShapeMismatch { op: "batchnorm", left: vec![self.channels], right: input.to_vec() }),
        }
    }

    /// Per-channel mean and biased variance over N×H×W, accumulated in f64.
    pub fn batch_statistics(&self, x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.output_shape(x.shape())?;
        let c = self.channels;
        let count = x.numel() / c;
        let mut mean = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; c];
        for row in x.data().chunks_exact(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s /= count as f64;
        }
        Ok((mean, var))
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[f64], inv_std: &[f64]) -> (Vec<T>, Vec<T>) {
        let c = self.channels;
        let mut x_hat = Vec::with_capacity(x.numel());
        let mut y = Vec::with_capacity(x.numel());
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        for row in x.data().chunks_exact(c) {
            for ch in 0..c {
                let xh = T::cast_from((row[ch].as_f64() - mean[ch]) * inv_std[ch]);
                x_hat.push(xh);
                y.push(gamma[ch] * xh + beta[ch]);
            }
        }
        (x_hat, y)
    }

    fn running_inv_std(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.running_mean.value.data().iter().map(|v| v.as_f64()).collect();
        let inv_std = self.running_var.value.data().iter().map(|v| 1.0 / (v.as_f64() + self.epsilon).sqrt()).collect();
        (mean, inv_std)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        if self.frozen {
            let (mean, inv_std) = self.running_inv_std();
            let (x_hat, y) = self.normalize(x, &mean, &inv_std);
            self.cache = Some(Cache::Running { x_hat, inv_std, shape: x.shape().to_vec() });
            return Tensor::new(x.shape(), y);
        }
        let count = x.numel() / self.channels;
        if count < 2 {
            return Err(Error::BatchTooSmall { count });
        }
        let (mean, var) = self.batch_statistics(x)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let (x_hat, y) = self.normalize(x, &mean, &inv_std);

        let m = self.momentum;
        for (r, &b) in self.running_mean.value.data_mut().iter_mut().zip(&mean) {
            *r = T::cast_from(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.value.data_mut().iter_mut().zip(&var) {
            *r = T::cast_from(m * r.as_f64() + (1.0 - m) * b);
        }
        self.cache = Some(Cache::Batch { x_hat, inv_std, shape: x.shape().to_vec() });
        Tensor::new(x.shape(), y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        let (mean, inv_std) = self.running_inv_std();
        Tensor::new(x.shape(), self.normalize(x, &mean, &inv_std).1)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::MissingCache { layer: "batchnorm".into() })?;
        let (x_hat, inv_std, shape, batch_stats) = match cache {
            Cache::Batch { x_hat, inv_std, shape } => (x_hat, inv_std, shape, true),
            Cache::Running { x_hat, inv_std, shape } => (x_hat, inv_std, shape, false),
        };
        if grad_out.shape() != &shape[..] {
            return Err(Error::ShapeMismatch { op: "batchnorm backward", left: shape.clone(), right: grad_out.shape().to_vec() });
        }
        let c = self.channels;
        let count = (grad_out.numel() / c) as f64;
        let mut dbeta = vec![0.0f64; c];
        let mut dgamma = vec![0.0f64; c];
        for (g_row, xh_row) in grad_out.data().chunks_exact(c).zip(x_hat.chunks_exact(c)) {
            for ch in 0..c {
                let g = g_row[ch].as_f64();
                dbeta[ch] += g;
                dgamma[ch] += g * xh_row[ch].as_f64();
            }
        }
        let gamma = self.gamma.value.data();
        let mut grad_in = Vec::with_capacity(grad_out.numel());
        for (g_row, xh_row) in grad_out.data().chunks_exact(c).zip(x_hat.chunks_exact(c)) {
            for ch in 0..c {
                let scale = gamma[ch].as_f64() * inv_std[ch];
                let g = g_row[ch].as_f64();
                let v = if batch_stats {
                    scale * (g - dbeta[ch] / count - xh_row[ch].as_f64() * dgamma[ch] / count)
                } else {
                    scale * g
                };
                grad_in.push(T::cast_from(v));
            }
        }
        self.gamma.grad = Some(Tensor::new(&[c], dgamma.into_iter().map(T::cast_from).collect())?);
        self.beta.grad = Some(Tensor::new(&[c], dbeta.into_iter().map(T::cast_from).collect())?);
        Tensor::new(grad_out.shape(), grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn channel_moments(y: &Tensor<f64>, c: usize) -> Vec<(f64, f64)> {
        let count = (y.numel() / c) as f64;
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = y.data().iter().skip(ch).step_by(c).copied().collect();
                let m = vals.iter().sum::<f64>() / count;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / count;
                (m, v)
            })
            .collect()
    }

    #[test]
    fn train_output_is_standardised() {
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn(&[4, 3, 3, 2], |_| 5.0 + 3.0 * rng.normal::<f64>());
        let mut bn = BatchNorm2d::<f64>::new(2, 1e-5, 0.9).unwrap();
        let y = bn.forward_train(&x).unwrap();
        for (m, v) in channel_moments(&y, 2) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn affine_parameters_shift_and_scale() {
        let mut rng = Rng::new(2);
        let x = Tensor::from_fn(&[4, 3, 3, 2], |_| rng.normal::<f64>() * 7.0 - 1.0);
        let mut bn = BatchNorm2d::<f64>::new(2, 1e-5, 0.9).unwrap();
        bn.set_affine(Tensor::full(&[2], 2.0), Tensor::full(&[2], 3.0)).unwrap();
        let y = bn.forward_train(&x).unwrap();
        for (m, v) in channel_moments(&y, 2) {
            assert!((m - 3.0).abs() < 1e-5);
            assert!((v.sqrt() - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(&[2, 2, 2, 3], |_| rng.normal::<f64>());
        let bn = BatchNorm2d::<f64>::new(3, 1e-5, 0.9).unwrap();
        let y = bn.infer(&x).unwrap();
        let factor = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * factor).abs() < 1e-15);
        }
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let x = Tensor::<f64>::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut bn = BatchNorm2d::new(1, 1e-5, 0.9).unwrap();
        bn.forward_train(&x).unwrap();
        // batch mean 2, biased var 1
        assert!((bn.running_mean().data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_never_touches_running_stats() {
        let mut rng = Rng::new(4);
        let mut bn = BatchNorm2d::<f64>::new(2, 1e-5, 0.9).unwrap();
        bn.forward_train(&Tensor::from_fn(&[2, 2, 2, 2], |_| rng.normal())).unwrap();
        let before = (bn.running_mean().clone(), bn.running_var().clone());
        for _ in 0..3 {
            bn.infer(&Tensor::from_fn(&[2, 2, 2, 2], |_| rng.normal())).unwrap();
        }
        assert_eq!(before, (bn.running_mean().clone(), bn.running_var().clone()));
    }

    #[test]
    fn beta_grad_is_channel_sum_and_zero_grad_propagates() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn(&[2, 3, 3, 2], |_| rng.normal::<f64>());
        let mut bn = BatchNorm2d::new(2, 1e-5, 0.9).unwrap();
        bn.forward_train(&x).unwrap();
        let gx = bn.backward(&Tensor::full(x.shape(), 1.5)).unwrap();
        assert_eq!(bn.params()[1].1.grad.as_ref().unwrap().data(), &[27.0, 27.0]);
        // constant upstream gradient is annihilated by the mean subtraction
        assert!(gx.data().iter().all(|v| v.abs() < 1e-12));

        let gx = bn.backward(&Tensor::zeros(x.shape())).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(bn.params()[0].1.grad.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_value_batch_is_rejected() {
        let mut bn = BatchNorm2d::<f64>::new(1, 1e-5, 0.9).unwrap();
        let err = bn.forward_train(&Tensor::zeros(&[1, 1, 1, 1])).unwrap_err();
        assert!(matches!(err, Error::BatchTooSmall { count: 1 }));
        assert!(bn.infer(&Tensor::zeros(&[1, 1, 1, 1])).is_ok());
    }

    #[test]
    fn frozen_layer_uses_running_stats_in_train_mode() {
        let mut rng = Rng::new(6);
        let mut bn = BatchNorm2d::<f64>::new(2, 1e-5, 0.9).unwrap();
        bn.set_running(Tensor::full(&[2], 0.5), Tensor::full(&[2], 4.0)).unwrap();
        bn.set_frozen(true);
        let x = Tensor::from_fn(&[2, 2, 2, 2], |_| rng.normal());
        let y = bn.forward_train(&x).unwrap();
        assert_eq!(y, bn.infer(&x).unwrap());
        assert_eq!(bn.running_mean().data(), &[0.5, 0.5]);
    }
}
