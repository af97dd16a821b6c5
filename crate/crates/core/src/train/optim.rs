use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::{Element, Tensor};

/// One SGD-with-momentum update, in place:
/// `g' = g + wd·w`, `v ← m·v − lr·g'`, `w ← w + v`.
pub fn sgd_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch { op: "sgd_step", left: param.shape().to_vec(), right: grad.shape().to_vec() });
    }
    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let wf = w.as_f64();
        let g = g.as_f64() + weight_decay * wf;
        let vn = momentum * v.as_f64() - lr * g;
        let wn = wf + vn;
        if !wn.is_finite() || !vn.is_finite() {
            return Err(Error::NonFinite("sgd update".into()));
        }
        *v = T::cast_from(vn);
        *w = T::cast_from(wn);
    }
    Ok(())
}

/// Learning-rate schedule, indexed by 0-based epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    None,
    Step { every_n_epochs: usize, factor: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Step { every_n_epochs: 30, factor: 0.1 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::None => base,
            LrSchedule::Step { every_n_epochs, factor } => base * factor.powi((epoch / every_n_epochs.max(1)) as i32),
        }
    }
}

/// SGD with momentum and L2 weight decay, keeping one velocity buffer per
/// parameter name.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Updates every trainable parameter that has a gradient. Frozen
    /// parameters and running statistics are never touched.
    pub fn step(&mut self, graph: &mut ModelGraph<T>, lr: f64) -> Result<()> {
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let mut result = Ok(());
        graph.for_each_trainable(|name, p| {
            if result.is_err() {
                return;
            }
            let Some(grad) = p.grad.as_ref() else { return };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            result = sgd_step(&mut p.value, grad, v, lr, momentum, wd)
                .map_err(|e| if let Error::NonFinite(_) = e { Error::NonFinite(format!("sgd update of {name}")) } else { e });
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn single_step() {
        let (mut w, mut v) = (t(1.0), t(0.0));
        sgd_step(&mut w, &t(1.0), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let (mut w, mut v) = (t(1.0), t(0.0));
        sgd_step(&mut w, &t(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v.data()[0] + 0.1).abs() < 1e-15);
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut w, &t(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v.data()[0] + 0.19).abs() < 1e-15);
        assert!((w.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let (mut w, mut v) = (t(1.0), t(0.0));
        sgd_step(&mut w, &t(0.0), &mut v, 0.1, 0.0, 0.1).unwrap();
        assert!((w.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let (mut w, mut v) = (t(1.0), t(0.0));
        assert!(sgd_step(&mut w, &Tensor::zeros(&[2]), &mut v, 0.1, 0.0, 0.0).is_err());
        assert!(sgd_step(&mut w, &t(f64::INFINITY), &mut v, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0.01, 0), 0.01);
        assert_eq!(s.lr_at(0.01, 29), 0.01);
        assert!((s.lr_at(0.01, 30) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(0.01, 65) - 0.0001).abs() < 1e-15);
        assert_eq!(LrSchedule::None.lr_at(0.5, 1000), 0.5);
    }
}
