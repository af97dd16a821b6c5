use crate::error::{Error, Result};
use crate::tensor::{Element, ReduceOp, Tensor};

/// Per-channel spatial mean, `N×H×W×C → N×C`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn output_shape(input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [n, _, _, c] => Ok(vec![*n, *c]),
            _ => Err(Error::InvalidShape { shape: input.to_vec(), reason: "global average pool expects N×H×W×C".into() }),
        }
    }

    pub fn apply<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
        x.dims4()?;
        x.reduce(ReduceOp::Mean, &[1, 2])
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = Self::apply(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    pub fn backward<T: Element>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or_else(|| Error::MissingCache { layer: "global_avg_pool".into() })?;
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if grad_out.shape() != [n, c] {
            return Err(Error::ShapeMismatch { op: "gap backward", left: vec![n, c], right: grad_out.shape().to_vec() });
        }
        let inv = T::one() / T::from_count(h * w);
        let mut data = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            let row = &grad_out.data()[b * c..(b + 1) * c];
            for _ in 0..h * w {
                data.extend(row.iter().map(|&g| g * inv));
            }
        }
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let x = Tensor::<f64>::full(&[1, 4, 4, 3], 2.5);
        assert_eq!(GlobalAvgPool::apply(&x).unwrap().data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn arithmetic_mean() {
        let x = Tensor::<f64>::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(GlobalAvgPool::apply(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn backward_spreads_evenly() {
        let mut gap = GlobalAvgPool::default();
        gap.forward(&Tensor::<f64>::zeros(&[1, 4, 4, 2])).unwrap();
        let g = gap.backward(&Tensor::<f64>::ones(&[1, 2])).unwrap();
        assert_eq!(g.shape(), &[1, 4, 4, 2]);
        assert!(g.data().iter().all(|&v| v == 1.0 / 16.0));
    }
}
