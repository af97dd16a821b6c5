//! Fan-in layers: channel concatenation and elementwise sum.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Concatenates `N×H×W×Cᵢ` tensors along the channel axis, in argument order.
pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let shapes: Vec<&[usize]> = xs.iter().map(|x| x.shape()).collect();
    let out_shape = Concat::output_shape(&shapes)?;
    let (n, h, w) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for pixel in 0..n * h * w {
        for x in xs {
            let c = x.shape()[3];
            data.extend_from_slice(&x.data()[pixel * c..(pixel + 1) * c]);
        }
    }
    Tensor::new(&out_shape, data)
}

/// Splits the channel axis into consecutive slices of the given widths.
pub fn split_channels<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, h, w, c) = x.dims4()?;
    if widths.iter().sum::<usize>() != c || widths.contains(&0) {
        return Err(Error::ShapeMismatch { op: "split_channels", left: vec![c], right: widths.to_vec() });
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(n * h * w * wd)).collect();
    for row in x.data().chunks_exact(c) {
        let mut offset = 0;
        for (part, &wd) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[offset..offset + wd]);
            offset += wd;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &wd)| Tensor::new(&[n, h, w, wd], data))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Concat {
    widths: Option<Vec<usize>>,
}

impl Concat {
    pub fn output_shape(inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let first = inputs.first().ok_or_else(|| Error::InvalidConfig("concat needs at least one input".into()))?;
        if first.len() != 4 {
            return Err(Error::InvalidShape { shape: first.to_vec(), reason: "concat expects N×H×W×C".into() });
        }
        let mut channels = 0;
        for s in inputs {
            if s.len() != 4 || s[..3] != first[..3] {
                return Err(Error::ShapeMismatch { op: "concat", left: first.to_vec(), right: s.to_vec() });
            }
            channels += s[3];
        }
        Ok(vec![first[0], first[1], first[2], channels])
    }

    pub fn forward<T: Element>(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let y = concat_channels(xs)?;
        self.widths = Some(xs.iter().map(|x| x.shape()[3]).collect());
        Ok(y)
    }

    pub fn backward<T: Element>(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let widths = self.widths.as_ref().ok_or_else(|| Error::MissingCache { layer: "concat".into() })?;
        split_channels(grad_out, widths)
    }
}

/// Elementwise sum of equally shaped inputs; backward hands `grad_out` to every input.
#[derive(Debug, Clone, Default)]
pub struct Add {
    arity: Option<usize>,
}

impl Add {
    pub fn output_shape(inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let first = inputs.first().ok_or_else(|| Error::InvalidConfig("add needs at least one input".into()))?;
        for s in inputs {
            if s != first {
                return Err(Error::ShapeMismatch { op: "add", left: first.to_vec(), right: s.to_vec() });
            }
        }
        Ok(first.to_vec())
    }

    pub fn sum<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = xs.iter().map(|x| x.shape()).collect();
        Self::output_shape(&shapes)?;
        let mut acc = xs[0].clone();
        for x in &xs[1..] {
            acc.add_assign(x)?;
        }
        acc.ensure_finite("add")
    }

    pub fn forward<T: Element>(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let y = Self::sum(xs)?;
        self.arity = Some(xs.len());
        Ok(y)
    }

    pub fn backward<T: Element>(&mut self, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let arity = self.arity.ok_or_else(|| Error::MissingCache { layer: "add".into() })?;
        Ok(vec![grad_out.clone(); arity])
    }
}
