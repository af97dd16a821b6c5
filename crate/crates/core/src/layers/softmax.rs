use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(logits.shape(), out)?.ensure_finite("softmax")
}

#[derive(Debug, Clone)]
pub struct SoftmaxLoss<T> {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    pub probs: Tensor<T>,
    /// `(probs - onehot) / N`
    pub grad_logits: Tensor<T>,
}

/// Fused softmax + cross-entropy.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxLoss<T>> {
    let (n, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::InvalidConfig(format!("softmax output needs at least 2 classes, got {k}")));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch { op: "softmax_cross_entropy labels", left: vec![n], right: vec![labels.len()] });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(n * k);
    let mut grad = Vec::with_capacity(n * k);
    let inv_n = 1.0 / n as f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let shifted: Vec<f64> = row.iter().map(|v| v.as_f64() - max).collect();
        let log_total = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
        loss -= shifted[label] - log_total;
        for (j, s) in shifted.iter().enumerate() {
            let p = (s - log_total).exp();
            probs.push(T::cast_from(p));
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::cast_from((p - onehot) * inv_n));
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy".into()));
    }
    Ok(SoftmaxLoss { loss, probs: Tensor::new(&[n, k], probs)?, grad_logits: Tensor::new(&[n, k], grad)? })
}

/// Output node: forward turns logits into probabilities. The loss gradient
/// enters the graph already taken with respect to the logits (see
/// [`softmax_cross_entropy`]), so backward passes it through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct SoftmaxOutput;

impl SoftmaxOutput {
    pub fn output_shape(input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [_, k] if *k >= 2 => Ok(input.to_vec()),
            _ => Err(Error::InvalidShape { shape: input.to_vec(), reason: "softmax output expects N×K with K >= 2".into() }),
        }
    }

    pub fn forward<T: Element>(&self, logits: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform_probs() {
        let out = softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 4]), &[2]).unwrap();
        assert!(out.probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_true_class_has_near_zero_loss() {
        let logits = Tensor::<f64>::new(&[1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.probs.is_finite());
    }

    #[test]
    fn rows_sum_to_one() {
        let logits = Tensor::<f32>::from_fn(&[5, 7], |i| ((i * 37) % 11) as f32 - 5.0);
        let p = softmax(&logits).unwrap();
        for row in p.data().chunks_exact(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn gradient_is_probs_minus_onehot_over_n() {
        let logits = Tensor::<f64>::new(&[2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let out = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        let g = out.grad_logits.data();
        assert!((g[0] - (0.5 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g[1] - 0.5 / 2.0).abs() < 1e-15);
        assert!((g[0] + g[1]).abs() < 1e-15 && (g[2] + g[3]).abs() < 1e-15);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
        assert!(softmax_cross_entropy(&Tensor::<f64>::zeros(&[1, 1]), &[0]).is_err());
    }
}
