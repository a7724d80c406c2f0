use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its exact gradient with
/// respect to `logits` (`(n, k, 1, 1)` or any shape with `k = c·h·w`).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let k = s.sample_len();
    if labels.len() != s.n {
        return Err(shape_err!("{} labels for batch of {}", labels.len(), s.n));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    let inv_n = 1.0 / s.n as f64;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        grad.extend(row.iter().enumerate().map(|(j, v)| {
            let p = (v - log_z).exp();
            (p - if j == y { 1.0 } else { 0.0 }) * inv_n
        }));
    }
    Ok((loss * inv_n, Tensor::like(s, grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::full((3, 10, 1, 1), 0.7).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_with_margin() {
        let mut prev = f64::INFINITY;
        for m in [0.0, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let mut v = vec![0.0; 10];
            v[3] = m;
            let (loss, _) = softmax_cross_entropy(&Tensor::from_vec((1, 10, 1, 1), v).unwrap(), &[3]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-11);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros((1, 3, 1, 1)).unwrap();
        assert!(matches!(softmax_cross_entropy(&logits, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Tensor::from_vec((2, 3, 1, 1), vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        for row in g.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }
}
