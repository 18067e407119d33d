//! Softmax cross-entropy task loss.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Numerically stabilized softmax (max subtraction).
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::vector(exps.into_iter().map(|e| e / sum).collect())
}

/// Cross-entropy loss of `logits` against a class index.
///
/// Returns `(loss, grad)` where `grad = softmax(logits) - onehot(label)`,
/// the gradient of the loss with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let c = logits.len();
    if label >= c {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    logits.check_finite("softmax_cross_entropy logits")?;
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.data().iter().map(|&v| v - max).collect();
    let log_sum: f64 = shifted.iter().map(|&v| v.exp()).sum::<f64>().ln();
    let loss = log_sum - shifted[label];
    let mut grad: Vec<f64> = shifted.iter().map(|&v| (v - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::vector(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::vector(vec![0.7; 10]);
        let (loss, grad) = softmax_cross_entropy(&logits, 3).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12, "loss {loss}");
        // grad sums to zero: softmax mass minus the one-hot.
        assert!(grad.data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn saturated_case_near_zero_loss() {
        let logits = Tensor::vector(vec![100.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_nonnegative_on_random_logits() {
        let mut r = crate::rng::stream(11, &[0x10]);
        for _ in 0..200 {
            let logits =
                Tensor::vector((0..6).map(|_| r.random::<f64>() * 20.0 - 10.0).collect());
            let (loss, _) = softmax_cross_entropy(&logits, 2).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Tensor::vector(vec![0.0, 0.0]);
        assert!(matches!(
            softmax_cross_entropy(&logits, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grad_matches_central_differences() {
        let mut r = crate::rng::stream(5, &[99]);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..5).map(|_| r.random::<f64>() * 6.0 - 3.0).collect();
            let logits = Tensor::vector(vals.clone());
            let (_, grad) = softmax_cross_entropy(&logits, 1).unwrap();
            let eps = 1e-6;
            for i in 0..5 {
                let mut plus = vals.clone();
                plus[i] += eps;
                let mut minus = vals.clone();
                minus[i] -= eps;
                let (lp, _) = softmax_cross_entropy(&Tensor::vector(plus), 1).unwrap();
                let (lm, _) = softmax_cross_entropy(&Tensor::vector(minus), 1).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grad.data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-6,
                    "rel err too large: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}
