//! Classification loss.

use super::tensor::Tensor;
use super::{shape_err, TensorError};
use crate::scalar::Scalar;

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the
/// logits: (softmax − target) / batch. Log-sum-exp is stabilized by row-max
/// subtraction, so saturated logits stay finite.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets_one_hot: &Tensor<S>,
) -> Result<(S, Tensor<S>), TensorError> {
    if logits.shape() != targets_one_hot.shape() || logits.shape().len() != 2 {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!(
                "logits {:?} vs targets {:?}",
                logits.shape(),
                targets_one_hot.shape()
            ),
        ));
    }
    let classes = logits.shape()[1];
    let batch = logits.shape()[0];
    if batch == 0 {
        return Err(shape_err("softmax_cross_entropy", "empty batch".into()));
    }
    let one = S::one();
    let tol = S::cast(1e-9);
    for row in targets_one_hot.data().chunks_exact(classes) {
        let sum: S = row.iter().copied().sum();
        let ok = (sum - one).abs() < tol
            && row
                .iter()
                .all(|&v| (v - one).abs() < tol || v.abs() < tol);
        if !ok {
            return Err(shape_err(
                "softmax_cross_entropy",
                "targets must be one-hot rows".into(),
            ));
        }
    }

    let inv_batch = S::cast(1.0 / batch as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = S::zero();
    for ((lrow, trow), grow) in logits
        .data()
        .chunks_exact(classes)
        .zip(targets_one_hot.data().chunks_exact(classes))
        .zip(grad.data_mut().chunks_exact_mut(classes))
    {
        let max = lrow.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for &v in lrow {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln();
        for ((g, &l), &t) in grow.iter_mut().zip(lrow).zip(trow) {
            let log_p = l - max - log_denom;
            if t > S::cast(0.5) {
                loss = loss - log_p;
            }
            *g = (log_p.exp() - t) * inv_batch;
        }
    }
    Ok((loss * inv_batch, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(rows: &[usize]) -> Tensor<f64> {
        let mut data = vec![0.0; rows.len() * 2];
        for (i, &c) in rows.iter().enumerate() {
            data[i * 2 + c] = 1.0;
        }
        Tensor::new(vec![rows.len(), 2], data).unwrap()
    }

    #[test]
    fn equal_logits_give_ln2() {
        let logits = Tensor::zeros(&[4, 2]);
        let (loss, _) = softmax_cross_entropy(&logits, &one_hot(&[0, 1, 0, 1])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_is_near_zero() {
        let logits = Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &one_hot(&[0])).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn gradient_matches_softmax_minus_target_over_batch() {
        let logits = Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let targets = one_hot(&[1, 0]);
        let (_, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
        for i in 0..2 {
            let row = logits.row(i);
            let max = row[0].max(row[1]);
            let e0 = (row[0] - max).exp();
            let e1 = (row[1] - max).exp();
            let p0 = e0 / (e0 + e1);
            let p1 = e1 / (e0 + e1);
            let t = targets.row(i);
            assert!((grad.row(i)[0] - (p0 - t[0]) / 2.0).abs() < 1e-14);
            assert!((grad.row(i)[1] - (p1 - t[1]) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_one_hot_targets() {
        let logits = Tensor::zeros(&[1, 2]);
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(softmax_cross_entropy(&logits, &bad).is_err());
    }
}
