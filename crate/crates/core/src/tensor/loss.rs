use super::{shape_err, Scalar, Tensor};
use crate::error::{Result, SbdError};

fn batch_dims<T: Scalar>(op: &str, t: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let [b, classes]: [usize; 2] = t
        .shape()
        .try_into()
        .map_err(|_| shape_err(op, format!("expected B x classes, got {:?}", t.shape())))?;
    if labels.len() != b {
        return Err(shape_err(op, format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(SbdError::Config(format!("label {bad} outside 0..{classes}")));
    }
    Ok((b, classes))
}

/// Row-wise softmax with mean cross-entropy against integer class labels.
///
/// Returns `(loss, probs)`. Each row is shifted by its maximum before
/// exponentiation, so large logits do not overflow, and the loss is taken
/// from the shifted logits (`ln sum exp - shifted[label]`) so it stays
/// finite even when the probability underflows.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, classes) = batch_dims("softmax_xent", logits, labels)?;
    if !logits.all_finite() {
        return Err(SbdError::Numeric("non-finite logits".into()));
    }
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (row, &label) in probs.data_mut().chunks_exact_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let target = row[label] - max;
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += sum.ln() - target;
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok((total / T::from_usize(b).unwrap(), probs))
}

/// Gradient of the mean cross-entropy w.r.t. the logits: `(p - onehot) / B`.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (b, classes) = batch_dims("softmax_xent backward", probs, labels)?;
    let scale = T::one() / T::from_usize(b).unwrap();
    let mut grad = probs.clone();
    for (row, &label) in grad.data_mut().chunks_exact_mut(classes).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok(grad)
}
