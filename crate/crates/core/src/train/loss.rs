use crate::error::{dim_err, Error, Result};
use crate::numerics::{softmax, Tensor};

/// `-log softmax(logits)[label]` and its gradient `softmax - one_hot`.
pub fn cross_entropy_loss(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.rank() != 1 {
        return Err(dim_err!("logits must be a vector, got {:?}", logits.shape()));
    }
    let k = logits.len();
    if label >= k {
        return Err(Error::Domain(format!("label {label} out of range for {k} classes")));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let loss = lse - logits.data()[label];
    let mut grad = softmax(logits, 0)?;
    grad.data_mut()[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean loss over a `[B, K]` batch and its gradient (already divided by
/// `B`).
pub fn cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[b, k] = logits.shape() else {
        return Err(dim_err!("batched logits must be [B, K], got {:?}", logits.shape()));
    };
    if labels.len() != b {
        return Err(dim_err!("{} labels for a batch of {b}", labels.len()));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (s, &label) in labels.iter().enumerate() {
        let row = Tensor::from_vec(logits.data()[s * k..(s + 1) * k].to_vec());
        let (l, g) = cross_entropy_loss(&row, label)?;
        total += l;
        grad.extend(g.data().iter().map(|v| v / b as f64));
    }
    Ok((total / b as f64, Tensor::new(vec![b, k], grad)?))
}
