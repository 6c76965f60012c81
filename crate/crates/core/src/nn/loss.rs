use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of an `N×K` tensor (max-shifted).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!("softmax expects N×K, got {:?}", logits.shape())));
    }
    let k = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::Dimension(format!(
            "cross_entropy: logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Data(format!("label {l} at index {i} is outside 0..{k}")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad.push((p - if j == y { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}
