use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numeric::{pairwise_mean, Scalar};

fn check_labels(logits: &ArrayView2<'_, impl Scalar>, labels: &[u32]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let k = logits.ncols();
    if let Some(&label) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok(())
}

/// `-ln softmax(logits)[label]` per row, in f64. Every value is >= 0.
pub fn per_sample_nll<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[u32]) -> Result<Vec<f64>> {
    check_labels(&logits, labels)?;
    let mut out = Vec::with_capacity(labels.len());
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
        let mut total = 0.0;
        for &x in row.iter() {
            total += (x.as_f64() - max).exp();
        }
        // (max - x_y) >= 0 and ln(total) >= 0 since total >= 1.
        out.push((max - row[y as usize].as_f64()) + total.ln());
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / B`.
pub fn cross_entropy<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[u32]) -> Result<(f64, Array2<T>)> {
    check_labels(&logits, labels)?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut losses = Vec::with_capacity(labels.len());
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
        let mut total = 0.0;
        for &x in row.iter() {
            total += (x.as_f64() - max).exp();
        }
        let lse = max + total.ln();
        for (k, (&x, g)) in row.iter().zip(g.iter_mut()).enumerate() {
            let p = (x.as_f64() - lse).exp();
            let target = if k == y as usize { 1.0 } else { 0.0 };
            *g = T::from_f64_lossy((p - target) / batch);
        }
        losses.push((max - row[y as usize].as_f64()) + total.ln());
    }
    let loss = pairwise_mean(&losses);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, grad))
}
