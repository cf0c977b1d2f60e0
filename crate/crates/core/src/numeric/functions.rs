use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax restricted to visible entries. `visible` is a row-major
/// mask with the same layout as `x`; masked entries come out exactly zero.
pub fn masked_softmax_rows(x: &Tensor, visible: &[bool]) -> Result<Tensor> {
    if visible.len() != x.len() {
        return Err(Error::dim("masked_softmax_rows", format!("mask has {} entries, input {}", visible.len(), x.len())));
    }
    let cols = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let mask = &visible[r * cols..(r + 1) * cols];
        if !kernels::masked_softmax_in_place(out.row_mut(r), mask) {
            return Err(Error::DegenerateRow { row: r });
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("masked_softmax_rows"));
    }
    Ok(out)
}

/// Mean negative log-likelihood of `targets` over the unmasked rows of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || loss_mask.len() != n {
        return Err(Error::dim(
            "cross_entropy",
            format!("{n} rows, {} targets, {} mask entries", targets.len(), loss_mask.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(loss_mask).enumerate() {
        if !m {
            continue;
        }
        if t >= v {
            return Err(Error::IndexOutOfRange { index: t, len: v });
        }
        let row = logits.row(r);
        total += kernels::log_sum_exp(row) - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok(loss)
}
