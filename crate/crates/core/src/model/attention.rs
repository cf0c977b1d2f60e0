use crate::error::{Error, Result};
use crate::numeric::kernels::{dot, masked_softmax_in_place};
use crate::numeric::Tensor;

fn check_width(name: &str, t: &Tensor, d: usize) -> Result<()> {
    if t.rank() != 2 || t.cols() != d {
        return Err(Error::dim("rectangular_attention", format!("{name} has shape {:?}, expected width {d}", t.shape())));
    }
    Ok(())
}

/// Attention of `N` queries over `M` KB entries and `N` tokens under one
/// softmax per head and row. Token queries come from `queries`, KB queries
/// from `kb_queries`. Returns the `N × D` output and the pre-softmax KB
/// logits as an `H × N × M` tensor.
#[allow(clippy::too_many_arguments)]
pub fn rectangular_attention(
    queries: &Tensor,
    kb_queries: &Tensor,
    token_keys: &Tensor,
    token_values: &Tensor,
    kb_keys: &Tensor,
    kb_values: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Tensor)> {
    if token_keys.rows() != queries.rows() {
        return Err(Error::dim(
            "rectangular_attention",
            format!("{} queries but {} token keys", queries.rows(), token_keys.rows()),
        ));
    }
    let (out, logits, _) = attend_block(queries, kb_queries, token_keys, token_values, kb_keys, kb_values, heads, causal)?;
    Ok((out, logits))
}

/// Same as [`rectangular_attention`] but the `n` queries may be the last `n`
/// of `T ≥ n` cached token positions. Also returns each query's softmax mass
/// on KB entries, averaged over heads.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_block(
    queries: &Tensor,
    kb_queries: &Tensor,
    token_keys: &Tensor,
    token_values: &Tensor,
    kb_keys: &Tensor,
    kb_values: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = queries.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    for (name, t) in [
        ("kb_queries", kb_queries),
        ("token_keys", token_keys),
        ("token_values", token_values),
        ("kb_keys", kb_keys),
        ("kb_values", kb_values),
    ] {
        check_width(name, t, d)?;
    }
    let n = queries.rows();
    let t = token_keys.rows();
    let m = kb_keys.rows();
    if kb_queries.rows() != n || token_values.rows() != t || kb_values.rows() != m || t < n {
        return Err(Error::dim(
            "rectangular_attention",
            format!("queries {n}, kb queries {}, token keys {t}, token values {}, kb keys {m}, kb values {}",
                kb_queries.rows(), token_values.rows(), kb_values.rows()),
        ));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = t - n;
    let mut out = vec![0.0; n * d];
    let mut kb_logits = vec![0.0; heads * n * m];
    let mut kb_mass = vec![0.0; n];
    let mut row = vec![0.0; m + t];
    let mut visible = vec![true; m + t];
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        for i in 0..n {
            let q = &queries.row(i)[hs.clone()];
            let qt = &kb_queries.row(i)[hs.clone()];
            for j in 0..m {
                let s = dot(qt, &kb_keys.row(j)[hs.clone()]) * scale;
                row[j] = s;
                kb_logits[(h * n + i) * m + j] = s;
            }
            let last = if causal { offset + i } else { t - 1 };
            for j in 0..t {
                visible[m + j] = j <= last;
                row[m + j] = if j <= last { dot(q, &token_keys.row(j)[hs.clone()]) * scale } else { 0.0 };
            }
            if !masked_softmax_in_place(&mut row, &visible) {
                return Err(Error::DegenerateRow { row: i });
            }
            kb_mass[i] += row[..m].iter().sum::<f64>() / heads as f64;
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..m {
                let w = row[j];
                for (oc, vc) in o.iter_mut().zip(&kb_values.row(j)[hs.clone()]) {
                    *oc += w * vc;
                }
            }
            for j in 0..=last {
                let w = row[m + j];
                for (oc, vc) in o.iter_mut().zip(&token_values.row(j)[hs.clone()]) {
                    *oc += w * vc;
                }
            }
        }
    }
    Ok((Tensor::matrix(n, d, out)?, Tensor::new(vec![heads, n, m], kb_logits)?, kb_mass))
}
