use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{CompressionMode, CompressionPolicy};

/// Analytic KV-cache footprint, in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Peak while the first selection is being scored.
    pub pre_selection_peak: u64,
    /// KB plus token cache after selection.
    pub post_selection_steady: u64,
    /// KB part of the steady state.
    pub kb_steady: u64,
    /// KB part held by one layer from the retrieval layer on.
    pub kb_per_post_layer: u64,
}

/// Bytes of keys plus values for `entries` rows of width `d` at 4 bytes each.
fn kv(entries: u64, d: u64) -> u64 {
    2 * entries * d * 4
}

/// Cache footprint for `m` KB entries and `n` tokens through `l` layers of
/// width `d`. Compressed modes score the pool in chunks of `chunk` rows;
/// layers before the retrieval layer hold at most that many rows (but never
/// fewer than `k`), later layers hold `k`.
pub fn memory_model(m: usize, n: usize, d: usize, l: usize, policy: &CompressionPolicy, chunk: usize) -> Result<MemoryEstimate> {
    if m == 0 || n == 0 || d == 0 || l == 0 || chunk == 0 {
        return Err(Error::Invalid("memory model needs positive dimensions".into()));
    }
    policy.validate(l)?;
    let (m, n, d, lu) = (m as u64, n as u64, d as u64, l as u64);
    let k = (policy.k as u64).min(m);
    let rl = policy.retrieval_layer as u64;
    let tokens = lu * kv(n, d);
    let (kb_steady, kb_post, scratch) = match policy.mode {
        CompressionMode::None => (lu * kv(m, d), kv(m, d), 0),
        CompressionMode::PerLayer => (lu * kv(k, d), kv(k, d), kv((chunk as u64).min(m), d)),
        _ => {
            let pre_rows = k.max((chunk as u64).min(m));
            (rl * kv(pre_rows, d) + (lu - rl) * kv(k, d), kv(k, d), kv((chunk as u64).min(m), d))
        }
    };
    let steady = kb_steady + tokens;
    Ok(MemoryEstimate { pre_selection_peak: steady + scratch, post_selection_steady: steady, kb_steady, kb_per_post_layer: kb_post })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equal_to_m_matches_none() {
        let none = memory_model(500, 20, 64, 4, &CompressionPolicy::none(), 100).unwrap();
        let reuse = memory_model(500, 20, 64, 4, &CompressionPolicy::new(CompressionMode::Reuse, 500, 1), 100).unwrap();
        assert_eq!(none.post_selection_steady, reuse.post_selection_steady);
        assert_eq!(none.kb_per_post_layer, reuse.kb_per_post_layer);
    }

    #[test]
    fn post_retrieval_shrinks_by_m_over_k() {
        let none = memory_model(40_000, 32, 64, 4, &CompressionPolicy::none(), 1000).unwrap();
        let reuse = memory_model(40_000, 32, 64, 4, &CompressionPolicy::new(CompressionMode::Reuse, 100, 1), 1000).unwrap();
        assert_eq!(none.kb_per_post_layer, 400 * reuse.kb_per_post_layer);
    }

    #[test]
    fn none_mode_is_linear_in_m() {
        let a = memory_model(1000, 16, 64, 4, &CompressionPolicy::none(), 100).unwrap();
        let b = memory_model(2000, 16, 64, 4, &CompressionPolicy::none(), 100).unwrap();
        assert_eq!(2 * a.kb_steady, b.kb_steady);
    }
}
