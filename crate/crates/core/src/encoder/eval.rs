use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

use super::TextEncoder;

/// Fraction of pairs whose own reply ranks within the top `k` among
/// `pool_size` candidates: the true reply plus the replies of the
/// following `pool_size - 1` pairs (cyclically). Ties count against the
/// true reply.
pub fn recall_at_k<T: Scalar, S: AsRef<str>>(
    encoder: &dyn TextEncoder<T>,
    pairs: &[(S, S)],
    pool_size: usize,
    k: usize,
) -> Result<f64> {
    if pairs.len() < pool_size || pool_size == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least {pool_size} pairs and positive k, got {} pairs",
            pairs.len()
        )));
    }
    let contexts = pairs
        .iter()
        .map(|(c, _)| encoder.encode_context_text(c.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let replies: Vec<&str> = pairs.iter().map(|(_, r)| r.as_ref()).collect();
    let replies = encoder.encode_replies(&replies)?;
    let n = pairs.len();
    let hits = (0..n)
        .filter(|&i| {
            let own = dot(contexts[i].as_slice(), replies[i].as_slice());
            let better = (1..pool_size)
                .filter(|j| dot(contexts[i].as_slice(), replies[(i + j) % n].as_slice()) >= own)
                .count();
            better < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}
