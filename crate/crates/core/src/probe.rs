//! Decision layer shared by the timing attacks: paired-difference
//! classification and early-stopped majority voting.

use crate::error::{Error, Result};

/// A paired probe reads as a cache hit when the candidate-extended request
/// returned faster than the reference by more than the threshold (theta is
/// negative for sensible operating points).
pub fn is_hit(delta_ms: f64, theta_ms: f64) -> bool {
    delta_ms < theta_ms
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct VoteOutcome {
    pub hit: bool,
    pub hits: u32,
    pub misses: u32,
    /// Samples actually drawn; early stopping usually needs fewer than n.
    pub samples: u32,
}

/// Majority vote over up to `n` samples, requiring `k` hits, stopping as soon
/// as the verdict is decided. Decision-identical to always drawing all `n`
/// samples: accept fires at `k` hits, reject fires at `n - k + 1` misses, and
/// exactly one of them must fire within `n` draws.
pub fn early_stop_vote(
    n: u32,
    k: u32,
    mut sample: impl FnMut(u32) -> Result<bool>,
) -> Result<VoteOutcome> {
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "vote threshold k={k} must satisfy 1 <= k <= n={n}"
        )));
    }
    let mut hits = 0;
    let mut misses = 0;
    for i in 0..n {
        if sample(i)? {
            hits += 1;
        } else {
            misses += 1;
        }
        if hits >= k {
            return Ok(VoteOutcome { hit: true, hits, misses, samples: i + 1 });
        }
        if misses > n - k {
            return Ok(VoteOutcome { hit: false, hits, misses, samples: i + 1 });
        }
    }
    unreachable!("one stopping rule must fire within n samples");
}
