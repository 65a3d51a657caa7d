//! Virtual-time latency model. All times are f64 milliseconds; nothing here
//! sleeps. TTFT for a prefill is affine in cached vs uncached token counts
//! plus clamped Gaussian noise, semantic hits and misses have flat costs, and
//! decoding is a fixed per-token rate.
//!
//! Also hosts the analytic machinery the probes rely on: solving noise /
//! threshold for a target operating point, binomial vote amplification, and
//! the closed-form ROC area. The timing oracle in the probes is only as good
//! as these formulas, so they are pinned by independent summation oracles in
//! the tests.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as GaussCdf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LatencyParams {
    /// Fixed per-request overhead (scheduling, tokenize, enqueue).
    pub t_base_ms: f64,
    /// Prefill cost for a token whose KV must be computed.
    pub t_miss_per_token_ms: f64,
    /// Prefill cost for a token served from cached KV.
    pub t_hit_per_token_ms: f64,
    /// Per-output-token decode rate.
    pub t_decode_per_token_ms: f64,
    /// Gaussian jitter applied to every TTFT.
    pub noise_sigma_ms: f64,
    /// Flat TTFT when the semantic cache answers.
    pub semantic_hit_ms: f64,
    /// Flat TTFT when a semantic-fronted backend computes from scratch.
    pub semantic_miss_ms: f64,
    /// Identifier scrub/restore cost per character of scanned text; charged
    /// on top of TTFT whenever the anonymization mitigation runs.
    pub anonymize_ms_per_char: f64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            t_base_ms: 2.0,
            t_miss_per_token_ms: 0.45,
            t_hit_per_token_ms: 0.00022,
            t_decode_per_token_ms: 9.0,
            noise_sigma_ms: 0.05,
            semantic_hit_ms: 140.0,
            semantic_miss_ms: 2500.0,
            anonymize_ms_per_char: 0.012,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("t_base_ms", self.t_base_ms),
            ("t_miss_per_token_ms", self.t_miss_per_token_ms),
            ("t_hit_per_token_ms", self.t_hit_per_token_ms),
            ("t_decode_per_token_ms", self.t_decode_per_token_ms),
            ("noise_sigma_ms", self.noise_sigma_ms),
            ("semantic_hit_ms", self.semantic_hit_ms),
            ("semantic_miss_ms", self.semantic_miss_ms),
            ("anonymize_ms_per_char", self.anonymize_ms_per_char),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.t_hit_per_token_ms >= self.t_miss_per_token_ms {
            return Err(Error::InvalidConfig(
                "t_hit_per_token_ms must be below t_miss_per_token_ms".into(),
            ));
        }
        Ok(())
    }

    /// Per-token TTFT gap a correct one-token guess produces.
    pub fn per_token_gap_ms(&self) -> f64 {
        self.t_miss_per_token_ms - self.t_hit_per_token_ms
    }

    fn jitter<R: Rng>(&self, floor: f64, rng: &mut R) -> f64 {
        if self.noise_sigma_ms == 0.0 {
            return 0.0;
        }
        let eps = Normal::new(0.0, self.noise_sigma_ms)
            .expect("sigma validated finite and positive")
            .sample(rng);
        // Clamp so a wild negative draw cannot push TTFT below zero.
        eps.max(-floor)
    }

    /// TTFT of a prefill that reused `hit_tokens` of cached KV and computed
    /// `miss_tokens` fresh.
    pub fn prefill_ttft_ms<R: Rng>(
        &self,
        hit_tokens: usize,
        miss_tokens: usize,
        rng: &mut R,
    ) -> f64 {
        let det = self.t_base_ms
            + hit_tokens as f64 * self.t_hit_per_token_ms
            + miss_tokens as f64 * self.t_miss_per_token_ms;
        det + self.jitter(det, rng)
    }

    /// TTFT when the request terminates at the semantic layer.
    pub fn semantic_ttft_ms<R: Rng>(&self, hit: bool, rng: &mut R) -> f64 {
        let det = if hit { self.semantic_hit_ms } else { self.semantic_miss_ms };
        det + self.jitter(det, rng)
    }

    /// Virtual time to stream `n_tokens` after the first token.
    pub fn decode_ms(&self, n_tokens: usize) -> f64 {
        n_tokens as f64 * self.t_decode_per_token_ms
    }

    /// Scrub or restore cost for `chars` characters of text.
    pub fn anonymize_ms(&self, chars: usize) -> f64 {
        chars as f64 * self.anonymize_ms_per_char
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OperatingPoint {
    pub tpr: f64,
    pub fpr: f64,
}

impl Default for OperatingPoint {
    fn default() -> Self {
        OperatingPoint { tpr: 0.88, fpr: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Noise level at which a single paired probe hits the operating point.
    pub sigma_ms: f64,
    /// Decision threshold on the paired TTFT difference; `delta < theta`
    /// reads as a hit.
    pub theta_ms: f64,
}

fn std_normal() -> GaussCdf {
    GaussCdf::new(0.0, 1.0).expect("unit normal")
}

/// Solves for the noise sigma and decision threshold that make a single
/// paired probe operate at exactly (tpr, fpr).
///
/// The paired difference `delta = ttft(candidate) - ttft(reference)` is
/// N(-gap, 2 sigma^2) when the candidate extends the cached prefix and
/// N(0, 2 sigma^2) when it does not, so
///   tpr = Phi((theta + gap) / (sigma sqrt2)),  fpr = Phi(theta / (sigma sqrt2)).
pub fn solve_noise_for_operating_point(
    gap_ms: f64,
    point: OperatingPoint,
) -> Result<Calibration> {
    let OperatingPoint { tpr, fpr } = point;
    if !(0.0 < fpr && fpr < 1.0 && 0.0 < tpr && tpr < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "operating point must lie strictly inside (0,1)^2, got tpr={tpr} fpr={fpr}"
        )));
    }
    if tpr <= fpr {
        return Err(Error::InvalidConfig(format!(
            "operating point needs tpr > fpr, got tpr={tpr} fpr={fpr}"
        )));
    }
    if !(gap_ms.is_finite() && gap_ms > 0.0) {
        return Err(Error::InvalidConfig(format!("gap must be positive, got {gap_ms}")));
    }
    let n = std_normal();
    let z_tpr = n.inverse_cdf(tpr);
    let z_fpr = n.inverse_cdf(fpr);
    let sigma = gap_ms / ((z_tpr - z_fpr) * std::f64::consts::SQRT_2);
    let theta = z_fpr * sigma * std::f64::consts::SQRT_2;
    Ok(Calibration { sigma_ms: sigma, theta_ms: theta })
}

/// Forward map: single-probe (tpr, fpr) for a given gap, noise, threshold.
pub fn single_probe_rates(gap_ms: f64, sigma_ms: f64, theta_ms: f64) -> OperatingPoint {
    let n = std_normal();
    let s = sigma_ms * std::f64::consts::SQRT_2;
    if s == 0.0 {
        return OperatingPoint {
            tpr: if theta_ms + gap_ms > 0.0 { 1.0 } else { 0.0 },
            fpr: if theta_ms > 0.0 { 1.0 } else { 0.0 },
        };
    }
    OperatingPoint { tpr: n.cdf((theta_ms + gap_ms) / s), fpr: n.cdf(theta_ms / s) }
}

/// P[X >= k] for X ~ Binomial(n, p).
pub fn binomial_tail(n: u32, k: u32, p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "probability out of range: {p}");
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    use statrs::distribution::{Binomial, DiscreteCDF};
    let b = Binomial::new(p, n as u64).expect("validated p and n");
    b.sf((k - 1) as u64)
}

/// Majority-vote amplification: the operating point after requiring at least
/// `k` of `n` single probes to vote hit.
pub fn vote_rates(n: u32, k: u32, single: OperatingPoint) -> OperatingPoint {
    OperatingPoint {
        tpr: binomial_tail(n, k, single.tpr),
        fpr: binomial_tail(n, k, single.fpr),
    }
}

/// Closed-form area under the ROC curve for the paired-difference test: two
/// Gaussians with equal variance 2 sigma^2 whose means are gap apart.
pub fn gaussian_roc_auc(gap_ms: f64, sigma_ms: f64) -> f64 {
    if sigma_ms == 0.0 {
        return if gap_ms > 0.0 { 1.0 } else { 0.5 };
    }
    std_normal().cdf(gap_ms / (2.0 * sigma_ms))
}
