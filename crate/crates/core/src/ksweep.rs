//! Prompt recovery as a function of cache block granularity.
//!
//! With matching done in K-token blocks, the attacker must guess whole
//! tuples: the per-probe signal grows K-fold (so fewer votes are needed) but
//! the guess space grows geometrically, and any trailing partial block of
//! the victim's prompt is invisible no matter how many queries are spent.
//!
//! Each prompt gets a fixed query budget. The attacker cannot tell a wrong
//! tuple list from an unlucky vote, so on a miss it re-runs the ranked list
//! until the budget is gone; a block whose true tuple ranks past what the
//! budget affords therefore burns everything that remains. Wide blocks die
//! this way more often, which is what drives total queries per token up even
//! as the per-committed-token cost falls with the tapering vote count.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DUMMY_TOKEN, RARE_TOKENS};
use crate::engine::{ChatRequest, Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::latency::{single_probe_rates, LatencyParams};
use crate::probe::{early_stop_vote, is_hit};
use crate::psa::{
    evict_kv, filler_pool, measure_delta, score_recovery, EvictConfig, NGramPredictor,
    StopReason,
};
use crate::rng::rng_from;
use crate::token::{TokenId, Vocab};
use crate::wire::{EngineClient, FlushScope, InProcessClient};

/// Votes per tuple at granularity `k`: the per-probe gap scales with the
/// block size, so the budget tapers from 10 down to a floor of 2.
pub fn vote_n_for(k: usize) -> u32 {
    10u32.saturating_sub(2 * (k as u32 - 1)).max(2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KSweepConfig {
    pub seed: u64,
    pub granularities: Vec<usize>,
    /// Hit threshold at granularity 1. Coarser runs scale it with the block
    /// size, tracking the k-fold growth of the per-block timing gap.
    pub theta_ms: f64,
    pub cross_check: bool,
    /// Attacker queries allowed per prompt, scaled by the prompt length.
    pub per_token_budget: u64,
    /// Ranked-list breadth per pass; the budget, not this, ends a prompt.
    pub max_guesses_per_block: u32,
    /// A pass also ends at tuples this unlikely relative to its best one,
    /// so a confident context makes retries cheap after an unlucky vote.
    pub pass_floor: f64,
    pub max_blocks: usize,
    /// Draw vote outcomes from the closed-form probe rates instead of
    /// driving a serving engine. Same recovery loop, minutes faster.
    pub simulate: bool,
    pub evict: EvictConfig,
}

impl Default for KSweepConfig {
    fn default() -> Self {
        KSweepConfig {
            seed: 501,
            granularities: vec![1, 2, 3, 4],
            theta_ms: -0.234645,
            cross_check: true,
            per_token_budget: 500,
            max_guesses_per_block: 512,
            pass_floor: 5e-3,
            max_blocks: 256,
            simulate: false,
            evict: EvictConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub recovered: Vec<TokenId>,
    pub stop: StopReason,
    pub attacker_queries_total: u64,
    /// Queries spent on blocks that were actually committed.
    pub queries_at_committed: u64,
    pub victim_triggers: u64,
}

/// One granularity row, aggregated over every victim prompt.
#[derive(Debug, Clone, Serialize)]
pub struct KSweepPoint {
    pub granularity_k: usize,
    pub vote_n: u32,
    pub vote_k: u32,
    pub prompts: usize,
    /// Prompts that ran out of budget before their last whole block.
    pub prompts_exhausted: usize,
    pub secret_tokens: usize,
    /// Content tokens inside whole blocks (the transport marker occupies the
    /// first slot; a trailing partial block can never be observed).
    pub recoverable_tokens: usize,
    pub committed_tokens: usize,
    pub correct_tokens: usize,
    pub recovery_rate: f64,
    pub accuracy: f64,
    pub attacker_queries: u64,
    pub queries_at_committed: u64,
    /// Committed-block cost per correctly recovered token.
    pub queries_per_recovered_token: f64,
    /// Total attacker traffic (burned budgets included) per recovered token.
    pub queries_per_token: f64,
    pub victim_triggers: u64,
}

#[derive(Clone, Copy)]
enum ProbePass {
    Main,
    Cross,
}

fn rare_fill(len: usize, rare: TokenId, dummy: TokenId) -> Vec<TokenId> {
    let mut v = vec![rare];
    v.resize(len, dummy);
    v
}

/// The budget-retry recovery loop, generic over how a single probe sample is
/// answered. `sample` gets the candidate wire prefix (recovered tokens plus
/// the tuple under test, `tuple_len` long) and returns the hit verdict.
fn recover_blocks(
    sample: &mut dyn FnMut(&[TokenId], usize, ProbePass) -> Result<bool>,
    predictor: &NGramPredictor,
    k: usize,
    budget_queries: u64,
    cost_per_sample: u64,
    cfg: &KSweepConfig,
) -> Result<(Vec<TokenId>, StopReason, u64, u64)> {
    let vote_n = vote_n_for(k);
    let vote_k = (vote_n / 2).max(1);
    let n2 = (vote_n / 2).max(3);
    let k2 = n2 / 2 + 1;
    let mut samples = 0u64;
    let mut committed_samples = 0u64;
    let mut recovered: Vec<TokenId> = Vec::new();
    let mut blocks_done = 0usize;

    let stop = loop {
        if blocks_done >= cfg.max_blocks {
            break StopReason::PositionCap;
        }
        let len = if recovered.is_empty() && k > 1 { k - 1 } else { k };
        let block_start = samples;
        let committed = 'block: loop {
            // One pass over the ranked list. A miss on the true tuple looks
            // exactly like a list without it, so while budget remains the
            // rational move is to run the list again.
            let proposals = predictor.ranked_tuples_floor(
                &recovered,
                len,
                cfg.max_guesses_per_block as usize,
                cfg.pass_floor,
            );
            if proposals.is_empty() {
                break 'block None;
            }
            for tuple in proposals {
                if samples * cost_per_sample >= budget_queries {
                    break 'block None;
                }
                let mut target = recovered.clone();
                target.extend_from_slice(&tuple);
                let vote = early_stop_vote(vote_n, vote_k, |_| {
                    samples += 1;
                    sample(&target, len, ProbePass::Main)
                })?;
                let mut accepted = vote.hit;
                if vote.hit && cfg.cross_check {
                    let confirm = early_stop_vote(n2, k2, |_| {
                        samples += 1;
                        sample(&target, len, ProbePass::Cross)
                    })?;
                    accepted = confirm.hit;
                }
                if accepted {
                    break 'block Some(tuple);
                }
            }
            if samples * cost_per_sample >= budget_queries {
                break 'block None;
            }
        };

        match committed {
            Some(t) => {
                recovered.extend(t);
                blocks_done += 1;
                committed_samples += samples - block_start;
            }
            None => break StopReason::BudgetExhausted { position: blocks_done },
        }
    };

    Ok((recovered, stop, samples, committed_samples))
}

/// Block-wise recovery at granularity `k` against a live engine. Tuple
/// lengths respect block alignment on the wire: the transport marker takes
/// one slot, so the first tuple has `k - 1` tokens (one token when `k` is 1)
/// and every later tuple has `k`.
pub fn recover_blockwise<C: EngineClient + ?Sized>(
    client: &mut C,
    victim_trigger: &mut dyn FnMut() -> Result<()>,
    predictor: &NGramPredictor,
    vocab: &Vocab,
    k: usize,
    budget_queries: u64,
    cfg: &KSweepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BlockReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("granularity must be at least 1".into()));
    }
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
    let cost_per_sample = (cfg.evict.filler_count + 2) as u64;
    let queries_at_start = client.queries_sent();
    let theta_ms = cfg.theta_ms * k as f64;
    let mut victim_triggers = 0u64;

    let mut sample = |prefix: &[TokenId], tuple_len: usize, pass: ProbePass| -> Result<bool> {
        evict_kv(client, vocab, &pool, cfg.evict, rng)?;
        victim_trigger()?;
        victim_triggers += 1;
        let recovered = &prefix[..prefix.len() - tuple_len];
        let (target, reference) = match pass {
            ProbePass::Main => {
                let mut reference = recovered.to_vec();
                reference.extend(rare_fill(tuple_len, rare_main, dummy));
                (prefix.to_vec(), reference)
            }
            // Confirmation probes extend both sides by a dummy block so a
            // sticky cache entry from the main vote cannot answer them.
            ProbePass::Cross => {
                let mut target = prefix.to_vec();
                target.extend(std::iter::repeat(dummy).take(k));
                let mut reference = recovered.to_vec();
                reference.extend(rare_fill(tuple_len, rare_cross, dummy));
                reference.extend(std::iter::repeat(dummy).take(k));
                (target, reference)
            }
        };
        let delta = measure_delta(client, vocab, &target, &reference)?;
        Ok(is_hit(delta, theta_ms))
    };

    let (recovered, stop, _samples, committed_samples) =
        recover_blocks(&mut sample, predictor, k, budget_queries, cost_per_sample, cfg)?;

    Ok(BlockReport {
        recovered,
        stop,
        attacker_queries_total: client.queries_sent() - queries_at_start,
        queries_at_committed: committed_samples * cost_per_sample,
        victim_triggers,
    })
}

/// Same recovery loop with vote outcomes drawn from the closed-form single
/// probe rates: a probe matching `d` more whole blocks than its reference
/// sees a mean TTFT gap of `d * k` token hits, and the classifier fires with
/// the corresponding true/false positive rate.
pub fn recover_blockwise_simulated(
    latency: &LatencyParams,
    predictor: &NGramPredictor,
    secret: &[TokenId],
    k: usize,
    budget_queries: u64,
    cfg: &KSweepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BlockReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("granularity must be at least 1".into()));
    }
    let gap_per_token = latency.t_miss_per_token_ms - latency.t_hit_per_token_ms;
    let cost_per_sample = (cfg.evict.filler_count + 2) as u64;
    let theta_ms = cfg.theta_ms * k as f64;
    let mut victim_triggers = 0u64;
    let mut hit_rates: HashMap<i64, f64> = HashMap::new();

    fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
        a.iter().zip(b).take_while(|(x, y)| x == y).count()
    }

    let mut sample = |prefix: &[TokenId], tuple_len: usize, _pass: ProbePass| -> Result<bool> {
        victim_triggers += 1;
        // The transport marker occupies wire slot 0 and always matches.
        let target_blocks = ((1 + lcp(prefix, secret)) / k) as i64;
        let recovered = &prefix[..prefix.len() - tuple_len];
        let reference_blocks = ((1 + lcp(recovered, secret)) / k) as i64;
        let p = *hit_rates.entry(target_blocks - reference_blocks).or_insert_with(|| {
            let gap_ms = (target_blocks - reference_blocks) as f64 * k as f64 * gap_per_token;
            single_probe_rates(gap_ms, latency.noise_sigma_ms, theta_ms).tpr
        });
        Ok(rng.gen::<f64>() < p)
    };

    let (recovered, stop, samples, committed_samples) =
        recover_blocks(&mut sample, predictor, k, budget_queries, cost_per_sample, cfg)?;

    Ok(BlockReport {
        recovered,
        stop,
        attacker_queries_total: samples * cost_per_sample,
        queries_at_committed: committed_samples * cost_per_sample,
        victim_triggers,
    })
}

/// Runs the recovery at every granularity in `cfg` against every secret,
/// rebuilding the serving stack with the matching block size and aggregating
/// per-granularity totals.
pub fn run_sweep(
    base: &EngineConfig,
    predictor: &NGramPredictor,
    secrets: &[&[TokenId]],
    cfg: &KSweepConfig,
) -> Result<Vec<KSweepPoint>> {
    if secrets.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one secret".into()));
    }
    let mut points = Vec::with_capacity(cfg.granularities.len());
    for &k in &cfg.granularities {
        if k == 0 {
            return Err(Error::InvalidConfig("granularity must be at least 1".into()));
        }
        let mut live = if cfg.simulate {
            None
        } else {
            let mut engine_cfg = base.clone();
            engine_cfg.kv_enabled = true;
            engine_cfg.semantic.enabled = false;
            engine_cfg.kv.granularity_k = k;
            let engine = Engine::from_config(engine_cfg)?;
            let vocab = engine.vocab().clone();
            let attacker = InProcessClient::new(engine);
            let victim = InProcessClient::from_shared(attacker.shared());
            Some((attacker, victim, vocab))
        };

        let mut point = KSweepPoint {
            granularity_k: k,
            vote_n: vote_n_for(k),
            vote_k: (vote_n_for(k) / 2).max(1),
            prompts: secrets.len(),
            prompts_exhausted: 0,
            secret_tokens: 0,
            recoverable_tokens: 0,
            committed_tokens: 0,
            correct_tokens: 0,
            recovery_rate: 0.0,
            accuracy: 0.0,
            attacker_queries: 0,
            queries_at_committed: 0,
            queries_per_recovered_token: 0.0,
            queries_per_token: 0.0,
            victim_triggers: 0,
        };

        for (i, &secret) in secrets.iter().enumerate() {
            let budget = cfg.per_token_budget * secret.len() as u64;
            // Marker plus content, floored to whole blocks, marker slot
            // removed. The harness scores a known secret, so it stops at the
            // last whole block instead of burning budget past the end of the
            // cached entry.
            let wire_len = 1 + secret.len();
            let recoverable = ((wire_len / k) * k).saturating_sub(1);
            let first_len = if k > 1 { k - 1 } else { 1 };
            let full_blocks = if recoverable < first_len {
                0
            } else {
                1 + (recoverable - first_len) / k
            };
            let mut k_cfg = cfg.clone();
            k_cfg.max_blocks = cfg.max_blocks.min(full_blocks);
            let mut rng = rng_from(cfg.seed, &format!("ksweep.k{k}.p{i}"));

            let report = match live.as_mut() {
                None => recover_blockwise_simulated(
                    &base.latency,
                    predictor,
                    secret,
                    k,
                    budget,
                    &k_cfg,
                    &mut rng,
                )?,
                Some((attacker, victim, vocab)) => {
                    attacker.flush(FlushScope::Kv)?;
                    let victim_req = ChatRequest::system_only(vocab.decode(secret)?);
                    let mut trigger = || victim.chat(&victim_req).map(|_| ());
                    recover_blockwise(
                        attacker,
                        &mut trigger,
                        predictor,
                        vocab,
                        k,
                        budget,
                        &k_cfg,
                        &mut rng,
                    )?
                }
            };

            let score = score_recovery(&report.recovered, secret);
            point.prompts_exhausted +=
                usize::from(matches!(report.stop, StopReason::BudgetExhausted { .. }));
            point.secret_tokens += secret.len();
            point.recoverable_tokens += recoverable;
            point.committed_tokens += score.committed;
            point.correct_tokens += score.matches;
            point.attacker_queries += report.attacker_queries_total;
            point.queries_at_committed += report.queries_at_committed;
            point.victim_triggers += report.victim_triggers;
        }

        point.recovery_rate = point.correct_tokens as f64 / point.secret_tokens as f64;
        point.accuracy = if point.committed_tokens == 0 {
            0.0
        } else {
            point.correct_tokens as f64 / point.committed_tokens as f64
        };
        let correct = point.correct_tokens as f64;
        point.queries_per_recovered_token = if point.correct_tokens == 0 {
            f64::INFINITY
        } else {
            point.queries_at_committed as f64 / correct
        };
        point.queries_per_token = if point.correct_tokens == 0 {
            f64::INFINITY
        } else {
            point.attacker_queries as f64 / correct
        };
        points.push(point);
    }
    Ok(points)
}
