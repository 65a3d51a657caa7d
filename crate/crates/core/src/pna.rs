//! Peeping attacks against shared response caches.
//!
//! The semantic variant: an attacker who wants to learn whether a neighbor
//! asked about a particular person floods the cache, lets the victim talk,
//! then issues read-only probes phrased as paraphrases of the suspected
//! request. A probe answered at hit latency betrays the victim. Probes are
//! chosen from a paraphrase grid — most central first, mutually spread out,
//! and with a budget on how often they may fire against innocent neighbors.
//!
//! The document variant: with a prefix KV cache in front of long documents,
//! one timed resubmission of a candidate document reveals whether anyone
//! uploaded it before.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anonymize::{FIRST_NAMES, LAST_NAMES};
use crate::corpus::{self, DIGIT_WORDS};
use crate::engine::{ChatMessage, ChatRequest, Engine};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::semantic::{embed, Embedding};
use crate::token::TokenId;

// ---------------------------------------------------------------------------
// Paraphrase grid
//
// One request template with four paraphrase slots and two identity slots.
// The name appears twice (reference plus follow-up clause), the condition
// once, so swapping the name moves the embedding further than swapping the
// condition. Options within a slot differ in exactly one word, so paraphrase
// pairs of the same identity stay tightly clustered above the cache threshold
// while identity swaps fall below it.

pub const OPENINGS: [&str; 5] = [
    "please summarize",
    "kindly summarize",
    "quickly summarize",
    "urgently summarize",
    "carefully summarize",
];

pub const OBJECTS: [&str; 3] =
    ["the medical record", "the clinical record", "the admission record"];

pub const PURPOSES: [&str; 3] = [
    "before the weekly review",
    "before the morning review",
    "before the evening review",
];

pub const CLOSINGS: [&str; 4] = [
    "and reply by morning",
    "and reply by evening",
    "and reply by noon",
    "and reply by friday",
];

/// Number of paraphrase variants per identity.
pub const GRID_SIZE: usize =
    OPENINGS.len() * OBJECTS.len() * PURPOSES.len() * CLOSINGS.len();

pub const TARGET_CONDITION: &str = "persistent type two diabetes";
pub const DECOY_CONDITIONS: [&str; 3] = [
    "advanced chronic kidney disease",
    "painful late stage arthritis",
    "recurring seasonal pollen allergy",
];

pub fn target_name() -> String {
    format!("{} {}", FIRST_NAMES[0], LAST_NAMES[0])
}

pub fn decoy_names() -> Vec<String> {
    (1..4).map(|i| format!("{} {}", FIRST_NAMES[i], LAST_NAMES[i])).collect()
}

/// The name enters twice — in full at the record reference, bare first name
/// in the follow-up clause — so it outweighs the once-mentioned condition
/// without drowning everything else.
pub fn render_variant(
    opening: usize,
    object: usize,
    purpose: usize,
    closing: usize,
    name: &str,
    condition: &str,
) -> String {
    let first = name.split_whitespace().next().unwrap_or(name);
    format!(
        "{} {} of patient ms {} {} because ms {} needs steady support for {} {}",
        OPENINGS[opening],
        OBJECTS[object],
        name,
        PURPOSES[purpose],
        first,
        condition,
        CLOSINGS[closing],
    )
}

/// All paraphrase variants for one identity, in deterministic slot order.
pub fn paraphrase_variants(name: &str, condition: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(GRID_SIZE);
    for o in 0..OPENINGS.len() {
        for b in 0..OBJECTS.len() {
            for p in 0..PURPOSES.len() {
                for c in 0..CLOSINGS.len() {
                    out.push(render_variant(o, b, p, c, name, condition));
                }
            }
        }
    }
    out
}

/// Unrelated victim requests (different register entirely).
pub const UNRELATED_PROMPTS: [&str; 4] = [
    "you plan balanced travel routes for every trip",
    "always collect discussion topics before sorting them by priority",
    "keep paragraphs tight and tailor tone to each employer",
    "never increase mileage faster than ten percent",
];

// ---------------------------------------------------------------------------
// Pairwise leakage profile

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairClass {
    BothMatch,
    NameOnly,
    ConditionOnly,
    BothDiffer,
}

fn render_random(
    name: &str,
    condition: &str,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (String, [usize; 4]) {
    let slots = [
        rng.gen_range(0..OPENINGS.len()),
        rng.gen_range(0..OBJECTS.len()),
        rng.gen_range(0..PURPOSES.len()),
        rng.gen_range(0..CLOSINGS.len()),
    ];
    (render_variant(slots[0], slots[1], slots[2], slots[3], name, condition), slots)
}

/// Cosine similarity of one victim/probe pair from the given class, with
/// identities and paraphrase slots drawn uniformly. Pairs never reuse the
/// exact same text — a verbatim duplicate says nothing about paraphrase
/// leakage.
pub fn pair_similarity(class: PairClass, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let mut names = vec![target_name()];
    names.extend(decoy_names());
    let mut conditions = vec![TARGET_CONDITION.to_string()];
    conditions.extend(DECOY_CONDITIONS.iter().map(|c| c.to_string()));

    let na = rng.gen_range(0..names.len());
    let ca = rng.gen_range(0..conditions.len());
    let other = |same: usize, len: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        (same + 1 + rng.gen_range(0..len - 1)) % len
    };
    let (nb, cb) = match class {
        PairClass::BothMatch => (na, ca),
        PairClass::NameOnly => (na, other(ca, conditions.len(), rng)),
        PairClass::ConditionOnly => (other(na, names.len(), rng), ca),
        PairClass::BothDiffer => {
            (other(na, names.len(), rng), other(ca, conditions.len(), rng))
        }
    };
    let (text_a, slots_a) = render_random(&names[na], &conditions[ca], rng);
    loop {
        let (text_b, slots_b) = render_random(&names[nb], &conditions[cb], rng);
        if class != PairClass::BothMatch || slots_a != slots_b {
            return embed(&text_a).cosine(&embed(&text_b));
        }
    }
}

/// Labeled similarity samples for the leakage ROC: `n_per_class` positives
/// from `positive` pairs against as many both-differ negatives.
pub fn similarity_samples(
    positive: PairClass,
    n_per_class: usize,
    seed: u64,
) -> Vec<(f64, bool)> {
    let mut rng = rng_from(seed, &format!("pna.pairs.{positive:?}"));
    let mut out = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        out.push((pair_similarity(positive, &mut rng), true));
        out.push((pair_similarity(PairClass::BothDiffer, &mut rng), false));
    }
    out
}

// ---------------------------------------------------------------------------
// Probe selection

/// Indices of `texts` ordered most-representative first: ascending mean L2
/// distance to all other candidates, ties toward the lexically smaller text.
pub fn rank_representative(texts: &[String]) -> Vec<usize> {
    let embeds: Vec<Embedding> = texts.iter().map(|t| embed(t)).collect();
    let n = texts.len();
    let mut mean_dist = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if i != j {
                sum += embeds[i].l2_distance(&embeds[j]);
            }
        }
        mean_dist[i] = if n > 1 { sum / (n - 1) as f64 } else { 0.0 };
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        mean_dist[a]
            .partial_cmp(&mean_dist[b])
            .unwrap()
            .then_with(|| texts[a].cmp(&texts[b]))
    });
    idx
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSelection {
    pub texts: Vec<String>,
    /// Estimated per-probe false-fire rates against the innocent pool.
    pub fpr_estimates: Vec<f64>,
    pub budget_used: f64,
}

/// Greedy probe pick: walk candidates in representativeness order, keep one
/// if it stays at least `min_l2` from every kept probe and its estimated
/// false-fire rate (fraction of the innocent pool at or above the cache
/// threshold) still fits the summed budget.
pub fn greedy_select(
    candidates: &[String],
    innocent_pool: &[String],
    threshold: f64,
    max_probes: usize,
    min_l2: f64,
    fpr_budget: f64,
) -> ProbeSelection {
    let cand_embeds: Vec<Embedding> = candidates.iter().map(|t| embed(t)).collect();
    let pool_embeds: Vec<Embedding> = innocent_pool.iter().map(|t| embed(t)).collect();
    let fpr_of = |i: usize| -> f64 {
        if pool_embeds.is_empty() {
            return 0.0;
        }
        let hits = pool_embeds
            .iter()
            .filter(|p| cand_embeds[i].cosine(p) >= threshold)
            .count();
        hits as f64 / pool_embeds.len() as f64
    };
    let order = rank_representative(candidates);
    let mut chosen: Vec<usize> = Vec::new();
    let mut fprs: Vec<f64> = Vec::new();
    let mut budget_used = 0.0;
    for i in order {
        if chosen.len() == max_probes {
            break;
        }
        let far_enough = chosen
            .iter()
            .all(|&j| cand_embeds[i].l2_distance(&cand_embeds[j]) >= min_l2);
        if !far_enough {
            continue;
        }
        let fpr = fpr_of(i);
        if budget_used + fpr > fpr_budget {
            continue;
        }
        chosen.push(i);
        fprs.push(fpr);
        budget_used += fpr;
    }
    ProbeSelection {
        texts: chosen.iter().map(|&i| candidates[i].clone()).collect(),
        fpr_estimates: fprs,
        budget_used,
    }
}

// ---------------------------------------------------------------------------
// Round protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimType {
    /// Target name and target condition (a true positive for the attacker).
    Match,
    /// Target name, different condition.
    SameNameOtherCondition,
    /// Different name, target condition.
    OtherNameSameCondition,
    /// Entirely unrelated request.
    Unrelated,
}

impl VictimType {
    pub fn label(self) -> &'static str {
        match self {
            VictimType::Match => "match",
            VictimType::SameNameOtherCondition => "same_name_other_condition",
            VictimType::OtherNameSameCondition => "other_name_same_condition",
            VictimType::Unrelated => "unrelated",
        }
    }
}

/// Every round tests each victim type in isolation; the unrelated type runs
/// twice so half the traffic is background noise.
pub const ROUND_MIX: [VictimType; 5] = [
    VictimType::Match,
    VictimType::SameNameOtherCondition,
    VictimType::OtherNameSameCondition,
    VictimType::Unrelated,
    VictimType::Unrelated,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PnaConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Filler requests per isolation flood; must exceed the semantic cache
    /// capacity so earlier entries are guaranteed out.
    pub flood_fillers: usize,
    pub probe_count: usize,
    /// TTFT below this reads as a cache hit (midpoint of hit and miss cost).
    pub decision_threshold_ms: f64,
    pub min_probe_l2: f64,
    pub fpr_budget: f64,
}

impl Default for PnaConfig {
    fn default() -> Self {
        PnaConfig {
            seed: 301,
            rounds: 500,
            flood_fillers: 250,
            probe_count: 5,
            decision_threshold_ms: 1320.0,
            min_probe_l2: 0.40,
            fpr_budget: 0.06,
        }
    }
}

/// One victim request as the attacker saw it: how many probes it took to
/// reach a verdict and whether the verdict should have fired.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub victim_type: &'static str,
    /// Probes issued before the first hit, or the full budget on a miss.
    pub probe_count: usize,
    pub decision: bool,
    pub truth: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PnaOutcome {
    pub rounds: usize,
    pub selection: ProbeSelection,
    /// Decision rate per probe budget j (index j-1): any of the first j
    /// probes answered at hit latency.
    pub rate_at: BTreeMap<VictimType, Vec<f64>>,
    pub rows: Vec<RoundRow>,
}

impl PnaOutcome {
    pub fn tpr_at(&self, j: usize) -> f64 {
        self.rate_at[&VictimType::Match][j - 1]
    }

    pub fn fpr_at(&self, t: VictimType, j: usize) -> f64 {
        self.rate_at[&t][j - 1]
    }
}

const FILLER_POOL: [&str; 32] = [
    "ledger", "orchard", "gravel", "lantern", "monsoon", "quartz", "saddle",
    "thicket", "velvet", "walnut", "anchor", "bramble", "cinder", "drizzle",
    "ember", "falcon", "garnet", "harbor", "ingot", "juniper", "kelp",
    "lichen", "marble", "nectar", "obsidian", "pewter", "quiver", "russet",
    "sprocket", "tundra", "umber", "vessel",
];

/// Distinct filler text for flooding. Words are drawn pseudo-randomly so any
/// two fillers stay far apart in embedding space (near-identical fillers
/// would hit each other and never insert); the digit-word counter suffix
/// keeps every text unique so deduplication can never shrink the flood.
fn filler_text(counter: &mut u64) -> String {
    let n = *counter;
    *counter += 1;
    let mut words = Vec::with_capacity(12);
    let mut h = crate::rng::splitmix64(n ^ 0x00F1_11E5);
    for _ in 0..8 {
        words.push(FILLER_POOL[(h % FILLER_POOL.len() as u64) as usize]);
        h = crate::rng::splitmix64(h);
    }
    let mut v = n;
    loop {
        words.push(DIGIT_WORDS[(v % 10) as usize]);
        v /= 10;
        if v == 0 {
            break;
        }
    }
    words.join(" ")
}

fn flood(engine: &mut Engine, count: usize, counter: &mut u64) -> Result<()> {
    for _ in 0..count {
        let mut req = ChatRequest::system_only(filler_text(counter));
        req.max_tokens = Some(1);
        engine.handle(&req)?;
    }
    Ok(())
}

/// Full multi-round probing run. The engine must have its semantic cache
/// enabled; probes go through the read-only path, victim and flood traffic
/// through the normal one.
pub fn run_rounds(engine: &mut Engine, cfg: &PnaConfig) -> Result<PnaOutcome> {
    if !engine.config().semantic.enabled {
        return Err(Error::InvalidConfig("peeping run needs the semantic cache".into()));
    }
    let threshold = engine.config().semantic.threshold;
    let name = target_name();
    let candidates = paraphrase_variants(&name, TARGET_CONDITION);
    let mut innocent_pool = Vec::new();
    for decoy in decoy_names() {
        innocent_pool.extend(paraphrase_variants(&decoy, TARGET_CONDITION));
    }
    let selection = greedy_select(
        &candidates,
        &innocent_pool,
        threshold,
        cfg.probe_count,
        cfg.min_probe_l2,
        cfg.fpr_budget,
    );
    if selection.texts.len() < cfg.probe_count {
        return Err(Error::TooFewCandidates {
            needed: cfg.probe_count,
            got: selection.texts.len(),
        });
    }

    let decoy_name_list = decoy_names();
    let mut counter = 0u64;
    let mut hits: BTreeMap<VictimType, Vec<u64>> = BTreeMap::new();
    let mut totals: BTreeMap<VictimType, u64> = BTreeMap::new();
    for t in ROUND_MIX {
        hits.entry(t).or_insert_with(|| vec![0; cfg.probe_count]);
        totals.entry(t).or_insert(0);
    }

    let mut rows = Vec::with_capacity(cfg.rounds * ROUND_MIX.len());
    for round in 0..cfg.rounds {
        let mut rng = rng_from(cfg.seed, &format!("pna.round.{round}"));
        for (slot, &vt) in ROUND_MIX.iter().enumerate() {
            flood(engine, cfg.flood_fillers, &mut counter)?;
            let victim_text = match vt {
                VictimType::Match => {
                    candidates[rng.gen_range(0..candidates.len())].clone()
                }
                VictimType::SameNameOtherCondition => {
                    let cond = DECOY_CONDITIONS[rng.gen_range(0..DECOY_CONDITIONS.len())];
                    let grid = paraphrase_variants(&name, cond);
                    grid[rng.gen_range(0..grid.len())].clone()
                }
                VictimType::OtherNameSameCondition => {
                    let decoy =
                        &decoy_name_list[rng.gen_range(0..decoy_name_list.len())];
                    let grid = paraphrase_variants(decoy, TARGET_CONDITION);
                    grid[rng.gen_range(0..grid.len())].clone()
                }
                VictimType::Unrelated => {
                    let base =
                        UNRELATED_PROMPTS[rng.gen_range(0..UNRELATED_PROMPTS.len())];
                    // A digit suffix varies unrelated traffic across rounds.
                    format!("{base} d{} d{}", round % 10, slot)
                }
            };
            engine.handle(&ChatRequest::system_only(victim_text))?;

            let mut any_hit = false;
            let mut probes_used = 0usize;
            *totals.get_mut(&vt).unwrap() += 1;
            for (j, probe) in selection.texts.iter().enumerate() {
                if !any_hit {
                    probes_used = j + 1;
                }
                let ttft =
                    engine.probe_semantic(&[ChatMessage::system(probe.clone())])?;
                any_hit |= ttft < cfg.decision_threshold_ms;
                if any_hit {
                    hits.get_mut(&vt).unwrap()[j] += 1;
                }
            }
            rows.push(RoundRow {
                round,
                victim_type: vt.label(),
                probe_count: probes_used,
                decision: any_hit,
                truth: vt == VictimType::Match,
            });
        }
    }

    let mut rate_at = BTreeMap::new();
    for (vt, h) in hits {
        let total = totals[&vt] as f64;
        rate_at.insert(vt, h.iter().map(|&c| c as f64 / total).collect());
    }
    Ok(PnaOutcome { rounds: cfg.rounds, selection, rate_at, rows })
}

// ---------------------------------------------------------------------------
// Document membership inference over the prefix KV cache

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DocInferenceConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub n_submitted: usize,
    pub reps: usize,
    /// TTFT below this means the document was already resident.
    pub threshold_ms: f64,
    pub doc_lengths: Vec<usize>,
}

impl Default for DocInferenceConfig {
    fn default() -> Self {
        DocInferenceConfig {
            seed: 401,
            n_docs: 200,
            n_submitted: 100,
            reps: 5,
            threshold_ms: 2000.0,
            doc_lengths: vec![12_000, 18_000, 24_000],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DocInferenceOutcome {
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub per_rep_accuracy: Vec<f64>,
}

/// Corpus of long documents with distinct openings (a digit-word id right
/// after a shared lead token) so cross-document prefix sharing is capped at a
/// few tokens.
pub fn build_documents(engine: &Engine, cfg: &DocInferenceConfig) -> Vec<Vec<TokenId>> {
    let vocab = engine.vocab();
    let reserved = corpus::reserved_ids(vocab);
    let pool: Vec<TokenId> =
        (0..vocab.len() as TokenId).filter(|t| !reserved.contains(t)).collect();
    let doc_word = vocab.id("document").expect("document word in vocab");
    let digits: Vec<TokenId> =
        DIGIT_WORDS.iter().map(|d| vocab.id(d).expect("digit word")).collect();
    (0..cfg.n_docs)
        .map(|i| {
            let len = cfg.doc_lengths[i % cfg.doc_lengths.len()];
            let mut doc = vec![doc_word, digits[i / 100 % 10], digits[i / 10 % 10], digits[i % 10]];
            let mut k = i * 7;
            while doc.len() < len {
                doc.push(pool[k % pool.len()]);
                k += 1;
            }
            doc
        })
        .collect()
}

/// One membership-inference experiment: a victim primes the cache with a
/// secret subset of documents, the attacker times a resubmission of every
/// candidate. Repeats `reps` times from a clean cache.
pub fn run_document_inference(
    engine: &mut Engine,
    cfg: &DocInferenceConfig,
) -> Result<DocInferenceOutcome> {
    if cfg.n_submitted > cfg.n_docs {
        return Err(Error::InvalidConfig(format!(
            "cannot submit {} of {} documents",
            cfg.n_submitted, cfg.n_docs
        )));
    }
    let docs = build_documents(engine, cfg);
    let vocab = engine.vocab().clone();
    let mut setup_rng = rng_from(cfg.seed, "doc.membership");
    let mut indices: Vec<usize> = (0..cfg.n_docs).collect();
    indices.shuffle(&mut setup_rng);
    let submitted: std::collections::BTreeSet<usize> =
        indices[..cfg.n_submitted].iter().copied().collect();

    let mut correct = 0u64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut per_rep = Vec::with_capacity(cfg.reps);
    for rep in 0..cfg.reps {
        engine.flush_kv();
        for &i in &submitted {
            let mut req = ChatRequest::system_only(vocab.decode(&docs[i])?);
            req.max_tokens = Some(1);
            engine.handle(&req)?;
        }
        let mut order: Vec<usize> = (0..cfg.n_docs).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("doc.probe_order.{rep}")));
        let mut rep_correct = 0u64;
        for i in order {
            let mut req = ChatRequest::system_only(vocab.decode(&docs[i])?);
            req.max_tokens = Some(1);
            let ttft = engine.handle(&req)?.ttft_ms;
            let guess_submitted = ttft < cfg.threshold_ms;
            let truth = submitted.contains(&i);
            if guess_submitted == truth {
                correct += 1;
                rep_correct += 1;
            }
            if guess_submitted && truth {
                tp += 1;
            }
            if guess_submitted && !truth {
                fp += 1;
            }
        }
        per_rep.push(rep_correct as f64 / cfg.n_docs as f64);
    }
    let trials = (cfg.reps * cfg.n_docs) as f64;
    let positives = (cfg.reps * cfg.n_submitted) as f64;
    let negatives = trials - positives;
    Ok(DocInferenceOutcome {
        accuracy: correct as f64 / trials,
        tpr: tp as f64 / positives,
        fpr: if negatives > 0.0 { fp as f64 / negatives } else { 0.0 },
        per_rep_accuracy: per_rep,
    })
}
