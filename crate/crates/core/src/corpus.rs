//! Synthetic prompt corpus: a closed vocabulary, a family of instruction-style
//! openings, a private reference id, and sentence bodies drawn from an order-2
//! Markov chain over a fixed seed text. The chain is deliberately formulaic —
//! most words have one or two successors — so bodies are learnable by small
//! n-gram models, while the code words of the reference id are drawn uniformly
//! and stay hard at any model order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::token::{TokenId, Vocab};

/// Prompt-style preambles; every generated prompt starts with one of these.
pub const OPENINGS: [&str; 8] = [
    "you are",
    "imagine you are",
    "act as",
    "in your role as",
    "you are programmed to function as",
    "as an expert",
    "pretend to be",
    "your task is to",
];

/// Fixed prose the body chain is estimated from. Sentences are telegraphic on
/// purpose: shared sentence starters form the only wide branch points, and the
/// remaining words chain near-deterministically.
const SEED_TEXT: &str = "\
you plan balanced travel routes for every trip . \
always confirm travel dates before booking hotel rooms . \
keep daily budgets visible inside every plan . \
never promise refunds on nonrefundable fares . \
ask about dietary limits before reserving group dinners . \
you prepare structured meeting agendas for busy teams . \
always collect discussion topics before sorting them by priority . \
keep minutes short and assign owners to action items . \
never let debates run past their allotted window . \
ask attendees to review notes after each session . \
you answer product questions with patience and care . \
always verify order numbers before issuing replacements . \
keep responses polite even when customers sound upset . \
never share internal pricing rules with callers . \
ask for screenshots when troubleshooting billing errors . \
you draft persuasive cover letters for job seekers . \
always highlight measurable achievements near opening lines . \
keep paragraphs tight and tailor tone to each employer . \
never invent credentials or exaggerate past roles . \
ask applicants which skills match posted requirements . \
you design engaging lesson plans for middle school classes . \
always state learning goals at lesson start . \
keep activities varied so students stay curious . \
never grade homework without clear rubrics . \
ask pupils reflective questions after group work . \
you coach runners through gradual training cycles . \
always schedule rest days between hard workouts . \
keep hydration reminders inside weekly summaries . \
never increase mileage faster than ten percent . \
ask athletes about sleep quality during checkins .";

/// Template markers and probe tokens reserved by the serving engine and the
/// attack harnesses. Never emitted by the generator.
pub const SYSTEM_MARKER: &str = "<|sys|>";
pub const SEPARATOR_MARKER: &str = "<|sep|>";
pub const USER_MARKER: &str = "<|usr|>";
pub const RARE_TOKENS: [&str; 2] = ["<rare#0>", "<rare#1>"];
pub const DUMMY_TOKEN: &str = "<pad#0>";
/// Digit words: used in document numbers and as part of reference ids.
pub const DIGIT_WORDS: [&str; 10] =
    ["d0", "d1", "d2", "d3", "d4", "d5", "d6", "d7", "d8", "d9"];
/// Phonetic code words; together with the digit words they form the 36-symbol
/// alphabet of prompt reference ids.
pub const CODE_WORDS: [&str; 26] = [
    "able", "baker", "charlie", "dog", "easy", "fox", "george", "how", "item",
    "jig", "king", "love", "mike", "nan", "oboe", "peter", "queen", "roger",
    "sugar", "tare", "uncle", "victor", "william", "xray", "yoke", "zebra",
];
/// Reference ids are 2-5 symbols long; short ids dominate.
pub const REFERENCE_LEN: std::ops::RangeInclusive<usize> = 2..=5;
const REFERENCE_LEN_WEIGHTS: [(usize, u32); 4] = [(2, 55), (3, 25), (4, 15), (5, 5)];

fn draw_reference_len(rng: &mut impl Rng) -> usize {
    let total: u32 = REFERENCE_LEN_WEIGHTS.iter().map(|&(_, w)| w).sum();
    let mut roll = rng.gen_range(0..total);
    for &(len, w) in &REFERENCE_LEN_WEIGHTS {
        if roll < w {
            return len;
        }
        roll -= w;
    }
    unreachable!()
}
const DOCUMENT_WORD: &str = "document";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_prompts: usize,
    pub victim_fraction: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            n_prompts: 1000,
            victim_fraction: 0.1,
            min_tokens: 20,
            max_tokens: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptCorpus {
    pub seed: u64,
    pub vocab: Vocab,
    pub prompts: Vec<Vec<TokenId>>,
    pub victim: Vec<usize>,
    pub attacker: Vec<usize>,
}

impl PromptCorpus {
    pub fn victim_prompts(&self) -> impl Iterator<Item = &Vec<TokenId>> {
        self.victim.iter().map(|&i| &self.prompts[i])
    }

    pub fn attacker_prompts(&self) -> impl Iterator<Item = &Vec<TokenId>> {
        self.attacker.iter().map(|&i| &self.prompts[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Order-2 chain: for each word, its successor counts in first-seen order.
struct Bigrams {
    next: BTreeMap<TokenId, Vec<(TokenId, u32)>>,
}

impl Bigrams {
    fn from_tokens(tokens: &[TokenId]) -> Self {
        let mut next: BTreeMap<TokenId, Vec<(TokenId, u32)>> = BTreeMap::new();
        for w in tokens.windows(2) {
            let entry = next.entry(w[0]).or_default();
            match entry.iter_mut().find(|(t, _)| *t == w[1]) {
                Some((_, c)) => *c += 1,
                None => entry.push((w[1], 1)),
            }
        }
        Bigrams { next }
    }

    fn sample(&self, prev: TokenId, rng: &mut ChaCha8Rng) -> Option<TokenId> {
        let succ = self.next.get(&prev)?;
        let total: u32 = succ.iter().map(|(_, c)| c).sum();
        let mut pick = rng.gen_range(0..total);
        for &(t, c) in succ {
            if pick < c {
                return Some(t);
            }
            pick -= c;
        }
        unreachable!("cumulative weights cover the draw")
    }
}

/// Builds the closed vocabulary shared by the whole lab: seed text, openings,
/// template markers, probe tokens and document digits.
pub fn build_vocab() -> Vocab {
    let mut words: Vec<String> = Vec::new();
    words.extend(SEED_TEXT.split_whitespace().map(str::to_string));
    for o in OPENINGS {
        words.extend(o.split_whitespace().map(str::to_string));
    }
    words.push(SYSTEM_MARKER.into());
    words.push(SEPARATOR_MARKER.into());
    words.push(USER_MARKER.into());
    words.extend(RARE_TOKENS.iter().map(|s| s.to_string()));
    words.push(DUMMY_TOKEN.into());
    words.push(DOCUMENT_WORD.into());
    words.extend(DIGIT_WORDS.iter().map(|s| s.to_string()));
    words.extend(CODE_WORDS.iter().map(|s| s.to_string()));
    Vocab::from_words(words).expect("built-in vocabulary is valid")
}

/// Reserved marker and probe words (the string side of [`reserved_ids`]).
pub fn reserved_words() -> Vec<&'static str> {
    let mut words = vec![SYSTEM_MARKER, SEPARATOR_MARKER, USER_MARKER, DUMMY_TOKEN];
    words.extend(RARE_TOKENS);
    words
}

/// Token ids of the reference-id alphabet (code words plus digit words).
pub fn reference_symbol_ids(vocab: &Vocab) -> Vec<TokenId> {
    CODE_WORDS
        .iter()
        .chain(DIGIT_WORDS.iter())
        .map(|w| vocab.id(w).expect("id symbols are in the vocabulary"))
        .collect()
}

/// Ids of tokens the generator must never emit (markers and probe tokens).
pub fn reserved_ids(vocab: &Vocab) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = [SYSTEM_MARKER, SEPARATOR_MARKER, USER_MARKER, DUMMY_TOKEN]
        .iter()
        .chain(RARE_TOKENS.iter())
        .map(|w| vocab.id(w).expect("reserved word present"))
        .collect();
    ids.sort_unstable();
    ids
}

pub fn build_corpus(cfg: &CorpusConfig) -> Result<PromptCorpus> {
    // Longest opening (6) plus the longest reference id (5) must leave body room.
    if cfg.n_prompts == 0
        || cfg.min_tokens < 12
        || cfg.max_tokens < cfg.min_tokens
        || !(0.0..=1.0).contains(&cfg.victim_fraction)
    {
        return Err(Error::InvalidConfig(format!(
            "corpus config out of range: n_prompts={} min={} max={} victim_fraction={}",
            cfg.n_prompts, cfg.min_tokens, cfg.max_tokens, cfg.victim_fraction
        )));
    }

    let vocab = build_vocab();
    let seed_tokens = vocab
        .encode(SEED_TEXT)
        .expect("seed text words are in the vocabulary");
    let chain = Bigrams::from_tokens(&seed_tokens);
    let period = vocab.id(".").expect("period is in the vocabulary");

    let symbols = reference_symbol_ids(&vocab);

    let mut rng = rng_from(cfg.seed, "corpus.generate");
    let mut prompts: Vec<Vec<TokenId>> = Vec::with_capacity(cfg.n_prompts);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..cfg.n_prompts {
        let mut prompt = None;
        for _attempt in 0..256 {
            let p = generate_prompt(cfg, &vocab, &chain, period, &symbols, &mut rng);
            if seen.insert(p.clone()) {
                prompt = Some(p);
                break;
            }
        }
        let p = prompt.ok_or(Error::EmptyCorpus)?;
        prompts.push(p);
    }

    // Disjoint victim/attacker index split over a seeded shuffle.
    let mut order: Vec<usize> = (0..cfg.n_prompts).collect();
    let mut split_rng = rng_from(cfg.seed, "corpus.split");
    for i in (1..order.len()).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_victim = ((cfg.n_prompts as f64) * cfg.victim_fraction).round() as usize;
    let n_victim = n_victim.clamp(usize::from(cfg.victim_fraction > 0.0), cfg.n_prompts);
    let mut victim: Vec<usize> = order[..n_victim].to_vec();
    let mut attacker: Vec<usize> = order[n_victim..].to_vec();
    victim.sort_unstable();
    attacker.sort_unstable();

    Ok(PromptCorpus { seed: cfg.seed, vocab, prompts, victim, attacker })
}

fn generate_prompt(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    chain: &Bigrams,
    period: TokenId,
    symbols: &[TokenId],
    rng: &mut ChaCha8Rng,
) -> Vec<TokenId> {
    let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    let id_len = draw_reference_len(rng);
    let opening = OPENINGS[rng.gen_range(0..OPENINGS.len())];
    let mut tokens = vocab.encode(opening).expect("openings are in the vocabulary");
    // Bodies start at a sentence boundary: the first body word is drawn from
    // the successors of the period, i.e. from the sentence starters.
    let mut prev = period;
    while tokens.len() + id_len < len {
        prev = chain
            .sample(prev, rng)
            .expect("every seed-text word has a successor");
        tokens.push(prev);
    }
    // Private reference id at a sentence boundary in the mid-to-late body:
    // uniform code-word symbols. The id never ends the prompt, so the body
    // always resumes (with a sentence starter) right after it.
    let lo = tokens.len() * 2 / 5;
    let boundaries: Vec<usize> = (lo..tokens.len().saturating_sub(1))
        .filter(|&i| tokens[i] == period)
        .collect();
    let at = match boundaries.as_slice() {
        [] => opening.split_whitespace().count(),
        b => b[rng.gen_range(0..b.len())] + 1,
    };
    for j in 0..id_len {
        tokens.insert(at + j, symbols[rng.gen_range(0..symbols.len())]);
    }
    tokens
}

/// A text template with named `{slot}` placeholders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotTemplate {
    pub text: String,
}

impl SlotTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        SlotTemplate { text: text.into() }
    }

    /// Replaces every `{slot}` with its value; unknown slots are an error.
    pub fn instantiate(&self, slots: &BTreeMap<&str, &str>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after
                .find('}')
                .ok_or_else(|| Error::InvalidConfig(format!("unclosed slot in {:?}", self.text)))?;
            let name = &after[..close];
            let value = slots.get(name).ok_or_else(|| Error::MissingSlot(name.to_string()))?;
            out.push_str(value);
            rest = &after[close + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Total variation distance between the token unigram distributions of two
/// prompt sets.
pub fn unigram_tvd(a: &[&Vec<TokenId>], b: &[&Vec<TokenId>]) -> f64 {
    fn dist(prompts: &[&Vec<TokenId>]) -> BTreeMap<TokenId, f64> {
        let mut counts: BTreeMap<TokenId, f64> = BTreeMap::new();
        let mut total = 0.0;
        for p in prompts {
            for &t in p.iter() {
                *counts.entry(t).or_insert(0.0) += 1.0;
                total += 1.0;
            }
        }
        for v in counts.values_mut() {
            *v /= total;
        }
        counts
    }
    let da = dist(a);
    let db = dist(b);
    let keys: std::collections::BTreeSet<_> = da.keys().chain(db.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (da.get(k).unwrap_or(&0.0) - db.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}
