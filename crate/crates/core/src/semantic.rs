//! Semantic response cache: a feature-hashed bag-of-words-and-bigrams
//! embedding, cosine matching against a threshold, and FIFO eviction.

use std::collections::VecDeque;

use crate::rng::fnv1a64_seeded;

pub const EMBED_DIM: usize = 256;
/// Hash seed for the embedding feature space; changing it re-randomizes every
/// collision pattern, so it is part of the model definition.
pub const EMBED_HASH_SEED: u64 = 0x9E37_79B9;
const BIGRAM_JOINER: u8 = 0x1f;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SemanticCacheConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub capacity_entries: usize,
}

impl Default for SemanticCacheConfig {
    fn default() -> Self {
        SemanticCacheConfig { enabled: false, threshold: 0.8, capacity_entries: 1000 }
    }
}

/// L2-normalized feature-hashed text embedding. Empty text embeds to the zero
/// vector, which has cosine 0 against everything.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        // Both vectors are unit length or zero, so the dot product is the
        // cosine directly.
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn l2_distance(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn bucket(bytes: &[u8], acc: &mut [f64; EMBED_DIM], weight: f64) {
    let h = fnv1a64_seeded(bytes, EMBED_HASH_SEED);
    let idx = (h % EMBED_DIM as u64) as usize;
    // Signed hashing keeps collision noise mean-zero instead of inflating
    // similarity.
    let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
    acc[idx] += sign * weight;
}

pub fn embed(text: &str) -> Embedding {
    let mut acc = [0.0f64; EMBED_DIM];
    let words: Vec<&str> = text.split_whitespace().collect();
    for w in &words {
        bucket(w.as_bytes(), &mut acc, 1.0);
    }
    let mut key = Vec::new();
    for pair in words.windows(2) {
        key.clear();
        key.extend_from_slice(pair[0].as_bytes());
        key.push(BIGRAM_JOINER);
        key.extend_from_slice(pair[1].as_bytes());
        bucket(&key, &mut acc, 1.0);
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut acc {
            *x /= norm;
        }
    }
    Embedding(acc.to_vec())
}

#[derive(Debug, Clone)]
pub struct SemanticEntry {
    pub text: String,
    pub response: String,
    pub embedding: Embedding,
    /// Insertion sequence number; lower wins cosine ties on lookup.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticHit {
    pub entry_seq: u64,
    pub cosine: f64,
}

#[derive(Debug)]
pub struct SemanticCache {
    cfg: SemanticCacheConfig,
    entries: VecDeque<SemanticEntry>,
    next_seq: u64,
}

impl SemanticCache {
    pub fn new(cfg: SemanticCacheConfig) -> Self {
        SemanticCache { cfg, entries: VecDeque::new(), next_seq: 0 }
    }

    pub fn config(&self) -> SemanticCacheConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Caches a response under the text's embedding. Exact duplicate texts
    /// are ignored so the original entry keeps its FIFO position and
    /// response. Oldest entries fall off once the capacity is exceeded.
    pub fn insert(&mut self, text: &str, response: &str) {
        if self.cfg.capacity_entries == 0 {
            return;
        }
        if self.entries.iter().any(|e| e.text == text) {
            return;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push_back(SemanticEntry {
            text: text.to_string(),
            response: response.to_string(),
            embedding: embed(text),
            seq,
        });
        while self.entries.len() > self.cfg.capacity_entries {
            self.entries.pop_front();
        }
    }

    /// Highest-cosine entry at or above the threshold; ties go to the
    /// earliest-inserted entry. Purely read-only: no recency refresh.
    pub fn lookup(&self, text: &str) -> Option<(&SemanticEntry, f64)> {
        let q = embed(text);
        let mut best: Option<(&SemanticEntry, f64)> = None;
        for e in &self.entries {
            let c = q.cosine(&e.embedding);
            // Strict `>` keeps the earliest entry on exact ties: iteration
            // runs in insertion order.
            if c >= self.cfg.threshold && best.map_or(true, |(_, bc)| c > bc) {
                best = Some((e, c));
            }
        }
        best
    }

    /// Best cosine over all entries regardless of threshold (for probes and
    /// diagnostics). Returns None only when the cache is empty.
    pub fn best_cosine(&self, text: &str) -> Option<SemanticHit> {
        let q = embed(text);
        let mut best: Option<SemanticHit> = None;
        for e in &self.entries {
            let c = q.cosine(&e.embedding);
            match best {
                Some(b) if c <= b.cosine => {}
                _ => best = Some(SemanticHit { entry_seq: e.seq, cosine: c }),
            }
        }
        best
    }

    pub fn flush(&mut self) {
        self.entries.clear();
        self.next_seq = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn embedding_is_deterministic_and_unit_length() {
        let a = embed("book a flight to tokyo tomorrow morning");
        let b = embed("book a flight to tokyo tomorrow morning");
        assert_eq!(a, b);
        let norm: f64 = a.as_slice().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_embeds_to_zero() {
        let z = embed("");
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(z.cosine(&embed("anything at all")), 0.0);
    }

    #[test]
    fn word_order_changes_the_embedding_via_bigrams() {
        let a = embed("alpha beta gamma");
        let b = embed("gamma beta alpha");
        let c = a.cosine(&b);
        assert!(c < 0.999, "reordering must move the vector, got {c}");
        assert!(c > 0.0, "same words should stay broadly similar, got {c}");
    }

    #[test]
    fn paraphrase_similarity_ordering() {
        let base = embed("please summarize the medical record for the patient");
        let close = embed("please summarize the medical file for the patient");
        let far = embed("what is the fastest route to the airport today");
        assert!(base.cosine(&close) > 0.7);
        assert!(base.cosine(&far) < 0.3);
        assert!(base.cosine(&close) > base.cosine(&far));
    }

    #[test]
    fn fifo_eviction_drops_oldest() {
        let mut c = SemanticCache::new(SemanticCacheConfig {
            enabled: true,
            threshold: 0.8,
            capacity_entries: 2,
        });
        c.insert("first entry text", "r1");
        c.insert("second entry text", "r2");
        c.insert("third entry text", "r3");
        assert_eq!(c.len(), 2);
        assert!(c.lookup("first entry text").is_none());
        assert_eq!(c.lookup("second entry text").unwrap().0.response, "r2");
        assert_eq!(c.lookup("third entry text").unwrap().0.response, "r3");
    }

    #[test]
    fn duplicate_insert_keeps_first_response_and_position() {
        let mut c = SemanticCache::new(SemanticCacheConfig {
            enabled: true,
            threshold: 0.8,
            capacity_entries: 10,
        });
        c.insert("repeat me exactly", "original");
        c.insert("repeat me exactly", "impostor");
        assert_eq!(c.len(), 1);
        assert_eq!(c.lookup("repeat me exactly").unwrap().0.response, "original");
    }

    #[test]
    fn lookup_respects_threshold() {
        let mut c = SemanticCache::new(SemanticCacheConfig {
            enabled: true,
            threshold: 0.8,
            capacity_entries: 10,
        });
        c.insert("book a flight from london to tokyo next monday", "resp");
        let near = "book a flight from london to tokyo next tuesday";
        let far = "write a short poem about the moon";
        let (entry, cos) = c.lookup(near).expect("near paraphrase should hit");
        assert_eq!(entry.response, "resp");
        assert!(cos >= 0.8);
        assert!(c.lookup(far).is_none());
        let best = c.best_cosine(far).unwrap();
        assert!(best.cosine < 0.8);
    }

    #[test]
    fn lookup_does_not_refresh_fifo_order() {
        let mut c = SemanticCache::new(SemanticCacheConfig {
            enabled: true,
            threshold: 0.8,
            capacity_entries: 2,
        });
        c.insert("alpha entry text one", "r1");
        c.insert("beta entry text two", "r2");
        c.lookup("alpha entry text one"); // would refresh an LRU, not a FIFO
        c.insert("gamma entry text three", "r3");
        assert!(c.lookup("alpha entry text one").is_none());
        assert!(c.lookup("beta entry text two").is_some());
    }

    #[test]
    fn flush_empties_the_cache() {
        let mut c = SemanticCache::new(SemanticCacheConfig {
            enabled: true,
            threshold: 0.8,
            capacity_entries: 10,
        });
        c.insert("some cached text", "r");
        c.flush();
        assert!(c.is_empty());
        assert!(c.lookup("some cached text").is_none());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-e]{1,4}", 0..10).prop_map(|ws| ws.join(" "))
    }

    proptest! {
        #[test]
        fn cosine_is_bounded_and_symmetric(a in arb_text(), b in arb_text()) {
            let ea = embed(&a);
            let eb = embed(&b);
            let c = ea.cosine(&eb);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
            prop_assert!((c - eb.cosine(&ea)).abs() < 1e-12);
        }

        #[test]
        fn lookup_never_returns_below_threshold(
            texts in proptest::collection::vec(arb_text(), 1..20),
            query in arb_text(),
        ) {
            let mut c = SemanticCache::new(SemanticCacheConfig {
                enabled: true,
                threshold: 0.8,
                capacity_entries: 16,
            });
            for t in &texts {
                c.insert(t, "r");
            }
            if let Some((_, cos)) = c.lookup(&query) {
                prop_assert!(cos >= 0.8 - 1e-9);
            }
        }

        #[test]
        fn exact_text_always_hits_itself(text in "[a-e]{1,4}( [a-e]{1,4}){0,9}") {
            let mut c = SemanticCache::new(SemanticCacheConfig {
                enabled: true,
                threshold: 0.8,
                capacity_entries: 16,
            });
            c.insert(&text, "r");
            let (_, cos) = c.lookup(&text).expect("exact text must hit");
            prop_assert!((cos - 1.0).abs() < 1e-9);
        }
    }
}
