//! The simulated serving engine: request handling over a prefix KV cache
//! and/or a semantic response cache, with TTFT drawn from the latency model
//! on a virtual clock. Every request is timestamped from its own receipt, so
//! completions are reproducible bit-for-bit regardless of transport.

use serde::{Deserialize, Serialize};

use crate::anonymize::{self, RestoreMap};
use crate::corpus::{self, SYSTEM_MARKER, USER_MARKER};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheStats, PrefixCache, PrefixCacheConfig};
use crate::latency::LatencyParams;
use crate::rng::{fnv1a64_seeded, rng_from, splitmix64};
use crate::semantic::{SemanticCache, SemanticCacheConfig};
use crate::token::Vocab;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub seed: u64,
    pub kv_enabled: bool,
    pub kv: PrefixCacheConfig,
    pub semantic: SemanticCacheConfig,
    /// Insert (prompt, response) into the semantic cache after a miss
    /// finishes generating.
    pub semantic_insert_on_miss: bool,
    /// Strip identifiers from prompts before the semantic layer sees them and
    /// rehydrate responses from the requester's own mapping.
    pub anonymize_semantic: bool,
    pub latency: LatencyParams,
    pub default_max_tokens: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 17,
            kv_enabled: true,
            kv: PrefixCacheConfig::default(),
            semantic: SemanticCacheConfig::default(),
            semantic_insert_on_miss: true,
            anonymize_semantic: false,
            latency: LatencyParams::default(),
            default_max_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub max_tokens: Option<usize>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub stream: bool,
}

impl ChatRequest {
    pub fn system_only(content: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage::system(content)],
            max_tokens: None,
            temperature: 0.0,
            stream: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServedFrom {
    /// Prefill over the KV cache (or raw compute when it is disabled).
    Prefill { hit_tokens: usize, miss_tokens: usize },
    /// Answered wholesale by the semantic cache.
    SemanticHit { cosine: f64 },
    /// Semantic front end missed and a flat-cost backend recomputed.
    SemanticMiss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    Token { t_ms: f64, text: String },
    Eos { t_ms: f64 },
}

impl StreamEvent {
    pub fn t_ms(&self) -> f64 {
        match self {
            StreamEvent::Token { t_ms, .. } | StreamEvent::Eos { t_ms } => *t_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Completion {
    pub ttft_ms: f64,
    pub text: String,
    pub events: Vec<StreamEvent>,
    pub served_from: ServedFrom,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

/// Flattens a message list into the engine's canonical prompt string with
/// role markers, exactly as the prefill tokenizer sees it.
pub fn flatten_prompt(messages: &[ChatMessage]) -> Result<String> {
    if messages.is_empty() {
        return Err(Error::MalformedRequest("empty message list".into()));
    }
    let mut out = String::new();
    for m in messages {
        let marker = match m.role.as_str() {
            "system" => SYSTEM_MARKER,
            "user" => USER_MARKER,
            other => {
                return Err(Error::MalformedRequest(format!("unknown role {other:?}")));
            }
        };
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(marker);
        if !m.content.trim().is_empty() {
            out.push(' ');
            out.push_str(m.content.trim());
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Engine {
    cfg: EngineConfig,
    vocab: Vocab,
    kv: PrefixCache,
    semantic: SemanticCache,
    babble_pool: Vec<String>,
    salt: u64,
    requests: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, vocab: Vocab) -> Result<Self> {
        cfg.latency.validate()?;
        let kv = PrefixCache::new(cfg.kv)?;
        let semantic = SemanticCache::new(cfg.semantic);
        let reserved = corpus::reserved_words();
        let babble_pool: Vec<String> = vocab
            .words()
            .iter()
            .filter(|w| !reserved.contains(&w.as_str()))
            .cloned()
            .collect();
        if babble_pool.is_empty() {
            return Err(Error::InvalidConfig("vocabulary has no generatable words".into()));
        }
        let salt = splitmix64(cfg.seed ^ 0xC0FF_EE11_D00D_F00D);
        Ok(Engine { cfg, vocab, kv, semantic, babble_pool, salt, requests: 0 })
    }

    /// Engine over the built-in vocabulary.
    pub fn from_config(cfg: EngineConfig) -> Result<Self> {
        Engine::new(cfg, corpus::build_vocab())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn requests_served(&self) -> u64 {
        self.requests
    }

    pub fn kv_stats(&self) -> CacheStats {
        self.kv.stats()
    }

    pub fn kv_dump(&self) -> serde_json::Value {
        self.kv.dump()
    }

    pub fn semantic_entries(&self) -> usize {
        self.semantic.len()
    }

    pub fn flush_kv(&mut self) {
        self.kv.flush();
    }

    pub fn flush_semantic(&mut self) {
        self.semantic.flush();
    }

    pub fn flush_all(&mut self) {
        self.flush_kv();
        self.flush_semantic();
    }

    fn next_request_rng(&mut self) -> rand_chacha::ChaCha8Rng {
        let idx = self.requests;
        self.requests += 1;
        rng_from(self.cfg.seed, &format!("req.{idx}"))
    }

    /// Deterministic filler generation: response words are a hash chain over
    /// (prompt, temperature, engine salt), prefixed by an echo of the last
    /// few prompt words so responses carry prompt material verbatim.
    fn babble(&self, prompt: &str, temperature: f64, n_tokens: usize) -> String {
        let mut words: Vec<&str> = Vec::with_capacity(n_tokens);
        let prompt_words: Vec<&str> = prompt.split_whitespace().collect();
        let echo = prompt_words.len().min(4);
        words.extend_from_slice(&prompt_words[prompt_words.len() - echo..]);
        let mut state = splitmix64(
            fnv1a64_seeded(prompt.as_bytes(), self.salt) ^ temperature.to_bits(),
        );
        while words.len() < n_tokens {
            state = splitmix64(state);
            words.push(self.babble_pool[(state % self.babble_pool.len() as u64) as usize].as_str());
        }
        words.truncate(n_tokens);
        words.join(" ")
    }

    fn stream_events(&self, ttft_ms: f64, text: &str) -> Vec<StreamEvent> {
        let mut events = Vec::new();
        let mut n = 0;
        for (i, w) in text.split_whitespace().enumerate() {
            events.push(StreamEvent::Token {
                t_ms: ttft_ms + self.cfg.latency.decode_ms(i),
                text: w.to_string(),
            });
            n = i + 1;
        }
        events.push(StreamEvent::Eos { t_ms: ttft_ms + self.cfg.latency.decode_ms(n) });
        events
    }

    /// Handles one chat request on the virtual clock (t=0 at receipt).
    pub fn handle(&mut self, req: &ChatRequest) -> Result<Completion> {
        let prompt = flatten_prompt(&req.messages)?;
        let max_tokens = req.max_tokens.unwrap_or(self.cfg.default_max_tokens);
        let mut rng = self.next_request_rng();

        // The semantic layer sees the anonymized text when the mitigation is
        // on; the restore map is always the *current* requester's own.
        let (semantic_text, restore): (String, Option<RestoreMap>) =
            if self.cfg.anonymize_semantic && self.cfg.semantic.enabled {
                let scrubbed = anonymize::anonymize(&prompt);
                (scrubbed.text, Some(scrubbed.restore))
            } else {
                (prompt.clone(), None)
            };

        if self.cfg.semantic.enabled {
            if let Some((entry, cosine)) = self.semantic.lookup(&semantic_text) {
                let response = entry.response.clone();
                let mut ttft = self.cfg.latency.semantic_ttft_ms(true, &mut rng);
                let text = match &restore {
                    Some(map) => anonymize::restore(&response, map)?,
                    None => response,
                };
                ttft += self.mitigation_overhead_ms(&restore, &prompt, &text);
                let events = self.stream_events(ttft, &text);
                let output_tokens = text.split_whitespace().count();
                return Ok(Completion {
                    ttft_ms: ttft,
                    text,
                    events,
                    served_from: ServedFrom::SemanticHit { cosine },
                    prompt_tokens: prompt.split_whitespace().count(),
                    output_tokens,
                });
            }
        }

        // Semantic miss (or semantic disabled): the backend computes.
        let (ttft, served_from, prompt_tokens) = if self.cfg.kv_enabled {
            let ids = self.vocab.encode(&prompt)?;
            let hit = self.kv.match_prefix(&ids);
            let miss = ids.len() - hit;
            let ttft = self.cfg.latency.prefill_ttft_ms(hit, miss, &mut rng);
            self.kv.insert(&ids)?;
            (ttft, ServedFrom::Prefill { hit_tokens: hit, miss_tokens: miss }, ids.len())
        } else if self.cfg.semantic.enabled {
            // Semantic front end over a remote backend: a miss costs the
            // full round trip, flat.
            let ttft = self.cfg.latency.semantic_ttft_ms(false, &mut rng);
            (ttft, ServedFrom::SemanticMiss, prompt.split_whitespace().count())
        } else {
            let ids = self.vocab.encode(&prompt)?;
            let ttft = self.cfg.latency.prefill_ttft_ms(0, ids.len(), &mut rng);
            (ttft, ServedFrom::Prefill { hit_tokens: 0, miss_tokens: ids.len() }, ids.len())
        };

        let raw_response = self.babble(&semantic_text, req.temperature, max_tokens);
        if self.cfg.semantic.enabled && self.cfg.semantic_insert_on_miss {
            self.semantic.insert(&semantic_text, &raw_response);
        }
        let text = match &restore {
            Some(map) => anonymize::restore(&raw_response, map)?,
            None => raw_response,
        };
        let ttft = ttft + self.mitigation_overhead_ms(&restore, &prompt, &text);
        let events = self.stream_events(ttft, &text);
        let output_tokens = text.split_whitespace().count();
        Ok(Completion {
            ttft_ms: ttft,
            text,
            events,
            served_from: served_from,
            prompt_tokens,
            output_tokens,
        })
    }

    /// Scrub cost on the inbound prompt plus restore cost on the delivered
    /// text, both observable client-side, so reports can reproduce the charge
    /// exactly. Zero when the mitigation did not run.
    fn mitigation_overhead_ms(
        &self,
        restore: &Option<RestoreMap>,
        prompt: &str,
        delivered: &str,
    ) -> f64 {
        if restore.is_none() {
            return 0.0;
        }
        self.cfg.latency.anonymize_ms(prompt.chars().count())
            + self.cfg.latency.anonymize_ms(delivered.chars().count())
    }

    /// Read-only semantic timing probe: looks up without ever inserting, and
    /// reports only what a network observer would see — the TTFT.
    pub fn probe_semantic(&mut self, messages: &[ChatMessage]) -> Result<f64> {
        if !self.cfg.semantic.enabled {
            return Err(Error::InvalidConfig(
                "semantic probe against an engine without a semantic cache".into(),
            ));
        }
        let prompt = flatten_prompt(messages)?;
        let text = if self.cfg.anonymize_semantic {
            anonymize::anonymize(&prompt).text
        } else {
            prompt
        };
        let mut rng = self.next_request_rng();
        let scrub_ms = if self.cfg.anonymize_semantic {
            self.cfg.latency.anonymize_ms(text.chars().count())
        } else {
            0.0
        };
        let hit = self.semantic.lookup(&text).is_some();
        Ok(self.cfg.latency.semantic_ttft_ms(hit, &mut rng) + scrub_ms)
    }
}
