//! Identifier scrubbing for the semantic cache path: detects personal
//! identifiers, replaces them with stable placeholders like `⟨NAME_1⟩`, and
//! restores them from a per-request mapping. The placeholders use angle
//! characters outside the engine vocabulary so scrubbed text can never
//! collide with real tokens, and a second pass over scrubbed text is a no-op.

use std::collections::BTreeMap;

use once_cell::sync::Lazy;
use regex::Regex;

use crate::error::{Error, Result};

/// First names the gazetteer recognizes, standalone or with a last name.
pub const FIRST_NAMES: [&str; 12] = [
    "alice", "bruno", "carla", "diego", "elena", "farid", "greta", "hiro", "ines", "jonas",
    "katya", "liam",
];

/// Last names the gazetteer recognizes.
pub const LAST_NAMES: [&str; 12] = [
    "almeida", "brennan", "castillo", "dubois", "eriksen", "fontana", "gruber", "haddad",
    "ivanova", "jansen", "kowalski", "lindgren",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PiiKind {
    CreditCard,
    Email,
    Phone,
    IpAddress,
    Name,
}

impl PiiKind {
    pub fn tag(self) -> &'static str {
        match self {
            PiiKind::CreditCard => "CARD",
            PiiKind::Email => "EMAIL",
            PiiKind::Phone => "PHONE",
            PiiKind::IpAddress => "IP",
            PiiKind::Name => "NAME",
        }
    }
}

// Detection order doubles as overlap priority: more specific shapes first.
const DETECTION_ORDER: [PiiKind; 5] = [
    PiiKind::CreditCard,
    PiiKind::Email,
    PiiKind::Phone,
    PiiKind::IpAddress,
    PiiKind::Name,
];

static CARD_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\b\d{4}[- ]\d{4}[- ]\d{4}[- ]\d{4}\b").unwrap());
static EMAIL_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b").unwrap());
static PHONE_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\b(?:\+\d{1,2}[ -])?(?:\(\d{3}\)|\d{3})[ -]\d{3}[ -]\d{4}\b").unwrap());
static IP_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\b\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3}\b").unwrap());
static NAME_RE: Lazy<Regex> = Lazy::new(|| {
    let first = FIRST_NAMES.join("|");
    let last = LAST_NAMES.join("|");
    // Full-name branch first: alternation is leftmost-first, so "alice
    // almeida" is taken whole rather than as a bare "alice".
    Regex::new(&format!(r"(?i)\b(?:(?:{first})\s+(?:{last})|{first})\b")).unwrap()
});
static PLACEHOLDER_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"\u{27E8}[A-Z]+_\d+\u{27E9}").unwrap());

fn regex_for(kind: PiiKind) -> &'static Regex {
    match kind {
        PiiKind::CreditCard => &CARD_RE,
        PiiKind::Email => &EMAIL_RE,
        PiiKind::Phone => &PHONE_RE,
        PiiKind::IpAddress => &IP_RE,
        PiiKind::Name => &NAME_RE,
    }
}

/// Placeholder → original surface form, for the requester that produced it.
pub type RestoreMap = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct PiiMatch {
    pub kind: PiiKind,
    pub surface: String,
    pub placeholder: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scrubbed {
    pub text: String,
    pub restore: RestoreMap,
    /// Detected identifiers in placeholder-number order per kind.
    pub matches: Vec<PiiMatch>,
}

/// Replaces every detected identifier with a `⟨KIND_n⟩` placeholder.
/// Repeats of the same surface share one placeholder; numbering is 1-based in
/// order of first appearance, independently per kind.
pub fn anonymize(text: &str) -> Scrubbed {
    // (start, end, kind, priority) for every detector hit.
    let mut spans: Vec<(usize, usize, PiiKind, usize)> = Vec::new();
    for (prio, &kind) in DETECTION_ORDER.iter().enumerate() {
        for m in regex_for(kind).find_iter(text) {
            spans.push((m.start(), m.end(), kind, prio));
        }
    }
    // Earliest start wins; on equal start the longer match, then priority.
    spans.sort_by(|a, b| (a.0, std::cmp::Reverse(a.1), a.3).cmp(&(b.0, std::cmp::Reverse(b.1), b.3)));
    let mut chosen: Vec<(usize, usize, PiiKind)> = Vec::new();
    let mut covered_until = 0;
    for (start, end, kind, _) in spans {
        if start >= covered_until {
            chosen.push((start, end, kind));
            covered_until = end;
        }
    }

    let mut out = String::with_capacity(text.len());
    let mut restore = RestoreMap::new();
    let mut matches = Vec::new();
    let mut counters: BTreeMap<PiiKind, usize> = BTreeMap::new();
    let mut by_surface: BTreeMap<(PiiKind, String), String> = BTreeMap::new();
    let mut cursor = 0;
    for (start, end, kind) in chosen {
        out.push_str(&text[cursor..start]);
        let surface = &text[start..end];
        let placeholder = by_surface
            .entry((kind, surface.to_string()))
            .or_insert_with(|| {
                let n = counters.entry(kind).or_insert(0);
                *n += 1;
                let p = format!("\u{27E8}{}_{}\u{27E9}", kind.tag(), n);
                restore.insert(p.clone(), surface.to_string());
                matches.push(PiiMatch {
                    kind,
                    surface: surface.to_string(),
                    placeholder: p.clone(),
                });
                p
            })
            .clone();
        out.push_str(&placeholder);
        cursor = end;
    }
    out.push_str(&text[cursor..]);
    Scrubbed { text: out, restore, matches }
}

/// Rehydrates placeholders from `map`. A placeholder without a mapping is an
/// error: it means text leaked across requesters without its restore map.
pub fn restore(text: &str, map: &RestoreMap) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for m in PLACEHOLDER_RE.find_iter(text) {
        out.push_str(&text[cursor..m.start()]);
        match map.get(m.as_str()) {
            Some(surface) => out.push_str(surface),
            None => {
                return Err(Error::MissingSlot(format!(
                    "no restore mapping for {}",
                    m.as_str()
                )));
            }
        }
        cursor = m.end();
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}
