//! Whitespace tokenizer over a closed vocabulary. Prompts, cache keys and
//! probes all live in the same id space, so equality of token sequences is
//! equality of meaning for every cache in the lab.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from surface strings, deduplicating while keeping
    /// first-occurrence order. Words must be whitespace-free.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab { words: Vec::new(), index: HashMap::new() };
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary word {w:?} is empty or contains whitespace"
                )));
            }
            v.intern(w);
        }
        if v.words.is_empty() {
            return Err(Error::InvalidConfig("vocabulary is empty".into()));
        }
        Ok(v)
    }

    fn intern(&mut self, w: String) -> TokenId {
        if let Some(&id) = self.index.get(&w) {
            return id;
        }
        let id = self.words.len() as TokenId;
        self.index.insert(w.clone(), id);
        self.words.push(w);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::InvalidTokenId(id))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Splits on whitespace and maps every token to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    /// Joins token surfaces with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id)?);
        }
        Ok(out)
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        // Serialized vocabularies were validated at construction time.
        Vocab::from_words(words).expect("serialized vocabulary must be valid")
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_vocab() -> Vocab {
        Vocab::from_words(["you", "are", "a", "helpful", "planner", "."]).unwrap()
    }

    #[test]
    fn encode_maps_words_in_order() {
        let v = sample_vocab();
        assert_eq!(v.encode("you are a planner .").unwrap(), vec![0, 1, 2, 4, 5]);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let v = sample_vocab();
        match v.encode("you are unknowable") {
            Err(Error::UnknownToken(w)) => assert_eq!(w, "unknowable"),
            other => panic!("expected UnknownToken, got {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let v = sample_vocab();
        assert!(matches!(v.decode(&[0, 99]), Err(Error::InvalidTokenId(99))));
    }

    #[test]
    fn duplicates_are_deduplicated() {
        let v = Vocab::from_words(["a", "b", "a"]).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.id("b"), Some(1));
    }

    #[test]
    fn whitespace_words_are_rejected() {
        assert!(Vocab::from_words(["a b"]).is_err());
        assert!(Vocab::from_words([""]).is_err());
    }

    #[test]
    fn decode_then_encode_is_identity_on_ids() {
        let v = sample_vocab();
        let ids = vec![5, 3, 3, 0, 2];
        assert_eq!(v.encode(&v.decode(&ids).unwrap()).unwrap(), ids);
    }

    proptest! {
        #[test]
        fn round_trip_ids(ids in proptest::collection::vec(0u32..6, 0..64)) {
            let v = sample_vocab();
            let text = v.decode(&ids).unwrap();
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }

        #[test]
        fn round_trip_normalized_text(words in proptest::collection::vec(0usize..6, 1..32)) {
            let v = sample_vocab();
            let text = words
                .iter()
                .map(|&i| v.word(i as TokenId).unwrap())
                .collect::<Vec<_>>()
                .join(" ");
            let ids = v.encode(&text).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }
}
