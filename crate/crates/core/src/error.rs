use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {0} out of vocabulary range")]
    InvalidTokenId(u32),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("template references slot `{0}` but no value was supplied")]
    MissingSlot(String),

    #[error("sequence of {len} tokens exceeds cache capacity of {capacity}")]
    SequenceExceedsCapacity { len: usize, capacity: usize },

    #[error("corpus generation produced no usable prompts")]
    EmptyCorpus,

    #[error("probe selection needs at least {needed} candidates, got {got}")]
    TooFewCandidates { needed: usize, got: usize },

    #[error("degenerate sample set: {0}")]
    DegenerateLabels(String),

    #[error("malformed request: {0}")]
    MalformedRequest(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("eviction incomplete: target prefix still reads as cached")]
    EvictionIncomplete,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    ConfigParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
