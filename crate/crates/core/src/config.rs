//! One TOML file drives every runnable scenario. Each sub-config keeps its
//! own defaults so a sparse file works; an optional root `seed` re-derives
//! every component seed coherently.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::ksweep::KSweepConfig;
use crate::pna::{DocInferenceConfig, PnaConfig};
use crate::psa::PsaConfig;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Token-by-token prompt recovery through the KV prefix cache.
    Psa,
    /// Peer-presence rounds through the semantic cache.
    Pna,
    /// Document-membership inference through the KV cache.
    Doc,
    /// Recovery difficulty across cache granularities.
    Ksweep,
    /// Scrubber round-trip, residual leakage, and overhead.
    Anonymize,
    /// ROC of the single-probe KV hit/miss channel.
    RocKv,
    /// ROC of embedding similarity per pair class.
    RocSemantic,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Psa => "psa",
            Scenario::Pna => "pna",
            Scenario::Doc => "doc",
            Scenario::Ksweep => "ksweep",
            Scenario::Anonymize => "anonymize",
            Scenario::RocKv => "roc-kv",
            Scenario::RocSemantic => "roc-semantic",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "psa" => Scenario::Psa,
            "pna" => Scenario::Pna,
            "doc" => Scenario::Doc,
            "ksweep" => Scenario::Ksweep,
            "anonymize" => Scenario::Anonymize,
            "roc-kv" => Scenario::RocKv,
            "roc-semantic" => Scenario::RocSemantic,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scenario {other:?}"
                )))
            }
        })
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// When set, every component seed below is derived from this root and
    /// the per-section seeds in the file are ignored.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub engine: EngineConfig,
    pub corpus: CorpusConfig,
    pub psa: PsaConfig,
    pub pna: PnaConfig,
    pub doc: DocInferenceConfig,
    pub ksweep: KSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Psa,
            seed: None,
            out_dir: PathBuf::from("out"),
            engine: EngineConfig::default(),
            corpus: CorpusConfig::default(),
            psa: PsaConfig::default(),
            pna: PnaConfig::default(),
            doc: DocInferenceConfig::default(),
            ksweep: KSweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    /// Parses a config document, then applies `key.path=value` overrides on
    /// the raw TOML tree so a flag can reach any field the file can.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = text.parse().map_err(Error::from)?;
        for (path, raw) in overrides {
            set_path(&mut value, path, raw)?;
        }
        let mut cfg: ExperimentConfig = value.try_into().map_err(Error::from)?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fans the root seed (when present) out into the component seeds.
    pub fn resolve(&mut self) {
        if let Some(root) = self.seed {
            self.engine.seed = derive_seed(root, "engine");
            self.corpus.seed = derive_seed(root, "corpus");
            self.psa.seed = derive_seed(root, "psa");
            self.pna.seed = derive_seed(root, "pna");
            self.doc.seed = derive_seed(root, "doc");
            self.ksweep.seed = derive_seed(root, "ksweep");
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.latency.validate()?;
        if self.corpus.n_prompts == 0 {
            return Err(Error::InvalidConfig("corpus.n_prompts must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.victim_fraction) {
            return Err(Error::InvalidConfig(
                "corpus.victim_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.ksweep.granularities.is_empty() {
            return Err(Error::InvalidConfig(
                "ksweep.granularities must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

fn parse_leaf(raw: &str) -> toml::Value {
    // Any scalar or array literal parses through a one-line document; bare
    // words fall back to strings so `scenario=psa` works unquoted.
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v was just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("override {path:?} crosses a non-table value"))
        })?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| {
        Error::InvalidConfig(format!("override {path:?} crosses a non-table value"))
    })?;
    table.insert(parts[parts.len() - 1].to_string(), parse_leaf(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_file_fills_in_defaults() {
        let cfg = ExperimentConfig::from_toml("scenario = \"pna\"", &[]).unwrap();
        assert_eq!(cfg.scenario, Scenario::Pna);
        assert_eq!(cfg.corpus.n_prompts, CorpusConfig::default().n_prompts);
        assert_eq!(cfg.psa.seed, PsaConfig::default().seed);
    }

    #[test]
    fn overrides_reach_nested_fields_with_native_types() {
        let text = "scenario = \"psa\"\n[psa]\nmax_guesses_per_position = 12\n";
        let overrides = vec![
            ("psa.max_guesses_per_position".to_string(), "80".to_string()),
            ("engine.latency.noise_sigma_ms".to_string(), "0.0".to_string()),
            ("ksweep.granularities".to_string(), "[1, 2]".to_string()),
            ("scenario".to_string(), "ksweep".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml(text, &overrides).unwrap();
        assert_eq!(cfg.scenario, Scenario::Ksweep);
        assert_eq!(cfg.psa.max_guesses_per_position, 80);
        assert_eq!(cfg.engine.latency.noise_sigma_ms, 0.0);
        assert_eq!(cfg.ksweep.granularities, vec![1, 2]);
    }

    #[test]
    fn root_seed_rederives_every_component_seed() {
        let a = ExperimentConfig::from_toml("seed = 5", &[]).unwrap();
        let b = ExperimentConfig::from_toml("seed = 5\n[corpus]\nseed = 99\n", &[]).unwrap();
        // The root wins over an explicit component seed.
        assert_eq!(a.corpus.seed, b.corpus.seed);
        assert_ne!(a.corpus.seed, a.psa.seed);

        let c = ExperimentConfig::from_toml("seed = 6", &[]).unwrap();
        assert_ne!(a.corpus.seed, c.corpus.seed);

        // Without a root seed the per-section values stand.
        let d = ExperimentConfig::from_toml("[corpus]\nseed = 99\n", &[]).unwrap();
        assert_eq!(d.corpus.seed, 99);
    }

    #[test]
    fn bad_paths_and_unknown_scenarios_are_rejected() {
        assert!(ExperimentConfig::from_toml("scenario = \"warp\"", &[]).is_err());
        let bad = vec![("psa..seed".to_string(), "1".to_string())];
        assert!(ExperimentConfig::from_toml("", &bad).is_err());
        let through_scalar = vec![("seed.deep".to_string(), "1".to_string())];
        assert!(ExperimentConfig::from_toml("seed = 3", &through_scalar).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(back.scenario, cfg.scenario);
        assert_eq!(back.engine.kv.capacity_tokens, cfg.engine.kv.capacity_tokens);
        assert_eq!(back.pna.rounds, cfg.pna.rounds);
    }
}
