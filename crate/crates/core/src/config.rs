//! Engine configuration: a TOML file layered over defaults, then `QM_*`
//! environment overrides, validated before anything starts.
//!
//! Environment keys map to config paths by dropping the `QM_` prefix,
//! lowercasing and splitting on double underscores, so
//! `QM_ENGINE__MAX_HOPS=5` sets `engine.max_hops`. Top-level keys also accept
//! a single-segment name (`QM_DIM`, `QM_STORE_DIR`). Values are read as TOML
//! literals when they parse as one and as strings otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::model_gateway::GatewayConfig;
use crate::parser;
use crate::retrieval_engine::RetrievalParams;
use crate::summarizer::{DEFAULT_SEGMENT_BUDGET, DEFAULT_SEPARATOR};
use crate::tagger::{Taxonomy, DEFAULT_THRESHOLD};

pub const ENV_PREFIX: &str = "QM_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParserConfig {
    pub backend: String,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self {
            backend: "baseline".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummarizerConfig {
    pub budget: usize,
    pub separator: String,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_SEGMENT_BUDGET,
            separator: DEFAULT_SEPARATOR.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaggerConfig {
    /// JSON taxonomy; the built-in vocabulary is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy_path: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            taxonomy_path: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub dim: usize,
    /// Holds `index/` and `traces/`.
    pub store_dir: PathBuf,
    pub parser: ParserConfig,
    pub summarizer: SummarizerConfig,
    pub tagger: TaggerConfig,
    pub gateway: GatewayConfig,
    pub engine: RetrievalParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            store_dir: PathBuf::from("qm-store"),
            parser: ParserConfig::default(),
            summarizer: SummarizerConfig::default(),
            tagger: TaggerConfig::default(),
            gateway: GatewayConfig::default(),
            engine: RetrievalParams::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn literal(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut cur = root;
    for seg in &path[..path.len() - 1] {
        let table = match cur {
            Value::Table(t) => t,
            other => {
                *other = Value::Table(toml::Table::new());
                other.as_table_mut().unwrap()
            }
        };
        cur = table
            .entry(seg.clone())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    if let Value::Table(t) = cur {
        t.insert(path[path.len() - 1].clone(), value);
    }
}

impl EngineConfig {
    /// Defaults, overlaid with the file at `path` (if any), then with `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut tree = Value::try_from(EngineConfig::default())
            .map_err(|e| Error::config("<defaults>", e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            let file: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
            merge(&mut tree, Value::Table(file));
        }
        let top: Vec<String> = tree
            .as_table()
            .map(|t| t.keys().cloned().collect())
            .unwrap_or_default();
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let lower = rest.to_ascii_lowercase();
            let path: Vec<String> = if lower.contains("__") {
                lower.split("__").map(str::to_owned).collect()
            } else if top.contains(&lower) {
                vec![lower]
            } else {
                continue;
            };
            if path.iter().any(String::is_empty) {
                return Err(Error::config(key, "empty path segment"));
            }
            set_path(&mut tree, &path, literal(&raw));
        }
        let cfg: EngineConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be greater than 0"));
        }
        parser::backend_by_name(&self.parser.backend)?;
        if self.summarizer.budget == 0 {
            return Err(Error::config("summarizer.budget", "must be greater than 0"));
        }
        if !(0.0..=1.0).contains(&self.tagger.threshold) {
            return Err(Error::config("tagger.threshold", "must lie in [0, 1]"));
        }
        if let Some(p) = &self.tagger.taxonomy_path {
            if !p.is_file() {
                return Err(Error::config(
                    "tagger.taxonomy_path",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        if self.gateway.max_concurrent == 0 {
            return Err(Error::config(
                "gateway.max_concurrent",
                "must be at least 1",
            ));
        }
        let r = &self.engine;
        if r.max_hops == 0 {
            return Err(Error::config("engine.max_hops", "must be at least 1"));
        }
        if r.k == 0 {
            return Err(Error::config("engine.k", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&r.novelty_floor) {
            return Err(Error::config("engine.novelty_floor", "must lie in [0, 1]"));
        }
        if r.context_limit == 0 {
            return Err(Error::config("engine.context_limit", "must be at least 1"));
        }
        if self.store_dir.exists() && !self.store_dir.is_dir() {
            return Err(Error::config(
                "store_dir",
                format!("{} is not a directory", self.store_dir.display()),
            ));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let t = match &self.tagger.taxonomy_path {
            Some(p) => Taxonomy::load(p)?,
            None => Taxonomy::default(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn index_dir(&self) -> PathBuf {
        self.store_dir.join("index")
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.store_dir.join("traces")
    }
}
