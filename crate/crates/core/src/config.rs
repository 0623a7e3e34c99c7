//! The TOML run configuration: one file fully describes a run.
//!
//! Every key has a default. Unknown keys are collected over the whole file
//! and reported together, as are semantic problems, so a config can be fixed
//! in one pass. `key=value` overrides (dotted keys, TOML values) are applied
//! before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::data::{DataConfig, FeatureSchema};
use crate::model::{ModelKind, ModelSpec};
use crate::train::{TrainConfig, DEFAULT_CASES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("invalid override {0:?}: expected key=value")]
    Override(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Architecture hyperparameters. Window, horizon and feature counts come from
/// the data section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub n_encoders: usize,
    pub n_decoders: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub lstm_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelSpec::default();
        Self {
            kind: s.kind,
            n_encoders: s.n_encoders,
            n_decoders: s.n_decoders,
            n_heads: s.n_heads,
            d_model: s.d_model,
            ffn_width: s.ffn_width,
            lstm_layers: s.lstm_layers,
        }
    }
}

impl ModelSection {
    /// Full model spec for the given schema and (W, H).
    pub fn spec(&self, schema: &FeatureSchema, window: usize, horizon: usize) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            n_encoders: self.n_encoders,
            n_decoders: self.n_decoders,
            n_heads: self.n_heads,
            d_model: self.d_model,
            ffn_width: self.ffn_width,
            lstm_layers: self.lstm_layers,
            ..ModelSpec::default()
        }
        .for_data(schema, window, horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub kinds: Vec<ModelKind>,
    /// `(W, H)` pairs.
    pub cases: Vec<(usize, usize)>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            kinds: ModelKind::ALL.to_vec(),
            cases: DEFAULT_CASES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for the grid and the data pipeline; 0 lets the
    /// thread pool decide.
    pub jobs: usize,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub grid: GridSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            jobs: 0,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            grid: GridSection::default(),
        }
    }
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: [&str; 2] = ["data.path", "data.schema_file"];

fn unknown_keys(user: &Table, reference: &Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match reference.get(key) {
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
            Some(Value::Table(r)) if r.is_empty() => {}
            Some(Value::Table(r)) => {
                if let Value::Table(u) = value {
                    unknown_keys(u, r, &path, out);
                }
            }
            Some(Value::Array(r)) => {
                if let (Some(Value::Table(first)), Value::Array(items)) = (r.first(), value) {
                    for (i, item) in items.iter().enumerate() {
                        if let Value::Table(u) = item {
                            unknown_keys(u, first, &format!("{path}[{i}]"), out);
                        }
                    }
                }
            }
            Some(_) => {}
        }
    }
}

/// Parses `key=value` where `value` is a TOML value; bare words are taken as
/// strings.
fn apply_override(root: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = root;
    for part in parts {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(ConfigError::Override(format!("{spec} ({part} is not a table)"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let reference = Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        unknown_keys(&table, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::Invalid(unknown.into_iter().map(|k| format!("{k}: unknown key")).collect()));
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(vec![e.message().to_string()]))?;
        let problems = cfg.problems();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    /// Defaults plus overrides, for runs without a config file.
    pub fn from_overrides(overrides: &[String]) -> Result<Self, ConfigError> {
        Self::parse("", overrides)
    }

    /// The effective configuration as TOML; parsing it back reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every semantic problem, each naming its key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.data.problems();
        out.extend(self.train.problems());
        if self.data.schema_file.is_none() {
            let spec = self.model.spec(&self.data.schema, self.data.window, self.data.horizon);
            out.extend(spec.problems().into_iter().map(|p| format!("model: {p}")));
        }
        if self.grid.kinds.is_empty() {
            out.push("grid.kinds: must list at least one kind".into());
        }
        if self.grid.cases.is_empty() {
            out.push("grid.cases: must list at least one (W, H) pair".into());
        }
        for &(w, h) in &self.grid.cases {
            if w == 0 || h == 0 {
                out.push(format!("grid.cases: ({w}, {h}) needs positive W and H"));
            }
        }
        out
    }
}
