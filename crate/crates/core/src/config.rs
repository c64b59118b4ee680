//! Project configuration: one TOML or JSON file naming the dataset, schemas,
//! exemplar bank, similarity matrix, backends and pricing. Relative paths
//! resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub dataset: PathBuf,
    pub schemas: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplars: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub styles: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<PathBuf>,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    #[serde(default = "default_review_dir")]
    pub review_dir: PathBuf,
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_review_dir() -> PathBuf {
    PathBuf::from("review")
}

impl Config {
    /// Reads `.toml` as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let mut config: Config = if is_toml {
            toml::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        };
        config.resolve(path.parent().unwrap_or(Path::new(".")));
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.schemas);
        fix(&mut self.runs_dir);
        fix(&mut self.review_dir);
        for p in [
            &mut self.exemplars,
            &mut self.styles,
            &mut self.similarity,
            &mut self.lexicon,
            &mut self.pricing,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut names = std::collections::HashSet::new();
        for b in &self.backends {
            if !names.insert(b.name.as_str()) {
                return Err(ConfigError::Invalid(format!("backend {} declared twice", b.name)));
            }
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn backend(&self, name: &str) -> Result<&BackendConfig, ConfigError> {
        self.backends.iter().find(|b| b.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.backends.iter().map(|b| b.name.as_str()).collect();
            ConfigError::Invalid(format!("unknown backend {name} (configured: {})", known.join(", ")))
        })
    }
}
