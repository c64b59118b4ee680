//! Resolved project settings: the config file with command-line overrides,
//! and loaders for everything it points at.

use std::path::{Path, PathBuf};

use annotate_core::aggregation::SimilaritySet;
use annotate_core::backends::{BackendConfig, MockProfile, RetryPolicy, Transport};
use annotate_core::config::{Config, ConfigError};
use annotate_core::costing::{default_pricing, load_pricing, PricingModel};
use annotate_core::dataset::Dataset;
use annotate_core::parsing::{ResponseParser, StyleLexicon};
use annotate_core::pipeline::{discover_runs, load_runs, LoadedRun, PipelineError};
use annotate_core::prompting::{ExemplarBank, StyleBook};

use crate::ProjectArgs;

const DEFAULT_CONFIG: &str = "annotate.toml";

#[derive(Debug, Clone)]
pub struct Project {
    pub config: Config,
}

impl Project {
    pub fn resolve(args: &ProjectArgs) -> Result<Self, PipelineError> {
        let path = args
            .config
            .clone()
            .or_else(|| Path::new(DEFAULT_CONFIG).is_file().then(|| PathBuf::from(DEFAULT_CONFIG)));
        let mut config = match path {
            Some(p) => Config::load(&p)?,
            None => Config {
                dataset: PathBuf::new(),
                schemas: PathBuf::new(),
                exemplars: None,
                styles: None,
                similarity: None,
                lexicon: None,
                pricing: None,
                runs_dir: PathBuf::from("runs"),
                review_dir: PathBuf::from("review"),
                backends: Vec::new(),
            },
        };
        let set = |slot: &mut PathBuf, v: &Option<PathBuf>| {
            if let Some(v) = v {
                *slot = v.clone();
            }
        };
        set(&mut config.dataset, &args.dataset);
        set(&mut config.schemas, &args.schemas);
        set(&mut config.runs_dir, &args.runs_dir);
        set(&mut config.review_dir, &args.review_dir);
        for (slot, v) in [
            (&mut config.exemplars, &args.exemplars),
            (&mut config.styles, &args.styles),
            (&mut config.similarity, &args.similarity),
            (&mut config.lexicon, &args.lexicon),
            (&mut config.pricing, &args.pricing),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        Ok(Self { config })
    }

    pub fn dataset(&self) -> Result<Dataset, PipelineError> {
        let c = &self.config;
        if c.dataset.as_os_str().is_empty() || c.schemas.as_os_str().is_empty() {
            return Err(ConfigError::Invalid(
                "no dataset: pass --config, or --dataset and --schemas".into(),
            )
            .into());
        }
        Ok(Dataset::load(&c.dataset, &c.schemas)?)
    }

    /// Configured bank, or the bundled ORG-DATE exemplars.
    pub fn bank(&self) -> Result<ExemplarBank, PipelineError> {
        Ok(match &self.config.exemplars {
            Some(p) => ExemplarBank::load(p)?,
            None => ExemplarBank::reference(),
        })
    }

    pub fn styles(&self) -> Result<StyleBook, PipelineError> {
        Ok(match &self.config.styles {
            Some(p) => StyleBook::load(p)?,
            None => StyleBook::default(),
        })
    }

    pub fn parser(&self) -> Result<ResponseParser, PipelineError> {
        Ok(match &self.config.lexicon {
            Some(p) => ResponseParser::new(StyleLexicon::load(p).map_err(|e| PipelineError::Io {
                path: p.clone(),
                message: e.to_string(),
            })?),
            None => ResponseParser::default(),
        })
    }

    pub fn similarity(&self, dataset: &Dataset) -> Result<SimilaritySet, PipelineError> {
        Ok(match &self.config.similarity {
            Some(p) => SimilaritySet::load(p, &dataset.schemas)?,
            None => SimilaritySet::identity(&dataset.schemas),
        })
    }

    pub fn pricing(&self) -> Result<Vec<PricingModel>, PipelineError> {
        Ok(match &self.config.pricing {
            Some(p) => load_pricing(p)?,
            None => default_pricing(),
        })
    }

    /// Named backend. `mock` resolves to [`builtin_mock`] when the config
    /// does not declare it.
    pub fn backend(&self, name: &str) -> Result<BackendConfig, PipelineError> {
        match self.config.backend(name) {
            Ok(b) => Ok(b.clone()),
            Err(_) if name == "mock" => Ok(builtin_mock()),
            Err(e) => Err(e.into()),
        }
    }

    /// The given run directories, or every finished run under the runs dir.
    pub fn runs(&self, dirs: &[PathBuf], dataset: &Dataset) -> Result<Vec<LoadedRun>, PipelineError> {
        let dirs = if dirs.is_empty() {
            discover_runs(&self.config.runs_dir)?
        } else {
            dirs.to_vec()
        };
        if dirs.is_empty() {
            return Err(PipelineError::Missing(vec![format!(
                "runs under {}",
                self.config.runs_dir.display()
            )]));
        }
        load_runs(&dirs, dataset, &self.parser()?)
    }
}

/// Mock calibrated to GPT-4's full-instruction accuracy.
pub fn builtin_mock() -> BackendConfig {
    BackendConfig {
        name: "mock".into(),
        style: "chat_system_last".into(),
        transport: Transport::Mock(MockProfile {
            accuracy: 0.646,
            hallucination_rate: 0.05,
            blank_rate: 0.01,
            confusion: None,
            seed: 0,
            latency_secs: 1.0,
        }),
        temperature: 0.2,
        seed: None,
        max_parallel: 4,
        retry: RetryPolicy::default(),
        pricing: "gpt-4".into(),
    }
}
