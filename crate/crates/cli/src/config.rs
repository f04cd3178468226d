//! Run configuration: one TOML document per experiment.

use std::path::{Path, PathBuf};

use protopad::trainer::{PaisGrouping, PrototypePool};
use protopad::{
    Activation, DistanceMetric, EmbeddingConfig, EpisodeSpec, ExtensionSpec, SplitSpec,
    SyntheticSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Feature tables to load instead of generating data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesSource {
    pub tables: Vec<PathBuf>,
}

/// Embedder shape. The input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            hidden_dims: vec![32],
            output_dim: 8,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl EmbeddingSection {
    pub fn config(&self, input_dim: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.output_dim,
            activation: self.activation,
            seed: self.seed,
        }
    }
}

fn default_metric() -> DistanceMetric {
    DistanceMetric::Euclidean
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Distance used to score evaluation queries.
    #[serde(default = "default_metric")]
    pub metric: DistanceMetric,
    #[serde(default)]
    pub prototype_pool: PrototypePool,
    #[serde(default)]
    pub pais: PaisGrouping,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub files: Option<FilesSource>,
    #[serde(default)]
    pub split: SplitSpec,
    pub episode: EpisodeSpec,
    #[serde(default)]
    pub extension: Option<ExtensionSpec>,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads and fully validates a config file. Relative table paths resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(files) = &mut cfg.files {
            let base = path.parent().unwrap_or(Path::new(""));
            for t in &mut files.tables {
                if t.is_relative() {
                    *t = base.join(&*t);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed in the document to `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(s) = &mut self.synthetic {
            s.seed = seed;
        }
        self.split.seed = seed;
        self.episode.seed = seed;
        self.embedding.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let spec_err = |e: protopad::Error| CliError::Config(e.to_string());
        match (&self.synthetic, &self.files) {
            (Some(s), None) => s.validate().map_err(spec_err)?,
            (None, Some(f)) => {
                if f.tables.is_empty() {
                    return Err(CliError::Config("[files] tables is empty".into()));
                }
                for t in &f.tables {
                    if !t.is_file() {
                        return Err(CliError::Config(format!(
                            "feature table {} does not exist",
                            t.display()
                        )));
                    }
                }
            }
            _ => {
                return Err(CliError::Config(
                    "exactly one of [synthetic] or [files] is required".into(),
                ))
            }
        }
        self.split.validate().map_err(spec_err)?;
        self.episode.validate().map_err(spec_err)?;
        if self.episode.support_countries.is_empty() {
            return Err(CliError::Config(
                "episode.support_countries is empty".into(),
            ));
        }
        if let Some(ext) = &self.extension {
            ext.validate().map_err(spec_err)?;
        }
        self.embedding.config(1).validate().map_err(spec_err)?;
        self.train.validate().map_err(spec_err)?;
        if let Some(s) = &self.synthetic {
            let codes: Vec<&str> = s.countries.iter().map(|c| c.code.as_str()).collect();
            let wanted = self
                .episode
                .support_countries
                .iter()
                .chain(self.extension.iter().map(|e| &e.new_country));
            for c in wanted {
                if !codes.contains(&c.as_str()) {
                    return Err(CliError::Config(format!(
                        "country {c} is not part of the synthetic spec"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn extension(&self) -> Result<&ExtensionSpec, CliError> {
        self.extension
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs an [extension] section".into()))
    }
}
