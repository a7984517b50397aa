//! Run configuration (TOML) and the bundled presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CsvSchema;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::training::TrainConfig;

fn default_num_sequences() -> usize {
    30
}
fn default_steps() -> usize {
    20
}
fn default_lorenz_steps() -> usize {
    2000
}
fn default_dt() -> f64 {
    crate::data::LORENZ_DT
}

/// Where observations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Kink {
        #[serde(default = "default_num_sequences")]
        num_sequences: usize,
        #[serde(default = "default_steps")]
        steps: usize,
    },
    KinkStep {
        #[serde(default = "default_num_sequences")]
        num_sequences: usize,
        #[serde(default = "default_steps")]
        steps: usize,
    },
    Lorenz {
        #[serde(default = "default_lorenz_steps")]
        steps: usize,
        #[serde(default = "default_dt")]
        dt: f64,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Scale observations (and controls) with training-split statistics.
    #[serde(default)]
    pub standardize: bool,
    /// Trailing steps of every sequence held out for forecasting.
    #[serde(default)]
    pub holdout: usize,
}

/// Everything a run needs; persisted next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Seeds data generation, initialization and training draws.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

const PRESETS: &[(&str, &str)] = &[
    ("kink_jo_gpssm", include_str!("../presets/kink_jo_gpssm.toml")),
    ("kink_co_gpssm", include_str!("../presets/kink_co_gpssm.toml")),
    ("kink_jo_tgpssm", include_str!("../presets/kink_jo_tgpssm.toml")),
    ("kink_co_tgpssm", include_str!("../presets/kink_co_tgpssm.toml")),
    ("kink_step_jo_gpssm", include_str!("../presets/kink_step_jo_gpssm.toml")),
    ("kink_step_co_gpssm", include_str!("../presets/kink_step_co_gpssm.toml")),
    ("kink_step_jo_tgpssm", include_str!("../presets/kink_step_jo_tgpssm.toml")),
    ("kink_step_co_tgpssm", include_str!("../presets/kink_step_co_tgpssm.toml")),
    ("lorenz_co_gpssm", include_str!("../presets/lorenz_co_gpssm.toml")),
    ("lorenz_co_tgpssm", include_str!("../presets/lorenz_co_tgpssm.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        Self::from_toml(text)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Same configuration with a different seed (data, initialization and training).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.emission_matrix()?;
        if self.model.num_inducing == 0 {
            return Err(Error::Config("num_inducing must be positive".into()));
        }
        let (d_y, d_c) = match &self.dataset.source {
            DataSource::Kink { num_sequences, steps } | DataSource::KinkStep { num_sequences, steps } => {
                if *num_sequences == 0 || *steps == 0 {
                    return Err(Error::Config("generators need at least one sequence and one step".into()));
                }
                (1, 0)
            }
            DataSource::Lorenz { steps, dt } => {
                if *steps == 0 || !(*dt > 0.0) {
                    return Err(Error::Config("Lorenz generation needs steps ≥ 1 and dt > 0".into()));
                }
                (3, 0)
            }
            DataSource::Csv { schema, .. } => (schema.observations.len(), schema.controls.len()),
        };
        if self.model.d_y != d_y || self.model.d_c != d_c {
            return Err(Error::Config(format!(
                "model expects d_y = {}, d_c = {} but the dataset provides d_y = {d_y}, d_c = {d_c}",
                self.model.d_y, self.model.d_c
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for name in preset_names() {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut cfg = RunConfig::preset("kink_co_tgpssm").unwrap();
        cfg.model.d_y = 2;
        cfg.model.d_x = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
