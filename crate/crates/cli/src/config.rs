//! TOML experiment configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the config file, then
//! command-line flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use dfa::data::DatasetSpec;
use dfa::trainer::{TrainConfig, Variant};
use dfa::DfaError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Held-out domain selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    All,
    Domain(usize),
}

impl Target {
    /// Domain indices this target expands to for `total` domains.
    pub fn domains(self, total: usize) -> Result<Vec<usize>, DfaError> {
        match self {
            Target::All => Ok((0..total).collect()),
            Target::Domain(d) if d < total => Ok(vec![d]),
            Target::Domain(d) => Err(DfaError::InvalidConfig(format!(
                "target domain {d} does not exist ({total} domains)"
            ))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::All => f.write_str("all"),
            Target::Domain(d) => write!(f, "{d}"),
        }
    }
}

impl FromStr for Target {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self, DfaError> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Target::All);
        }
        s.parse()
            .map(Target::Domain)
            .map_err(|_| DfaError::InvalidConfig(format!("target must be a domain index or \"all\", got {s:?}")))
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Target::All => s.serialize_str("all"),
            Target::Domain(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(Target::Domain(i)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub target_domain: Target,
    pub output_dir: PathBuf,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    /// Snapshot directory to read instead of generating data in memory.
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        ExperimentConfig {
            variant: Variant::Dfa,
            target_domain: Target::Domain(dataset.num_domains),
            output_dir: PathBuf::from("out"),
            seeds: (0..5).collect(),
            data_dir: None,
            dataset,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, DfaError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| DfaError::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DfaError> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.train.check_variant(self.variant)?;
        self.target_domain.domains(self.dataset.total_domains())?;
        if self.seeds.is_empty() {
            return Err(DfaError::InvalidConfig("seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Sets both the dataset and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
