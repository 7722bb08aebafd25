//! Run configuration: one TOML document covering training, data
//! generation, dataset paths, and repetition. Unknown keys are hard
//! errors so configs cannot drift silently.

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Explicit dataset files; when set, generation is skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train_normal: Option<PathBuf>,
    pub train_anomaly: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl DataPaths {
    pub fn any_set(&self) -> bool {
        self.train_normal.is_some() || self.train_anomaly.is_some() || self.test.is_some()
    }

    pub fn all_set(&self) -> bool {
        self.train_normal.is_some() && self.train_anomaly.is_some() && self.test.is_some()
    }
}

/// The full configuration of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub paths: DataPaths,
    /// Number of independent seeded runs aggregated by an evaluation.
    pub repeat: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: SyntheticSpec::default(),
            paths: DataPaths::default(),
            repeat: 1,
        }
    }
}

impl RunConfig {
    /// Parses a config document; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.repeat == 0 {
            return Err(Error::Config("repeat must be at least 1".into()));
        }
        if self.paths.any_set() && !self.paths.all_set() {
            return Err(Error::Config(
                "dataset paths must be given for all three splits or none".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized form.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        let out = hasher.finalize();
        out.iter().fold(String::with_capacity(64), |mut acc, b| {
            use std::fmt::Write;
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let err = RunConfig::from_toml_str("[train]\nk = 8\nmystery_knob = 3\n");
        assert!(matches!(err, Err(Error::Config(_))), "{err:?}");
        let err = RunConfig::from_toml_str("[banana]\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nk = 8\nmi_weight = 0.5\n").unwrap();
        assert_eq!(cfg.train.k, 8);
        assert_eq!(cfg.train.mi_weight, 0.5);
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.repeat, 1);
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        b.train.k = 7;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn incomplete_paths_are_rejected() {
        let err = RunConfig::from_toml_str("[paths]\ntrain_normal = \"x.csv\"\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn mode_flags_parse() {
        let cfg = RunConfig::from_toml_str(
            "[train]\nliteral_mi_sign = true\nbatch_marginal_mi = true\nper_sample_t = true\none_step_psi = true\nendpoint_source = \"gaussian\"\n",
        )
        .unwrap();
        assert!(cfg.train.literal_mi_sign);
        assert!(cfg.train.batch_marginal_mi);
        assert!(cfg.train.per_sample_t);
        assert!(cfg.train.one_step_psi);
        assert_eq!(
            cfg.train.endpoint_source,
            crate::flow::EndpointSource::Gaussian
        );
    }
}
