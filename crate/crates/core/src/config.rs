//! Run configuration: one JSON document for every stage of a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SynthSpec, MANIFEST_FILE};
use crate::derive_seed;
use crate::eval::LooConfig;
use crate::features::{FrameConfig, Normalization};
use crate::hmm::HmmConfig;
use crate::scales::AudioConfig;
use crate::search::SearchConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Filterbank settings shared by every scale; the warp comes from the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterbankSettings {
    pub num_filters: usize,
    /// Used by the linear and adaptive scales. Mel scales use their own
    /// convention.
    pub normalization: Normalization,
}

impl Default for FilterbankSettings {
    fn default() -> Self {
        FilterbankSettings { num_filters: 26, normalization: Normalization::EqualHeight }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    /// Defaults to `<output_dir>/corpus/manifest.csv`.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub audio: AudioConfig,
    pub frame: FrameConfig,
    pub filterbank: FilterbankSettings,
    pub hmm: HmmConfig,
    pub loo: LooConfig,
    pub search: SearchConfig,
    pub synth: SynthSpec,
    pub corpus: CorpusPaths,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            audio: AudioConfig::default(),
            frame: FrameConfig::default(),
            filterbank: FilterbankSettings::default(),
            hmm: HmmConfig::default(),
            loo: LooConfig::default(),
            search: SearchConfig::default(),
            synth: SynthSpec::default(),
            corpus: CorpusPaths::default(),
            output_dir: PathBuf::from("out"),
            seed: 20_100_301,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.frame.layout(&self.audio).map_err(|e| inv(&e))?;
        if self.filterbank.num_filters < 2 {
            return Err(ConfigError::Invalid("filterbank.num_filters must be at least 2".into()));
        }
        self.hmm.validate().map_err(|e| inv(&e))?;
        if self.loo.num_folds < 2 {
            return Err(ConfigError::Invalid("loo.num_folds must be at least 2".into()));
        }
        self.search.validate().map_err(|e| inv(&e))?;
        self.synth.validate(&self.audio).map_err(|e| inv(&e))?;
        Ok(())
    }

    /// Copy with every sub-seed derived from the global seed.
    pub fn resolved(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.hmm.seed = derive_seed(self.seed, &[1]);
        cfg.loo.seed = derive_seed(self.seed, &[2]);
        cfg.search.seed = derive_seed(self.seed, &[3]);
        cfg.synth.seed = derive_seed(self.seed, &[4]);
        cfg
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus.manifest.clone().unwrap_or_else(|| self.corpus_dir().join(MANIFEST_FILE))
    }

    /// Where `synth` writes: the manifest's directory.
    pub fn corpus_dir(&self) -> PathBuf {
        match &self.corpus.manifest {
            Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
            None => self.output_dir.join("corpus"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"hmm": {"states": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synth": {"formant_shift": 0}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.synth.formant_shift_hz = 0.0;
        cfg.seed = 7;
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn sub_seeds_follow_global_seed() {
        let a = RunConfig { seed: 1, ..Default::default() }.resolved();
        let b = RunConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.hmm.seed, b.hmm.seed);
        assert_ne!(a.synth.seed, b.synth.seed);
        assert_ne!(a.loo.seed, a.hmm.seed);
        assert_eq!(a, RunConfig { seed: 1, ..Default::default() }.resolved());
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig::from_json(r#"{"loo": {"num_folds": 1}}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::from_json(r#"{"synth": {"formant_shift_hz": 25000}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
