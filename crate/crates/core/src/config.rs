//! Run configuration: task, model, training and output settings in one TOML
//! file. Every random stream of a run is derived from the single top-level
//! `seed`.
//!
//! ```toml
//! seed = 0
//! output = "runs/arsnn"
//! threads = 0          # 0 lets the thread pool pick
//!
//! [data]
//! train = 2000
//! test = 500
//!
//! [scene]              # SceneConfig fields
//! speed = 0.5
//!
//! [model]              # ModelConfig fields
//! window_us = 24000
//! steps = 8
//!
//! [model.sampler]      # SamplerConfig fields
//! mode = "arsnn"
//!
//! [train]              # TrainConfig fields
//! epochs = 20
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{gen_dataset, HarnessError, ModelConfig, Sample, SceneConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl From<HarnessError> for ConfigError {
    fn from(e: HarnessError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: 2000, test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub threads: usize,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("runs/default"),
            threads: 0,
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Independent sub-seeds of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    TrainData = 1,
    TestData = 2,
    Init = 3,
    Shuffle = 4,
    Gradcheck = 5,
}

/// SplitMix64 of `seed` offset by the stream id.
pub fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let mut z = seed.wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if self.data.train == 0 || self.data.test == 0 {
            return bad("train and test set sizes must be positive".into());
        }
        self.scene
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.window_us > self.scene.duration_us() {
            return bad(format!(
                "model window {} us is longer than the {} us scenes",
                self.model.window_us,
                self.scene.duration_us()
            ));
        }
        Ok(())
    }

    /// Training configuration with the derived shuffling seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, SeedStream::Shuffle),
            ..self.train
        }
    }

    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, SeedStream::Init))
    }

    pub fn train_set(&self) -> Result<Vec<Sample>, ConfigError> {
        gen_dataset(&self.scene, self.data.train, derive_seed(self.seed, SeedStream::TrainData))
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn test_set(&self) -> Result<Vec<Sample>, ConfigError> {
        gen_dataset(&self.scene, self.data.test, derive_seed(self.seed, SeedStream::TestData))
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerMode;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml(
            "seed = 4\n[model.sampler]\nmode = \"rsnn\"\nrpd = false\n[train]\nepochs = 3\n",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model.sampler.mode, SamplerMode::Rsnn);
        assert!(!c.model.sampler.rpd);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.data, DataConfig::default());
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again.to_toml(), c.to_toml());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::from_toml("sede = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            RunConfig::from_toml("[scene]\nseed = 3\n"),
            Err(ConfigError::Parse(_))
        ));
        let mut c = RunConfig::default();
        c.model.window_us = 48_000;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let mut c = RunConfig::default();
        c.data.test = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.steps = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sub_seeds_differ() {
        let s: Vec<u64> = [
            SeedStream::TrainData,
            SeedStream::TestData,
            SeedStream::Init,
            SeedStream::Shuffle,
        ]
        .into_iter()
        .map(|k| derive_seed(0, k))
        .collect();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
        assert_ne!(derive_seed(1, SeedStream::Init), derive_seed(0, SeedStream::Init));
    }
}
