//! Run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::BenchmarkPlan;
use crate::guidance::{GuidanceConfig, Models};
use crate::nets::{AutoencoderSpec, DenoiserSpec, TrainConfig};

pub const AE_FILE: &str = "autoencoder.bin";
pub const DENOISER_FILE: &str = "denoiser.bin";

/// `git describe` of the build, or "unknown".
pub const GIT_DESCRIBE: &str = env!("GLAB_GIT_DESCRIBE");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub checkpoints: PathBuf,
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { checkpoints: "checkpoints".into(), dataset: "data".into(), output: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 2000, train: 0.8, val: 0.1, test: 0.1 }
    }
}

/// Training hyperparameters without a seed; seeds come from the root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub batch_size: usize,
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        let t = TrainConfig::default();
        Self { epochs, lr: t.lr, dropout: t.dropout, batch_size: t.batch_size }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, lr: self.lr, seed, dropout: self.dropout, batch_size: self.batch_size }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::with_epochs(10)
    }
}

/// Benchmark settings; the guidance block of the run config applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub paintings: usize,
    pub seeds: usize,
    pub sdedit_levels: Vec<f64>,
    pub gradop_steps: Vec<usize>,
    pub gradop_plus_steps: usize,
    pub loopback: bool,
    pub ilvr: bool,
    pub feature_seed: u64,
    pub augment_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let p = BenchmarkPlan::default();
        Self {
            paintings: p.paintings,
            seeds: p.seeds,
            sdedit_levels: p.sdedit_levels,
            gradop_steps: p.gradop_steps,
            gradop_plus_steps: p.gradop_plus_steps,
            loopback: p.loopback,
            ilvr: p.ilvr,
            feature_seed: p.feature_seed,
            augment_seed: p.augment_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub autoencoder: AutoencoderSpec,
    pub denoiser: DenoiserSpec,
    pub train_autoencoder: StageConfig,
    pub train_denoiser: StageConfig,
    pub guidance: GuidanceConfig,
    pub benchmark: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            autoencoder: AutoencoderSpec::default(),
            denoiser: DenoiserSpec::default(),
            train_autoencoder: StageConfig::with_epochs(10),
            train_denoiser: StageConfig::with_epochs(20),
            guidance: GuidanceConfig::default(),
            benchmark: BenchConfig::default(),
        }
    }
}

/// Seed streams derived from the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Autoencoder,
    Denoiser,
    Benchmark,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.train_autoencoder.train_config(0).validate()?;
        self.train_denoiser.train_config(0).validate()?;
        if self.data.n < 10 {
            return Err(Error::Config(format!("data.n must be at least 10, got {}", self.data.n)));
        }
        self.benchmark_plan().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("run config serializes")))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Data => self.seed,
            Stage::Autoencoder => crate::scenegen::mix_seed(self.seed, 1),
            Stage::Denoiser => crate::scenegen::mix_seed(self.seed, 2),
            Stage::Benchmark => crate::scenegen::mix_seed(self.seed, 3),
        }
    }

    pub fn benchmark_plan(&self) -> BenchmarkPlan {
        let b = &self.benchmark;
        BenchmarkPlan {
            paintings: b.paintings,
            seeds: b.seeds,
            sdedit_levels: b.sdedit_levels.clone(),
            gradop_steps: b.gradop_steps.clone(),
            gradop_plus_steps: b.gradop_plus_steps,
            loopback: b.loopback,
            ilvr: b.ilvr,
            root_seed: self.stage_seed(Stage::Benchmark),
            feature_seed: b.feature_seed,
            augment_seed: b.augment_seed,
            guidance: self.guidance.clone(),
        }
    }

    pub fn ae_path(&self) -> PathBuf {
        self.paths.checkpoints.join(AE_FILE)
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.paths.checkpoints.join(DENOISER_FILE)
    }

    pub fn load_models(&self) -> Result<Models> {
        Models::load(self.ae_path(), self.denoiser_path(), self.autoencoder, self.denoiser)
    }
}

/// Provenance block embedded in every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub git: String,
}

impl Provenance {
    pub fn new(cfg: &RunConfig, seed: u64) -> Self {
        Self { config_hash: cfg.hash(), seed, git: GIT_DESCRIBE.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(matches!(RunConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("[guidance]\nt_start = 0.1\nt_end = 0.2"), Err(Error::Config(_))));
        let partial = RunConfig::from_toml_str("seed = 5\n[guidance]\nsteps = 3").unwrap();
        assert_eq!((partial.seed, partial.guidance.steps, partial.guidance.t0), (5, 3, 0.8));
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        let s: Vec<u64> = [Stage::Data, Stage::Autoencoder, Stage::Denoiser, Stage::Benchmark].map(|st| cfg.stage_seed(st)).to_vec();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}
