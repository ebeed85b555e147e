use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::HcsTrainConfig;
use crate::dataset::{OracleConfig, Provenance};
use crate::error::{Error, Result};
use crate::rewards::RewardConfig;
use crate::rss::RssParams;
use crate::sim::SimConfig;
use crate::solver::MctsConfig;
use crate::sut::DqnConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub mode: Provenance,
    pub episodes: usize,
    pub seed: u64,
    /// Search budget per level for heuristic-guided collection.
    pub iterations_per_step: usize,
    pub episodes_per_search: usize,
    /// Seed of the class-balancing shuffle before classifier training.
    pub balance_seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            mode: Provenance::AstHeuristic,
            episodes: 3_000,
            seed: 1,
            iterations_per_step: 50,
            episodes_per_search: 25,
            balance_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100, 200, 400],
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Search seeds; every search starts from the scenario `sim.seed`.
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
    pub dqn: DqnConfig,
    pub reward: RewardConfig,
    pub mcts: MctsConfig,
    pub hcs: HcsTrainConfig,
    pub oracle: OracleConfig,
    pub rss: RssParams,
    pub collect: CollectConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: (0..20).collect(),
            sim: SimConfig::default(),
            dqn: DqnConfig::default(),
            reward: RewardConfig::default(),
            mcts: MctsConfig::default(),
            hcs: HcsTrainConfig::default(),
            oracle: OracleConfig::default(),
            rss: RssParams::default(),
            collect: CollectConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.dqn.validate()?;
        self.reward.validate(self.sim.horizon)?;
        self.mcts.validate()?;
        self.hcs.validate()?;
        self.oracle.validate()?;
        self.rss.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if self.collect.episodes < 1 {
            return Err(Error::config("collect.episodes", "must be at least 1"));
        }
        if self.collect.iterations_per_step < 1 {
            return Err(Error::config("collect.iterations_per_step", "must be at least 1"));
        }
        validate_sizes(&self.sweep.sizes)?;
        Ok(())
    }

    /// SHA-256 over everything that affects results; the output directory
    /// is excluded.
    pub fn digest(&self) -> String {
        let canonical = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("configuration serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::config("sweep.sizes", "must not be empty"));
    }
    if sizes.contains(&0) {
        return Err(Error::config("sweep.sizes", "sizes must be positive"));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("sweep.sizes", "sizes must be distinct"));
    }
    Ok(())
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
