#![allow(dead_code)]

use astcrit_core::experiment::ExperimentConfig;
use astcrit_core::{DqnConfig, HcsTrainConfig, MctsConfig, SimConfig};
use astcrit_core::dataset::Provenance;

/// Four vehicles on a short road with small budgets everywhere.
pub fn micro_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![0, 1, 2];
    cfg.sim = SimConfig {
        vehicle_count: 4,
        road_length: 120.0,
        horizon: 12,
        seed: 3,
        ..SimConfig::default()
    };
    cfg.dqn = DqnConfig {
        episodes: 30,
        learning_starts: 50,
        ..DqnConfig::default()
    };
    cfg.mcts = MctsConfig {
        iterations_per_step: 10,
        ..MctsConfig::default()
    };
    cfg.hcs = HcsTrainConfig {
        epochs: 5,
        ..HcsTrainConfig::default()
    };
    cfg.collect.mode = Provenance::AstHeuristic;
    cfg.collect.episodes = 40;
    cfg.collect.iterations_per_step = 5;
    cfg.collect.episodes_per_search = 10;
    cfg.sweep.sizes = vec![4, 8];
    cfg.sweep.seeds = vec![0, 1];
    cfg
}
