//! Fixtures shared by the benchmarks in `benches/`.

use astcrit_core::classifier::featurize;
use astcrit_core::{
    DiscreteAction, EnvAction, FeatureVector, HcsNetwork, QNetwork, RewardConfig, RewardKind, SimConfig, SimState,
    Simulator,
};

pub struct Scene {
    pub sim: Simulator,
    pub state: SimState,
    pub sut: QNetwork,
    pub hcs: HcsNetwork,
    pub feature: FeatureVector,
    pub reward: RewardConfig,
}

/// Default forty-vehicle road with untrained networks.
pub fn scene() -> Scene {
    let sim = Simulator::new(SimConfig::default()).expect("default config is valid");
    let state = sim.init(sim.config().seed).expect("default scenario places");
    let feature = featurize(DiscreteAction::Idle, &EnvAction::idle(), &sim.observe_ego(&state));
    Scene {
        sut: QNetwork::new(0),
        hcs: HcsNetwork::new(0.15, 0),
        reward: RewardConfig {
            kind: RewardKind::Heur,
            ..RewardConfig::default()
        },
        sim,
        state,
        feature,
    }
}
