//! Failure search for a discrete-action highway driving policy.
//!
//! The crate is organized around the adaptive stress testing loop: a
//! deterministic highway [`sim`]ulator hosts the system under test ([`sut`]),
//! a Monte Carlo tree search [`solver`] chooses the actions of the eight
//! vehicles nearest the ego, and one of three [`rewards`] steers the search.
//! The learned critical-state reward is backed by the MC-dropout
//! [`classifier`], trained from [`dataset`]s labeled by a scripted oracle or
//! interactively. Found trajectories are scored with the [`rss`] monitor and
//! aggregated by the [`experiment`] layer.

// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod highway;
pub mod nn;
pub mod render;
pub mod rewards;
pub mod rss;
pub mod seed;
pub mod sim;
pub mod solver;
pub mod stats;
pub mod sut;
pub mod trajectory;

pub use classifier::{FeatureVector, HcsNetwork, HcsTrainConfig, Prediction};
pub use dataset::{LabeledSample, OracleConfig, StateSample};
pub use error::{Error, Result};
pub use highway::{HighwayProblem, RewardModel};
pub use rewards::{RewardConfig, RewardKind, StepContext};
pub use rss::{RssParams, RssVerdict, TrajectoryRssSummary};
pub use sim::{
    DiscreteAction, EgoObservation, EnvAction, SimConfig, SimState, Simulator, VehicleState,
};
pub use solver::{MctsConfig, SearchResult};
pub use sut::{DqnConfig, QNetwork};
pub use trajectory::TrajectoryRecord;
