//! Per-step stress-testing rewards.
//!
//! All three rewards share the terminal branches: reaching the failure set
//! pays `0`, and ending without a failure pays `horizon_penalty`, a large
//! finite stand-in for negative infinity. They differ in the live branch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::Prediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    /// Longitudinal-gap heuristic.
    Heur,
    /// Q-value critical states of the system under test.
    Qcs,
    /// Learned critical-state classifier blended with the heuristic.
    Hcs,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::Heur, RewardKind::Qcs, RewardKind::Hcs];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Heur => "heur",
            RewardKind::Qcs => "qcs",
            RewardKind::Hcs => "hcs",
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heur" => Ok(RewardKind::Heur),
            "qcs" => Ok(RewardKind::Qcs),
            "hcs" => Ok(RewardKind::Hcs),
            other => Err(Error::config(
                "reward.kind",
                format!("unknown reward `{other}` (expected heur, qcs or hcs)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub beta: f64,
    pub gap_max: f64,
    pub horizon_penalty: f64,
    /// Stochastic classifier passes per prediction.
    pub n_passes: usize,
    /// Base seed for the classifier's dropout streams.
    pub prediction_seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kind: RewardKind::Heur,
            beta: 1.0,
            gap_max: 60.0,
            horizon_penalty: -1e6,
            n_passes: 30,
            prediction_seed: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config("reward.beta", "must be positive"));
        }
        if !(self.gap_max > 0.0) {
            return Err(Error::config("reward.gap_max", "must be positive"));
        }
        // The best live reward per step is max(beta, 1, qcs); anything finite
        // and below -(horizon * that) keeps non-failures strictly worst. QCS is
        // unbounded in principle, so require a wide margin.
        let bound = horizon as f64 * self.beta.max(1.0) * 1e3;
        if !(self.horizon_penalty < -bound) {
            return Err(Error::config(
                "reward.horizon_penalty",
                format!("must be below {}", -bound),
            ));
        }
        if self.n_passes < 2 {
            return Err(Error::config("reward.n_passes", "must be at least 2"));
        }
        Ok(())
    }
}

/// Everything a reward needs about the state just reached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub in_failure_set: bool,
    /// The episode ended without a failure before the horizon (an
    /// environment-only collision).
    pub ended_invalid: bool,
    pub t: usize,
    pub horizon: usize,
    pub lead_gap: Option<f64>,
    pub qcs: f64,
    pub prediction: Option<Prediction>,
}

impl StepContext {
    pub fn live(t: usize, horizon: usize, lead_gap: Option<f64>) -> Self {
        Self {
            in_failure_set: false,
            ended_invalid: false,
            t,
            horizon,
            lead_gap,
            qcs: 0.0,
            prediction: None,
        }
    }

    fn terminal_branch(&self, cfg: &RewardConfig) -> Option<f64> {
        if self.in_failure_set {
            Some(0.0)
        } else if self.t >= self.horizon || self.ended_invalid {
            Some(cfg.horizon_penalty)
        } else {
            None
        }
    }
}

/// Longitudinal danger in [0, 1]: `1` at contact, `0` at or beyond
/// `gap_max`, and `0` without a leader.
pub fn h(lead_gap: Option<f64>, gap_max: f64) -> f64 {
    match lead_gap {
        None => 0.0,
        Some(gap) => 1.0 - gap.clamp(0.0, gap_max) / gap_max,
    }
}

pub fn r_heur(ctx: &StepContext, cfg: &RewardConfig) -> f64 {
    ctx.terminal_branch(cfg)
        .unwrap_or_else(|| h(ctx.lead_gap, cfg.gap_max))
}

pub fn r_qcs(ctx: &StepContext, cfg: &RewardConfig) -> f64 {
    ctx.terminal_branch(cfg).unwrap_or(ctx.qcs)
}

/// `(1 - var) * beta * mean + var * h` in the live branch.
pub fn r_hcs(ctx: &StepContext, cfg: &RewardConfig) -> Result<f64> {
    if let Some(r) = ctx.terminal_branch(cfg) {
        return Ok(r);
    }
    let p = ctx.prediction.ok_or(Error::MissingPrediction)?;
    Ok((1.0 - p.sigma2) * cfg.beta * p.mu + p.sigma2 * h(ctx.lead_gap, cfg.gap_max))
}

pub fn evaluate(kind: RewardKind, ctx: &StepContext, cfg: &RewardConfig) -> Result<f64> {
    match kind {
        RewardKind::Heur => Ok(r_heur(ctx, cfg)),
        RewardKind::Qcs => Ok(r_qcs(ctx, cfg)),
        RewardKind::Hcs => r_hcs(ctx, cfg),
    }
}
