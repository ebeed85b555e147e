//! Per-episode logs of found trajectories, their evaluation, and the replay
//! audit that checks a log against fresh re-simulation.

use serde::{Deserialize, Serialize};

use crate::dataset::{oracle_label, OracleConfig};
use crate::error::{Error, Result};
use crate::highway::{self, HighwayProblem};
use crate::rewards::RewardKind;
use crate::rss::{self, RssParams, RssVerdict, TrajectoryRssSummary};
use crate::sim::{DiscreteAction, EgoObservation, EnvAction, SimState};
use crate::solver::{Episode, Outcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub config_digest: String,
    /// Seed of the initial configuration.
    pub scenario_seed: u64,
    /// Seed of the search that found the trajectory.
    pub search_seed: u64,
    pub reward: RewardKind,
    /// Position among the search's top trajectories, 0 for the best.
    pub rank: usize,
    pub total_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: usize,
    pub env_action: EnvAction,
    pub ego_action: DiscreteAction,
    /// Ego observation of the state reached by this step.
    pub observation: EgoObservation,
    pub reward: f64,
    /// State reached by this step.
    pub snapshot: SimState,
    /// Monitor verdict for the state this step started from and the ego's
    /// response to it.
    pub rss: RssVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEvaluation {
    pub rss: TrajectoryRssSummary,
    /// Oracle label of every decision state, initial state first.
    pub oracle_critical: Vec<bool>,
    pub critical_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub meta: TrajectoryMeta,
    pub initial: SimState,
    pub steps: Vec<TrajectoryStep>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<TrajectoryEvaluation>,
}

impl TrajectoryRecord {
    /// Re-simulates `actions` and logs every step.
    pub fn build(problem: &HighwayProblem<'_>, actions: &[EnvAction], rss_params: &RssParams, meta: TrajectoryMeta) -> Result<Self> {
        let (initial, raw) = problem.simulate(actions)?;
        let outcome = raw
            .last()
            .and_then(|s| s.terminal)
            .ok_or_else(|| Error::Usage("action sequence does not reach a terminal state".into()))?;
        let geom = problem.sim.config();
        let mut steps = Vec::with_capacity(raw.len());
        let mut pre = &initial;
        for (k, s) in raw.iter().enumerate() {
            steps.push(TrajectoryStep {
                t: k,
                env_action: s.env_action,
                ego_action: s.outcome.ego_action,
                observation: problem.sim.observe_ego(&s.outcome.state),
                reward: s.reward,
                snapshot: s.outcome.state.clone(),
                rss: rss::evaluate_state(pre, s.outcome.ego_action, rss_params, geom),
            });
            pre = &s.outcome.state;
        }
        Ok(Self {
            meta,
            initial,
            steps,
            outcome,
            evaluation: None,
        })
    }

    pub fn from_episode(
        problem: &HighwayProblem<'_>,
        episode: &Episode,
        rss_params: &RssParams,
        meta: TrajectoryMeta,
    ) -> Result<Self> {
        Self::build(problem, &highway::env_actions(episode)?, rss_params, meta)
    }

    pub fn env_actions(&self) -> Vec<EnvAction> {
        self.steps.iter().map(|s| s.env_action).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().fold(0.0, |acc, s| acc + s.reward)
    }

    /// States the ego made decisions in, initial state first.
    pub fn decision_states(&self) -> impl Iterator<Item = &SimState> {
        std::iter::once(&self.initial).chain(self.steps.iter().take(self.steps.len().saturating_sub(1)).map(|s| &s.snapshot))
    }

    pub fn rss_summary(&self) -> Result<TrajectoryRssSummary> {
        let verdicts: Vec<RssVerdict> = self.steps.iter().map(|s| s.rss).collect();
        rss::summarize_verdicts(&verdicts)
    }

    pub fn evaluate(&self, problem: &HighwayProblem<'_>, oracle: &OracleConfig) -> Result<TrajectoryEvaluation> {
        let oracle_critical: Vec<bool> = self
            .decision_states()
            .map(|s| oracle_label(s, oracle, problem.sim) == 1)
            .collect();
        let critical = oracle_critical.iter().filter(|c| **c).count();
        Ok(TrajectoryEvaluation {
            rss: self.rss_summary()?,
            critical_percentage: 100.0 * critical as f64 / oracle_critical.len() as f64,
            oracle_critical,
        })
    }

    /// Structural invariants that need no simulator.
    pub fn check_structure(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Replay(m));
        if self.steps.is_empty() {
            return fail("trajectory has no steps".into());
        }
        for (k, s) in self.steps.iter().enumerate() {
            if s.t != k || s.snapshot.t != k + 1 {
                return fail(format!("step {k} is out of sequence"));
            }
        }
        let last = &self.steps[self.steps.len() - 1].snapshot;
        let expected = if last.failure {
            Outcome::Failure
        } else if last.invalid {
            Outcome::Invalid
        } else {
            Outcome::Horizon
        };
        if expected != self.outcome {
            return fail(format!("outcome {:?} disagrees with the final state", self.outcome));
        }
        Ok(())
    }

    /// Re-simulates the logged actions and requires bit-identical states,
    /// rewards and monitor verdicts.
    pub fn audit(&self, problem: &HighwayProblem<'_>, rss_params: &RssParams) -> Result<()> {
        self.check_structure()?;
        let fresh = Self::build(problem, &self.env_actions(), rss_params, self.meta.clone())?;
        if fresh.initial != self.initial {
            return Err(Error::Replay("initial state differs".into()));
        }
        for (a, b) in self.steps.iter().zip(&fresh.steps) {
            if a.reward.to_bits() != b.reward.to_bits() {
                return Err(Error::Replay(format!("reward at step {} differs: {} vs {}", a.t, a.reward, b.reward)));
            }
            if a != b {
                return Err(Error::Replay(format!("step {} differs", a.t)));
            }
        }
        if fresh.outcome != self.outcome || fresh.steps.len() != self.steps.len() {
            return Err(Error::Replay("episode ends differently".into()));
        }
        if let Some(eval) = &self.evaluation {
            let summary = fresh.rss_summary()?;
            if summary.proportion_dangerous.to_bits() != eval.rss.proportion_dangerous.to_bits()
                || summary.proportion_improper.to_bits() != eval.rss.proportion_improper.to_bits()
                || summary != eval.rss
            {
                return Err(Error::Replay("RSS summary differs".into()));
            }
        }
        Ok(())
    }
}
