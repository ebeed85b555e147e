//! The highway stress-testing problem: the solver picks the environment
//! action, the SUT drives the ego greedily, and the configured reward scores
//! every reached state.

use crate::classifier::{featurize, HcsNetwork};
use crate::error::{Error, Result};
use crate::rewards::{self, RewardConfig, RewardKind, StepContext};
use crate::seed;
use crate::sim::{DiscreteAction, EnvAction, SimState, Simulator, StepOutcome, ENV_AGENTS};
use crate::solver::{
    self, ActionSpace, Episode, JointAction, MctsConfig, Outcome, SearchProblem, SearchResult,
    Transition,
};
use crate::sut::QNetwork;

/// The reward signal together with whatever model it needs.
#[derive(Debug, Clone)]
pub enum RewardModel {
    Heur,
    Qcs,
    Hcs(HcsNetwork),
}

impl RewardModel {
    pub fn kind(&self) -> RewardKind {
        match self {
            RewardModel::Heur => RewardKind::Heur,
            RewardModel::Qcs => RewardKind::Qcs,
            RewardModel::Hcs(_) => RewardKind::Hcs,
        }
    }
}

/// Everything about one decision step that the trajectory log keeps.
#[derive(Debug, Clone)]
pub struct HighwayStep {
    pub outcome: StepOutcome,
    pub env_action: EnvAction,
    pub reward: f64,
    pub terminal: Option<Outcome>,
}

pub struct HighwayProblem<'a> {
    pub sim: &'a Simulator,
    pub sut: &'a QNetwork,
    pub model: &'a RewardModel,
    pub reward: &'a RewardConfig,
    /// Seed of the initial configuration.
    pub scenario_seed: u64,
}

impl<'a> HighwayProblem<'a> {
    pub fn new(
        sim: &'a Simulator,
        sut: &'a QNetwork,
        model: &'a RewardModel,
        reward: &'a RewardConfig,
        scenario_seed: u64,
    ) -> Result<Self> {
        reward.validate(sim.config().horizon)?;
        if reward.kind != model.kind() {
            return Err(Error::config(
                "reward.kind",
                format!("configured `{}` but the reward model is `{}`", reward.kind, model.kind()),
            ));
        }
        Ok(Self {
            sim,
            sut,
            model,
            reward,
            scenario_seed,
        })
    }

    pub fn initial(&self) -> Result<SimState> {
        self.sim.init(self.scenario_seed)
    }

    pub fn step_env(&self, state: &SimState, env_action: &EnvAction) -> Result<HighwayStep> {
        let outcome = self.sim.step_detailed(state, env_action, self.sut)?;
        let next = &outcome.state;
        let horizon = self.sim.config().horizon;
        let mut ctx = StepContext::live(next.t, horizon, self.sim.lead_gap(next));
        ctx.in_failure_set = outcome.in_failure_set;
        ctx.ended_invalid = next.invalid;
        let live = !ctx.in_failure_set && !ctx.ended_invalid && next.t < horizon;
        if live {
            match self.model {
                RewardModel::Heur => {}
                RewardModel::Qcs => ctx.qcs = self.sut.qcs_score(&self.sim.observe_ego(next))?,
                RewardModel::Hcs(net) => {
                    let f = featurize(outcome.ego_action, env_action, &self.sim.observe_ego(next));
                    let s = seed::hash_f64s(self.reward.prediction_seed, f.as_slice());
                    ctx.prediction = Some(net.predict(&f, self.reward.n_passes, s));
                }
            }
        }
        let reward = rewards::evaluate(self.model.kind(), &ctx, self.reward)?;
        let terminal = if next.failure {
            Some(Outcome::Failure)
        } else if next.invalid {
            Some(Outcome::Invalid)
        } else if next.t >= horizon {
            Some(Outcome::Horizon)
        } else {
            None
        };
        Ok(HighwayStep {
            outcome,
            env_action: *env_action,
            reward,
            terminal,
        })
    }

    /// Replays an action sequence from the initial state.
    pub fn simulate(&self, actions: &[EnvAction]) -> Result<(SimState, Vec<HighwayStep>)> {
        let initial = self.initial()?;
        let mut state = initial.clone();
        let mut steps = Vec::with_capacity(actions.len());
        for a in actions {
            let step = self.step_env(&state, a)?;
            state = step.outcome.state.clone();
            steps.push(step);
        }
        Ok((initial, steps))
    }

    pub fn mcts_config(&self, base: &MctsConfig) -> MctsConfig {
        MctsConfig {
            max_depth: self.sim.config().horizon,
            ..base.clone()
        }
    }
}

pub fn env_action(a: &JointAction) -> Result<EnvAction> {
    EnvAction::from_indices(&a.0)
        .ok_or_else(|| Error::Usage(format!("joint action {:?} is not an environment action", a.0)))
}

pub fn joint_action(a: &EnvAction) -> JointAction {
    JointAction::from_slice(&a.indices())
}

pub fn env_actions(episode: &Episode) -> Result<Vec<EnvAction>> {
    episode.actions.iter().map(env_action).collect()
}

impl SearchProblem for HighwayProblem<'_> {
    type State = SimState;

    fn action_space(&self) -> ActionSpace {
        ActionSpace {
            agents: ENV_AGENTS,
            choices: DiscreteAction::COUNT,
        }
    }

    fn initial_state(&self) -> Result<SimState> {
        self.initial()
    }

    fn step(&self, state: &SimState, action: &JointAction) -> Result<Transition<SimState>> {
        let step = self.step_env(state, &env_action(action)?)?;
        Ok(Transition {
            state: step.outcome.state,
            reward: step.reward,
            terminal: step.terminal,
        })
    }
}

/// MCTS over the highway problem, with `max_depth` tied to the horizon.
pub fn search(problem: &HighwayProblem<'_>, cfg: &MctsConfig) -> Result<SearchResult> {
    solver::search(problem, &problem.mcts_config(cfg))
}
