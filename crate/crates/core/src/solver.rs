//! Monte Carlo tree search with progressive widening over joint discrete
//! actions.
//!
//! The search commits one action per level: it spends the iteration budget
//! on the tree rooted at the current committed state, moves the root to the
//! child with the highest mean return, and continues from there until the
//! committed state is terminal. Every complete episode produced by an
//! iteration is scored by its undiscounted return and the best ones are kept.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::seed;

/// One discrete choice per controlled agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointAction(pub SmallVec<[u8; 8]>);

impl JointAction {
    pub fn from_slice(choices: &[u8]) -> Self {
        JointAction(SmallVec::from_slice(choices))
    }
}

/// `agents` independent choices among `choices` options each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpace {
    pub agents: usize,
    pub choices: usize,
}

impl ActionSpace {
    pub fn size(&self) -> u64 {
        (self.choices as u64).saturating_pow(self.agents as u32)
    }

    pub fn sample(&self, rng: &mut seed::Rng) -> JointAction {
        JointAction(
            (0..self.agents)
                .map(|_| rng.gen_range(0..self.choices) as u8)
                .collect(),
        )
    }

    /// The `index`-th joint action in lexicographic order.
    pub fn nth(&self, mut index: u64) -> JointAction {
        let mut digits: SmallVec<[u8; 8]> = SmallVec::from_elem(0, self.agents);
        for d in digits.iter_mut().rev() {
            *d = (index % self.choices as u64) as u8;
            index /= self.choices as u64;
        }
        JointAction(digits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Failure,
    Invalid,
    Horizon,
}

#[derive(Debug, Clone)]
pub struct Transition<S> {
    pub state: S,
    pub reward: f64,
    pub terminal: Option<Outcome>,
}

/// A deterministic episodic problem the search can drive.
pub trait SearchProblem {
    type State: Clone;

    fn action_space(&self) -> ActionSpace;
    fn initial_state(&self) -> Result<Self::State>;
    fn step(&self, state: &Self::State, action: &JointAction) -> Result<Transition<Self::State>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MctsConfig {
    pub iterations_per_step: usize,
    pub exploration_c: f64,
    pub pw_k: f64,
    pub pw_alpha: f64,
    /// Rollouts stop after this many steps from the episode start.
    pub max_depth: usize,
    pub seed: u64,
    pub top_k_trajectories: usize,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            iterations_per_step: 200,
            exploration_c: std::f64::consts::SQRT_2,
            pw_k: 4.0,
            pw_alpha: 0.5,
            max_depth: 30,
            seed: 0,
            top_k_trajectories: 10,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_step < 1 {
            return Err(Error::config("mcts.iterations_per_step", "must be at least 1"));
        }
        if !(self.pw_alpha > 0.0 && self.pw_alpha < 1.0) {
            return Err(Error::config("mcts.pw_alpha", "must lie in (0, 1)"));
        }
        if !(self.pw_k > 0.0) {
            return Err(Error::config("mcts.pw_k", "must be positive"));
        }
        if !(self.exploration_c >= 0.0) {
            return Err(Error::config("mcts.exploration_c", "must be non-negative"));
        }
        if self.max_depth < 1 {
            return Err(Error::config("mcts.max_depth", "must be at least 1"));
        }
        if self.top_k_trajectories < 1 {
            return Err(Error::config("mcts.top_k_trajectories", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TreeNode {
    pub visits: u64,
    pub total_return: f64,
    /// Iterations that ended at this node: rollouts started from it, or
    /// visits to it as a terminal state.
    pub own_visits: u64,
    pub depth: usize,
    pub terminal: bool,
    pub children: Vec<(JointAction, TreeNode)>,
}

impl TreeNode {
    pub fn new(depth: usize) -> Self {
        Self {
            depth,
            ..Self::default()
        }
    }

    pub fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.total_return / self.visits as f64
        }
    }

    /// Checks `visits == sum(child visits) + own_visits` over the subtree.
    pub fn check_consistency(&self) -> bool {
        let child_visits: u64 = self.children.iter().map(|(_, c)| c.visits).sum();
        self.visits == child_visits + self.own_visits
            && self.total_return.is_finite()
            && self.children.iter().all(|(_, c)| c.check_consistency())
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|(_, c)| c.node_count()).sum::<usize>()
    }
}

/// UCB1 over the children; unvisited children first, ties to the earliest
/// inserted.
pub fn uct_select(node: &TreeNode, c: f64) -> Result<usize> {
    if node.children.is_empty() {
        return Err(Error::Usage("uct_select on a node without children".into()));
    }
    if let Some(i) = node.children.iter().position(|(_, ch)| ch.visits == 0) {
        return Ok(i);
    }
    let ln_n = (node.visits.max(1) as f64).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, (_, ch)) in node.children.iter().enumerate() {
        let score = ch.mean() + c * (ln_n / ch.visits as f64).sqrt();
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

/// Widening cap `k * N^alpha`.
pub fn widening_cap(visits: u64, cfg: &MctsConfig) -> f64 {
    cfg.pw_k * (visits as f64).powf(cfg.pw_alpha)
}

/// Adds a new uniformly random child if the node is below its widening cap
/// (a node without children always expands). Returns the new child's index.
pub fn maybe_expand(
    node: &mut TreeNode,
    space: &ActionSpace,
    cfg: &MctsConfig,
    rng: &mut seed::Rng,
) -> Option<usize> {
    let n_children = node.children.len();
    if n_children as u64 >= space.size() {
        return None;
    }
    if n_children > 0 && n_children as f64 >= widening_cap(node.visits, cfg) {
        return None;
    }
    let action = if (n_children as u64) * 2 < space.size() {
        loop {
            let a = space.sample(rng);
            if node.children.iter().all(|(b, _)| *b != a) {
                break a;
            }
        }
    } else {
        let taken: HashSet<&JointAction> = node.children.iter().map(|(a, _)| a).collect();
        let free: Vec<JointAction> = (0..space.size())
            .map(|i| space.nth(i))
            .filter(|a| !taken.contains(a))
            .collect();
        free[rng.gen_range(0..free.len())].clone()
    };
    node.children.push((action, TreeNode::new(node.depth + 1)));
    Some(n_children)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub actions: Vec<JointAction>,
    pub total_return: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Episode,
    pub failure_found: bool,
    /// Best distinct episodes by descending return.
    pub top: Vec<Episode>,
    pub iterations_used: usize,
    pub episodes_seen: usize,
    /// Environment steps simulated, including re-simulation of committed actions.
    pub steps_simulated: usize,
    /// Best return after each iteration.
    pub best_trace: Vec<f64>,
}

struct Search<'a, P: SearchProblem> {
    problem: &'a P,
    cfg: &'a MctsConfig,
    space: ActionSpace,
    rng: seed::Rng,
    top: Vec<Episode>,
    seen: HashSet<Vec<JointAction>>,
    episodes_seen: usize,
    steps: usize,
}

impl<P: SearchProblem> Search<'_, P> {
    fn record(&mut self, actions: &[JointAction], total_return: f64, outcome: Outcome, observer: &mut dyn FnMut(&Episode)) {
        self.episodes_seen += 1;
        let episode = Episode {
            actions: actions.to_vec(),
            total_return,
            outcome,
        };
        observer(&episode);
        let k = self.cfg.top_k_trajectories;
        let worst = self.top.last().map(|e| e.total_return);
        if self.top.len() >= k && worst.is_some_and(|w| total_return <= w) {
            return;
        }
        if !self.seen.insert(episode.actions.clone()) {
            return;
        }
        let pos = self.top.partition_point(|e| e.total_return >= total_return);
        self.top.insert(pos, episode);
        if self.top.len() > k {
            let dropped = self.top.pop().expect("non-empty");
            self.seen.remove(&dropped.actions);
        }
    }

    fn rollout(
        &mut self,
        mut state: P::State,
        mut acc: f64,
        actions: &mut Vec<JointAction>,
    ) -> Result<(f64, Outcome)> {
        loop {
            if actions.len() >= self.cfg.max_depth {
                return Ok((acc, Outcome::Horizon));
            }
            let a = self.space.sample(&mut self.rng);
            let tr = self.problem.step(&state, &a)?;
            self.steps += 1;
            acc += tr.reward;
            actions.push(a);
            if let Some(outcome) = tr.terminal {
                return Ok((acc, outcome));
            }
            state = tr.state;
        }
    }

    /// One iteration below `node`. Returns the episode's total return.
    fn descend(
        &mut self,
        node: &mut TreeNode,
        state: &P::State,
        acc: f64,
        actions: &mut Vec<JointAction>,
        outcome_here: Option<Outcome>,
        observer: &mut dyn FnMut(&Episode),
    ) -> Result<f64> {
        node.visits += 1;
        if let Some(outcome) = outcome_here.or_else(|| (actions.len() >= self.cfg.max_depth).then_some(Outcome::Horizon)) {
            node.terminal = true;
            node.own_visits += 1;
            node.total_return += acc;
            self.record(actions, acc, outcome, observer);
            return Ok(acc);
        }

        let expanded = maybe_expand(node, &self.space, self.cfg, &mut self.rng);
        let idx = match expanded {
            Some(i) => i,
            None => uct_select(node, self.cfg.exploration_c)?,
        };
        let action = node.children[idx].0.clone();
        let tr = self.problem.step(state, &action)?;
        self.steps += 1;
        actions.push(action);
        let acc = acc + tr.reward;

        let ret = if expanded.is_some() {
            let child = &mut node.children[idx].1;
            child.visits += 1;
            child.own_visits += 1;
            let (ret, outcome) = match tr.terminal {
                Some(outcome) => {
                    child.terminal = true;
                    (acc, outcome)
                }
                None => self.rollout(tr.state, acc, actions)?,
            };
            child.total_return += ret;
            self.record(actions, ret, outcome, observer);
            ret
        } else {
            let child = &mut node.children[idx].1;
            self.descend(child, &tr.state, acc, actions, tr.terminal, observer)?
        };
        node.total_return += ret;
        Ok(ret)
    }
}

pub fn search<P: SearchProblem>(problem: &P, cfg: &MctsConfig) -> Result<SearchResult> {
    search_with_observer(problem, cfg, &mut |_| {})
}

/// Runs the search, calling `observer` on every complete episode.
pub fn search_with_observer<P: SearchProblem>(
    problem: &P,
    cfg: &MctsConfig,
    observer: &mut dyn FnMut(&Episode),
) -> Result<SearchResult> {
    search_tree(problem, cfg, observer).map(|(r, _)| r)
}

/// Like [`search_with_observer`], also returning the final root subtree.
pub fn search_tree<P: SearchProblem>(
    problem: &P,
    cfg: &MctsConfig,
    observer: &mut dyn FnMut(&Episode),
) -> Result<(SearchResult, TreeNode)> {
    cfg.validate()?;
    let mut s = Search {
        problem,
        cfg,
        space: problem.action_space(),
        rng: seed::rng(cfg.seed),
        top: Vec::new(),
        seen: HashSet::new(),
        episodes_seen: 0,
        steps: 0,
    };
    let mut root_state = problem.initial_state()?;
    let mut root = TreeNode::new(0);
    let mut prefix: Vec<JointAction> = Vec::new();
    let mut prefix_return = 0.0;
    let mut iterations = 0;
    let mut best_trace = Vec::new();

    loop {
        for _ in 0..cfg.iterations_per_step {
            let mut actions = prefix.clone();
            s.descend(&mut root, &root_state, prefix_return, &mut actions, None, observer)?;
            iterations += 1;
            best_trace.push(s.top.first().map_or(f64::NEG_INFINITY, |e| e.total_return));
        }
        if root.terminal || root.children.is_empty() {
            break;
        }
        let mut best = 0;
        for (i, (_, ch)) in root.children.iter().enumerate() {
            if ch.visits > 0 && (root.children[best].1.visits == 0 || ch.mean() > root.children[best].1.mean()) {
                best = i;
            }
        }
        let (action, child) = root.children.swap_remove(best);
        let tr = problem.step(&root_state, &action)?;
        s.steps += 1;
        prefix.push(action);
        prefix_return += tr.reward;
        root = child;
        if tr.terminal.is_some() || prefix.len() >= cfg.max_depth {
            break;
        }
        root_state = tr.state;
    }

    let best = s
        .top
        .first()
        .cloned()
        .ok_or_else(|| Error::Search("budget exhausted without a complete episode".into()))?;
    Ok((
        SearchResult {
            failure_found: best.outcome == Outcome::Failure,
            best,
            top: s.top,
            iterations_used: iterations,
            episodes_seen: s.episodes_seen,
            steps_simulated: s.steps,
            best_trace,
        },
        root,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomSearchResult {
    pub best: Episode,
    pub failure_found: bool,
    pub episodes: usize,
    pub steps_simulated: usize,
}

/// Uniform random environment actions, whole episodes from the initial
/// state, until `step_budget` simulator steps are spent.
pub fn random_search<P: SearchProblem>(
    problem: &P,
    step_budget: usize,
    seed: u64,
) -> Result<RandomSearchResult> {
    let space = problem.action_space();
    let mut rng = seed::rng(seed);
    let initial = problem.initial_state()?;
    let mut best: Option<Episode> = None;
    let mut failure_found = false;
    let mut episodes = 0;
    let mut steps = 0;
    while steps < step_budget {
        let mut state = initial.clone();
        let mut actions = Vec::new();
        let mut total = 0.0;
        let outcome = loop {
            let a = space.sample(&mut rng);
            let tr = problem.step(&state, &a)?;
            steps += 1;
            total += tr.reward;
            actions.push(a);
            if let Some(o) = tr.terminal {
                break o;
            }
            state = tr.state;
        };
        episodes += 1;
        failure_found |= outcome == Outcome::Failure;
        if best.as_ref().is_none_or(|b| total > b.total_return) {
            best = Some(Episode {
                actions,
                total_return: total,
                outcome,
            });
        }
    }
    let best = best.ok_or_else(|| Error::Search("zero step budget".into()))?;
    Ok(RandomSearchResult {
        best,
        failure_found,
        episodes,
        steps_simulated: steps,
    })
}
