//! Kinematic multi-lane highway.
//!
//! Vehicles are axis-aligned rectangles that follow high-level commands: a
//! command moves a vehicle's target speed or target lane, and the kinematics
//! relax toward those targets over a number of Euler sub-steps per decision.
//! Vehicle 0 is the ego, driven by an [`EgoPolicy`]; the eight environment
//! vehicles nearest the ego are driven by an [`EnvAction`] and every other
//! vehicle idles.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Number of environment vehicles commanded by one [`EnvAction`].
pub const ENV_AGENTS: usize = 8;
/// Number of neighbours in an [`EgoObservation`].
pub const OBS_VEHICLES: usize = 5;
/// Features per observed neighbour: dx, dy, dvx, dvy.
pub const OBS_FEATURES: usize = 4;
pub const OBS_LEN: usize = OBS_VEHICLES * OBS_FEATURES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub lane_count: usize,
    pub lane_width: f64,
    /// Length of road over which vehicles are initially spread.
    pub road_length: f64,
    pub vehicle_count: usize,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub speed_increment: f64,
    pub decision_dt: f64,
    pub substeps_per_decision: usize,
    pub horizon: usize,
    pub lateral_speed: f64,
    /// Magnitude of the acceleration used to reach the target speed.
    pub longitudinal_accel: f64,
    /// Minimum bumper-to-bumper clearance at initialization.
    pub placement_clearance: f64,
    pub obs_scale_x: f64,
    pub obs_scale_y: f64,
    pub obs_scale_vx: f64,
    pub obs_scale_vy: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lane_count: 3,
            lane_width: 4.0,
            road_length: 3000.0,
            vehicle_count: 40,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            speed_min: 20.0,
            speed_max: 30.0,
            speed_increment: 5.0,
            decision_dt: 1.0,
            substeps_per_decision: 5,
            horizon: 30,
            lateral_speed: 2.0,
            longitudinal_accel: 5.0,
            placement_clearance: 1.0,
            obs_scale_x: 100.0,
            obs_scale_y: 12.0,
            obs_scale_vx: 30.0,
            obs_scale_vy: 4.0,
            seed: 2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sim.lane_width", self.lane_width),
            ("sim.road_length", self.road_length),
            ("sim.vehicle_length", self.vehicle_length),
            ("sim.vehicle_width", self.vehicle_width),
            ("sim.speed_increment", self.speed_increment),
            ("sim.decision_dt", self.decision_dt),
            ("sim.lateral_speed", self.lateral_speed),
            ("sim.longitudinal_accel", self.longitudinal_accel),
            ("sim.obs_scale_x", self.obs_scale_x),
            ("sim.obs_scale_y", self.obs_scale_y),
            ("sim.obs_scale_vx", self.obs_scale_vx),
            ("sim.obs_scale_vy", self.obs_scale_vy),
        ];
        for (key, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(key, format!("must be positive, got {value}")));
            }
        }
        if self.lane_count < 2 {
            return Err(Error::config("sim.lane_count", "must be at least 2"));
        }
        if self.vehicle_count < 1 {
            return Err(Error::config("sim.vehicle_count", "must be at least 1"));
        }
        if !(self.speed_min >= 0.0 && self.speed_min < self.speed_max) {
            return Err(Error::config(
                "sim.speed_min",
                "must satisfy 0 <= speed_min < speed_max",
            ));
        }
        let steps = (self.speed_max - self.speed_min) / self.speed_increment;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::config(
                "sim.speed_increment",
                "must divide speed_max - speed_min",
            ));
        }
        if self.substeps_per_decision < 1 {
            return Err(Error::config("sim.substeps_per_decision", "must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(Error::config("sim.horizon", "must be at least 1"));
        }
        if !(self.placement_clearance > 0.0) {
            return Err(Error::config("sim.placement_clearance", "must be positive"));
        }
        Ok(())
    }

    /// The discrete speed set `speed_min, speed_min + increment, ..., speed_max`.
    pub fn speed_set(&self) -> Vec<f64> {
        let steps = ((self.speed_max - self.speed_min) / self.speed_increment).round() as usize;
        (0..=steps)
            .map(|i| self.speed_min + i as f64 * self.speed_increment)
            .collect()
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    pub fn ego_lane(&self) -> usize {
        self.lane_count / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiscreteAction {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl DiscreteAction {
    pub const COUNT: usize = 5;
    pub const ALL: [DiscreteAction; 5] = [
        DiscreteAction::LaneLeft,
        DiscreteAction::Idle,
        DiscreteAction::LaneRight,
        DiscreteAction::Faster,
        DiscreteAction::Slower,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, DiscreteAction::LaneLeft | DiscreteAction::LaneRight)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            DiscreteAction::LaneLeft => "L",
            DiscreteAction::Idle => "I",
            DiscreteAction::LaneRight => "R",
            DiscreteAction::Faster => "F",
            DiscreteAction::Slower => "S",
        }
    }
}

impl fmt::Display for DiscreteAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DiscreteAction::LaneLeft => "LANE_LEFT",
            DiscreteAction::Idle => "IDLE",
            DiscreteAction::LaneRight => "LANE_RIGHT",
            DiscreteAction::Faster => "FASTER",
            DiscreteAction::Slower => "SLOWER",
        };
        f.write_str(name)
    }
}

/// Joint command for the eight environment vehicles nearest the ego;
/// position `i` drives the `i`-th closest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnvAction(pub [DiscreteAction; ENV_AGENTS]);

impl EnvAction {
    pub fn idle() -> Self {
        EnvAction([DiscreteAction::Idle; ENV_AGENTS])
    }

    pub fn random(rng: &mut seed::Rng) -> Self {
        let mut actions = [DiscreteAction::Idle; ENV_AGENTS];
        for a in actions.iter_mut() {
            *a = DiscreteAction::ALL[rng.gen_range(0..DiscreteAction::COUNT)];
        }
        EnvAction(actions)
    }

    pub fn from_indices(indices: &[u8]) -> Option<Self> {
        if indices.len() != ENV_AGENTS {
            return None;
        }
        let mut actions = [DiscreteAction::Idle; ENV_AGENTS];
        for (slot, &i) in actions.iter_mut().zip(indices) {
            *slot = DiscreteAction::from_index(i as usize)?;
        }
        Some(EnvAction(actions))
    }

    pub fn indices(&self) -> [u8; ENV_AGENTS] {
        self.0.map(|a| a.index() as u8)
    }
}

impl fmt::Display for EnvAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in &self.0 {
            f.write_str(a.short_name())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    pub target_speed: f64,
    pub lane: usize,
    pub target_lane: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: usize,
    pub vehicles: Vec<VehicleState>,
    pub ego_id: usize,
    /// The ego has been in a collision.
    pub failure: bool,
    /// Two environment vehicles collided; the episode ends without a failure.
    pub invalid: bool,
}

impl SimState {
    pub fn ego(&self) -> &VehicleState {
        self.vehicle(self.ego_id)
            .expect("ego vehicle missing from state")
    }

    pub fn vehicle(&self, id: usize) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    fn index_of(&self, id: usize) -> Option<usize> {
        self.vehicles.iter().position(|v| v.id == id)
    }
}

/// Relative kinematics of the five vehicles nearest the ego, normalized to
/// [-1, 1]. Rows are sorted by distance; missing vehicles are zero rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoObservation(pub [[f64; OBS_FEATURES]; OBS_VEHICLES]);

impl EgoObservation {
    pub fn zeros() -> Self {
        EgoObservation([[0.0; OBS_FEATURES]; OBS_VEHICLES])
    }

    pub fn flatten(&self) -> [f64; OBS_LEN] {
        let mut out = [0.0; OBS_LEN];
        for (i, row) in self.0.iter().enumerate() {
            out[i * OBS_FEATURES..(i + 1) * OBS_FEATURES].copy_from_slice(row);
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Option<Self> {
        if values.len() != OBS_LEN {
            return None;
        }
        let mut rows = [[0.0; OBS_FEATURES]; OBS_VEHICLES];
        for (i, row) in rows.iter_mut().enumerate() {
            row.copy_from_slice(&values[i * OBS_FEATURES..(i + 1) * OBS_FEATURES]);
        }
        Some(EgoObservation(rows))
    }
}

/// Chooses the ego's command from its observation.
pub trait EgoPolicy {
    fn act(&self, obs: &EgoObservation) -> DiscreteAction;
}

/// Always issues the same command.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub DiscreteAction);

impl EgoPolicy for ConstantPolicy {
    fn act(&self, _obs: &EgoObservation) -> DiscreteAction {
        self.0
    }
}

/// Result of one decision step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: SimState,
    pub ego_action: DiscreteAction,
    /// Ids of the environment vehicles that received the env action, in slot order.
    pub controlled: Vec<usize>,
    pub in_failure_set: bool,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Initial state for `seed`. The ego starts in the middle lane with the
    /// environment vehicles spread over the road with jittered gaps.
    ///
    /// Speeds are sampled from the speed set and then sorted within each
    /// lane, ego included, so no vehicle starts behind a slower one; left
    /// idle, traffic never closes on itself or on an idling ego.
    pub fn init(&self, seed: u64) -> Result<SimState> {
        let cfg = &self.config;
        let mut rng = seed::rng(seed);
        let speeds = cfg.speed_set();
        let ego_lane = cfg.ego_lane();

        let mut per_lane: Vec<usize> = vec![0; cfg.lane_count];
        let mut env_lanes = Vec::with_capacity(cfg.vehicle_count.saturating_sub(1));
        for _ in 1..cfg.vehicle_count {
            let lane = rng.gen_range(0..cfg.lane_count);
            per_lane[lane] += 1;
            env_lanes.push(lane);
        }

        let mut vehicles = Vec::with_capacity(cfg.vehicle_count);
        let mut ego_x = 0.0;
        let mut next_id = 1;
        for (lane, &env_count) in per_lane.iter().enumerate() {
            let slots = env_count + usize::from(lane == ego_lane);
            if slots == 0 {
                continue;
            }
            let slot = cfg.road_length / slots as f64;
            let free = slot - cfg.vehicle_length - cfg.placement_clearance;
            if free <= 0.0 {
                return Err(Error::Placement {
                    lane,
                    vehicles: slots,
                    road_length: cfg.road_length,
                });
            }
            let ego_slot = (lane == ego_lane).then_some(slots / 2);
            let mut lane_speeds: Vec<f64> = (0..slots)
                .map(|_| speeds[rng.gen_range(0..speeds.len())])
                .collect();
            lane_speeds.sort_by(f64::total_cmp);
            for (j, &speed) in lane_speeds.iter().enumerate() {
                let x = j as f64 * slot + rng.gen_range(0.0..free);
                let y = cfg.lane_center(lane);
                if Some(j) == ego_slot {
                    ego_x = x;
                    vehicles.push(VehicleState {
                        id: 0,
                        x,
                        y,
                        speed,
                        target_speed: speed,
                        lane,
                        target_lane: lane,
                    });
                } else {
                    vehicles.push(VehicleState {
                        id: next_id,
                        x,
                        y,
                        speed,
                        target_speed: speed,
                        lane,
                        target_lane: lane,
                    });
                    next_id += 1;
                }
            }
        }
        debug_assert_eq!(env_lanes.len() + 1, vehicles.len());

        for v in &mut vehicles {
            v.x -= ego_x;
        }
        vehicles.sort_by_key(|v| v.id);
        Ok(SimState {
            t: 0,
            vehicles,
            ego_id: 0,
            failure: false,
            invalid: false,
        })
    }

    pub fn is_terminal(&self, state: &SimState) -> bool {
        state.failure || state.invalid || state.t >= self.config.horizon
    }

    /// Advances one decision step with the ego driven by `policy`. Returns the
    /// new state and whether it is in the failure set.
    pub fn step(
        &self,
        state: &SimState,
        env_action: &EnvAction,
        policy: &dyn EgoPolicy,
    ) -> Result<(SimState, bool)> {
        let out = self.step_detailed(state, env_action, policy)?;
        Ok((out.state, out.in_failure_set))
    }

    pub fn step_detailed(
        &self,
        state: &SimState,
        env_action: &EnvAction,
        policy: &dyn EgoPolicy,
    ) -> Result<StepOutcome> {
        if self.is_terminal(state) {
            return Err(Error::Usage(format!(
                "cannot step a terminal state (t={}, failure={}, invalid={})",
                state.t, state.failure, state.invalid
            )));
        }
        let ego_action = policy.act(&self.observe_ego(state));
        let controlled = self.nearest_env_vehicles(state, ENV_AGENTS);

        let mut next = state.clone();
        let ego_idx = next
            .index_of(next.ego_id)
            .ok_or_else(|| Error::Usage("state has no ego vehicle".into()))?;
        self.apply_command(&mut next.vehicles[ego_idx], ego_action);
        for (slot, id) in controlled.iter().enumerate() {
            let idx = next.index_of(*id).expect("controlled id comes from the state");
            self.apply_command(&mut next.vehicles[idx], env_action.0[slot]);
        }

        let dt = self.config.decision_dt / self.config.substeps_per_decision as f64;
        for _ in 0..self.config.substeps_per_decision {
            for v in &mut next.vehicles {
                self.advance(v, dt);
            }
            let collisions = self.detect_collisions(&next);
            if collisions
                .iter()
                .any(|&(a, b)| a == next.ego_id || b == next.ego_id)
            {
                next.failure = true;
                break;
            }
            if !collisions.is_empty() {
                next.invalid = true;
                break;
            }
        }
        next.t += 1;

        Ok(StepOutcome {
            in_failure_set: next.failure,
            state: next,
            ego_action,
            controlled,
        })
    }

    fn apply_command(&self, v: &mut VehicleState, action: DiscreteAction) {
        let cfg = &self.config;
        match action {
            DiscreteAction::Idle => {}
            DiscreteAction::Faster => {
                v.target_speed = (v.target_speed + cfg.speed_increment).min(cfg.speed_max);
            }
            DiscreteAction::Slower => {
                v.target_speed = (v.target_speed - cfg.speed_increment).max(cfg.speed_min);
            }
            DiscreteAction::LaneLeft | DiscreteAction::LaneRight => {
                let shifted = if action == DiscreteAction::LaneLeft {
                    v.target_lane.saturating_sub(1)
                } else {
                    (v.target_lane + 1).min(cfg.lane_count - 1)
                };
                // a shift that would leave the target two lanes away is ignored
                if shifted.abs_diff(v.lane) <= 1 {
                    v.target_lane = shifted;
                }
            }
        }
    }

    fn advance(&self, v: &mut VehicleState, dt: f64) {
        let cfg = &self.config;
        let dv = v.target_speed - v.speed;
        let max_dv = cfg.longitudinal_accel * dt;
        v.speed += dv.clamp(-max_dv, max_dv);
        v.x += v.speed * dt;

        let target_y = cfg.lane_center(v.target_lane);
        let dy = target_y - v.y;
        let max_dy = cfg.lateral_speed * dt;
        v.y += dy.clamp(-max_dy, max_dy);
        let lane = (v.y / cfg.lane_width).round().max(0.0) as usize;
        v.lane = lane.min(cfg.lane_count - 1);
    }

    /// Signed lateral velocity implied by the vehicle's lane target.
    pub fn lateral_velocity(&self, v: &VehicleState) -> f64 {
        let dy = self.config.lane_center(v.target_lane) - v.y;
        if dy.abs() < 1e-12 {
            0.0
        } else {
            self.config.lateral_speed * dy.signum()
        }
    }

    /// Up to `k` environment vehicle ids ordered by Euclidean distance to the
    /// ego; ties go to the lower id.
    pub fn nearest_env_vehicles(&self, state: &SimState, k: usize) -> Vec<usize> {
        let ego = state.ego();
        let mut others: Vec<(f64, usize)> = state
            .vehicles
            .iter()
            .filter(|v| v.id != state.ego_id)
            .map(|v| ((v.x - ego.x).hypot(v.y - ego.y), v.id))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(k);
        others.into_iter().map(|(_, id)| id).collect()
    }

    pub fn observe_ego(&self, state: &SimState) -> EgoObservation {
        let cfg = &self.config;
        let ego = state.ego();
        let ego_vy = self.lateral_velocity(ego);
        let mut obs = EgoObservation::zeros();
        for (row, id) in obs
            .0
            .iter_mut()
            .zip(self.nearest_env_vehicles(state, OBS_VEHICLES))
        {
            let v = state.vehicle(id).expect("nearest ids come from the state");
            *row = [
                ((v.x - ego.x) / cfg.obs_scale_x).clamp(-1.0, 1.0),
                ((v.y - ego.y) / cfg.obs_scale_y).clamp(-1.0, 1.0),
                ((v.speed - ego.speed) / cfg.obs_scale_vx).clamp(-1.0, 1.0),
                ((self.lateral_velocity(v) - ego_vy) / cfg.obs_scale_vy).clamp(-1.0, 1.0),
            ];
        }
        obs
    }

    /// Unordered id pairs whose rectangles overlap with positive area,
    /// sorted by `(lower id, higher id)`.
    pub fn detect_collisions(&self, state: &SimState) -> Vec<(usize, usize)> {
        let (len, width) = (self.config.vehicle_length, self.config.vehicle_width);
        let mut order: Vec<&VehicleState> = state.vehicles.iter().collect();
        order.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mut pairs = Vec::new();
        for (i, a) in order.iter().enumerate() {
            for b in &order[i + 1..] {
                if b.x - a.x >= len {
                    break;
                }
                if (a.y - b.y).abs() < width {
                    pairs.push((a.id.min(b.id), a.id.max(b.id)));
                }
            }
        }
        pairs.sort_unstable();
        pairs
    }

    /// Bumper-to-bumper gap to the nearest vehicle ahead in the ego's lane.
    pub fn lead_gap(&self, state: &SimState) -> Option<f64> {
        let ego = state.ego();
        state
            .vehicles
            .iter()
            .filter(|v| v.id != state.ego_id && v.lane == ego.lane && v.x > ego.x)
            .map(|v| v.x - ego.x)
            .min_by(f64::total_cmp)
            .map(|d| d - self.config.vehicle_length)
    }

    /// The nearest same-lane vehicle ahead of the ego.
    pub fn leader<'a>(&self, state: &'a SimState) -> Option<&'a VehicleState> {
        let ego = state.ego();
        state
            .vehicles
            .iter()
            .filter(|v| v.id != state.ego_id && v.lane == ego.lane && v.x > ego.x)
            .min_by(|a, b| a.x.total_cmp(&b.x).then(a.id.cmp(&b.id)))
    }
}

/// Orders vehicles by longitudinal position; used by renderers.
pub fn by_position(a: &VehicleState, b: &VehicleState) -> Ordering {
    a.x.total_cmp(&b.x).then(a.id.cmp(&b.id))
}
