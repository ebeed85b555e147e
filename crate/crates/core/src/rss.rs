//! Responsibility-Sensitive Safety checks.
//!
//! Longitudinal and lateral minimum safe distances follow the standard RSS
//! closed forms. A state is dangerous when some vehicle violates every
//! applicable margin with the ego: the longitudinal one alone for same-lane
//! pairs, both margins otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{DiscreteAction, SimConfig, SimState, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RssParams {
    pub response_time: f64,
    pub accel_max: f64,
    pub brake_min: f64,
    pub brake_max: f64,
    pub lateral_accel_max: f64,
    pub lateral_brake_min: f64,
    pub lateral_margin: f64,
}

impl Default for RssParams {
    fn default() -> Self {
        Self {
            response_time: 1.0,
            accel_max: 2.0,
            brake_min: 4.0,
            brake_max: 8.0,
            lateral_accel_max: 1.0,
            lateral_brake_min: 1.0,
            lateral_margin: 0.2,
        }
    }
}

impl RssParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rss.response_time", self.response_time),
            ("rss.accel_max", self.accel_max),
            ("rss.brake_min", self.brake_min),
            ("rss.brake_max", self.brake_max),
            ("rss.lateral_accel_max", self.lateral_accel_max),
            ("rss.lateral_brake_min", self.lateral_brake_min),
            ("rss.lateral_margin", self.lateral_margin),
        ];
        for (key, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.brake_min > self.brake_max {
            return Err(Error::config("rss.brake_min", "must not exceed rss.brake_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RssVerdict {
    pub longitudinal_unsafe: bool,
    pub lateral_unsafe: bool,
    pub dangerous: bool,
    pub improper_response: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRssSummary {
    pub steps_total: usize,
    pub steps_dangerous: usize,
    pub steps_improper: usize,
    pub proportion_dangerous: f64,
    pub proportion_improper: f64,
}

/// Minimum gap for a rear vehicle at `v_rear` behind a front vehicle at
/// `v_front`, clamped at zero.
pub fn safe_longitudinal_distance(v_rear: f64, v_front: f64, p: &RssParams) -> f64 {
    let rho = p.response_time;
    let v_after = v_rear + rho * p.accel_max;
    let d = v_rear * rho + 0.5 * p.accel_max * rho * rho + v_after * v_after / (2.0 * p.brake_min)
        - v_front * v_front / (2.0 * p.brake_max);
    d.max(0.0)
}

/// Minimum lateral gap given each vehicle's lateral speed toward the other
/// (negative means moving away).
pub fn safe_lateral_distance(v1_toward: f64, v2_toward: f64, p: &RssParams) -> f64 {
    let side = |v: f64| {
        let rho = p.response_time;
        let v_after = v + rho * p.lateral_accel_max;
        let stop = v_after.signum() * v_after * v_after / (2.0 * p.lateral_brake_min);
        (v * rho + 0.5 * p.lateral_accel_max * rho * rho + stop).max(0.0)
    };
    p.lateral_margin + side(v1_toward) + side(v2_toward)
}

struct PairCheck {
    same_lane: bool,
    longitudinal: bool,
    lateral: bool,
    ego_is_rear: bool,
}

fn check_pair(
    ego: &VehicleState,
    other: &VehicleState,
    ego_vy: f64,
    other_vy: f64,
    p: &RssParams,
    geom: &SimConfig,
) -> PairCheck {
    let ego_is_rear = ego.x <= other.x;
    let (rear, front) = if ego_is_rear { (ego, other) } else { (other, ego) };
    let gap = (front.x - rear.x) - geom.vehicle_length;
    let longitudinal = gap < safe_longitudinal_distance(rear.speed, front.speed, p);

    let dy = other.y - ego.y;
    let lateral_gap = dy.abs() - geom.vehicle_width;
    // Positive lateral speed means closing on the other vehicle.
    let toward = dy.signum();
    let (v1, v2) = if dy == 0.0 {
        (ego_vy.abs(), other_vy.abs())
    } else {
        (ego_vy * toward, -other_vy * toward)
    };
    let lateral = lateral_gap < safe_lateral_distance(v1, v2, p);

    PairCheck {
        same_lane: ego.lane == other.lane,
        longitudinal,
        lateral,
        ego_is_rear,
    }
}

/// Verdict for the ego in `state` when it responds with `sut_action`.
pub fn evaluate_state(
    state: &SimState,
    sut_action: DiscreteAction,
    p: &RssParams,
    geom: &SimConfig,
) -> RssVerdict {
    let lateral_velocity = |v: &VehicleState| {
        let dy = geom.lane_center(v.target_lane) - v.y;
        if dy.abs() < 1e-12 {
            0.0
        } else {
            geom.lateral_speed * dy.signum()
        }
    };
    let ego = state.ego();
    let ego_vy = lateral_velocity(ego);
    let mut verdict = RssVerdict::default();
    let mut must_brake = false;
    for other in state.vehicles.iter().filter(|v| v.id != state.ego_id) {
        let c = check_pair(ego, other, ego_vy, lateral_velocity(other), p, geom);
        if c.same_lane {
            if c.longitudinal {
                verdict.longitudinal_unsafe = true;
                must_brake |= c.ego_is_rear;
            }
        } else if c.longitudinal && c.lateral {
            verdict.lateral_unsafe = true;
        }
    }
    verdict.dangerous = verdict.longitudinal_unsafe || verdict.lateral_unsafe;
    verdict.improper_response = must_brake && sut_action != DiscreteAction::Slower;
    verdict
}

/// Counts and proportions over a sequence of per-step verdicts.
pub fn summarize_verdicts(verdicts: &[RssVerdict]) -> Result<TrajectoryRssSummary> {
    if verdicts.is_empty() {
        return Err(Error::Usage("cannot summarize an empty trajectory".into()));
    }
    let steps_total = verdicts.len();
    let steps_dangerous = verdicts.iter().filter(|v| v.dangerous).count();
    let steps_improper = verdicts.iter().filter(|v| v.improper_response).count();
    Ok(TrajectoryRssSummary {
        steps_total,
        steps_dangerous,
        steps_improper,
        proportion_dangerous: steps_dangerous as f64 / steps_total as f64,
        proportion_improper: steps_improper as f64 / steps_total as f64,
    })
}
