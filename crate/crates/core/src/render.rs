//! Plain-text scenario rendering: a fixed-width lane diagram around the ego
//! plus a kinematic table.

use std::fmt::Write as _;

use crate::sim::{by_position, SimConfig, SimState};

/// Diagram geometry in meters relative to the ego.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub behind: f64,
    pub ahead: f64,
    pub meters_per_char: f64,
}

impl Default for View {
    fn default() -> Self {
        Self {
            behind: 60.0,
            ahead: 100.0,
            meters_per_char: 2.0,
        }
    }
}

impl View {
    pub fn columns(&self) -> usize {
        ((self.behind + self.ahead) / self.meters_per_char).round() as usize
    }
}

/// One row per lane, leftmost lane on top. Vehicles are drawn from their
/// rear bumper forward and tagged with their id; the ego is `E`.
pub fn lane_diagram(state: &SimState, cfg: &SimConfig, view: &View) -> String {
    let cols = view.columns();
    let ego = state.ego();
    let mut rows = vec![vec!['.'; cols]; cfg.lane_count];
    let mut by_x: Vec<_> = state.vehicles.iter().collect();
    by_x.sort_by(|a, b| by_position(a, b));
    for v in by_x {
        let rel_front = v.x - ego.x + cfg.vehicle_length / 2.0;
        let rel_rear = rel_front - cfg.vehicle_length;
        let c0 = ((rel_rear + view.behind) / view.meters_per_char).floor();
        let c1 = ((rel_front + view.behind) / view.meters_per_char).ceil();
        if c1 <= 0.0 || c0 >= cols as f64 {
            continue;
        }
        let tag: Vec<char> = if v.id == state.ego_id {
            vec!['E']
        } else {
            v.id.to_string().chars().collect()
        };
        let lane = v.lane.min(cfg.lane_count - 1);
        let (c0, c1) = (c0.max(0.0) as usize, (c1 as usize).min(cols));
        for (k, c) in (c0..c1).enumerate() {
            rows[lane][c] = *tag.get(k).unwrap_or(&'=');
        }
        if v.target_lane != v.lane && c1 > c0 {
            rows[lane][c1 - 1] = if v.target_lane < v.lane { '^' } else { 'v' };
        }
    }
    let mut out = String::new();
    let border: String = "-".repeat(cols);
    let _ = writeln!(out, "+{border}+");
    for (i, row) in rows.iter().enumerate() {
        let line: String = row.iter().collect();
        let _ = writeln!(out, "|{line}| lane {i}");
    }
    let _ = writeln!(out, "+{border}+");
    out
}

/// Vehicles sorted by distance to the ego, positions relative to it.
pub fn kinematic_table(state: &SimState, limit: usize) -> String {
    let ego = state.ego();
    let mut vs: Vec<_> = state.vehicles.iter().collect();
    vs.sort_by(|a, b| {
        let da = (a.x - ego.x).hypot(a.y - ego.y);
        let db = (b.x - ego.x).hypot(b.y - ego.y);
        da.total_cmp(&db).then(a.id.cmp(&b.id))
    });
    let mut out = String::new();
    let _ = writeln!(out, "{:>4} {:>4} {:>8} {:>6} {:>6} {:>6} {:>6}", "id", "lane", "dx", "y", "v", "v*", "lane*");
    for v in vs.into_iter().take(limit) {
        let _ = writeln!(
            out,
            "{:>4} {:>4} {:>8.2} {:>6.2} {:>6.2} {:>6.2} {:>6}",
            if v.id == state.ego_id { "E".to_string() } else { v.id.to_string() },
            v.lane,
            v.x - ego.x,
            v.y,
            v.speed,
            v.target_speed,
            v.target_lane,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::VehicleState;

    fn state() -> SimState {
        let v = |id, x: f64, lane: usize| VehicleState {
            id,
            x,
            y: lane as f64 * 4.0,
            speed: 25.0,
            target_speed: 25.0,
            lane,
            target_lane: lane,
        };
        SimState {
            t: 0,
            vehicles: vec![v(0, 0.0, 1), v(7, 20.0, 1), v(12, -30.0, 0), v(3, 500.0, 2)],
            ego_id: 0,
            failure: false,
            invalid: false,
        }
    }

    #[test]
    fn diagram_has_fixed_width_and_marks_vehicles() {
        let cfg = SimConfig::default();
        let view = View::default();
        let d = lane_diagram(&state(), &cfg, &view);
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), cfg.lane_count + 2);
        let width = lines[0].chars().count();
        assert!(lines.iter().take(cfg.lane_count + 1).skip(1).all(|l| l.starts_with('|')));
        assert_eq!(width, view.columns() + 2);
        assert!(lines[2].contains('E') && lines[2].contains('7'));
        assert!(lines[1].contains("12"));
        // far vehicle out of view
        assert!(!lines[3].contains('3'));
    }

    #[test]
    fn table_orders_by_distance() {
        let t = kinematic_table(&state(), 3);
        let rows: Vec<&str> = t.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].trim_start().starts_with('E'));
        assert!(rows[1].trim_start().starts_with('7'));
    }
}
