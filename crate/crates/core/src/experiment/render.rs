use std::io::Write;

use crate::error::Result;
use crate::render::{kinematic_table, lane_diagram, View};
use crate::sim::SimConfig;
use crate::trajectory::TrajectoryRecord;

use super::report;

pub const RSS_MARK: &str = "[RSS-DANGEROUS]";
pub const ORACLE_MARK: &str = "[ORACLE-CRITICAL]";

/// One frame per decision step: the state the ego decided in, the actions
/// taken from it and the reward earned. Returns the number of frames.
pub fn render_trajectory(record: &TrajectoryRecord, cfg: &SimConfig, out: &mut dyn Write) -> Result<usize> {
    let view = View::default();
    let m = &record.meta;
    writeln!(
        out,
        "trajectory reward={} scenario={} search_seed={} rank={} outcome={:?} return={}",
        m.reward, m.scenario_seed, m.search_seed, m.rank, record.outcome, m.total_return
    )?;
    let critical = record.evaluation.as_ref().map(|e| &e.oracle_critical);
    for (k, (state, step)) in record.decision_states().zip(&record.steps).enumerate() {
        let mut flags = String::new();
        if step.rss.dangerous {
            flags.push(' ');
            flags.push_str(RSS_MARK);
        }
        if critical.is_some_and(|c| c[k]) {
            flags.push(' ');
            flags.push_str(ORACLE_MARK);
        }
        writeln!(
            out,
            "\n--- step {k} ego={} env={} reward={}{flags}",
            step.ego_action, step.env_action, step.reward
        )?;
        write!(out, "{}", lane_diagram(state, cfg, &view))?;
        write!(out, "{}", kinematic_table(state, 9))?;
    }
    Ok(record.steps.len())
}

/// Indices of evaluated failure trajectories whose dangerous proportion
/// falls in the fullest histogram bin (lowest bin on ties).
pub fn peak_trajectories(records: &[TrajectoryRecord]) -> Vec<usize> {
    let values: Vec<(usize, f64)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.outcome == crate::solver::Outcome::Failure)
        .filter_map(|(i, r)| r.evaluation.as_ref().map(|e| (i, e.rss.proportion_dangerous)))
        .collect();
    let hist = report::histogram(&values.iter().map(|v| v.1).collect::<Vec<_>>());
    let Some(peak) = (0..hist.len()).filter(|&b| hist[b] > 0).max_by(|&a, &b| hist[a].cmp(&hist[b]).then(b.cmp(&a))) else {
        return Vec::new();
    };
    values
        .into_iter()
        .filter(|(_, x)| report::bin_of(*x) == peak)
        .map(|(i, _)| i)
        .collect()
}
