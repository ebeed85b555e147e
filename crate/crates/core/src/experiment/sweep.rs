use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::validate_sizes;
use super::pipeline::{run_search, training_pairs, Pipeline};
use crate::classifier;
use crate::error::{Error, Result};
use crate::highway::{HighwayProblem, RewardModel};
use crate::rewards::RewardKind;
use crate::seed;
use crate::stats;
use crate::sut::QNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub seeds: Vec<u64>,
    /// Proportion of dangerous steps in each seed's best trajectory, when
    /// that trajectory is a failure.
    pub values: Vec<Option<f64>>,
    /// Median over the seeds that found a failure.
    pub metric: Option<f64>,
    /// Between-seed standard deviation of the same values.
    pub std_dev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, size: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.size == size)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,failures,seeds,metric,std_dev\n");
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.size,
                r.values.iter().flatten().count(),
                r.seeds.len(),
                opt(r.metric),
                opt(r.std_dev)
            );
        }
        out
    }
}

/// Trains one classifier per (size, seed) on a prefix of the balanced pool
/// and runs the critical-state search with it.
pub fn dataset_size_sweep(p: &Pipeline, sizes: &[usize], seeds: &[u64]) -> Result<SweepTable> {
    validate_sizes(sizes)?;
    if seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "must not be empty"));
    }
    let pool = p.balanced_pool("sweep")?;
    let needed = *sizes.iter().max().expect("validated non-empty");
    if pool.len() < needed {
        return Err(Error::Usage(format!(
            "sweep needs {needed} balanced samples but the labeled dataset yields {}",
            pool.len()
        )));
    }
    let sut = p.load_sut("sweep")?;
    let sim = p.simulator()?;
    let reward = p.reward_config(RewardKind::Hcs);
    let mut rows = Vec::new();
    for &size in sizes {
        let data = training_pairs(&pool[..size]);
        let values = seeds
            .par_iter()
            .map(|&s| -> Result<Option<f64>> {
                let hcs_cfg = classifier::HcsTrainConfig {
                    seed: seed::derive(p.cfg.hcs.seed, s),
                    ..p.cfg.hcs.clone()
                };
                let model = RewardModel::Hcs(classifier::train(&data, &hcs_cfg)?);
                best_failure_dangerous(p, &sim, &sut, &model, &reward, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let found: Vec<f64> = values.iter().flatten().copied().collect();
        rows.push(SweepRow {
            size,
            seeds: seeds.to_vec(),
            metric: stats::median(&found),
            std_dev: stats::std_dev(&found),
            values,
        });
    }
    let table = SweepTable { rows };
    std::fs::write(p.path("sweep.csv"), table.to_csv())?;
    std::fs::write(p.path("sweep.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(table)
}

fn best_failure_dangerous(
    p: &Pipeline,
    sim: &crate::sim::Simulator,
    sut: &QNetwork,
    model: &RewardModel,
    reward: &crate::rewards::RewardConfig,
    seed: u64,
) -> Result<Option<f64>> {
    let problem = HighwayProblem::new(sim, sut, model, reward, p.cfg.sim.seed)?;
    let file = run_search(&problem, &p.cfg, seed, p.digest(), "", None)?;
    if !file.header.failure_found {
        return Ok(None);
    }
    let best = file.best().expect("a failure implies a record");
    Ok(Some(best.rss_summary()?.proportion_dangerous))
}
