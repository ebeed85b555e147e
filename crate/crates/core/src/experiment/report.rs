use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::RewardKind;
use crate::stats::{self, FiveNumber, RankSum};

pub const BIN_WIDTH: f64 = 0.05;
pub const BINS: usize = 20;

/// Digest of one seed's search and the evaluation of its best trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDigest {
    pub seed: u64,
    pub failure_found: bool,
    pub best_return: f64,
    pub steps: usize,
    pub proportion_dangerous: f64,
    pub proportion_improper: f64,
    pub critical_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub reward: RewardKind,
    pub config_digest: String,
    pub runs: Vec<SeedDigest>,
    pub failure_count: usize,
    pub failure_rate: f64,
    pub bin_width: f64,
    /// Counts over failure trajectories, bin `i` covering `[i, i+1) * bin_width`
    /// with the last bin closed.
    pub histogram_dangerous: Vec<usize>,
    pub histogram_improper: Vec<usize>,
    pub median_dangerous: Option<f64>,
    pub median_improper: Option<f64>,
    pub critical_percentage: Option<FiveNumber>,
}

pub fn bin_of(x: f64) -> usize {
    // proportions are ratios of small integers; nudge exact edges like 0.15
    // into the bin they start
    ((x / BIN_WIDTH + 1e-9).floor().max(0.0) as usize).min(BINS - 1)
}

pub fn histogram(xs: &[f64]) -> Vec<usize> {
    let mut h = vec![0; BINS];
    for &x in xs {
        h[bin_of(x)] += 1;
    }
    h
}

impl RunReport {
    pub fn build(reward: RewardKind, config_digest: String, mut runs: Vec<SeedDigest>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Report("no trajectories found".into()));
        }
        runs.sort_by_key(|r| r.seed);
        let failures: Vec<&SeedDigest> = runs.iter().filter(|r| r.failure_found).collect();
        let dangerous: Vec<f64> = failures.iter().map(|r| r.proportion_dangerous).collect();
        let improper: Vec<f64> = failures.iter().map(|r| r.proportion_improper).collect();
        let critical: Vec<f64> = failures.iter().map(|r| r.critical_percentage).collect();
        Ok(Self {
            reward,
            config_digest,
            failure_count: failures.len(),
            failure_rate: failures.len() as f64 / runs.len() as f64,
            bin_width: BIN_WIDTH,
            histogram_dangerous: histogram(&dangerous),
            histogram_improper: histogram(&improper),
            median_dangerous: stats::median(&dangerous),
            median_improper: stats::median(&improper),
            critical_percentage: FiveNumber::of(&critical),
            runs,
        })
    }

    fn failures(&self) -> impl Iterator<Item = &SeedDigest> {
        self.runs.iter().filter(|r| r.failure_found)
    }

    pub fn dangerous(&self) -> Vec<f64> {
        self.failures().map(|r| r.proportion_dangerous).collect()
    }

    pub fn improper(&self) -> Vec<f64> {
        self.failures().map(|r| r.proportion_improper).collect()
    }

    pub fn critical(&self) -> Vec<f64> {
        self.failures().map(|r| r.critical_percentage).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Per-seed table.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from(
            "seed,failure_found,best_return,steps,proportion_dangerous,proportion_improper,critical_percentage\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed,
                r.failure_found,
                r.best_return,
                r.steps,
                r.proportion_dangerous,
                r.proportion_improper,
                r.critical_percentage
            );
        }
        out
    }

    /// Histogram table with raw and normalized counts.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,dangerous,improper,dangerous_density,improper_density\n");
        let n = self.failure_count.max(1) as f64;
        for i in 0..BINS {
            let _ = writeln!(
                out,
                "{:.2},{:.2},{},{},{},{}",
                i as f64 * BIN_WIDTH,
                (i + 1) as f64 * BIN_WIDTH,
                self.histogram_dangerous[i],
                self.histogram_improper[i],
                self.histogram_dangerous[i] as f64 / n,
                self.histogram_improper[i] as f64 / n
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub median_a: f64,
    pub median_b: f64,
    /// `median_b - median_a`.
    pub median_diff: f64,
    pub max_a: f64,
    pub max_b: f64,
    /// Shared mass of the two normalized histograms.
    pub histogram_overlap: f64,
    pub density_a: Vec<f64>,
    pub density_b: Vec<f64>,
    /// One-sided test that `b` is larger.
    pub rank_sum: RankSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reward_a: RewardKind,
    pub reward_b: RewardKind,
    pub failures_a: usize,
    pub failures_b: usize,
    pub dangerous: MetricComparison,
    pub improper: MetricComparison,
    pub critical_median_a: f64,
    pub critical_median_b: f64,
}

fn compare_metric(a: &[f64], b: &[f64]) -> MetricComparison {
    let density = |xs: &[f64]| -> Vec<f64> {
        histogram(xs)
            .into_iter()
            .map(|c| c as f64 / xs.len() as f64)
            .collect()
    };
    let (da, db) = (density(a), density(b));
    let max = |xs: &[f64]| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let median_a = stats::median(a).expect("non-empty");
    let median_b = stats::median(b).expect("non-empty");
    MetricComparison {
        median_a,
        median_b,
        median_diff: median_b - median_a,
        max_a: max(a),
        max_b: max(b),
        histogram_overlap: da.iter().zip(&db).map(|(x, y)| x.min(*y)).sum(),
        density_a: da,
        density_b: db,
        rank_sum: stats::rank_sum_greater(a, b).expect("non-empty"),
    }
}

pub fn compare_runs(a: &RunReport, b: &RunReport) -> Result<Comparison> {
    for r in [a, b] {
        if r.failure_count == 0 {
            return Err(Error::Report(format!(
                "report for `{}` has no failure trajectories",
                r.reward
            )));
        }
    }
    Ok(Comparison {
        reward_a: a.reward,
        reward_b: b.reward,
        failures_a: a.failure_count,
        failures_b: b.failure_count,
        dangerous: compare_metric(&a.dangerous(), &b.dangerous()),
        improper: compare_metric(&a.improper(), &b.improper()),
        critical_median_a: stats::median(&a.critical()).expect("non-empty"),
        critical_median_b: stats::median(&b.critical()).expect("non-empty"),
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let (a, b) = (self.reward_a, self.reward_b);
        let mut out = format!("metric,median_{a},median_{b},diff,max_{a},max_{b},overlap,u,z,p_one_sided\n");
        for (name, m) in [("proportion_dangerous", &self.dangerous), ("proportion_improper", &self.improper)] {
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{},{},{},{}",
                m.median_a,
                m.median_b,
                m.median_diff,
                m.max_a,
                m.max_b,
                m.histogram_overlap,
                m.rank_sum.u,
                m.rank_sum.z,
                m.rank_sum.p_value
            );
        }
        let _ = writeln!(
            out,
            "critical_percentage,{},{},{},,,,,,",
            self.critical_median_a,
            self.critical_median_b,
            self.critical_median_b - self.critical_median_a
        );
        out
    }
}
