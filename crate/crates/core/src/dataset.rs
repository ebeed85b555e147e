//! Training data for the critical-state classifier: collection from random
//! or heuristic-guided simulation, scripted or interactive labeling,
//! class balancing and line-delimited JSON persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{featurize, FeatureVector, FEATURE_LEN};
use crate::error::{Error, Result};
use crate::highway::{self, HighwayProblem, HighwayStep, RewardModel};
use crate::render;
use crate::rewards::{RewardConfig, RewardKind};
use crate::seed;
use crate::sim::{EnvAction, SimState, Simulator};
use crate::solver::{self, MctsConfig};
use crate::sut::QNetwork;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    RandomSim,
    AstHeuristic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::RandomSim => "random-sim",
            Provenance::AstHeuristic => "ast-heuristic",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-sim" => Ok(Provenance::RandomSim),
            "ast-heuristic" => Ok(Provenance::AstHeuristic),
            other => Err(Error::config(
                "collect.mode",
                format!("unknown mode `{other}` (expected random-sim or ast-heuristic)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSample {
    pub feature: FeatureVector,
    pub snapshot: SimState,
    pub provenance: Provenance,
    pub episode: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Labeler {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: StateSample,
    pub label: u8,
    pub labeler: Labeler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub ttc_threshold: f64,
    pub gap_threshold: f64,
    /// Longitudinal margin beyond vehicle overlap during lane changes.
    pub lateral_gap_threshold: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 2.0,
            gap_threshold: 10.0,
            lateral_gap_threshold: 1.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("oracle.ttc_threshold", self.ttc_threshold),
            ("oracle.gap_threshold", self.gap_threshold),
            ("oracle.lateral_gap_threshold", self.lateral_gap_threshold),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Scripted surrogate labeler: `1` if the lead gap is short, the time to
/// collision with the leader is short, or the ego is changing lanes next to
/// a vehicle in the destination lane.
pub fn oracle_label(snapshot: &SimState, cfg: &OracleConfig, sim: &Simulator) -> u8 {
    let ego = snapshot.ego();
    if let Some(gap) = sim.lead_gap(snapshot) {
        if gap < cfg.gap_threshold {
            return 1;
        }
        let leader = sim.leader(snapshot).expect("a gap implies a leader");
        let closing = ego.speed - leader.speed;
        if closing > 0.0 && gap / closing < cfg.ttc_threshold {
            return 1;
        }
    }
    let changing = ego.target_lane != ego.lane || sim.lateral_velocity(ego) != 0.0;
    if changing {
        let reach = sim.config().vehicle_length + cfg.lateral_gap_threshold;
        let blocked = snapshot.vehicles.iter().any(|v| {
            v.id != snapshot.ego_id
                && (v.lane == ego.target_lane || v.target_lane == ego.target_lane)
                && (v.x - ego.x).abs() < reach
        });
        if blocked {
            return 1;
        }
    }
    0
}

pub fn label_with_oracle(samples: &[StateSample], cfg: &OracleConfig, sim: &Simulator) -> Vec<LabeledSample> {
    samples
        .iter()
        .map(|s| LabeledSample {
            label: oracle_label(&s.snapshot, cfg, sim),
            sample: s.clone(),
            labeler: Labeler::Oracle,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CollectSpec {
    pub mode: Provenance,
    pub episodes: usize,
    pub seed: u64,
    /// Search budget for heuristic-guided collection.
    pub mcts: MctsConfig,
    /// Episodes harvested from each heuristic search.
    pub episodes_per_search: usize,
}

/// One sample per decision step; the snapshot is the state reached by the
/// step and the feature pairs it with the actions that produced it.
fn push_samples(
    sim: &Simulator,
    steps: Vec<HighwayStep>,
    provenance: Provenance,
    episode: usize,
    out: &mut Vec<StateSample>,
) {
    for (k, step) in steps.into_iter().enumerate() {
        let obs = sim.observe_ego(&step.outcome.state);
        out.push(StateSample {
            feature: featurize(step.outcome.ego_action, &step.env_action, &obs),
            snapshot: step.outcome.state,
            provenance,
            episode,
            step: k,
        });
    }
}

pub fn collect(sim: &Simulator, sut: &QNetwork, spec: &CollectSpec) -> Result<Vec<StateSample>> {
    if spec.episodes < 1 {
        return Err(Error::config("collect.episodes", "must be at least 1"));
    }
    let reward = RewardConfig {
        kind: RewardKind::Heur,
        ..RewardConfig::default()
    };
    let model = RewardModel::Heur;
    let mut out = Vec::new();
    match spec.mode {
        Provenance::RandomSim => {
            for i in 0..spec.episodes {
                let problem = HighwayProblem::new(sim, sut, &model, &reward, seed::derive(spec.seed, 2 * i as u64))?;
                let mut rng = seed::rng(seed::derive(spec.seed, 2 * i as u64 + 1));
                let mut state = problem.initial()?;
                let mut steps = Vec::new();
                while !sim.is_terminal(&state) {
                    let step = problem.step_env(&state, &EnvAction::random(&mut rng))?;
                    state = step.outcome.state.clone();
                    steps.push(step);
                }
                push_samples(sim, steps, spec.mode, i, &mut out);
            }
        }
        Provenance::AstHeuristic => {
            let per = spec.episodes_per_search.max(1);
            let mut episode = 0;
            let mut j = 0u64;
            while episode < spec.episodes {
                let problem = HighwayProblem::new(sim, sut, &model, &reward, seed::derive(spec.seed, 2 * j))?;
                let mcts = MctsConfig {
                    seed: seed::derive(spec.seed, 2 * j + 1),
                    ..problem.mcts_config(&spec.mcts)
                };
                let mut seen = Vec::new();
                solver::search_with_observer(&problem, &mcts, &mut |e| seen.push(e.actions.clone()))?;
                let take = per.min(spec.episodes - episode).min(seen.len());
                for i in 0..take {
                    let idx = ((2 * i + 1) * seen.len()) / (2 * take);
                    let actions: Vec<EnvAction> = seen[idx].iter().map(highway::env_action).collect::<Result<_>>()?;
                    push_samples(sim, problem.simulate(&actions)?.1, spec.mode, episode, &mut out);
                    episode += 1;
                }
                j += 1;
            }
        }
    }
    Ok(out)
}

/// Down-samples the majority class to the minority count and shuffles.
pub fn balance(labeled: &[LabeledSample], seed: u64) -> Result<Vec<LabeledSample>> {
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = labeled.iter().cloned().partition(|s| s.label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Balance(format!(
            "need both labels, found {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let n = pos.len().min(neg.len());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(n);
    neg.truncate(n);
    pos.append(&mut neg);
    pos.shuffle(&mut rng);
    Ok(pos)
}

/// Prompts for a `0`/`1`/`skip` label per sample. Malformed answers
/// re-prompt; end of input keeps what was labeled so far.
pub fn interactive_label(
    samples: &[StateSample],
    sim: &Simulator,
    input: &mut dyn BufRead,
    output: &mut dyn Write,
) -> Result<Vec<LabeledSample>> {
    let view = render::View::default();
    let mut labeled = Vec::new();
    'samples: for (i, s) in samples.iter().enumerate() {
        writeln!(output, "\nsample {}/{} (episode {}, step {})", i + 1, samples.len(), s.episode, s.step)?;
        write!(output, "{}", render::lane_diagram(&s.snapshot, sim.config(), &view))?;
        write!(output, "{}", render::kinematic_table(&s.snapshot, 6))?;
        loop {
            write!(output, "dangerous? [1/0/skip]: ")?;
            output.flush()?;
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                break 'samples;
            }
            match line.trim() {
                "1" | "0" => {
                    labeled.push(LabeledSample {
                        sample: s.clone(),
                        label: u8::from(line.trim() == "1"),
                        labeler: Labeler::Human,
                    });
                    break;
                }
                "skip" | "s" => break,
                other => writeln!(output, "unrecognized answer `{other}`")?,
            }
        }
    }
    Ok(labeled)
}

/// One line of a dataset file. Unlabeled samples leave `label` and
/// `labeler` empty.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema: u32,
    provenance: Provenance,
    episode: usize,
    step: usize,
    label: Option<u8>,
    labeler: Option<Labeler>,
    features: Vec<f64>,
    snapshot: SimState,
}

impl Record {
    fn new(s: &StateSample, label: Option<(u8, Labeler)>) -> Self {
        Record {
            schema: SCHEMA_VERSION,
            provenance: s.provenance,
            episode: s.episode,
            step: s.step,
            label: label.map(|l| l.0),
            labeler: label.map(|l| l.1),
            features: s.feature.as_slice().to_vec(),
            snapshot: s.snapshot.clone(),
        }
    }

    fn into_sample(self) -> std::result::Result<(StateSample, Option<(u8, Labeler)>), String> {
        if self.schema != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema));
        }
        if self.features.len() != FEATURE_LEN {
            return Err(format!("expected {FEATURE_LEN} features, found {}", self.features.len()));
        }
        let label = match (self.label, self.labeler) {
            (Some(l), Some(who)) if l <= 1 => Some((l, who)),
            (Some(l), Some(_)) => return Err(format!("label must be 0 or 1, found {l}")),
            (None, None) => None,
            _ => return Err("label and labeler must be given together".into()),
        };
        let feature = FeatureVector::new(self.features).map_err(|e| e.to_string())?;
        let sample = StateSample {
            feature,
            snapshot: self.snapshot,
            provenance: self.provenance,
            episode: self.episode,
            step: self.step,
        };
        Ok((sample, label))
    }
}

fn write_records(path: &Path, records: impl Iterator<Item = Record>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

type ParsedRecord = (StateSample, Option<(u8, Labeler)>);

fn read_records(path: &Path) -> Result<Vec<ParsedRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(record.into_sample().map_err(parse_err)?);
    }
    Ok(out)
}

pub fn export_samples(samples: &[StateSample], path: &Path) -> Result<()> {
    write_records(path, samples.iter().map(|s| Record::new(s, None)))
}

pub fn import_samples(path: &Path) -> Result<Vec<StateSample>> {
    Ok(read_records(path)?.into_iter().map(|(s, _)| s).collect())
}

pub fn export(labeled: &[LabeledSample], path: &Path) -> Result<()> {
    write_records(
        path,
        labeled.iter().map(|l| Record::new(&l.sample, Some((l.label, l.labeler)))),
    )
}

pub fn import(path: &Path) -> Result<Vec<LabeledSample>> {
    read_records(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (sample, label))| {
            let (label, labeler) = label.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "sample is not labeled".into(),
            })?;
            Ok(LabeledSample { sample, label, labeler })
        })
        .collect()
}

/// Checks that every feature's observation part re-derives from its
/// snapshot and its action part is a valid one-hot layout.
pub fn audit_features(samples: &[StateSample], sim: &Simulator) -> Result<()> {
    for s in samples {
        let (ego, env) = s.feature.decode_actions().ok_or_else(|| {
            Error::Integrity(format!("episode {} step {}: malformed action encoding", s.episode, s.step))
        })?;
        if featurize(ego, &env, &sim.observe_ego(&s.snapshot)) != s.feature {
            return Err(Error::Integrity(format!(
                "episode {} step {}: feature does not match its snapshot",
                s.episode, s.step
            )));
        }
    }
    Ok(())
}
