use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{file_digest, ExperimentConfig};
use super::report::{RunReport, SeedDigest};
use crate::classifier::{self, HcsNetwork};
use crate::dataset::{self, CollectSpec, LabeledSample, Provenance};
use crate::error::{Error, Result};
use crate::highway::{self, HighwayProblem, RewardModel};
use crate::rewards::{RewardConfig, RewardKind};
use crate::sim::Simulator;
use crate::solver::MctsConfig;
use crate::sut::{self, PolicyEvaluation, QNetwork};
use crate::trajectory::{TrajectoryMeta, TrajectoryRecord};

pub const SUT_FILE: &str = "sut.qnet";
pub const LABELED_FILE: &str = "labeled.jsonl";
pub const HCS_FILE: &str = "hcs.model";

/// First line of every trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHeader {
    pub config_digest: String,
    pub sut_digest: String,
    pub hcs_digest: Option<String>,
    pub reward: RewardKind,
    pub scenario_seed: u64,
    pub search_seed: u64,
    pub best_return: f64,
    pub failure_found: bool,
    pub iterations_used: usize,
    pub episodes_seen: usize,
    pub steps_simulated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub header: SearchHeader,
    /// Best first.
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |e: serde_json::Error| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            };
            if i == 0 {
                header = Some(serde_json::from_str(&line).map_err(err)?);
            } else if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line).map_err(err)?);
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header".into(),
        })?;
        Ok(Self { header, records })
    }

    pub fn best(&self) -> Option<&TrajectoryRecord> {
        self.records.first()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    pub total: usize,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcsSummary {
    pub balanced_size: usize,
    pub final_loss: f64,
}

/// The output directory of one experiment and the stages that fill it.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    digest: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
        fs::create_dir_all(&dir)?;
        let digest = cfg.digest();
        Ok(Self { cfg, dir, digest })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn samples_path(&self, mode: Provenance) -> PathBuf {
        self.dir.join(format!("samples-{}.jsonl", mode.as_str()))
    }

    pub fn trajectories_dir(&self, kind: RewardKind) -> PathBuf {
        self.dir.join("trajectories").join(kind.as_str())
    }

    pub fn trajectory_path(&self, kind: RewardKind, seed: u64) -> PathBuf {
        self.trajectories_dir(kind).join(format!("seed-{seed:04}.jsonl"))
    }

    pub fn report_path(&self, kind: RewardKind, ext: &str) -> PathBuf {
        self.dir.join("reports").join(format!("report-{kind}.{ext}"))
    }

    fn require(&self, stage: &str, name: &str, what: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                stage: stage.into(),
                missing: format!("{what} at {} (run `{}` first)", p.display(), producer(name)),
            })
        }
    }

    pub fn simulator(&self) -> Result<Simulator> {
        Simulator::new(self.cfg.sim.clone())
    }

    pub fn train_sut(&self) -> Result<PolicyEvaluation> {
        let sim = self.simulator()?;
        let net = sut::train_dqn(&sim, &self.cfg.dqn)?;
        net.save(&self.path(SUT_FILE))?;
        sut::evaluate_policy(&sim, &net, 50, crate::seed::derive(self.cfg.dqn.seed, 7))
    }

    pub fn load_sut(&self, stage: &str) -> Result<QNetwork> {
        QNetwork::load(&self.require(stage, SUT_FILE, "a trained SUT")?)
    }

    pub fn collect(&self, mode: Provenance, episodes: usize, seed: u64) -> Result<usize> {
        let sut = self.load_sut("collect")?;
        let sim = self.simulator()?;
        let spec = CollectSpec {
            mode,
            episodes,
            seed,
            mcts: MctsConfig {
                iterations_per_step: self.cfg.collect.iterations_per_step,
                ..self.cfg.mcts.clone()
            },
            episodes_per_search: self.cfg.collect.episodes_per_search,
        };
        let samples = dataset::collect(&sim, &sut, &spec)?;
        dataset::export_samples(&samples, &self.samples_path(mode))?;
        Ok(samples.len())
    }

    fn sample_files(&self, stage: &str) -> Result<Vec<PathBuf>> {
        let files: Vec<PathBuf> = [Provenance::RandomSim, Provenance::AstHeuristic]
            .into_iter()
            .map(|m| self.samples_path(m))
            .filter(|p| p.exists())
            .collect();
        if files.is_empty() {
            return Err(Error::MissingArtifact {
                stage: stage.into(),
                missing: format!("collected samples in {} (run `collect` first)", self.dir.display()),
            });
        }
        Ok(files)
    }

    pub fn label_oracle(&self) -> Result<LabelSummary> {
        let sim = self.simulator()?;
        let mut labeled = Vec::new();
        for f in self.sample_files("label")? {
            let samples = dataset::import_samples(&f)?;
            dataset::audit_features(&samples, &sim)?;
            labeled.extend(dataset::label_with_oracle(&samples, &self.cfg.oracle, &sim));
        }
        self.write_labels(&labeled)
    }

    pub fn label_interactive(&self, input: &mut dyn BufRead, output: &mut dyn Write) -> Result<LabelSummary> {
        let sim = self.simulator()?;
        let mut samples = Vec::new();
        for f in self.sample_files("label")? {
            samples.extend(dataset::import_samples(&f)?);
        }
        let labeled = dataset::interactive_label(&samples, &sim, input, output)?;
        self.write_labels(&labeled)
    }

    fn write_labels(&self, labeled: &[LabeledSample]) -> Result<LabelSummary> {
        dataset::export(labeled, &self.path(LABELED_FILE))?;
        Ok(LabelSummary {
            total: labeled.len(),
            positive: labeled.iter().filter(|l| l.label == 1).count(),
        })
    }

    /// The class-balanced training pool in its fixed shuffled order.
    pub fn balanced_pool(&self, stage: &str) -> Result<Vec<LabeledSample>> {
        let labeled = dataset::import(&self.require(stage, LABELED_FILE, "a labeled dataset")?)?;
        dataset::balance(&labeled, self.cfg.collect.balance_seed)
    }

    pub fn train_hcs(&self) -> Result<HcsSummary> {
        let pool = self.balanced_pool("train-hcs")?;
        let data = training_pairs(&pool);
        let (net, losses) = classifier::train_with_history(&data, &self.cfg.hcs)?;
        net.save(&self.path(HCS_FILE))?;
        Ok(HcsSummary {
            balanced_size: pool.len(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
        })
    }

    pub fn reward_model(&self, kind: RewardKind, stage: &str) -> Result<(RewardModel, Option<String>)> {
        Ok(match kind {
            RewardKind::Heur => (RewardModel::Heur, None),
            RewardKind::Qcs => (RewardModel::Qcs, None),
            RewardKind::Hcs => {
                let p = self.require(stage, HCS_FILE, "a trained classifier")?;
                (RewardModel::Hcs(HcsNetwork::load(&p)?), Some(file_digest(&p)?))
            }
        })
    }

    pub fn reward_config(&self, kind: RewardKind) -> RewardConfig {
        RewardConfig {
            kind,
            ..self.cfg.reward.clone()
        }
    }

    /// One search per seed, all from the configured scenario.
    pub fn search(&self, kind: RewardKind, seeds: &[u64]) -> Result<Vec<SearchHeader>> {
        if seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        let sut_path = self.require("search", SUT_FILE, "a trained SUT")?;
        let sut = QNetwork::load(&sut_path)?;
        let sut_digest = file_digest(&sut_path)?;
        let (model, hcs_digest) = self.reward_model(kind, "search")?;
        let reward = self.reward_config(kind);
        let sim = self.simulator()?;
        let problem = HighwayProblem::new(&sim, &sut, &model, &reward, self.cfg.sim.seed)?;
        fs::create_dir_all(self.trajectories_dir(kind))?;
        let files: Vec<TrajectoryFile> = seeds
            .par_iter()
            .map(|&seed| {
                run_search(&problem, &self.cfg, seed, &self.digest, &sut_digest, hcs_digest.clone())
            })
            .collect::<Result<_>>()?;
        let mut headers = Vec::new();
        for f in files {
            f.write(&self.trajectory_path(kind, f.header.search_seed))?;
            headers.push(f.header);
        }
        Ok(headers)
    }

    fn trajectory_files(&self, kind: RewardKind, stage: &str) -> Result<Vec<PathBuf>> {
        let dir = self.trajectories_dir(kind);
        let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect(),
            Err(_) => Vec::new(),
        };
        files.sort();
        if files.is_empty() && stage != "report" {
            return Err(Error::MissingArtifact {
                stage: stage.into(),
                missing: format!("trajectories in {} (run `search` first)", dir.display()),
            });
        }
        Ok(files)
    }

    /// Re-simulates every stored trajectory, checks it bit for bit, and
    /// attaches monitor summaries and oracle labels.
    pub fn evaluate(&self, kind: RewardKind) -> Result<usize> {
        let sut_path = self.require("evaluate", SUT_FILE, "a trained SUT")?;
        let sut = QNetwork::load(&sut_path)?;
        let sut_digest = file_digest(&sut_path)?;
        let (model, hcs_digest) = self.reward_model(kind, "evaluate")?;
        let reward = self.reward_config(kind);
        let sim = self.simulator()?;
        let problem = HighwayProblem::new(&sim, &sut, &model, &reward, self.cfg.sim.seed)?;
        let mut count = 0;
        for path in self.trajectory_files(kind, "evaluate")? {
            let mut file = TrajectoryFile::read(&path)?;
            check_provenance(&file.header, &self.digest, &sut_digest, hcs_digest.as_deref(), &path)?;
            for r in &mut file.records {
                r.audit(&problem, &self.cfg.rss)?;
                r.evaluation = Some(r.evaluate(&problem, &self.cfg.oracle)?);
                count += 1;
            }
            file.write(&path)?;
        }
        Ok(count)
    }

    pub fn report(&self, kind: RewardKind) -> Result<RunReport> {
        let mut runs = Vec::new();
        for path in self.trajectory_files(kind, "report")? {
            let file = TrajectoryFile::read(&path)?;
            runs.push(seed_digest(&file).ok_or_else(|| Error::MissingArtifact {
                stage: "report".into(),
                missing: format!("evaluated trajectories in {} (run `evaluate` first)", path.display()),
            })?);
        }
        let report = RunReport::build(kind, self.digest.clone(), runs)?;
        fs::create_dir_all(self.dir.join("reports"))?;
        fs::write(self.report_path(kind, "json"), report.to_json())?;
        fs::write(self.report_path(kind, "csv"), report.runs_csv())?;
        fs::write(
            self.dir.join("reports").join(format!("report-{kind}-histogram.csv")),
            report.histogram_csv(),
        )?;
        Ok(report)
    }

    pub fn load_report(&self, kind: RewardKind) -> Result<RunReport> {
        let p = self.report_path(kind, "json");
        if !p.exists() {
            return Err(Error::MissingArtifact {
                stage: "compare".into(),
                missing: format!("{} (run `report --reward {kind}` first)", p.display()),
            });
        }
        Ok(serde_json::from_str(&fs::read_to_string(p)?)?)
    }
}

fn producer(name: &str) -> &'static str {
    match name {
        SUT_FILE => "train-sut",
        LABELED_FILE => "label",
        HCS_FILE => "train-hcs",
        _ => "the previous stage",
    }
}

pub fn training_pairs(pool: &[LabeledSample]) -> Vec<(classifier::FeatureVector, u8)> {
    pool.iter().map(|l| (l.sample.feature.clone(), l.label)).collect()
}

fn check_provenance(
    header: &SearchHeader,
    digest: &str,
    sut_digest: &str,
    hcs_digest: Option<&str>,
    path: &Path,
) -> Result<()> {
    let mismatch = |what: &str| {
        Err(Error::Replay(format!(
            "{}: {what} changed since the search was run",
            path.display()
        )))
    };
    if header.config_digest != digest {
        return mismatch("configuration");
    }
    if header.sut_digest != sut_digest {
        return mismatch("SUT model");
    }
    if header.hcs_digest.as_deref() != hcs_digest {
        return mismatch("classifier model");
    }
    Ok(())
}

/// Search from the scenario with `seed` and log the top trajectories.
pub fn run_search(
    problem: &HighwayProblem<'_>,
    cfg: &ExperimentConfig,
    seed: u64,
    config_digest: &str,
    sut_digest: &str,
    hcs_digest: Option<String>,
) -> Result<TrajectoryFile> {
    let mcts = MctsConfig {
        seed,
        ..cfg.mcts.clone()
    };
    let result = highway::search(problem, &mcts)?;
    let records = result
        .top
        .iter()
        .enumerate()
        .map(|(rank, e)| {
            let meta = TrajectoryMeta {
                config_digest: config_digest.into(),
                scenario_seed: problem.scenario_seed,
                search_seed: seed,
                reward: problem.model.kind(),
                rank,
                total_return: e.total_return,
            };
            TrajectoryRecord::from_episode(problem, e, &cfg.rss, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryFile {
        header: SearchHeader {
            config_digest: config_digest.into(),
            sut_digest: sut_digest.into(),
            hcs_digest,
            reward: problem.model.kind(),
            scenario_seed: problem.scenario_seed,
            search_seed: seed,
            best_return: result.best.total_return,
            failure_found: result.failure_found,
            iterations_used: result.iterations_used,
            episodes_seen: result.episodes_seen,
            steps_simulated: result.steps_simulated,
        },
        records,
    })
}

/// Digest of the best trajectory, if it has been evaluated.
pub fn seed_digest(file: &TrajectoryFile) -> Option<SeedDigest> {
    let best = file.best()?;
    let eval = best.evaluation.as_ref()?;
    Some(SeedDigest {
        seed: file.header.search_seed,
        failure_found: file.header.failure_found,
        best_return: file.header.best_return,
        steps: best.steps.len(),
        proportion_dangerous: eval.rss.proportion_dangerous,
        proportion_improper: eval.rss.proportion_improper,
        critical_percentage: eval.critical_percentage,
    })
}
