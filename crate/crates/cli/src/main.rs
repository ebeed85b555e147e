use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use astcrit_core::dataset::Provenance;
use astcrit_core::experiment::{
    compare_runs, dataset_size_sweep, peak_trajectories, render_trajectory, ExperimentConfig, Pipeline,
    TrajectoryFile,
};
use astcrit_core::RewardKind;

#[derive(Parser)]
#[command(name = "astcrit", version, about = "Adaptive stress testing of a highway driving policy")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the DQN system under test and report its idle-traffic collision rate.
    TrainSut,
    /// Collect snapshots for the critical-state dataset.
    Collect {
        #[arg(long)]
        mode: Option<Provenance>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label collected snapshots.
    Label {
        /// Use the scripted oracle (the default).
        #[arg(long, conflicts_with = "interactive")]
        oracle: bool,
        /// Ask for each label on the terminal.
        #[arg(long)]
        interactive: bool,
    },
    /// Train the critical-state classifier on the balanced labeled pool.
    TrainHcs,
    /// Run one search per seed and store the top trajectories.
    Search {
        #[arg(long)]
        reward: RewardKind,
        /// Seeds as a list (`0,3,7`) or a half-open range (`0..20`).
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
    },
    /// Replay stored trajectories and attach monitor and oracle results.
    Evaluate {
        #[arg(long)]
        reward: RewardKind,
    },
    /// Aggregate evaluated trajectories into a report.
    Report {
        #[arg(long)]
        reward: RewardKind,
    },
    /// Compare two reports; positive differences favor the second.
    Compare {
        #[arg(long, default_value = "heur")]
        base: RewardKind,
        #[arg(long, default_value = "hcs")]
        reward: RewardKind,
    },
    /// Retrain the classifier on growing dataset prefixes and search with each.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
    },
    /// Print a stored trajectory frame by frame.
    Render {
        #[arg(long)]
        reward: RewardKind,
        #[arg(long)]
        seed: u64,
        /// Rank within the seed's stored top trajectories.
        #[arg(long, default_value_t = 0, conflicts_with = "peak")]
        rank: usize,
        /// Render every failure trajectory in the fullest dangerous-proportion bin.
        #[arg(long)]
        peak: bool,
    },
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        (a..b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse().map_err(|e| format!("bad seed `{x}`: {e}")))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(Seeds(seeds))
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let p = Pipeline::new(cfg, cli.common.out.clone())?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match cli.command {
        Command::TrainSut => {
            let e = p.train_sut()?;
            writeln!(
                out,
                "trained SUT: {}/{} collisions in idle traffic, mean speed {:.2} m/s",
                e.collisions, e.episodes, e.mean_speed
            )?;
        }
        Command::Collect { mode, episodes, seed } => {
            let c = &p.cfg.collect;
            let mode = mode.unwrap_or(c.mode);
            let n = p.collect(mode, episodes.unwrap_or(c.episodes), seed.unwrap_or(c.seed))?;
            writeln!(out, "collected {n} snapshots ({})", mode.as_str())?;
        }
        Command::Label { oracle: _, interactive } => {
            let s = if interactive {
                let stdin = io::stdin();
                p.label_interactive(&mut stdin.lock(), &mut out)?
            } else {
                p.label_oracle()?
            };
            writeln!(out, "labeled {} snapshots, {} critical", s.total, s.positive)?;
        }
        Command::TrainHcs => {
            let s = p.train_hcs()?;
            writeln!(
                out,
                "trained classifier on {} balanced samples, final loss {:.4}",
                s.balanced_size, s.final_loss
            )?;
        }
        Command::Search { reward, seeds } => {
            let seeds = seeds.map_or_else(|| p.cfg.seeds.clone(), |s| s.0);
            let headers = p.search(reward, &seeds)?;
            let found = headers.iter().filter(|h| h.failure_found).count();
            writeln!(
                out,
                "{reward}: failure found in {found}/{} searches, trajectories in {}",
                headers.len(),
                p.trajectories_dir(reward).display()
            )?;
        }
        Command::Evaluate { reward } => {
            let n = p.evaluate(reward)?;
            writeln!(out, "{reward}: evaluated {n} trajectories")?;
        }
        Command::Report { reward } => {
            let r = p.report(reward)?;
            let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            writeln!(out, "{reward}: {}/{} seeds found a failure", r.failure_count, r.runs.len())?;
            writeln!(out, "median proportion dangerous {}", fmt(r.median_dangerous))?;
            writeln!(out, "median proportion improper  {}", fmt(r.median_improper))?;
            if let Some(c) = r.critical_percentage {
                writeln!(
                    out,
                    "critical-state %: min {:.1} q1 {:.1} median {:.1} q3 {:.1} max {:.1}",
                    c.min, c.q1, c.median, c.q3, c.max
                )?;
            }
            writeln!(out, "written to {}", p.report_path(reward, "json").display())?;
        }
        Command::Compare { base, reward } => {
            let c = compare_runs(&p.load_report(base)?, &p.load_report(reward)?)?;
            write!(out, "{}", c.to_csv())?;
        }
        Command::Sweep { sizes, seeds } => {
            let sizes = sizes.unwrap_or_else(|| p.cfg.sweep.sizes.clone());
            let seeds = seeds.map_or_else(|| p.cfg.sweep.seeds.clone(), |s| s.0);
            let table = dataset_size_sweep(&p, &sizes, &seeds)?;
            let csv = table.to_csv();
            std::fs::write(p.path("sweep.csv"), &csv)?;
            write!(out, "{csv}")?;
        }
        Command::Render { reward, seed, rank, peak } => {
            if peak {
                let mut records = Vec::new();
                for s in &p.cfg.seeds {
                    let path = p.trajectory_path(reward, *s);
                    if path.exists() {
                        records.extend(TrajectoryFile::read(&path)?.records);
                    }
                }
                let idx = peak_trajectories(&records);
                if idx.is_empty() {
                    bail!("no evaluated failure trajectories for `{reward}` (run `evaluate` first)");
                }
                for i in idx {
                    render_trajectory(&records[i], &p.cfg.sim, &mut out)?;
                    writeln!(out)?;
                }
            } else {
                let file = TrajectoryFile::read(&p.trajectory_path(reward, seed))?;
                let Some(record) = file.records.get(rank) else {
                    bail!("seed {seed} stored {} trajectories, rank {rank} is out of range", file.records.len());
                };
                render_trajectory(record, &p.cfg.sim, &mut out)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
