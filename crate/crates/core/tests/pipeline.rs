mod common;

use std::fs;

use astcrit_core::experiment::render::{ORACLE_MARK, RSS_MARK};
use astcrit_core::experiment::{compare_runs, render_trajectory, Pipeline, TrajectoryFile};
use astcrit_core::{Error, RewardKind};

fn staged(dir: &std::path::Path) -> Pipeline {
    let cfg = common::micro_config();
    let p = Pipeline::new(cfg.clone(), Some(dir.to_path_buf())).unwrap();
    p.train_sut().unwrap();
    p.collect(cfg.collect.mode, cfg.collect.episodes, cfg.collect.seed).unwrap();
    let labels = p.label_oracle().unwrap();
    assert!(labels.total > 0);
    p.train_hcs().unwrap();
    p
}

#[test]
fn micro_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = staged(dir.path());
    let seeds = p.cfg.seeds.clone();
    let mut reports = Vec::new();
    for kind in RewardKind::ALL {
        let headers = p.search(kind, &seeds).unwrap();
        assert_eq!(headers.len(), seeds.len());
        let files = fs::read_dir(p.trajectories_dir(kind)).unwrap().count();
        assert_eq!(files, seeds.len());
        assert!(p.evaluate(kind).unwrap() >= seeds.len());
        let report = p.report(kind).unwrap();
        assert_eq!(report.runs.len(), seeds.len());
        assert_eq!(report.config_digest, p.digest());
        assert_eq!(report.histogram_dangerous.iter().sum::<usize>(), report.failure_count);
        assert_eq!(p.load_report(kind).unwrap(), report);
        reports.push(report);
    }
    if reports.iter().all(|r| r.failure_count > 0) {
        let c = compare_runs(&reports[0], &reports[2]).unwrap();
        assert_eq!(c.to_csv().lines().count(), 4);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for dir in [a.path(), b.path()] {
        let p = staged(dir);
        p.search(RewardKind::Hcs, &[4]).unwrap();
        p.evaluate(RewardKind::Hcs).unwrap();
        p.report(RewardKind::Hcs).unwrap();
        outputs.push((
            fs::read(p.trajectory_path(RewardKind::Hcs, 4)).unwrap(),
            fs::read(p.report_path(RewardKind::Hcs, "json")).unwrap(),
            fs::read(p.path("hcs.model")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn render_emits_one_frame_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = staged(dir.path());
    p.search(RewardKind::Heur, &[0, 1]).unwrap();
    p.evaluate(RewardKind::Heur).unwrap();
    for seed in [0, 1] {
        let file = TrajectoryFile::read(&p.trajectory_path(RewardKind::Heur, seed)).unwrap();
        for record in &file.records {
            let mut out = Vec::new();
            let frames = render_trajectory(record, &p.cfg.sim, &mut out).unwrap();
            let text = String::from_utf8(out).unwrap();
            assert_eq!(frames, record.steps.len());
            assert_eq!(text.matches("\n--- step ").count(), frames);
            let dangerous = record.steps.iter().filter(|s| s.rss.dangerous).count();
            assert_eq!(text.matches(RSS_MARK).count(), dangerous);
            let critical = record.evaluation.as_ref().unwrap().oracle_critical.iter().filter(|c| **c).count();
            assert_eq!(text.matches(ORACLE_MARK).count(), critical);
        }
    }
}

#[test]
fn stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(common::micro_config(), Some(dir.path().to_path_buf())).unwrap();
    match p.report(RewardKind::Heur) {
        Err(Error::Report(msg)) => assert_eq!(msg, "no trajectories found"),
        other => panic!("expected a report error, got {other:?}"),
    }
    assert!(matches!(p.search(RewardKind::Heur, &[0]), Err(Error::MissingArtifact { .. })));
    assert!(matches!(p.train_hcs(), Err(Error::MissingArtifact { .. })));
    assert!(matches!(p.label_oracle(), Err(Error::MissingArtifact { .. })));
    assert!(matches!(p.search(RewardKind::Heur, &[]), Err(Error::Config { .. })));
    assert!(matches!(p.load_report(RewardKind::Qcs), Err(Error::MissingArtifact { .. })));
}

#[test]
fn tampered_trajectory_fails_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let p = staged(dir.path());
    p.search(RewardKind::Heur, &[0]).unwrap();
    let path = p.trajectory_path(RewardKind::Heur, 0);
    let mut file = TrajectoryFile::read(&path).unwrap();
    file.records[0].steps[0].reward += 1e-9;
    file.write(&path).unwrap();
    assert!(matches!(p.evaluate(RewardKind::Heur), Err(Error::Replay(_))));
}
