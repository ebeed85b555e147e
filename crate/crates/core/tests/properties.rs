//! Randomized invariants over the public API.

use proptest::prelude::*;

use astcrit_core::classifier::{featurize, HcsNetwork};
use astcrit_core::dataset::{self, Labeler, LabeledSample, Provenance, StateSample};
use astcrit_core::experiment::RunReport;
use astcrit_core::experiment::SeedDigest;
use astcrit_core::rss::{self, RssParams};
use astcrit_core::sim::{ConstantPolicy, ENV_AGENTS};
use astcrit_core::solver::{self, Outcome, SearchProblem, TreeNode};
use astcrit_core::{
    DiscreteAction, EgoObservation, EnvAction, HighwayProblem, MctsConfig, OracleConfig, QNetwork, RewardConfig,
    RewardKind, RewardModel, SimConfig, Simulator,
};

fn small_sim(vehicles: usize) -> Simulator {
    Simulator::new(SimConfig {
        vehicle_count: vehicles,
        road_length: 400.0,
        horizon: 12,
        ..SimConfig::default()
    })
    .unwrap()
}

fn env_actions() -> impl Strategy<Value = Vec<[u8; ENV_AGENTS]>> {
    prop::collection::vec(prop::array::uniform8(0u8..5), 1..12)
}

fn ego_action() -> impl Strategy<Value = DiscreteAction> {
    (0usize..5).prop_map(|i| DiscreteAction::from_index(i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rollouts_respect_physical_invariants(
        vehicles in 2usize..16,
        scenario in 0u64..50,
        ego in ego_action(),
        actions in env_actions(),
    ) {
        let sim = small_sim(vehicles);
        let cfg = sim.config().clone();
        let policy = ConstantPolicy(ego);
        let mut s = sim.init(scenario).unwrap();
        let mut failed = false;
        for a in &actions {
            if sim.is_terminal(&s) {
                break;
            }
            let out = sim.step_detailed(&s, &EnvAction::from_indices(a).unwrap(), &policy).unwrap();
            prop_assert_eq!(out.controlled.len(), ENV_AGENTS.min(vehicles - 1));
            prop_assert!(!out.controlled.contains(&s.ego_id));
            s = out.state;
            prop_assert_eq!(s.vehicles.len(), vehicles);
            prop_assert!(!(s.failure && s.invalid));
            prop_assert!(s.t <= cfg.horizon);
            if failed {
                prop_assert!(s.failure);
            }
            failed = s.failure;
            if s.failure {
                prop_assert!(sim.detect_collisions(&s).iter().any(|&(a, b)| a == s.ego_id || b == s.ego_id));
            }
            let y_max = cfg.lane_count as f64 * cfg.lane_width;
            for v in &s.vehicles {
                prop_assert!(v.speed >= 0.0 && v.speed <= cfg.speed_max);
                prop_assert!(v.y >= 0.0 && v.y <= y_max);
                prop_assert!(v.lane < cfg.lane_count && v.target_lane < cfg.lane_count);
                prop_assert!(v.lane.abs_diff(v.target_lane) <= 1);
            }
            let obs = sim.observe_ego(&s);
            prop_assert!(obs.flatten().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn rollouts_are_deterministic(scenario in 0u64..50, ego in ego_action(), actions in env_actions()) {
        let sim = small_sim(10);
        let policy = ConstantPolicy(ego);
        let run = || {
            let mut s = sim.init(scenario).unwrap();
            let mut trace = vec![s.clone()];
            for a in &actions {
                if sim.is_terminal(&s) {
                    break;
                }
                s = sim.step(&s, &EnvAction::from_indices(a).unwrap(), &policy).unwrap().0;
                trace.push(s.clone());
            }
            trace
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn rss_distance_bounds(vr in 0.0f64..40.0, vf in 0.0f64..40.0, l1 in -3.0f64..3.0, l2 in -3.0f64..3.0) {
        let p = RssParams::default();
        let d = rss::safe_longitudinal_distance(vr, vf, &p);
        prop_assert!(d >= 0.0);
        prop_assert!(rss::safe_longitudinal_distance(vr + 1.0, vf, &p) >= d);
        prop_assert!(rss::safe_lateral_distance(l1, l2, &p) >= p.lateral_margin);
    }

    #[test]
    fn rss_verdicts_are_consistent(
        scenario in 0u64..50,
        ego in ego_action(),
        actions in env_actions(),
    ) {
        let sim = small_sim(12);
        let p = RssParams::default();
        let mut s = sim.init(scenario).unwrap();
        let mut verdicts = Vec::new();
        for a in &actions {
            if sim.is_terminal(&s) {
                break;
            }
            let v = rss::evaluate_state(&s, ego, &p, sim.config());
            prop_assert!(!v.improper_response || v.dangerous);
            verdicts.push(v);
            s = sim.step(&s, &EnvAction::from_indices(a).unwrap(), &ConstantPolicy(ego)).unwrap().0;
        }
        if !verdicts.is_empty() {
            let sum = rss::summarize_verdicts(&verdicts).unwrap();
            prop_assert_eq!(sum.steps_total, verdicts.len());
            prop_assert!(sum.steps_improper <= sum.steps_dangerous && sum.steps_dangerous <= sum.steps_total);
            prop_assert!((0.0..=1.0).contains(&sum.proportion_dangerous));
            prop_assert!((0.0..=1.0).contains(&sum.proportion_improper));
        }
    }

    #[test]
    fn classifier_outputs_are_distributions(
        net_seed in 0u64..1000,
        pred_seed in 0u64..1000,
        obs in prop::collection::vec(-1.0f64..=1.0, 20),
        ego in ego_action(),
        env in prop::array::uniform8(0u8..5),
    ) {
        let net = HcsNetwork::new(0.15, net_seed);
        let f = featurize(ego, &EnvAction::from_indices(&env).unwrap(), &EgoObservation::from_flat(&obs).unwrap());
        prop_assert_eq!(f.as_slice().iter().take(45).filter(|&&x| x == 1.0).count(), 9);
        prop_assert!(f.as_slice().iter().take(45).all(|&x| x == 0.0 || x == 1.0));
        let out = net.forward(&f);
        prop_assert!((out[0] + out[1] - 1.0).abs() < 1e-9);
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        let pr = net.predict(&f, 10, pred_seed);
        prop_assert!((0.0..=1.0).contains(&pr.mu));
        prop_assert!(pr.sigma2 >= 0.0 && pr.sigma2 <= pr.mu * (1.0 - pr.mu) + 1e-12);
        prop_assert_eq!(net.predict(&f, 10, pred_seed), pr);
    }

    #[test]
    fn balance_is_an_equal_sub_multiset(labels in prop::collection::vec(0u8..2, 2..60), seed in 0u64..100) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let sim = small_sim(6);
        let state = sim.init(0).unwrap();
        let pool: Vec<LabeledSample> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledSample {
                sample: StateSample {
                    feature: featurize(DiscreteAction::Idle, &EnvAction::idle(), &sim.observe_ego(&state)),
                    snapshot: state.clone(),
                    provenance: Provenance::RandomSim,
                    episode: i,
                    step: 0,
                },
                label,
                labeler: Labeler::Oracle,
            })
            .collect();
        let out = dataset::balance(&pool, seed).unwrap();
        let pos = out.iter().filter(|l| l.label == 1).count();
        prop_assert_eq!(pos * 2, out.len());
        prop_assert_eq!(pos, labels.iter().filter(|&&l| l == 1).count().min(labels.iter().filter(|&&l| l == 0).count()));
        let mut episodes: Vec<usize> = out.iter().map(|l| l.sample.episode).collect();
        episodes.sort_unstable();
        episodes.dedup();
        prop_assert_eq!(episodes.len(), out.len());
    }

    #[test]
    fn oracle_is_a_function_of_the_snapshot(scenario in 0u64..200, steps in 0usize..6) {
        let sim = small_sim(14);
        let mut s = sim.init(scenario).unwrap();
        for _ in 0..steps {
            if sim.is_terminal(&s) {
                break;
            }
            s = sim.step(&s, &EnvAction::idle(), &ConstantPolicy(DiscreteAction::Idle)).unwrap().0;
        }
        let cfg = OracleConfig::default();
        let a = dataset::oracle_label(&s, &cfg, &sim);
        prop_assert!(a <= 1);
        prop_assert_eq!(a, dataset::oracle_label(&s.clone(), &cfg, &small_sim(14)));
    }

    #[test]
    fn histogram_mass_matches_failures(
        runs in prop::collection::vec((any::<bool>(), 0.0f64..=1.0, 0.0f64..=1.0), 1..30),
    ) {
        let digests: Vec<SeedDigest> = runs
            .iter()
            .enumerate()
            .map(|(i, &(failure, d, im))| SeedDigest {
                seed: i as u64,
                failure_found: failure,
                best_return: 0.0,
                steps: 5,
                proportion_dangerous: d,
                proportion_improper: im.min(d),
                critical_percentage: 100.0 * d,
            })
            .collect();
        let r = RunReport::build(RewardKind::Heur, "x".into(), digests.clone()).unwrap();
        let failures = runs.iter().filter(|r| r.0).count();
        prop_assert_eq!(r.failure_count, failures);
        prop_assert_eq!(r.histogram_dangerous.iter().sum::<usize>(), failures);
        prop_assert_eq!(r.histogram_improper.iter().sum::<usize>(), failures);
        for m in [r.median_dangerous, r.median_improper].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        let again = RunReport::build(RewardKind::Heur, "x".into(), digests).unwrap();
        prop_assert_eq!(r.to_json(), again.to_json());
    }
}

fn check_counts(node: &TreeNode) -> Result<(), TestCaseError> {
    let below: u64 = node.children.iter().map(|(_, c)| c.visits).sum();
    prop_assert_eq!(node.visits, below + node.own_visits, "depth {}", node.depth);
    prop_assert!(node.total_return.is_finite());
    for (_, c) in &node.children {
        check_counts(c)?;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn search_statistics_and_returns_are_consistent(scenario in 0u64..20, seed in 0u64..1000, iters in 2usize..8) {
        let sim = small_sim(8);
        let sut = QNetwork::new(1);
        let reward = RewardConfig { kind: RewardKind::Heur, ..RewardConfig::default() };
        let model = RewardModel::Heur;
        let problem = HighwayProblem::new(&sim, &sut, &model, &reward, scenario).unwrap();
        let cfg = MctsConfig { iterations_per_step: iters, seed, max_depth: sim.config().horizon, ..MctsConfig::default() };
        let (result, root) = solver::search_tree(&problem, &cfg, &mut |_| {}).unwrap();
        check_counts(&root)?;
        prop_assert_eq!(result.failure_found, result.best.outcome == Outcome::Failure);
        prop_assert!(result.top.windows(2).all(|w| w[0].total_return >= w[1].total_return));
        prop_assert!(result.best_trace.windows(2).all(|w| w[1] >= w[0]));

        // replaying the best episode reproduces its return
        let mut state = problem.initial_state().unwrap();
        let mut total = 0.0;
        let mut outcome = None;
        for a in &result.best.actions {
            let tr = problem.step(&state, a).unwrap();
            total += tr.reward;
            outcome = tr.terminal;
            state = tr.state;
        }
        prop_assert_eq!(total, result.best.total_return);
        prop_assert_eq!(outcome, Some(result.best.outcome));
    }
}
