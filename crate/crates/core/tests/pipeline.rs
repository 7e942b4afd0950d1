use std::collections::BTreeSet;

use untwin_core::checkpoint::CheckpointStore;
use untwin_core::config::{run_twin, RunConfig};
use untwin_core::engine::{read_history, write_history};
use untwin_core::model::{Arch, TwinModel};
use untwin_core::oracle::retrain_from_scratch;
use untwin_core::topology::ClusterAssignment;
use untwin_core::untwin::{pru, pru_observed, sru};
use untwin_core::Error;

fn config(n: usize, rounds: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_num_ndts(n);
    cfg.rounds = rounds;
    cfg.seed = seed;
    cfg
}

fn linf(a: &TwinModel, b: &TwinModel) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn replay_from_any_recorded_round_reproduces_the_forward_run() {
    let cfg = config(5, 30, 3);
    let run = run_twin(&cfg, Vec::new()).unwrap();
    let fed = run.federation();
    let all = run.all_ndts();
    for start in [0, 7, 29] {
        let from = run.history.model_at(start).unwrap().clone();
        let out = fed.replay(from, start, cfg.rounds, &all, None).unwrap();
        assert_eq!(out.model.params(), run.history.final_model().params());
        assert_eq!(out.rounds_executed, cfg.rounds - start);
    }
}

#[test]
fn same_seed_gives_identical_histories() {
    let cfg = config(4, 15, 7);
    let a = run_twin(&cfg, Vec::new()).unwrap();
    let b = run_twin(&cfg, Vec::new()).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    write_history(&mut ba, &a.history, &cfg.hash()).unwrap();
    write_history(&mut bb, &b.history, &cfg.hash()).unwrap();
    assert_eq!(ba, bb);
    let (back, hash) = read_history(&mut ba.as_slice()).unwrap();
    assert_eq!(hash, cfg.hash());
    assert_eq!(
        back.final_model().params(),
        a.history.final_model().params()
    );
    assert_eq!(back.records.len(), a.history.records.len());

    let other = run_twin(&config(4, 15, 8), Vec::new()).unwrap();
    assert_ne!(
        other.history.final_model().params(),
        a.history.final_model().params()
    );
}

#[test]
fn sru_without_noise_from_round_zero_is_retraining_for_both_architectures() {
    for arch in [Arch::Linear { bias: true }, Arch::Mlp { hidden: 4 }] {
        for seed in 0..10 {
            let mut cfg = config(4, 12, seed);
            cfg.training.arch = arch;
            cfg.untwin.theta = f64::INFINITY;
            cfg.untwin.noise_override = Some(0.0);
            cfg.untwin.force_t_star = Some(0);
            let run = run_twin(&cfg, Vec::new()).unwrap();
            let out = sru(&run.context(&cfg.untwin), 1).unwrap();
            let scratch = retrain_from_scratch(
                &run.federation(),
                &run.history.initial_model,
                &run.all_ndts(),
                &out.set.members,
                cfg.rounds,
            )
            .unwrap();
            assert!(linf(&out.model, &scratch) <= 1e-9, "{arch:?} seed {seed}");
            assert_eq!(out.rounds_executed, cfg.rounds);
        }
    }
}

#[test]
fn sru_plan_is_consistent_with_the_store() {
    let cfg = config(8, 80, 2);
    let run = run_twin(&cfg, Vec::new()).unwrap();
    let out = sru(&run.context(&cfg.untwin), 5).unwrap();
    let plan = &out.plan;
    assert_eq!(plan.k + plan.t_safe, cfg.rounds);
    assert!(plan.t_star <= plan.t_safe);
    assert_eq!(plan.replay_extension, plan.t_safe - plan.t_star);
    assert!(plan.t_star == cfg.rounds || run.store.get(plan.t_star).is_some());
    assert_eq!(out.rounds_executed, plan.remap_rounds());
    assert!(out.set.members.contains(&5));
    assert!(out.remaining.iter().all(|n| !out.set.members.contains(n)));
    assert!(plan.sigma >= cfg.untwin.sigma_min);
}

#[test]
fn untwinning_everyone_is_an_error() {
    let mut cfg = config(3, 10, 0);
    cfg.untwin.theta = 0.0;
    let run = run_twin(&cfg, Vec::new()).unwrap();
    assert!(matches!(
        sru(&run.context(&cfg.untwin), 0),
        Err(Error::NothingRemains { .. })
    ));
}

#[test]
fn pru_holds_clusters_until_their_restart_round() {
    let mut cfg = config(12, 60, 5);
    cfg.untwin.theta = f64::INFINITY;
    let run = run_twin(&cfg, Vec::new()).unwrap();
    let clusters = ClusterAssignment::from_groups(
        &[vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10, 11]],
        12,
    )
    .unwrap();
    let ctx = run.context(&cfg.untwin);
    let mut seen: Vec<(u64, Vec<Option<TwinModel>>)> = Vec::new();
    let out = pru_observed(&ctx, &clusters, &[1, 6], |round, models| {
        seen.push((round, models.to_vec()))
    })
    .unwrap();
    let first = out
        .clusters
        .iter()
        .filter_map(|c| c.restart_round())
        .min()
        .unwrap();
    assert_eq!(out.rounds_executed, cfg.rounds - first);
    assert_eq!(seen.len() as u64, cfg.rounds - first);
    for plan in &out.clusters {
        let Some(restart) = plan.restart_round() else {
            assert!(plan.requests.is_empty());
            continue;
        };
        let held: Vec<&TwinModel> = seen
            .iter()
            .filter(|(r, _)| *r <= restart)
            .map(|(_, m)| m[plan.cluster].as_ref().unwrap())
            .collect();
        assert!(
            held.windows(2).all(|w| w[0].params() == w[1].params()),
            "cluster {} moved early",
            plan.cluster
        );
    }
    assert_eq!(out.k_max, out.clusters.iter().map(|c| c.k_a).max().unwrap());
}

#[test]
fn pru_with_one_cluster_is_sru() {
    for seed in 0..3 {
        let cfg = config(6, 40, seed);
        let run = run_twin(&cfg, Vec::new()).unwrap();
        let ctx = run.context(&cfg.untwin);
        let a = sru(&ctx, 3).unwrap();
        let b = pru(&ctx, &ClusterAssignment::single(6), &[3]).unwrap();
        assert!(linf(&a.model, &b.model) <= 1e-9);
        assert_eq!(b.k_max, a.plan.k);
    }
}

#[test]
fn pru_rejects_duplicates() {
    let cfg = config(6, 10, 0);
    let run = run_twin(&cfg, Vec::new()).unwrap();
    let ctx = run.context(&cfg.untwin);
    assert!(pru(&ctx, &ClusterAssignment::single(6), &[2, 2]).is_err());
}

#[test]
fn persisted_store_serves_the_same_retrievals() {
    let cfg = config(6, 120, 1);
    let run = run_twin(&cfg, Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.store.persist(dir.path()).unwrap();
    let back = CheckpointStore::load(dir.path()).unwrap();
    assert_eq!(back.rounds(), run.store.rounds());
    for t in [0, 13, 64, 119, 120] {
        let (a, b) = (run.store.retrieve_proximal(t), back.retrieve_proximal(t));
        assert_eq!(a.checkpoint.round, b.checkpoint.round);
        assert_eq!(a.checkpoint.model.params(), b.checkpoint.model.params());
    }
    let tracked: BTreeSet<u64> = run.store.rounds().into_iter().collect();
    assert!(tracked.contains(&0));
}

mod constructed {
    use super::*;
    use untwin_core::config::{pipeline_statistic, Pipeline};
    use untwin_core::engine::{evaluate_mse, run_forward, Federation, ForwardOptions};
    use untwin_core::oracle::indistinguishability_probe;
    use untwin_core::rng::SeedTree;
    use untwin_core::topology::ConnectivityMatrix;
    use untwin_core::untwin::{perturb, perturbation_stream, UntwinContext};

    #[test]
    fn target_that_never_participated_needs_no_rollback() {
        let mut cfg = config(5, 25, 4);
        cfg.untwin.theta = f64::INFINITY;
        let scenario = cfg.build_scenario().unwrap();
        let fed =
            Federation::new(&cfg.training, &scenario.datasets, SeedTree::new(cfg.seed)).unwrap();
        let mut opts = ForwardOptions::rounds(cfg.rounds);
        opts.participants = Some(vec![0, 1, 3, 4]);
        let history = run_forward(&fed, fed.initial_model(), opts).unwrap();
        let c = scenario.timeline.matrix_at(cfg.rounds).unwrap();
        let ctx = UntwinContext {
            fed,
            history: &history,
            store: None,
            connectivity: &c,
            cfg: &cfg.untwin,
        };
        let out = sru(&ctx, 2).unwrap();
        assert_eq!(out.plan.k, 0);
        assert!(out.curve.phi.iter().all(|&p| p == 0.0));
        assert_eq!(out.plan.sigma, cfg.untwin.sigma_min);
        let expected = perturb(
            history.final_model(),
            cfg.untwin.sigma_min,
            &fed.seeds,
            perturbation_stream(2),
        )
        .unwrap();
        assert_eq!(out.model.params(), expected.params());
    }

    #[test]
    fn removing_a_duplicate_keeps_accuracy_on_the_rest() {
        let mut cfg = config(6, 80, 2);
        cfg.untwin.theta = f64::INFINITY;
        let scenario = cfg.build_scenario().unwrap();
        let mut datasets = scenario.datasets.clone();
        datasets[5] = datasets[1].clone();
        let fed = Federation::new(&cfg.training, &datasets, SeedTree::new(cfg.seed)).unwrap();
        let history = run_forward(
            &fed,
            fed.initial_model(),
            ForwardOptions::rounds(cfg.rounds),
        )
        .unwrap();
        let c = ConnectivityMatrix::zeros(6);
        let ctx = UntwinContext {
            fed,
            history: &history,
            store: None,
            connectivity: &c,
            cfg: &cfg.untwin,
        };
        let out = sru(&ctx, 5).unwrap();
        assert_eq!(out.set.members, [5].into());
        let before = evaluate_mse(history.final_model(), &datasets, &out.remaining).unwrap();
        let after = evaluate_mse(&out.model, &datasets, &out.remaining).unwrap();
        assert!(
            (after - before).abs() <= 0.05 * before,
            "before {before} after {after}"
        );
    }

    #[test]
    fn noiseless_full_rollback_is_indistinguishable_with_zero_ks() {
        let mut cfg = config(4, 15, 0);
        cfg.untwin.theta = f64::INFINITY;
        cfg.untwin.noise_override = Some(0.0);
        cfg.untwin.force_t_star = Some(0);
        let seeds: Vec<u64> = (0..30).collect();
        let a: Vec<f64> = seeds
            .iter()
            .map(|&s| pipeline_statistic(&cfg, s, 1, Pipeline::Sru).unwrap())
            .collect();
        let b: Vec<f64> = seeds
            .iter()
            .map(|&s| pipeline_statistic(&cfg, s, 1, Pipeline::Scratch).unwrap())
            .collect();
        assert_eq!(a, b);
        let report = indistinguishability_probe(&a, &b, 200, 0.05, &SeedTree::new(0), 0).unwrap();
        assert_eq!(report.ks_statistic, 0.0);
        assert!(report.not_distinguishable);
    }

    #[test]
    fn skipping_noise_and_rollback_on_an_outlier_is_detected() {
        let mut cfg = config(6, 60, 0);
        cfg.scenario.flow_means = Some(vec![400.0, 100.0, 100.0, 100.0, 100.0, 100.0]);
        cfg.untwin.theta = f64::INFINITY;
        cfg.untwin.noise_override = Some(0.0);
        cfg.untwin.force_t_star = Some(59);
        let a: Vec<f64> = (0..30)
            .map(|s| pipeline_statistic(&cfg, s, 0, Pipeline::Sru).unwrap())
            .collect();
        let b: Vec<f64> = (30..60)
            .map(|s| pipeline_statistic(&cfg, s, 0, Pipeline::Scratch).unwrap())
            .collect();
        let report = indistinguishability_probe(&a, &b, 1000, 0.05, &SeedTree::new(0), 0).unwrap();
        assert!(report.p_value < 0.05, "p = {}", report.p_value);
        assert!(!report.not_distinguishable);
    }
}

#[test]
fn pru_remaps_the_rest_when_a_whole_cluster_is_untwinned() {
    let mut cfg = config(9, 50, 3);
    cfg.untwin.theta = f64::INFINITY;
    let run = run_twin(&cfg, Vec::new()).unwrap();
    let clusters =
        ClusterAssignment::from_groups(&[vec![0, 1], vec![2, 3, 4, 5], vec![6, 7, 8]], 9).unwrap();
    let out = pru(&run.context(&cfg.untwin), &clusters, &[0, 1]).unwrap();
    let dropped = &out.clusters[0];
    assert!(dropped.dropped);
    let t_star = dropped.plan.as_ref().unwrap().t_star;
    assert_eq!(out.rounds_executed, cfg.rounds - t_star);
    assert!(t_star == cfg.rounds || out.model.params() != run.history.final_model().params());
}
