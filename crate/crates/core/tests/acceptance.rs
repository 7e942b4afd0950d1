//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero when any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use untwin_core::checkpoint::{CheckpointStore, StorePolicy};
use untwin_core::config::{pipeline_statistic, run_twin, Pipeline, RunConfig};
use untwin_core::engine::evaluate_mse;
use untwin_core::model::{gradient, loss, Arch, TrafficSample, TwinModel};
use untwin_core::oracle::{indistinguishability_probe, retrain_from_scratch, timed_median};
use untwin_core::rng::SeedTree;
use untwin_core::topology::{ClusterAssignment, ConnectivityMatrix, NdtNode, TopologyShift};
use untwin_core::untwin::{
    gamma_curve, noise_sigma, omega, perturb, perturbation_stream, phi_curve, pru, sru,
    PrivacyBudget,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn linf(a: &TwinModel, b: &TwinModel) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn small_config(n: usize, rounds: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default().with_num_ndts(n);
    cfg.rounds = rounds;
    cfg.seed = seed;
    cfg
}

fn oracle_equivalence() -> Outcome {
    // with three close NDTs the default threshold would take the whole network
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut cfg = small_config(3, 20, seed);
        cfg.untwin.theta = f64::INFINITY;
        cfg.untwin.noise_override = Some(0.0);
        cfg.untwin.force_t_star = Some(0);
        let run = run_twin(&cfg, Vec::new()).map_err(|e| e.to_string())?;
        let out = sru(&run.context(&cfg.untwin), 0).map_err(|e| e.to_string())?;
        let fed = run.federation();
        let scratch = retrain_from_scratch(
            &fed,
            &run.history.initial_model,
            &run.all_ndts(),
            &out.set.members,
            cfg.rounds,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(linf(&out.model, &scratch));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-9 && secs < 5.0,
        format!("max L∞ {worst:.3e} over 10 seeds in {secs:.2}s"),
    )
}

fn pru_reduces_to_sru() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let cfg = small_config(8, 60, seed);
        let run = run_twin(&cfg, Vec::new()).map_err(|e| e.to_string())?;
        let ctx = run.context(&cfg.untwin);
        let single = sru(&ctx, 2).map_err(|e| e.to_string())?;
        let one = ClusterAssignment::single(cfg.num_ndts());
        let parallel = pru(&ctx, &one, &[2]).map_err(|e| e.to_string())?;
        worst = worst.max(linf(&single.model, &parallel.model));
    }
    check(worst <= 1e-9, format!("max L∞ {worst:.3e} over 10 seeds"))
}

fn fixed_interval_counts() -> Outcome {
    let start = Instant::now();
    let model = TwinModel::zeros(Arch::default(), 6);
    let c = ConnectivityMatrix::zeros(4);
    let clusters = ClusterAssignment::single(4);
    let mut lines = Vec::new();
    let mut ok = true;
    for (p, want, reduction) in [(10u64, 100usize, 0.90), (50, 20, 0.98)] {
        let mut store = CheckpointStore::new(StorePolicy::fixed(p), &model, &c, &clusters)
            .map_err(|e| e.to_string())?;
        for t in 1..=1000 {
            store
                .observe(t, &model, &c, &clusters, false)
                .map_err(|e| e.to_string())?;
        }
        let r = store.storage_report();
        ok &= r.count == want && (r.reduction - reduction).abs() < 1e-12;
        lines.push(format!(
            "p={p}: {} stored, {:.1}% reduction",
            r.count,
            100.0 * r.reduction
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        ok && secs < 2.0,
        format!("{} in {secs:.2}s", lines.join("; ")),
    )
}

fn atac_behaviour() -> Outcome {
    let mut cfg = small_config(10, 1000, 4);
    let shift_rounds = [150u64, 320, 500, 680, 850];
    let base = NdtNode::line_layout(10, cfg.topology.spacing, cfg.topology.coverage_radius);
    cfg.topology.shifts = shift_rounds
        .iter()
        .enumerate()
        .flat_map(|(k, &round)| {
            let spread = if k % 2 == 0 { 0.4 } else { 1.0 };
            base.iter()
                .map(move |n| TopologyShift {
                    round,
                    node: n.id,
                    position: Some([n.position[0] * spread, n.position[1]]),
                    backhaul_capacity: None,
                    coverage_radius: None,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let run = run_twin(&cfg, Vec::new()).map_err(|e| e.to_string())?;
    let store = &run.store;
    let anchored: Vec<u64> = shift_rounds
        .iter()
        .copied()
        .filter(|&r| store.get(r).is_some_and(|c| c.anchor))
        .collect();
    let worst_extension = (0..=cfg.rounds)
        .map(|t| store.retrieve_proximal(t).extension)
        .max()
        .unwrap_or(0);
    let count = store.count();
    let ok = anchored.len() == shift_rounds.len()
        && count as f64 <= 0.15 * cfg.rounds as f64
        && worst_extension <= store.policy().p_max as u64;
    check(
        ok,
        format!(
            "anchors at {anchored:?} of {shift_rounds:?}; {count} stored ({:.1}% reduction); max extension {worst_extension} (p_max {})",
            100.0 * store.storage_report().reduction,
            store.policy().p_max
        ),
    )
}

fn rollback_speed() -> Outcome {
    let start = Instant::now();
    let mut cfg = small_config(10, 200, 1);
    cfg.training.eta = 0.02;
    cfg.untwin.theta = f64::INFINITY;
    let run = run_twin(&cfg, Vec::new()).map_err(|e| e.to_string())?;
    let ctx = run.context(&cfg.untwin);
    let (out, sru_secs) = timed_median(|| sru(&ctx, 4)).map_err(|e| e.to_string())?;
    let fed = run.federation();
    let all = run.all_ndts();
    let (_, scratch_secs) = timed_median(|| {
        retrain_from_scratch(
            &fed,
            &run.history.initial_model,
            &all,
            &out.set.members,
            cfg.rounds,
        )
    })
    .map_err(|e| e.to_string())?;
    let plan = &out.plan;
    let scheduled = plan.k + plan.replay_extension;
    let total = start.elapsed().as_secs_f64();
    let ok = plan.k * 4 <= cfg.rounds
        && sru_secs <= 0.5 * scratch_secs
        && out.rounds_executed == scheduled
        && scheduled < cfg.rounds
        && total < 60.0;
    check(
        ok,
        format!(
            "K={} extension={} executed={} of T={}; sru {sru_secs:.4}s vs scratch {scratch_secs:.4}s (ratio {:.2}); {total:.1}s",
            plan.k,
            plan.replay_extension,
            out.rounds_executed,
            cfg.rounds,
            sru_secs / scratch_secs
        ),
    )
}

fn sensitivity_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let budget = PrivacyBudget::new(1.0, 0.05).map_err(|e| e.to_string())?;
    let mut worst_rel = 0.0f64;
    let mut ok = true;
    for _ in 0..100 {
        let deltas: Vec<f64> = (0..200)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let eta = rng.random_range(0.0..0.05);
        let l = rng.random_range(0.0..5.0);
        let b = 1.0 + eta * l;
        let phi = phi_curve(&deltas, eta, l);
        let gamma = gamma_curve(&phi, &budget);
        ok &= phi.windows(2).all(|w| w[1] >= w[0]);
        ok &= gamma
            .windows(2)
            .zip(phi.windows(2))
            .all(|(g, p)| p[0] <= 0.0 || g[1] <= g[0]);
        for (t, &value) in phi.iter().enumerate().skip(1) {
            let direct: f64 = (0..t)
                .map(|tau| b.powi((t - 1 - tau) as i32) * deltas[tau])
                .sum();
            if direct > 0.0 {
                worst_rel = worst_rel.max((value - direct).abs() / direct);
            }
        }
    }
    check(
        ok && worst_rel <= 1e-9,
        format!("100 curves, monotone {ok}, max relative gap {worst_rel:.3e}"),
    )
}

fn gaussian_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let beta = rng.random_range(1e-6..0.999);
        let phi = rng.random_range(0.0..10.0);
        let eps = rng.random_range(0.01..10.0);
        let budget = PrivacyBudget::new(eps, beta).map_err(|e| e.to_string())?;
        let expected = omega(beta).map_err(|e| e.to_string())? * phi / eps;
        worst = worst.max((noise_sigma(phi, &budget, 0.0) - expected).abs());
    }
    let sigma = 0.37;
    let zeros = TwinModel::zeros(Arch::Linear { bias: true }, 99_999);
    let noisy = perturb(&zeros, sigma, &SeedTree::new(7), perturbation_stream(1))
        .map_err(|e| e.to_string())?;
    let n = noisy.dim() as f64;
    let mean = noisy.params().iter().sum::<f64>() / n;
    let std = (noisy
        .params()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0))
        .sqrt();
    let rel = (std / sigma - 1.0).abs();
    check(
        worst <= 1e-12 && rel <= 0.02,
        format!("max |σ − Ωφ/ε| {worst:.3e} on 1000 triples; empirical std {std:.5} vs σ {sigma} ({:.2}%) over {} draws", 100.0 * rel, noisy.dim()),
    )
}

fn directionality() -> Outcome {
    let mut higher = 0;
    let mut rows = Vec::new();
    for seed in 0..20 {
        let mut cfg = small_config(6, 150, seed);
        cfg.scenario.flow_means = Some(vec![300.0, 300.0, 100.0, 100.0, 100.0, 100.0]);
        let run = run_twin(&cfg, Vec::new()).map_err(|e| e.to_string())?;
        let c = &run.tracker.current;
        let pair = c.get(0, 1);
        let others = (2..6).map(|j| c.get(0, j)).fold(0.0, f64::max);
        if pair <= others {
            return Err(format!(
                "seed {seed}: neighbour Φ {pair:.3} not above the rest {others:.3}"
            ));
        }
        let mse = |theta: f64| -> Result<f64, String> {
            let mut u = cfg.untwin.clone();
            u.theta = theta;
            let out = sru(&run.context(&u), 0).map_err(|e| e.to_string())?;
            evaluate_mse(&out.model, &run.scenario.datasets, &[0]).map_err(|e| e.to_string())
        };
        let connected = mse(0.5 * (pair + others))?;
        let alone = mse(f64::INFINITY)?;
        if connected > alone {
            higher += 1;
        }
        rows.push(format!("{alone:.4}→{connected:.4}"));
    }
    check(
        higher >= 16,
        format!(
            "connected set higher in {higher}/20 seeds; target-only→connected MSE {}",
            rows[..3].join(", ")
        ),
    )
}

fn probe_calibration() -> Outcome {
    let cfg = RunConfig::default();
    let target = 3;
    let stats = |p: Pipeline, seeds: std::ops::Range<u64>| -> Result<Vec<f64>, String> {
        seeds
            .map(|s| pipeline_statistic(&cfg, s, target, p).map_err(|e| e.to_string()))
            .collect()
    };
    let mut self_pass = 0;
    let mut sru_pass = 0;
    for m in 0..20u64 {
        let base = m * 90;
        let a = stats(Pipeline::Sru, base..base + 30)?;
        let b = stats(Pipeline::Sru, base + 30..base + 60)?;
        let scratch = stats(Pipeline::Scratch, base + 60..base + 90)?;
        let tree = SeedTree::new(m);
        let same =
            indistinguishability_probe(&a, &b, 1000, 0.05, &tree, 0).map_err(|e| e.to_string())?;
        let vs = indistinguishability_probe(&a, &scratch, 1000, 0.05, &tree, 1)
            .map_err(|e| e.to_string())?;
        self_pass += usize::from(same.not_distinguishable);
        sru_pass += usize::from(vs.not_distinguishable);
    }
    check(
        self_pass >= 18 && sru_pass >= 16,
        format!("self-comparison not rejected {self_pass}/20; SRU vs scratch not rejected {sru_pass}/20"),
    )
}

fn central_difference(model: &TwinModel, batch: &[TrafficSample], h: f64) -> Vec<f64> {
    (0..model.dim())
        .map(|i| {
            let mut up = model.params().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let lu = loss(&model.with_params(up).unwrap(), batch).unwrap();
            let ld = loss(&model.with_params(down).unwrap(), batch).unwrap();
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_linear = 0.0f64;
    let mut worst_mlp = 0.0f64;
    for probe in 0..100 {
        let input_dim = rng.random_range(1..8);
        let batch: Vec<TrafficSample> = (0..rng.random_range(1..20))
            .map(|i| TrafficSample {
                features: (0..input_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
                label: rng.random_range(-1.0..1.0),
                sensor_id: 0,
                time_index: i,
            })
            .collect();
        for (arch, h) in [
            (
                Arch::Linear {
                    bias: probe % 2 == 0,
                },
                1e-3,
            ),
            (
                Arch::Mlp {
                    hidden: rng.random_range(1..6),
                },
                1e-5,
            ),
        ] {
            let model = TwinModel::init(arch, input_dim, &mut rng);
            let params: Vec<f64> = model
                .params()
                .iter()
                .map(|p| p + rng.random_range(-0.5..0.5))
                .collect();
            let model = model.with_params(params).unwrap();
            let analytic = gradient(&model, &batch).unwrap().values;
            let numeric = central_difference(&model, &batch, h);
            let gap = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            let rel = gap / scale;
            match arch {
                Arch::Linear { .. } => worst_linear = worst_linear.max(rel),
                Arch::Mlp { .. } => worst_mlp = worst_mlp.max(rel),
            }
        }
    }
    check(
        worst_linear <= 1e-10 && worst_mlp <= 1e-4,
        format!(
            "max relative error linear {worst_linear:.3e}, mlp {worst_mlp:.3e} over 100 probes"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("PRU reduces to SRU", pru_reduces_to_sru),
        ("fixed-interval checkpoint counts", fixed_interval_counts),
        ("ATAC anchors, budget and extension", atac_behaviour),
        ("rollback speed", rollback_speed),
        ("sensitivity-curve invariants", sensitivity_invariants),
        ("Gaussian calibration", gaussian_calibration),
        ("connected-set directionality", directionality),
        ("indistinguishability probe calibration", probe_calibration),
        ("gradient correctness", gradient_correctness),
    ];
    let mut failed = BTreeSet::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
                failed.insert(i + 1);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
