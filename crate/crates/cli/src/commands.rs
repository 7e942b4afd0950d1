//! The `twin`, `untwin`, `compare` and `report` commands.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::Value;
use untwin_core::checkpoint::CheckpointStore;
use untwin_core::config::{resume_twin, run_probe, run_twin, Pipeline, RunConfig, TwinRun};
use untwin_core::engine::{evaluate_mse, read_history, write_history};
use untwin_core::model::TwinModel;
use untwin_core::oracle::{
    param_distance, retrain_from_scratch, runtime_report, timed_median, write_reports_csv,
    ExperimentReport, ProbeReport, RuntimeReport, MIN_PROBE_RUNS,
};
use untwin_core::untwin::{
    pru, sru, ClusterPlan, RollbackPlan, RollbackRule, UntwinConfig, UntwinSet,
};

use crate::artifacts::*;
use crate::error::{CliError, CliResult};

/// Untwinning overrides given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Overrides {
    pub noise: Option<f64>,
    pub force_t_star: Option<u64>,
    pub rollback_rule: Option<RollbackRule>,
}

impl Overrides {
    pub fn apply(&self, cfg: &UntwinConfig) -> untwin_core::Result<UntwinConfig> {
        let mut out = cfg.clone();
        if let Some(s) = self.noise {
            out.noise_override = Some(s);
        }
        if let Some(t) = self.force_t_star {
            out.force_t_star = Some(t);
        }
        if let Some(r) = self.rollback_rule {
            out.rollback_rule = r;
        }
        out.validate()?;
        Ok(out)
    }
}

fn write_csv(path: &Path, reports: &[ExperimentReport]) -> CliResult<()> {
    let f = fs::File::create(path).map_err(CliError::io(path))?;
    write_reports_csv(BufWriter::new(f), reports, false)?;
    Ok(())
}

#[derive(Serialize)]
struct Timing<'a> {
    config_hash: &'a str,
    command: &'a str,
    wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    runtime: Option<RuntimeReport>,
}

fn write_timing(
    dir: &Path,
    hash: &str,
    command: &str,
    wall_time: f64,
    runtime: Option<RuntimeReport>,
) -> CliResult<()> {
    write_json(
        &dir.join(TIMING),
        &Timing {
            config_hash: hash,
            command,
            wall_time,
            runtime,
        },
    )
}

fn report_row(
    run: &TwinRun,
    pipeline: &str,
    model: &TwinModel,
    targets: &[usize],
    remaining: &[usize],
) -> CliResult<ExperimentReport> {
    let ds = &run.scenario.datasets;
    let report = run.store.storage_report();
    Ok(ExperimentReport {
        config_hash: run.config.hash(),
        pipeline: pipeline.to_string(),
        seed: run.config.seed,
        mse_target: if targets.is_empty() {
            None
        } else {
            Some(evaluate_mse(model, ds, targets)?)
        },
        mse_remaining: evaluate_mse(model, ds, remaining)?,
        ped_target: None,
        ped_remaining: None,
        param_distance: None,
        rounds_executed: 0,
        checkpoint_count: report.count,
        checkpoint_bytes: report.bytes,
        replay_extension: 0,
        wall_time: 0.0,
    })
}

/// Forward twinning; writes the config, history, checkpoints, manifest and a
/// baseline metrics row.
pub fn twin(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let hash = cfg.hash();
    if out.join(MANIFEST).exists() {
        let m = read_manifest(out)?;
        check_hash(&m.config_hash, &hash, &format!("{}", out.display()))?;
    }
    info!(
        "twinning {} NDTs for {} rounds (config {hash})",
        cfg.num_ndts(),
        cfg.rounds
    );
    let run = run_twin(cfg, Vec::new())?;
    write_json(&out.join(CONFIG), cfg)?;
    let path = out.join(HISTORY);
    let mut f = BufWriter::new(fs::File::create(&path).map_err(CliError::io(&path))?);
    write_history(&mut f, &run.history, &hash)?;
    drop(f);
    run.store.persist(&out.join(CHECKPOINTS))?;
    let storage = run.store.storage_report();
    write_json(
        &out.join(MANIFEST),
        &Manifest {
            config_hash: hash.clone(),
            seed: cfg.seed,
            rounds: cfg.rounds,
            num_ndts: cfg.num_ndts(),
            checkpoint_count: storage.count,
        },
    )?;
    let mut row = report_row(
        &run,
        "twin",
        run.history.final_model(),
        &[],
        &run.all_ndts(),
    )?;
    row.rounds_executed = cfg.rounds;
    write_csv(&out.join(METRICS), &[row.clone()])?;
    write_timing(out, &hash, "twin", run.history.total_wall_time(), None)?;
    println!(
        "twin: {} rounds, final MSE {:.6}, {} checkpoints ({:.1}% reduction) -> {}",
        cfg.rounds,
        row.mse_remaining,
        storage.count,
        100.0 * storage.reduction,
        out.display()
    );
    Ok(())
}

/// Reloads a completed forward run from `out`, refusing artifacts written
/// under another config.
pub fn load_run(cfg: &RunConfig, out: &Path) -> CliResult<TwinRun> {
    let hash = cfg.hash();
    let manifest = read_manifest(out)?;
    check_hash(
        &manifest.config_hash,
        &hash,
        &out.join(MANIFEST).display().to_string(),
    )?;
    let path = out.join(HISTORY);
    let mut f = fs::File::open(&path)
        .map_err(|e| CliError::state(format!("cannot open {}: {e}", path.display())))?;
    let (history, history_hash) = read_history(&mut std::io::BufReader::new(&mut f))?;
    check_hash(&history_hash, &hash, &path.display().to_string())?;
    let dir = out.join(CHECKPOINTS);
    if !dir.join(untwin_core::checkpoint::INDEX_FILE).exists() {
        return Err(CliError::state(format!(
            "checkpoint index missing in {}",
            dir.display()
        )));
    }
    let store = CheckpointStore::load(&dir)?;
    Ok(resume_twin(cfg, history, store)?)
}

#[derive(Serialize)]
struct ModelFile<'a> {
    config_hash: &'a str,
    mode: &'a str,
    model: &'a TwinModel,
}

#[derive(Serialize)]
struct SruReport<'a> {
    config_hash: &'a str,
    mode: &'static str,
    target: usize,
    overrides: &'a Overrides,
    #[serde(rename = "S_u")]
    untwin_set: &'a BTreeSet<usize>,
    #[serde(flatten)]
    plan: &'a RollbackPlan,
    rounds_executed: u64,
    stopped_early: bool,
    remaining: &'a [usize],
    lipschitz: f64,
    growth_base: f64,
    set: &'a UntwinSet,
}

#[derive(Serialize)]
struct PruReport<'a> {
    config_hash: &'a str,
    mode: &'static str,
    requests: &'a [usize],
    overrides: &'a Overrides,
    #[serde(rename = "K_max")]
    k_max: u64,
    rounds_executed: u64,
    clusters: &'a [ClusterPlan],
}

/// Retrains from scratch without `exclude`; returns the model and its median
/// wall time.
fn oracle(run: &TwinRun, exclude: &BTreeSet<usize>) -> CliResult<(TwinModel, f64)> {
    let fed = run.federation();
    let all = run.all_ndts();
    Ok(timed_median(|| {
        retrain_from_scratch(
            &fed,
            &run.history.initial_model,
            &all,
            exclude,
            run.config.rounds,
        )
    })?)
}

fn with_oracle(
    row: &mut ExperimentReport,
    model: &TwinModel,
    scratch: &ExperimentReport,
    oracle_model: &TwinModel,
) -> CliResult<()> {
    row.ped_target = row
        .mse_target
        .zip(scratch.mse_target)
        .map(|(a, b)| (a - b).abs());
    row.ped_remaining = Some((row.mse_remaining - scratch.mse_remaining).abs());
    row.param_distance = Some(param_distance(model, oracle_model)?);
    Ok(())
}

pub fn untwin_sru(
    cfg: &RunConfig,
    out: &Path,
    target: usize,
    overrides: &Overrides,
    oracle_run: bool,
) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let run = load_run(cfg, out)?;
    let ucfg = overrides.apply(&cfg.untwin)?;
    let hash = cfg.hash();
    let ctx = run.context(&ucfg);
    let (res, untwin_secs) = if oracle_run {
        timed_median(|| sru(&ctx, target))?
    } else {
        let r = sru(&ctx, target)?;
        let t = r.wall_time;
        (r, t)
    };
    let targets = [target];
    let mut rows = vec![report_row(
        &run,
        "twin",
        run.history.final_model(),
        &targets,
        &res.remaining,
    )?];
    let mut row = report_row(&run, "sru", &res.model, &targets, &res.remaining)?;
    row.rounds_executed = res.rounds_executed;
    row.replay_extension = res.plan.replay_extension;
    let mut runtime = None;
    if oracle_run {
        let (scratch_model, scratch_secs) = oracle(&run, &res.set.members)?;
        let mut scratch = report_row(&run, "scratch", &scratch_model, &targets, &res.remaining)?;
        scratch.rounds_executed = cfg.rounds;
        with_oracle(&mut row, &res.model, &scratch, &scratch_model)?;
        runtime = Some(runtime_report(&res.plan, untwin_secs, scratch_secs));
        rows.push(row.clone());
        rows.push(scratch);
    } else {
        rows.push(row.clone());
    }
    write_json(
        &out.join(PLAN),
        &SruReport {
            config_hash: &hash,
            mode: "sru",
            target,
            overrides,
            untwin_set: &res.set.members,
            plan: &res.plan,
            rounds_executed: res.rounds_executed,
            stopped_early: res.stopped_early,
            remaining: &res.remaining,
            lipschitz: res.curve.lipschitz_estimate,
            growth_base: res.curve.growth_base,
            set: &res.set,
        },
    )?;
    write_json(
        &out.join(MODEL),
        &ModelFile {
            config_hash: &hash,
            mode: "sru",
            model: &res.model,
        },
    )?;
    write_csv(&out.join(METRICS), &rows)?;
    write_timing(out, &hash, "untwin sru", untwin_secs, runtime)?;
    println!(
        "sru: target {target}, S_u {:?}, K={} t*={} extension={} sigma={:.4e}, target MSE {:.6}{}",
        res.set.members,
        res.plan.k,
        res.plan.t_star,
        res.plan.replay_extension,
        res.plan.sigma,
        row.mse_target.unwrap_or(f64::NAN),
        row.ped_target
            .map_or_else(String::new, |p| format!(", PED {p:.3e}"))
    );
    Ok(())
}

pub fn untwin_pru(
    cfg: &RunConfig,
    out: &Path,
    requests: &[usize],
    overrides: &Overrides,
    oracle_run: bool,
) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let run = load_run(cfg, out)?;
    let ucfg = overrides.apply(&cfg.untwin)?;
    let hash = cfg.hash();
    let ctx = run.context(&ucfg);
    let clusters = &run.tracker.clusters;
    let (res, untwin_secs) = if oracle_run {
        timed_median(|| pru(&ctx, clusters, requests))?
    } else {
        let r = pru(&ctx, clusters, requests)?;
        let t = r.wall_time;
        (r, t)
    };
    let excluded: BTreeSet<usize> = res
        .clusters
        .iter()
        .flat_map(|c| c.sets.iter().flat_map(|s| s.members.iter().copied()))
        .collect();
    let remaining: Vec<usize> = run
        .all_ndts()
        .into_iter()
        .filter(|n| !excluded.contains(n))
        .collect();
    let mut rows = vec![report_row(
        &run,
        "twin",
        run.history.final_model(),
        requests,
        &remaining,
    )?];
    let mut row = report_row(&run, "pru", &res.model, requests, &remaining)?;
    row.rounds_executed = res.rounds_executed;
    row.replay_extension = res
        .clusters
        .iter()
        .filter_map(|c| c.plan.as_ref().map(|p| p.replay_extension))
        .max()
        .unwrap_or(0);
    let mut secs_scratch = None;
    if oracle_run {
        let (scratch_model, scratch_secs) = oracle(&run, &excluded)?;
        let mut scratch = report_row(&run, "scratch", &scratch_model, requests, &remaining)?;
        scratch.rounds_executed = cfg.rounds;
        with_oracle(&mut row, &res.model, &scratch, &scratch_model)?;
        secs_scratch = Some(scratch_secs);
        rows.push(row.clone());
        rows.push(scratch);
    } else {
        rows.push(row.clone());
    }
    write_json(
        &out.join(PLAN),
        &PruReport {
            config_hash: &hash,
            mode: "pru",
            requests,
            overrides,
            k_max: res.k_max,
            rounds_executed: res.rounds_executed,
            clusters: &res.clusters,
        },
    )?;
    write_json(
        &out.join(MODEL),
        &ModelFile {
            config_hash: &hash,
            mode: "pru",
            model: &res.model,
        },
    )?;
    write_csv(&out.join(METRICS), &rows)?;
    let runtime = secs_scratch.map(|s| RuntimeReport {
        untwin_seconds: untwin_secs,
        scratch_seconds: s,
        speedup: s / untwin_secs,
        rounds_ratio: if res.rounds_executed == 0 {
            f64::INFINITY
        } else {
            cfg.rounds as f64 / res.rounds_executed as f64
        },
    });
    write_timing(out, &hash, "untwin pru", untwin_secs, runtime)?;
    println!(
        "pru: requests {requests:?} over {} clusters, K_max={}, staggered rounds {}, target MSE {:.6}",
        res.clusters.len(),
        res.k_max,
        res.rounds_executed,
        row.mse_target.unwrap_or(f64::NAN)
    );
    for c in &res.clusters {
        if let Some(p) = &c.plan {
            println!(
                "  cluster {}: requests {:?}, K_a={}, t*={}, sigma={:.4e}",
                c.cluster, c.requests, c.k_a, p.t_star, p.sigma
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeFile<'a> {
    config_hash: &'a str,
    target: usize,
    pipeline_a: Pipeline,
    pipeline_b: Pipeline,
    seeds_a: &'a [u64],
    seeds_b: &'a [u64],
    overrides: &'a Overrides,
    #[serde(flatten)]
    report: &'a ProbeReport,
}

pub struct CompareOptions {
    pub seeds: usize,
    pub target: usize,
    pub self_comparison: bool,
    pub permutations: usize,
}

/// Runs the untwinning pipeline on `seeds` seeds and either retraining from
/// scratch or, in self-comparison mode, the same pipeline on as many other
/// seeds, then probes the two samples.
pub fn compare(
    cfg: &RunConfig,
    out: &Path,
    opts: &CompareOptions,
    overrides: &Overrides,
) -> CliResult<()> {
    if opts.seeds < MIN_PROBE_RUNS {
        return Err(untwin_core::Error::InsufficientSamples {
            needed: MIN_PROBE_RUNS,
            got: opts.seeds,
        }
        .into());
    }
    if opts.target >= cfg.num_ndts() {
        return Err(untwin_core::Error::invalid(format!("unknown NDT {}", opts.target)).into());
    }
    let _lock = OutputLock::acquire(out)?;
    let effective = RunConfig {
        untwin: overrides.apply(&cfg.untwin)?,
        ..cfg.clone()
    };
    let hash = cfg.hash();
    let n = opts.seeds as u64;
    let seeds_a: Vec<u64> = (cfg.seed..cfg.seed + n).collect();
    let seeds_b: Vec<u64> = (cfg.seed + n..cfg.seed + 2 * n).collect();
    let pipeline_b = if opts.self_comparison {
        Pipeline::Sru
    } else {
        Pipeline::Scratch
    };
    info!(
        "probing sru against {} on {} + {} seeds",
        pipeline_b.as_str(),
        n,
        n
    );
    let start = std::time::Instant::now();
    let report = run_probe(
        &effective,
        opts.target,
        (Pipeline::Sru, &seeds_a),
        (pipeline_b, &seeds_b),
        opts.permutations,
    )?;
    write_json(
        &out.join(PROBE),
        &ProbeFile {
            config_hash: &hash,
            target: opts.target,
            pipeline_a: Pipeline::Sru,
            pipeline_b,
            seeds_a: &seeds_a,
            seeds_b: &seeds_b,
            overrides,
            report: &report,
        },
    )?;
    let path = out.join(COMPARE);
    let mut text = String::from("# schema=1\nconfig_hash,pipeline,seed,mse_target\n");
    for (pipeline, seeds, stats) in [
        (Pipeline::Sru, &seeds_a, &report.statistics_a),
        (pipeline_b, &seeds_b, &report.statistics_b),
    ] {
        for (s, v) in seeds.iter().zip(stats) {
            text.push_str(&format!("{hash},{},{s},{v}\n", pipeline.as_str()));
        }
    }
    fs::write(&path, text).map_err(CliError::io(&path))?;
    write_timing(out, &hash, "compare", start.elapsed().as_secs_f64(), None)?;
    println!(
        "compare: sru vs {} over {} seeds each, KS {:.4}, p {:.4}: {}",
        pipeline_b.as_str(),
        n,
        report.ks_statistic,
        report.p_value,
        report.decision
    );
    Ok(())
}

/// Summarizes whatever artifacts `out` holds.
pub fn report(out: &Path) -> CliResult<String> {
    let mut lines = Vec::new();
    let mut found = false;
    if out.join(MANIFEST).exists() {
        let m = read_manifest(out)?;
        lines.push(format!(
            "twin: config {} seed {} rounds {} NDTs {} checkpoints {}",
            m.config_hash, m.seed, m.rounds, m.num_ndts, m.checkpoint_count
        ));
        found = true;
    }
    let plan_path = out.join(PLAN);
    if plan_path.exists() {
        let plan: Value = read_json(&plan_path)?;
        match plan["mode"].as_str() {
            Some("sru") => lines.push(format!(
                "sru: target {} S_u {} K={} t*={} extension={} sigma={}",
                plan["target"],
                plan["S_u"],
                plan["K"],
                plan["t_star"],
                plan["replay_extension"],
                plan["sigma"]
            )),
            Some("pru") => {
                lines.push(format!(
                    "pru: requests {} K_max={}",
                    plan["requests"], plan["K_max"]
                ));
                for c in plan["clusters"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter(|c| !c["plan"].is_null())
                {
                    lines.push(format!(
                        "  cluster {}: requests {} K_a={} t*={} sigma={}",
                        c["cluster"],
                        c["requests"],
                        c["K_a"],
                        c["plan"]["t_star"],
                        c["plan"]["sigma"]
                    ));
                }
            }
            _ => {
                return Err(CliError::state(format!(
                    "{} has no mode",
                    plan_path.display()
                )))
            }
        }
        found = true;
    }
    let metrics = out.join(METRICS);
    if metrics.exists() {
        let text = fs::read_to_string(&metrics).map_err(CliError::io(&metrics))?;
        lines.extend(
            text.lines()
                .filter(|l| !l.starts_with('#'))
                .map(|l| format!("  {l}")),
        );
    }
    let probe_path = out.join(PROBE);
    if probe_path.exists() {
        let p: Value = read_json(&probe_path)?;
        lines.push(format!(
            "probe: {} vs {} runs {} KS {} p {}: {}",
            p["pipeline_a"],
            p["pipeline_b"],
            p["runs"],
            p["ks_statistic"],
            p["p_value"],
            p["decision"]
        ));
        found = true;
    }
    if !found {
        return Err(CliError::state(format!(
            "no artifacts in {}",
            out.display()
        )));
    }
    Ok(lines.join("\n"))
}

/// The config for a command: `--config`, else the one saved in `out` by a
/// previous `twin`, else the defaults.
pub fn resolve_config(
    flag: Option<&Path>,
    out_flag: Option<&Path>,
    allow_saved: bool,
) -> CliResult<(RunConfig, PathBuf)> {
    let env = std::env::var(OUT_ENV).ok();
    match flag {
        Some(path) => {
            let cfg = load_config(path)?;
            let out = resolve_out(out_flag, env, cfg.output.as_deref());
            Ok((cfg, out))
        }
        None => {
            let out = resolve_out(out_flag, env, None);
            let saved = out.join(CONFIG);
            let cfg = if allow_saved && saved.exists() {
                load_config(&saved)?
            } else {
                RunConfig::default()
            };
            Ok((cfg, out))
        }
    }
}
