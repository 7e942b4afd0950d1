//! Ground truth and measurement: retrain-from-scratch, prediction-error
//! differences, two-sample indistinguishability probes and timing reports.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::engine::Federation;
use crate::error::{Error, Result};
use crate::model::{l2_distance, loss, TrafficSample, TwinModel};
use crate::rng::{Domain, SeedTree, StreamId};
use crate::untwin::RollbackPlan;

/// Minimum number of runs per pipeline for a probe.
pub const MIN_PROBE_RUNS: usize = 30;

/// Forward twinning from `initial` for `rounds` rounds with `exclude` removed
/// from `participants`, on the same per-(NDT, round) substreams.
pub fn retrain_from_scratch(
    fed: &Federation,
    initial: &TwinModel,
    participants: &[usize],
    exclude: &BTreeSet<usize>,
    rounds: u64,
) -> Result<TwinModel> {
    let kept: Vec<usize> = participants
        .iter()
        .copied()
        .filter(|n| !exclude.contains(n))
        .collect();
    if kept.is_empty() {
        return Err(Error::NothingRemains {
            excluded: exclude.len(),
            total: participants.len(),
        });
    }
    Ok(fed.replay(initial.clone(), 0, rounds, &kept, None)?.model)
}

/// `|MSE(a) − MSE(b)|` on `eval`.
pub fn ped(a: &TwinModel, b: &TwinModel, eval: &[TrafficSample]) -> Result<f64> {
    Ok((loss(a, eval)? - loss(b, eval)?).abs())
}

pub fn param_distance(a: &TwinModel, b: &TwinModel) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(l2_distance(a.params(), b.params()))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Permutation p-value of the KS statistic: `(1 + #{D_perm ≥ D_obs}) / (1 + n)`.
pub fn permutation_p_value(
    a: &[f64],
    b: &[f64],
    permutations: usize,
    seeds: &SeedTree,
    stream: u64,
) -> f64 {
    let observed = ks_statistic(a, b);
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = seeds.stream(StreamId::new(Domain::Permutation, stream, 0));
    let mut hits = 0usize;
    for _ in 0..permutations {
        pooled.shuffle(&mut rng);
        let (x, y) = pooled.split_at(a.len());
        // tolerance guards against ties that differ only by rounding
        if ks_statistic(x, y) >= observed - 1e-12 {
            hits += 1;
        }
    }
    (1 + hits) as f64 / (1 + permutations) as f64
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub runs: usize,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub level: f64,
    pub permutations: usize,
    /// `p ≥ level`.
    pub not_distinguishable: bool,
    pub decision: String,
    pub statistics_a: Vec<f64>,
    pub statistics_b: Vec<f64>,
}

/// Compares per-seed statistics of two pipelines.
pub fn indistinguishability_probe(
    a: &[f64],
    b: &[f64],
    permutations: usize,
    level: f64,
    seeds: &SeedTree,
    stream: u64,
) -> Result<ProbeReport> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "unequal run counts: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < MIN_PROBE_RUNS {
        return Err(Error::InsufficientSamples {
            needed: MIN_PROBE_RUNS,
            got: a.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("probe statistics must be finite"));
    }
    let ks = ks_statistic(a, b);
    let p = permutation_p_value(a, b, permutations, seeds, stream);
    let (mean_a, std_a) = mean_std(a);
    let (mean_b, std_b) = mean_std(b);
    let not_distinguishable = p >= level;
    Ok(ProbeReport {
        runs: a.len(),
        mean_a,
        std_a,
        mean_b,
        std_b,
        ks_statistic: ks,
        p_value: p,
        level,
        permutations,
        not_distinguishable,
        decision: if not_distinguishable {
            format!("not distinguishable at level {level}")
        } else {
            format!("distinguishable at level {level}")
        },
        statistics_a: a.to_vec(),
        statistics_b: b.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub untwin_seconds: f64,
    pub scratch_seconds: f64,
    /// `scratch / untwin` wall time.
    pub speedup: f64,
    /// `T / (K + replay_extension)`.
    pub rounds_ratio: f64,
}

pub fn runtime_report(
    plan: &RollbackPlan,
    untwin_seconds: f64,
    scratch_seconds: f64,
) -> RuntimeReport {
    let remap = plan.k + plan.replay_extension;
    RuntimeReport {
        untwin_seconds,
        scratch_seconds,
        speedup: scratch_seconds / untwin_seconds,
        rounds_ratio: if remap == 0 {
            f64::INFINITY
        } else {
            plan.rounds as f64 / remap as f64
        },
    }
}

/// Runs `f` four times, discards the first as warm-up and returns the last
/// result with the median wall time of the other three.
pub fn timed_median<T>(mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    f()?;
    let mut times = Vec::with_capacity(3);
    let mut last = None;
    for _ in 0..3 {
        let start = Instant::now();
        last = Some(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((last.expect("three runs"), times[1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub pipeline: String,
    pub seed: u64,
    /// Pooled over the untwinned targets; absent for a plain twinning run.
    pub mse_target: Option<f64>,
    pub mse_remaining: f64,
    pub ped_target: Option<f64>,
    pub ped_remaining: Option<f64>,
    pub param_distance: Option<f64>,
    pub rounds_executed: u64,
    pub checkpoint_count: usize,
    pub checkpoint_bytes: usize,
    pub replay_extension: u64,
    pub wall_time: f64,
}

const CSV_SCHEMA: &str = "# schema=1\n";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes reports as a versioned CSV; `wall_time` is left out when
/// `with_timing` is false so the file is byte-stable across runs.
pub fn write_reports_csv<W: Write>(
    mut w: W,
    reports: &[ExperimentReport],
    with_timing: bool,
) -> Result<()> {
    w.write_all(CSV_SCHEMA.as_bytes())?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec![
        "config_hash",
        "pipeline",
        "seed",
        "mse_target",
        "mse_remaining",
        "ped_target",
        "ped_remaining",
        "param_distance",
        "rounds_executed",
        "checkpoint_count",
        "checkpoint_bytes",
        "replay_extension",
    ];
    if with_timing {
        header.push("wall_time");
    }
    csv.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.config_hash.clone(),
            r.pipeline.clone(),
            r.seed.to_string(),
            opt(r.mse_target),
            r.mse_remaining.to_string(),
            opt(r.ped_target),
            opt(r.ped_remaining),
            opt(r.param_distance),
            r.rounds_executed.to_string(),
            r.checkpoint_count.to_string(),
            r.checkpoint_bytes.to_string(),
            r.replay_extension.to_string(),
        ];
        if with_timing {
            row.push(r.wall_time.to_string());
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn m(p: Vec<f64>) -> TwinModel {
        TwinModel::from_params(Arch::Linear { bias: false }, p.len(), p).unwrap()
    }

    fn naive_ks(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |v: &[f64], x: f64| v.iter().filter(|&&y| y <= x).count() as f64 / v.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn ped_examples() {
        let s = vec![TrafficSample {
            features: vec![1.0],
            label: 0.0,
            sensor_id: 0,
            time_index: 0,
        }];
        assert_eq!(ped(&m(vec![0.3]), &m(vec![0.3]), &s).unwrap(), 0.0);
        let a = m(vec![0.05f64.sqrt()]);
        let b = m(vec![0.03f64.sqrt()]);
        assert!((ped(&a, &b, &s).unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(ped(&a, &b, &s).unwrap(), ped(&b, &a, &s).unwrap());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(
            param_distance(&m(vec![1.0, 2.0]), &m(vec![1.0, 2.0])).unwrap(),
            0.0
        );
        assert_eq!(
            param_distance(&m(vec![0.0, 0.0]), &m(vec![3.0, 4.0])).unwrap(),
            5.0
        );
        assert!(param_distance(&m(vec![0.0]), &m(vec![3.0, 4.0])).is_err());
    }

    #[test]
    fn ks_matches_naive_definition() {
        let a = [0.1, 0.4, 0.4, 0.9, 1.3];
        let b = [0.2, 0.4, 1.0, 1.1];
        assert!((ks_statistic(&a, &b) - naive_ks(&a, &b)).abs() < 1e-15);
        assert_eq!(ks_statistic(&a, &a), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[5.0, 6.0]), 1.0);
    }

    #[test]
    fn probe_requires_thirty_runs() {
        let seeds = SeedTree::new(0);
        let v = vec![1.0; 29];
        assert!(matches!(
            indistinguishability_probe(&v, &v, 100, 0.05, &seeds, 0),
            Err(Error::InsufficientSamples {
                needed: 30,
                got: 29
            })
        ));
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let same = indistinguishability_probe(&a, &a, 200, 0.05, &seeds, 0).unwrap();
        assert_eq!(same.ks_statistic, 0.0);
        assert!(same.not_distinguishable);
        let shifted: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        let far = indistinguishability_probe(&a, &shifted, 200, 0.05, &seeds, 0).unwrap();
        assert_eq!(far.ks_statistic, 1.0);
        assert!(!far.not_distinguishable);
    }

    #[test]
    fn runtime_examples() {
        let plan = |k, ext| RollbackPlan {
            targets: vec![0],
            rounds: 200,
            k,
            t_safe: 200 - k,
            t_star: 200 - k - ext,
            replay_extension: ext,
            phi_at_safe: 0.0,
            sigma: 0.0,
            noise_stream: 0,
        };
        assert_eq!(runtime_report(&plan(200, 0), 1.0, 1.0).rounds_ratio, 1.0);
        assert_eq!(runtime_report(&plan(40, 10), 1.0, 2.0).rounds_ratio, 4.0);
        assert_eq!(runtime_report(&plan(40, 10), 1.0, 2.0).speedup, 2.0);
    }

    #[test]
    fn csv_has_schema_line() {
        let r = ExperimentReport {
            config_hash: "h".into(),
            pipeline: "sru".into(),
            seed: 1,
            mse_target: Some(0.5),
            mse_remaining: 0.25,
            ped_target: None,
            ped_remaining: Some(0.0),
            param_distance: None,
            rounds_executed: 3,
            checkpoint_count: 2,
            checkpoint_bytes: 16,
            replay_extension: 1,
            wall_time: 0.1,
        };
        let mut out = Vec::new();
        write_reports_csv(&mut out, &[r], false).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# schema=1"));
        assert!(lines.next().unwrap().starts_with("config_hash,pipeline"));
        assert_eq!(lines.next(), Some("h,sru,1,0.5,0.25,,0,,3,2,16,1"));
    }
}
