//! Synthetic spatially correlated traffic traces, lag-window datasets and
//! trace-level data similarity.
//!
//! Each NDT's reading follows an AR(1) process around its own base mean. The
//! innovation of NDT `i` at step `t` is
//!
//! ```text
//! e_i(t) = w_i * z_region(i)(t) + sqrt(1 - w_i^2) * eps_i(t)
//! w_i    = exp(-dist(i, anchor(i)) / spatial_corr_length)
//! ```
//!
//! where `z_region` is shared by every NDT assigned to the same regional anchor
//! and `eps_i` is idiosyncratic. Every series is drawn from its own substream,
//! so generation order never changes the output.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrafficSample;
use crate::rng::{Domain, SeedTree, StreamId};
use crate::topology::NdtNode;

pub const SIMILARITY_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Flow,
    Speed,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Flow => "flow",
            TraceKind::Speed => "speed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_ndts: usize,
    pub horizon: usize,
    /// Vehicles per interval.
    pub base_flow: f64,
    /// km/h.
    pub base_speed: f64,
    /// Per-NDT means are drawn uniformly in `base * (1 ± base_spread)`.
    pub base_spread: f64,
    /// Explicit per-NDT flow means, overriding `base_flow`/`base_spread`.
    pub flow_means: Option<Vec<f64>>,
    pub speed_means: Option<Vec<f64>>,
    pub ar_coefficient: f64,
    /// Stationary standard deviation as a fraction of each NDT's mean.
    pub noise_std: f64,
    /// Meters.
    pub spatial_corr_length: f64,
    /// Regional anchors; when absent one anchor is placed every
    /// `region_span` meters along the x extent of the layout.
    pub anchors: Option<Vec<[f64; 2]>>,
    pub region_span: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_ndts: 21,
            horizon: 240,
            base_flow: 120.0,
            base_speed: 95.0,
            base_spread: 0.25,
            flow_means: None,
            speed_means: None,
            ar_coefficient: 0.7,
            noise_std: 0.15,
            spatial_corr_length: 2000.0,
            anchors: None,
            region_span: 4000.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ar_coefficient > 0.0 && self.ar_coefficient < 1.0) {
            return Err(Error::invalid("ar_coefficient must lie in (0, 1)"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if !(self.spatial_corr_length > 0.0) || !(self.region_span > 0.0) {
            return Err(Error::invalid(
                "spatial_corr_length and region_span must be positive",
            ));
        }
        if self.horizon < 2 {
            return Err(Error::invalid("horizon must be at least 2"));
        }
        for (name, means) in [
            ("flow_means", &self.flow_means),
            ("speed_means", &self.speed_means),
        ] {
            if let Some(m) = means {
                if m.len() != self.num_ndts {
                    return Err(Error::invalid(format!("{name} must list one mean per NDT")));
                }
            }
        }
        Ok(())
    }

    fn anchor_points(&self, nodes: &[NdtNode]) -> Vec<[f64; 2]> {
        if let Some(a) = &self.anchors {
            if !a.is_empty() {
                return a.clone();
            }
        }
        let xs = nodes.iter().map(|n| n.position[0]);
        let lo = xs.clone().fold(f64::INFINITY, f64::min);
        let hi = xs.fold(f64::NEG_INFINITY, f64::max);
        let y = nodes.iter().map(|n| n.position[1]).sum::<f64>() / nodes.len() as f64;
        let count = (((hi - lo) / self.region_span).floor() as usize) + 1;
        (0..count)
            .map(|k| [lo + (k as f64 + 0.5) * self.region_span, y])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficTrace {
    pub sensor_id: usize,
    pub kind: TraceKind,
    pub readings: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NdtTraces {
    pub flow: TrafficTrace,
    pub speed: TrafficTrace,
}

impl NdtTraces {
    pub fn get(&self, kind: TraceKind) -> &TrafficTrace {
        match kind {
            TraceKind::Flow => &self.flow,
            TraceKind::Speed => &self.speed,
        }
    }
}

fn nearest_anchor(p: [f64; 2], anchors: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, a) in anchors.iter().enumerate() {
        let d = ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn normal_series(tree: &SeedTree, domain: Domain, idx: usize, len: usize) -> Vec<f64> {
    let mut rng = tree.stream(StreamId::new(domain, idx as u64, 0));
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn node_means(cfg: &ScenarioConfig, tree: &SeedTree, kind: TraceKind) -> Vec<f64> {
    let (explicit, base, k) = match kind {
        TraceKind::Flow => (&cfg.flow_means, cfg.base_flow, 0),
        TraceKind::Speed => (&cfg.speed_means, cfg.base_speed, 1),
    };
    if let Some(m) = explicit {
        return m.clone();
    }
    (0..cfg.num_ndts)
        .map(|i| {
            let u: f64 = tree
                .stream(StreamId::new(Domain::BaseMean, i as u64, k))
                .random_range(-1.0..=1.0);
            base * (1.0 + cfg.base_spread * u)
        })
        .collect()
}

/// Generates a flow and a speed trace for every node.
pub fn generate_traces(cfg: &ScenarioConfig, nodes: &[NdtNode]) -> Result<Vec<NdtTraces>> {
    cfg.validate()?;
    if nodes.len() != cfg.num_ndts {
        return Err(Error::invalid(format!(
            "scenario declares {} NDTs but topology has {}",
            cfg.num_ndts,
            nodes.len()
        )));
    }
    let tree = SeedTree::new(cfg.seed);
    let anchors = cfg.anchor_points(nodes);
    let assignment: Vec<(usize, f64)> = nodes
        .iter()
        .map(|n| nearest_anchor(n.position, &anchors))
        .collect();

    let build = |kind: TraceKind, regional: Domain, idio: Domain| -> Vec<TrafficTrace> {
        let means = node_means(cfg, &tree, kind);
        let shared: Vec<Vec<f64>> = (0..anchors.len())
            .map(|a| normal_series(&tree, regional, a, cfg.horizon))
            .collect();
        let innov_scale = (1.0 - cfg.ar_coefficient * cfg.ar_coefficient).sqrt();
        nodes
            .iter()
            .map(|node| {
                let i = node.id;
                let (anchor, dist) = assignment[i];
                let w = (-dist / cfg.spatial_corr_length).exp();
                let w_idio = (1.0 - w * w).max(0.0).sqrt();
                let own = normal_series(&tree, idio, i, cfg.horizon);
                let mean = means[i];
                let sd = cfg.noise_std * mean.abs() * innov_scale;
                let mut x = mean;
                let readings = (0..cfg.horizon)
                    .map(|t| {
                        if t > 0 {
                            let e = w * shared[anchor][t] + w_idio * own[t];
                            x = mean + cfg.ar_coefficient * (x - mean) + sd * e;
                        }
                        x.max(0.0)
                    })
                    .collect();
                TrafficTrace {
                    sensor_id: i,
                    kind,
                    readings,
                }
            })
            .collect()
    };
    let flows = build(TraceKind::Flow, Domain::RegionalFlow, Domain::IdioFlow);
    let speeds = build(TraceKind::Speed, Domain::RegionalSpeed, Domain::IdioSpeed);
    Ok(flows
        .into_iter()
        .zip(speeds)
        .map(|(flow, speed)| NdtTraces { flow, speed })
        .collect())
}

/// Sliding windows of `lag` readings predicting the next reading.
pub fn window_dataset(trace: &TrafficTrace, lag: usize) -> Result<Vec<TrafficSample>> {
    window_dataset_scaled(trace, lag, 1.0)
}

/// As [`window_dataset`], with every reading divided by `scale`.
pub fn window_dataset_scaled(
    trace: &TrafficTrace,
    lag: usize,
    scale: f64,
) -> Result<Vec<TrafficSample>> {
    let len = trace.readings.len();
    if lag == 0 || lag >= len {
        return Err(Error::invalid(format!("lag {lag} must lie in [1, {len})")));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid("scale must be positive"));
    }
    let r: Vec<f64> = trace.readings.iter().map(|v| v / scale).collect();
    Ok((0..len - lag)
        .map(|i| TrafficSample {
            features: r[i..i + lag].to_vec(),
            label: r[i + lag],
            sensor_id: trace.sensor_id,
            time_index: i + lag,
        })
        .collect())
}

/// Per-NDT training and evaluation windows, split by time order.
#[derive(Clone, Debug, PartialEq)]
pub struct NdtDataset {
    pub sensor_id: usize,
    pub train: Vec<TrafficSample>,
    pub eval: Vec<TrafficSample>,
}

pub fn split_dataset(
    trace: &TrafficTrace,
    lag: usize,
    scale: f64,
    train_fraction: f64,
) -> Result<NdtDataset> {
    let samples = window_dataset_scaled(trace, lag, scale)?;
    let cut = ((samples.len() as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(1, samples.len().saturating_sub(1).max(1));
    if cut >= samples.len() {
        return Err(Error::invalid(
            "trace too short to hold both train and eval windows",
        ));
    }
    let mut train = samples;
    let eval = train.split_off(cut);
    Ok(NdtDataset {
        sensor_id: trace.sensor_id,
        train,
        eval,
    })
}

/// `1 - W1 / R` between 32-point histograms over the joint range `R`.
///
/// Readings are assigned to the nearest of 32 equally spaced grid points
/// spanning `[min, max]`, so the end points of the range are represented
/// exactly and maximal transport yields similarity 0.
pub fn data_similarity(a: &TrafficTrace, b: &TrafficTrace) -> Result<f64> {
    if a.kind != b.kind {
        return Err(Error::invalid(format!(
            "cannot compare {} trace with {} trace",
            a.kind.as_str(),
            b.kind.as_str()
        )));
    }
    if a.readings.len() != b.readings.len() || a.readings.is_empty() {
        return Err(Error::invalid(
            "traces must be non-empty and of equal length",
        ));
    }
    let all = a.readings.iter().chain(&b.readings);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(1.0);
    }
    let step = range / (SIMILARITY_BINS - 1) as f64;
    let hist = |r: &[f64]| {
        let mut h = [0.0f64; SIMILARITY_BINS];
        for v in r {
            let k = (((v - lo) / step).round() as usize).min(SIMILARITY_BINS - 1);
            h[k] += 1.0;
        }
        let n = r.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (hist(&a.readings), hist(&b.readings));
    // W1 / range = step * sum|F_a - F_b| / range = sum|F_a - F_b| / (bins - 1)
    let mut cdf_gap = 0.0;
    let mut gap_sum = 0.0;
    for k in 0..SIMILARITY_BINS - 1 {
        cdf_gap += ha[k] - hb[k];
        gap_sum += f64::abs(cdf_gap);
    }
    Ok((1.0 - gap_sum / (SIMILARITY_BINS - 1) as f64).clamp(0.0, 1.0))
}

/// Symmetric table of [`data_similarity`] with ones on the diagonal.
pub fn similarity_table(traces: &[&TrafficTrace]) -> Result<Vec<Vec<f64>>> {
    let n = traces.len();
    let mut t = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = data_similarity(traces[i], traces[j])?;
            t[i][j] = s;
            t[j][i] = s;
        }
    }
    Ok(t)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    sensor_id: usize,
    time_index: usize,
    kind: TraceKind,
    value: f64,
}

/// Writes traces as `sensor_id,time_index,kind,value` rows.
pub fn write_traces_csv<W: Write>(writer: W, traces: &[TrafficTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for trace in traces {
        for (t, v) in trace.readings.iter().enumerate() {
            w.serialize(TraceRow {
                sensor_id: trace.sensor_id,
                time_index: t,
                kind: trace.kind,
                value: *v,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads traces written by [`write_traces_csv`] (or gathered elsewhere in the
/// same schema). Rows may come in any order; time indices must be dense.
pub fn read_traces_csv<R: Read>(reader: R) -> Result<Vec<TrafficTrace>> {
    use std::collections::BTreeMap;
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cells: BTreeMap<(usize, u8), BTreeMap<usize, f64>> = BTreeMap::new();
    for row in rdr.deserialize::<TraceRow>() {
        let row = row?;
        let k = match row.kind {
            TraceKind::Flow => 0,
            TraceKind::Speed => 1,
        };
        if cells
            .entry((row.sensor_id, k))
            .or_default()
            .insert(row.time_index, row.value)
            .is_some()
        {
            return Err(Error::Format(format!(
                "duplicate reading for sensor {} at t={}",
                row.sensor_id, row.time_index
            )));
        }
    }
    cells
        .into_iter()
        .map(|((sensor_id, k), series)| {
            if series.keys().enumerate().any(|(i, t)| i != *t) {
                return Err(Error::Format(format!(
                    "sensor {sensor_id} has gaps in time_index"
                )));
            }
            Ok(TrafficTrace {
                sensor_id,
                kind: if k == 0 {
                    TraceKind::Flow
                } else {
                    TraceKind::Speed
                },
                readings: series.into_values().collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(readings: Vec<f64>) -> TrafficTrace {
        TrafficTrace {
            sensor_id: 0,
            kind: TraceKind::Flow,
            readings,
        }
    }

    fn small_cfg(n: usize) -> ScenarioConfig {
        ScenarioConfig {
            num_ndts: n,
            horizon: 50,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_noise_gives_constant_series() {
        let nodes = NdtNode::line_layout(3, 800.0, 500.0);
        let cfg = ScenarioConfig {
            noise_std: 0.0,
            ..small_cfg(3)
        };
        for t in generate_traces(&cfg, &nodes).unwrap() {
            let first = t.flow.readings[0];
            assert!(t.flow.readings.iter().all(|v| *v == first));
            assert!(t.speed.readings.iter().all(|v| *v == t.speed.readings[0]));
        }
    }

    #[test]
    fn coincident_nodes_at_anchor_share_series() {
        let mut nodes = NdtNode::line_layout(2, 0.0, 500.0);
        nodes[1].position = nodes[0].position;
        let cfg = ScenarioConfig {
            base_spread: 0.0,
            anchors: Some(vec![nodes[0].position]),
            ..small_cfg(2)
        };
        let t = generate_traces(&cfg, &nodes).unwrap();
        assert_eq!(t[0].flow.readings, t[1].flow.readings);
        assert_eq!(t[0].speed.readings, t[1].speed.readings);
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let nodes = NdtNode::line_layout(4, 800.0, 500.0);
        let a = generate_traces(
            &ScenarioConfig {
                seed: 42,
                ..small_cfg(4)
            },
            &nodes,
        )
        .unwrap();
        let b = generate_traces(
            &ScenarioConfig {
                seed: 42,
                ..small_cfg(4)
            },
            &nodes,
        )
        .unwrap();
        let c = generate_traces(
            &ScenarioConfig {
                seed: 43,
                ..small_cfg(4)
            },
            &nodes,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].flow.readings, c[0].flow.readings);
        assert!(a.iter().all(|t| t.flow.readings.iter().all(|v| *v >= 0.0)));
    }

    #[test]
    fn rejects_bad_scenarios() {
        let nodes = NdtNode::line_layout(3, 800.0, 500.0);
        assert!(generate_traces(
            &ScenarioConfig {
                ar_coefficient: 1.0,
                ..small_cfg(3)
            },
            &nodes
        )
        .is_err());
        assert!(generate_traces(&small_cfg(4), &nodes).is_err());
    }

    #[test]
    fn window_examples() {
        let s = window_dataset(&trace(vec![1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].features.clone(), s[0].label), (vec![1.0, 2.0], 3.0));
        assert_eq!((s[1].features.clone(), s[1].label), (vec![2.0, 3.0], 4.0));
        assert_eq!(
            window_dataset(&trace(vec![1.0, 2.0, 3.0, 4.0]), 3)
                .unwrap()
                .len(),
            1
        );
        let z = window_dataset(&trace(vec![0.0; 3]), 1).unwrap();
        assert_eq!(z.len(), 2);
        assert!(z.iter().all(|s| s.label == 0.0 && s.features == vec![0.0]));
        assert!(window_dataset(&trace(vec![1.0, 2.0]), 2).is_err());
    }

    #[test]
    fn split_keeps_time_order() {
        let d = split_dataset(&trace((0..21).map(f64::from).collect()), 1, 10.0, 0.8).unwrap();
        assert_eq!(d.train.len(), 16);
        assert_eq!(d.eval.len(), 4);
        assert!(d.train.last().unwrap().time_index < d.eval[0].time_index);
        assert_eq!(d.eval[0].features, vec![1.6]);
    }

    // Exact 1-D W1 between equal-size empirical samples: mean gap of sorted values.
    fn sorted_w1(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn similarity_examples() {
        let t = trace(vec![3.0, 1.0, 4.0, 1.0, 5.0]);
        assert_eq!(data_similarity(&t, &t).unwrap(), 1.0);
        assert_eq!(
            data_similarity(&trace(vec![2.0; 4]), &trace(vec![9.0; 4])).unwrap(),
            0.0
        );
        let a = [0.0, 0.0, 1.0, 1.0];
        let b = [0.0, 1.0, 1.0, 1.0];
        let want = 1.0 - sorted_w1(&a, &b) / 1.0;
        let got = data_similarity(&trace(a.to_vec()), &trace(b.to_vec())).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.75).abs() < 1e-12);
        let speed = TrafficTrace {
            kind: TraceKind::Speed,
            ..trace(a.to_vec())
        };
        assert!(data_similarity(&speed, &trace(a.to_vec())).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let traces = vec![
            trace(vec![1.5, 2.5]),
            TrafficTrace {
                sensor_id: 1,
                kind: TraceKind::Speed,
                readings: vec![80.0, 81.25],
            },
        ];
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, &traces).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sensor_id,time_index,kind,value\n"));
        assert_eq!(read_traces_csv(buf.as_slice()).unwrap(), traces);
        let gappy = "sensor_id,time_index,kind,value\n0,0,flow,1\n0,2,flow,1\n";
        assert!(read_traces_csv(gappy.as_bytes()).is_err());
    }
}
