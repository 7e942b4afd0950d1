//! Forward federated twinning: local mini-batch SGD at every NDT followed by
//! unweighted averaging, with per-round topology tracking and checkpointing.
//!
//! Every local update at `(ndt, round)` draws its mini-batches from its own
//! substream, so a round can be replayed in isolation and any subset of NDTs
//! reproduces exactly the updates it would have made inside a larger run.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::time::Instant;

use log::{debug, info};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointStore;
use crate::error::{Error, Result};
use crate::model::{
    clip, gradient_of, l2_distance, loss, sgd_step, Arch, TrafficSample, TwinModel,
};
use crate::rng::{Domain, SeedTree, StreamId};
use crate::synth::NdtDataset;
use crate::topology::{
    cluster_ndts, should_recluster, topology_drift, ClusterAssignment, ConnectivityMatrix,
    TopologyTimeline,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub arch: Arch,
    /// Learning rate η.
    pub eta: f64,
    /// Mini-batch size; a batch at least as large as the local data set means
    /// full-batch steps.
    pub batch_size: usize,
    /// Local SGD steps per round; `None` means one pass, `⌈|D_n| / batch⌉`.
    pub local_steps: Option<usize>,
    /// Gradient clipping radius; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            arch: Arch::default(),
            eta: 0.003,
            batch_size: 32,
            local_steps: None,
            clip: Some(10.0),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if self.batch_size == 0 || self.local_steps == Some(0) {
            return Err(Error::invalid("batch_size and local_steps must be >= 1"));
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip threshold must be positive"));
        }
        Ok(())
    }
}

/// Runs `steps` clipped mini-batch SGD steps on `data` starting from `global`.
pub fn local_map<R: Rng + ?Sized>(
    global: &TwinModel,
    data: &[TrafficSample],
    cfg: &TrainingConfig,
    steps: usize,
    rng: &mut R,
) -> Result<TwinModel> {
    if data.is_empty() {
        return Err(Error::invalid("local data set is empty"));
    }
    let full: Vec<&TrafficSample> = data.iter().collect();
    let mut model = global.clone();
    for _ in 0..steps {
        let g = if cfg.batch_size >= data.len() {
            gradient_of(&model, &full)?
        } else {
            let idx = sample(rng, data.len(), cfg.batch_size);
            let batch: Vec<&TrafficSample> = idx.iter().map(|i| &data[i]).collect();
            gradient_of(&model, &batch)?
        };
        let g = match cfg.clip {
            Some(c) => clip(&g, c),
            None => g,
        };
        model = sgd_step(&model, &g, cfg.eta)?;
    }
    Ok(model)
}

/// Unweighted coordinate-wise mean.
///
/// Each coordinate is summed in sorted order, relative to its smallest value,
/// so the result does not depend on the order of `models` and identical
/// inputs come back bit-for-bit.
pub fn aggregate(models: &[&TwinModel]) -> Result<TwinModel> {
    let first = *models.first().ok_or(Error::NothingRemains {
        excluded: 0,
        total: 0,
    })?;
    if let Some(m) = models.iter().find(|m| !m.same_shape(first)) {
        return Err(Error::invalid(format!(
            "cannot aggregate {} model of dim {} with {} model of dim {}",
            m.arch().tag(),
            m.dim(),
            first.arch().tag(),
            first.dim()
        )));
    }
    let k = models.len() as f64;
    let mut column = Vec::with_capacity(models.len());
    let params = (0..first.dim())
        .map(|i| {
            column.clear();
            column.extend(models.iter().map(|m| m.params()[i]));
            column.sort_by(f64::total_cmp);
            let base = column[0];
            base + column.iter().map(|v| v - base).sum::<f64>() / k
        })
        .collect();
    let version = models.iter().map(|m| m.version()).max().unwrap_or(0);
    let mut out = TwinModel::from_params(first.arch(), first.input_dim(), params)?;
    out.set_version(version + 1);
    Ok(out)
}

/// Pooled evaluation MSE over the listed NDTs.
pub fn evaluate_mse(model: &TwinModel, datasets: &[NdtDataset], subset: &[usize]) -> Result<f64> {
    let pooled: Vec<TrafficSample> = subset
        .iter()
        .flat_map(|&n| datasets[n].eval.iter().cloned())
        .collect();
    if pooled.is_empty() {
        return Err(Error::invalid(
            "no evaluation samples for the requested NDTs",
        ));
    }
    loss(model, &pooled)
}

/// Stops a replay once the global model moves less than `tolerance` for
/// `patience` consecutive rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStop {
    pub tolerance: f64,
    pub patience: u64,
}

impl Default for ConvergenceStop {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            patience: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReplayOutcome {
    pub model: TwinModel,
    pub rounds_executed: u64,
    pub stopped_early: bool,
}

/// Training context shared by forward twinning, replays and retraining.
#[derive(Clone, Copy, Debug)]
pub struct Federation<'a> {
    pub cfg: &'a TrainingConfig,
    pub datasets: &'a [NdtDataset],
    pub seeds: SeedTree,
}

impl<'a> Federation<'a> {
    pub fn new(
        cfg: &'a TrainingConfig,
        datasets: &'a [NdtDataset],
        seeds: SeedTree,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(i) = datasets.iter().position(|d| d.train.is_empty()) {
            return Err(Error::invalid(format!("NDT {i} has no training samples")));
        }
        Ok(Self {
            cfg,
            datasets,
            seeds,
        })
    }

    pub fn num_ndts(&self) -> usize {
        self.datasets.len()
    }

    pub fn input_dim(&self) -> usize {
        self.datasets[0].train[0].features.len()
    }

    pub fn initial_model(&self) -> TwinModel {
        let mut rng = self.seeds.stream(StreamId::new(Domain::ModelInit, 0, 0));
        TwinModel::init(self.cfg.arch, self.input_dim(), &mut rng)
    }

    pub fn local_steps(&self, ndt: usize) -> usize {
        self.cfg
            .local_steps
            .unwrap_or_else(|| self.datasets[ndt].train.len().div_ceil(self.cfg.batch_size))
    }

    pub fn local_update(&self, ndt: usize, round: u64, start: &TwinModel) -> Result<TwinModel> {
        let mut rng = self.seeds.batch_stream(ndt, round);
        local_map(
            start,
            &self.datasets[ndt].train,
            self.cfg,
            self.local_steps(ndt),
            &mut rng,
        )
    }

    /// Local maps of `participants` for `round`, in participant order.
    pub fn run_round(
        &self,
        round: u64,
        global: &TwinModel,
        participants: &[usize],
    ) -> Result<Vec<(usize, TwinModel)>> {
        participants
            .iter()
            .map(|&n| {
                if n >= self.num_ndts() {
                    return Err(Error::invalid(format!("unknown NDT {n}")));
                }
                Ok((n, self.local_update(n, round, global)?))
            })
            .collect()
    }

    /// Replays rounds `start_round + 1 ..= end_round` over `participants`.
    pub fn replay(
        &self,
        start: TwinModel,
        start_round: u64,
        end_round: u64,
        participants: &[usize],
        stop: Option<ConvergenceStop>,
    ) -> Result<ReplayOutcome> {
        if participants.is_empty() {
            return Err(Error::NothingRemains {
                excluded: self.num_ndts(),
                total: self.num_ndts(),
            });
        }
        let mut model = start;
        let mut calm = 0u64;
        let mut executed = 0u64;
        for t in start_round + 1..=end_round {
            let locals = self.run_round(t, &model, participants)?;
            let next = aggregate(&locals.iter().map(|(_, m)| m).collect::<Vec<_>>())?;
            executed += 1;
            if let Some(s) = stop {
                calm = if l2_distance(next.params(), model.params()) < s.tolerance {
                    calm + 1
                } else {
                    0
                };
                model = next;
                if calm >= s.patience {
                    debug!("replay converged at round {t}");
                    return Ok(ReplayOutcome {
                        model,
                        rounds_executed: executed,
                        stopped_early: t < end_round,
                    });
                }
            } else {
                model = next;
            }
        }
        Ok(ReplayOutcome {
            model,
            rounds_executed: executed,
            stopped_early: false,
        })
    }
}

/// Current connectivity and clustering, re-clustered when drift since the
/// last clustering exceeds `threshold_fraction · ‖C_current‖_F`.
#[derive(Clone, Debug)]
pub struct TopologyTracker {
    timeline: Option<TopologyTimeline>,
    pub current: ConnectivityMatrix,
    reference: ConnectivityMatrix,
    pub clusters: ClusterAssignment,
    num_clusters: usize,
    threshold_fraction: f64,
}

impl TopologyTracker {
    pub fn new(
        timeline: TopologyTimeline,
        num_clusters: usize,
        threshold_fraction: f64,
    ) -> Result<Self> {
        let current = timeline.matrix_at(0)?;
        let clusters = cluster_ndts(&current, num_clusters)?;
        Ok(Self {
            reference: current.clone(),
            current,
            clusters,
            timeline: Some(timeline),
            num_clusters,
            threshold_fraction,
        })
    }

    /// A topology that never changes.
    pub fn fixed(matrix: ConnectivityMatrix, clusters: ClusterAssignment) -> Self {
        Self {
            reference: matrix.clone(),
            current: matrix,
            num_clusters: clusters.num_clusters,
            clusters,
            timeline: None,
            threshold_fraction: f64::INFINITY,
        }
    }

    pub fn timeline(&self) -> Option<&TopologyTimeline> {
        self.timeline.as_ref()
    }

    /// Moves to `round`; returns whether NDTs were re-clustered.
    pub fn advance(&mut self, round: u64) -> Result<bool> {
        let Some(tl) = &self.timeline else {
            self.current.round_tag = round;
            return Ok(false);
        };
        self.current = tl.matrix_at(round)?;
        let drift = topology_drift(&self.current, &self.reference)?;
        let threshold = self.threshold_fraction * self.current.frobenius();
        if should_recluster(drift, threshold) {
            self.clusters = cluster_ndts(&self.current, self.num_clusters)?;
            self.clusters.round_tag = round;
            self.reference = self.current.clone();
            info!("round {round}: topology drift {drift:.4} > {threshold:.4}, re-clustered");
            return Ok(true);
        }
        Ok(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Retention {
    /// Keep every local model of every round.
    Full,
    /// Keep only the sums needed to evaluate removal of the given NDT sets.
    Summarized,
}

/// Running sums of local models, enough to recover the mean with and without
/// a fixed NDT set.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalSummary {
    pub total: Vec<f64>,
    pub count: usize,
    pub set_sums: Vec<(BTreeSet<usize>, Vec<f64>, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LocalSnapshot {
    Full(Vec<(usize, TwinModel)>),
    Summary(LocalSummary),
}

impl LocalSnapshot {
    /// Mean of all local models and mean of the ones outside `excluded`;
    /// `None` for the latter when nothing remains.
    pub fn means(&self, excluded: &BTreeSet<usize>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        match self {
            LocalSnapshot::Full(locals) => {
                let mean = |it: &mut dyn Iterator<Item = &TwinModel>| -> Option<Vec<f64>> {
                    let mut acc: Option<Vec<f64>> = None;
                    let mut k = 0usize;
                    for m in it {
                        k += 1;
                        match &mut acc {
                            None => acc = Some(m.params().to_vec()),
                            Some(a) => a.iter_mut().zip(m.params()).for_each(|(x, y)| *x += y),
                        }
                    }
                    acc.map(|a| a.into_iter().map(|v| v / k as f64).collect())
                };
                let all = mean(&mut locals.iter().map(|(_, m)| m))
                    .ok_or_else(|| Error::invalid("round without local models"))?;
                let rest = mean(
                    &mut locals
                        .iter()
                        .filter(|(n, _)| !excluded.contains(n))
                        .map(|(_, m)| m),
                );
                Ok((all, rest))
            }
            LocalSnapshot::Summary(s) => {
                let (_, sum, k) = s
                    .set_sums
                    .iter()
                    .find(|(set, _, _)| set == excluded)
                    .ok_or_else(|| {
                        Error::invalid("summarized history does not track this NDT set")
                    })?;
                let all = s.total.iter().map(|v| v / s.count as f64).collect();
                let rest = (s.count > *k).then(|| {
                    s.total
                        .iter()
                        .zip(sum)
                        .map(|(t, v)| (t - v) / (s.count - k) as f64)
                        .collect()
                });
                Ok((all, rest))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub global_model: TwinModel,
    pub local: LocalSnapshot,
    pub participating: Vec<usize>,
    pub reclustered: bool,
    pub checkpointed: bool,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwinHistory {
    pub seed: u64,
    pub initial_model: TwinModel,
    pub records: Vec<RoundRecord>,
}

impl TwinHistory {
    pub fn rounds(&self) -> u64 {
        self.records.last().map_or(0, |r| r.round)
    }

    /// Global model after `round`; round 0 is the initial model.
    pub fn model_at(&self, round: u64) -> Option<&TwinModel> {
        if round == 0 {
            return Some(&self.initial_model);
        }
        self.records
            .get(round as usize - 1)
            .filter(|r| r.round == round)
            .map(|r| &r.global_model)
    }

    pub fn final_model(&self) -> &TwinModel {
        self.records
            .last()
            .map_or(&self.initial_model, |r| &r.global_model)
    }

    pub fn total_wall_time(&self) -> f64 {
        self.records.iter().map(|r| r.wall_time).sum()
    }
}

pub struct ForwardOptions<'s> {
    pub rounds: u64,
    /// Participating NDTs; all of them when `None`.
    pub participants: Option<Vec<usize>>,
    pub retention: Retention,
    /// NDT sets whose removal must be evaluable from a summarized history.
    pub tracked_sets: Vec<BTreeSet<usize>>,
    pub tracker: Option<&'s mut TopologyTracker>,
    pub store: Option<&'s mut CheckpointStore>,
}

impl<'s> ForwardOptions<'s> {
    pub fn rounds(rounds: u64) -> Self {
        Self {
            rounds,
            participants: None,
            retention: Retention::Full,
            tracked_sets: Vec::new(),
            tracker: None,
            store: None,
        }
    }
}

/// Forward twinning for `opts.rounds` rounds from `initial`.
pub fn run_forward(
    fed: &Federation,
    initial: TwinModel,
    mut opts: ForwardOptions,
) -> Result<TwinHistory> {
    let participants = opts
        .participants
        .clone()
        .unwrap_or_else(|| (0..fed.num_ndts()).collect());
    if participants.is_empty() {
        return Err(Error::invalid("no participating NDTs"));
    }
    if opts.store.is_some() && opts.tracker.is_none() {
        return Err(Error::invalid("checkpointing needs a topology tracker"));
    }
    let mut global = initial.clone();
    let mut records = Vec::with_capacity(opts.rounds as usize);
    for t in 1..=opts.rounds {
        let start = Instant::now();
        let locals = fed.run_round(t, &global, &participants)?;
        global = aggregate(&locals.iter().map(|(_, m)| m).collect::<Vec<_>>())?;
        let wall_time = start.elapsed().as_secs_f64();

        let mut reclustered = false;
        let mut checkpointed = false;
        if let Some(tracker) = opts.tracker.as_deref_mut() {
            reclustered = tracker.advance(t)?;
            if let Some(store) = opts.store.as_deref_mut() {
                let d =
                    store.observe(t, &global, &tracker.current, &tracker.clusters, reclustered)?;
                checkpointed = d.saved();
            }
        }
        let local = match opts.retention {
            Retention::Full => LocalSnapshot::Full(locals),
            Retention::Summarized => LocalSnapshot::Summary(summarize(&locals, &opts.tracked_sets)),
        };
        records.push(RoundRecord {
            round: t,
            global_model: global.clone(),
            local,
            participating: participants.clone(),
            reclustered,
            checkpointed,
            wall_time,
        });
    }
    Ok(TwinHistory {
        seed: fed.seeds.seed,
        initial_model: initial,
        records,
    })
}

fn summarize(locals: &[(usize, TwinModel)], sets: &[BTreeSet<usize>]) -> LocalSummary {
    let d = locals[0].1.dim();
    let add = |acc: &mut Vec<f64>, m: &TwinModel| {
        acc.iter_mut().zip(m.params()).for_each(|(a, v)| *a += v)
    };
    let mut total = vec![0.0; d];
    locals.iter().for_each(|(_, m)| add(&mut total, m));
    let set_sums = sets
        .iter()
        .map(|set| {
            let mut sum = vec![0.0; d];
            let mut k = 0;
            for (_, m) in locals.iter().filter(|(n, _)| set.contains(n)) {
                add(&mut sum, m);
                k += 1;
            }
            (set.clone(), sum, k)
        })
        .collect();
    LocalSummary {
        total,
        count: locals.len(),
        set_sums,
    }
}

const HISTORY_MAGIC: &[u8] = b"UNTWIN-HISTORY 1\n";

#[derive(Serialize, Deserialize)]
struct HistoryHeader {
    config_hash: String,
    seed: u64,
    arch: String,
    input_dim: usize,
    rounds: u64,
}

/// Writes a full-retention history. Layout: magic line, one JSON header line,
/// the initial parameters, then per round the round number (u64), flags (u8:
/// bit 0 re-clustered, bit 1 checkpointed), participant count (u32), the
/// participant ids (u32 each), the global parameters and every local model's
/// parameters in participant order. All numbers little-endian; wall times are
/// not stored.
pub fn write_history<W: Write>(w: &mut W, h: &TwinHistory, config_hash: &str) -> Result<()> {
    let m0 = &h.initial_model;
    let header = HistoryHeader {
        config_hash: config_hash.to_string(),
        seed: h.seed,
        arch: m0.arch().tag(),
        input_dim: m0.input_dim(),
        rounds: h.records.len() as u64,
    };
    w.write_all(HISTORY_MAGIC)?;
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    let put = |w: &mut W, p: &[f64]| -> Result<()> {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    put(w, m0.params())?;
    for r in &h.records {
        let LocalSnapshot::Full(locals) = &r.local else {
            return Err(Error::invalid(
                "only full-retention histories can be written",
            ));
        };
        w.write_all(&r.round.to_le_bytes())?;
        w.write_all(&[u8::from(r.reclustered) | (u8::from(r.checkpointed) << 1)])?;
        w.write_all(&(locals.len() as u32).to_le_bytes())?;
        for (n, _) in locals {
            w.write_all(&(*n as u32).to_le_bytes())?;
        }
        put(w, r.global_model.params())?;
        for (_, m) in locals {
            put(w, m.params())?;
        }
    }
    Ok(())
}

/// Reads a history written by [`write_history`]; returns it with its config hash.
pub fn read_history<R: Read>(r: &mut R) -> Result<(TwinHistory, String)> {
    let mut magic = vec![0u8; HISTORY_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != HISTORY_MAGIC {
        return Err(Error::Format("not a twinning history file".into()));
    }
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let header: HistoryHeader = serde_json::from_slice(&line)?;
    let arch = Arch::from_tag(&header.arch)?;
    let d = arch.param_count(header.input_dim);
    let mut buf8 = [0u8; 8];
    let mut buf4 = [0u8; 4];
    let mut params = |r: &mut R| -> Result<TwinModel> {
        let mut p = Vec::with_capacity(d);
        for _ in 0..d {
            r.read_exact(&mut buf8)?;
            p.push(f64::from_le_bytes(buf8));
        }
        TwinModel::from_params(arch, header.input_dim, p)
    };
    let initial_model = params(r)?;
    let mut records = Vec::with_capacity(header.rounds as usize);
    for _ in 0..header.rounds {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let round = u64::from_le_bytes(b8);
        r.read_exact(&mut byte)?;
        r.read_exact(&mut buf4)?;
        let k = u32::from_le_bytes(buf4) as usize;
        let mut ids = Vec::with_capacity(k);
        for _ in 0..k {
            r.read_exact(&mut buf4)?;
            ids.push(u32::from_le_bytes(buf4) as usize);
        }
        let global_model = params(r)?;
        let mut locals = Vec::with_capacity(k);
        for &n in &ids {
            locals.push((n, params(r)?));
        }
        records.push(RoundRecord {
            round,
            global_model,
            local: LocalSnapshot::Full(locals),
            participating: ids,
            reclustered: byte[0] & 1 != 0,
            checkpointed: byte[0] & 2 != 0,
            wall_time: 0.0,
        });
    }
    Ok((
        TwinHistory {
            seed: header.seed,
            initial_model,
            records,
        },
        header.config_hash,
    ))
}
