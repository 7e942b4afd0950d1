//! Checkpoint store with naive, fixed-interval and adaptive topology-aware
//! (ATAC) saving policies.
//!
//! ATAC saves round `t` when the drift utility `u = λ_w‖w^t − w^{t−1}‖ +
//! λ_C‖C^t − C^{t−1}‖_F` reaches `tau_drift`, when NDTs were re-clustered at
//! `t` (an anchor), or when `⌈p_t⌉` rounds have passed since the last save.
//! The keep-alive interval follows `p ← clip(p·exp(κ(tau_drift − u)), p_min,
//! p_max)`. Past the budget, older checkpoints are thinned by temporal
//! coarsening; round 0 and anchors are never evicted.
//!
//! Round 0 is pinned outside the budget and outside the reported counts.
//!
//! On-disk layout, one directory per store:
//!
//! ```text
//! ckpt_<round>.bin   manifest line
//!                    "round=<r> d=<d> arch=<tag> input_dim=<i> n=<n> bytes=<b>\n"
//!                    then d little-endian f64 parameters
//!                    then n*n little-endian f64 connectivity cells (row-major)
//! store_index.json   policy, p_t, last observed state, and per-checkpoint
//!                    round / anchor / bytes / cluster assignment
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_distance, Arch, TwinModel};
use crate::topology::{topology_drift, ClusterAssignment, ConnectivityMatrix};

pub const INDEX_FILE: &str = "store_index.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StoreMode {
    Naive,
    Fixed { p: u64 },
    Atac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorePolicy {
    pub mode: StoreMode,
    pub lambda_w: f64,
    pub lambda_c: f64,
    pub tau_drift: f64,
    pub kappa: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Maximum number of stored checkpoints (ATAC only; round 0 excluded).
    pub budget: usize,
    /// Rounds kept dense by coarsening.
    pub recent_window: u64,
}

impl Default for StorePolicy {
    fn default() -> Self {
        Self {
            mode: StoreMode::Atac,
            lambda_w: 1.0,
            lambda_c: 1.0,
            tau_drift: 0.05,
            kappa: 5.0,
            p_min: 1.0,
            p_max: 20.0,
            budget: 128,
            recent_window: 50,
        }
    }
}

impl StorePolicy {
    pub fn naive() -> Self {
        Self {
            mode: StoreMode::Naive,
            ..Self::default()
        }
    }

    pub fn fixed(p: u64) -> Self {
        Self {
            mode: StoreMode::Fixed { p },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let StoreMode::Fixed { p } = self.mode {
            if p == 0 {
                return Err(Error::invalid("fixed checkpoint interval must be >= 1"));
            }
        }
        if !(self.p_min >= 1.0 && self.p_min <= self.p_max && self.p_max.is_finite()) {
            return Err(Error::invalid(
                "interval bounds must satisfy 1 <= p_min <= p_max",
            ));
        }
        if self.budget < 2 {
            return Err(Error::invalid("checkpoint budget must be >= 2"));
        }
        if self.recent_window == 0 {
            return Err(Error::invalid("recent_window must be >= 1"));
        }
        if !(self.lambda_w >= 0.0
            && self.lambda_c >= 0.0
            && self.tau_drift > 0.0
            && self.kappa > 0.0)
        {
            return Err(Error::invalid(
                "lambda_w, lambda_c >= 0 and tau_drift, kappa > 0 required",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub model: TwinModel,
    pub connectivity: ConnectivityMatrix,
    pub clusters: ClusterAssignment,
    pub anchor: bool,
    pub bytes: usize,
}

impl Checkpoint {
    fn new(
        round: u64,
        model: &TwinModel,
        c: &ConnectivityMatrix,
        clusters: &ClusterAssignment,
        anchor: bool,
    ) -> Self {
        let mut connectivity = c.clone();
        connectivity.round_tag = round;
        Self {
            round,
            bytes: model.dim() * 8 + c.byte_size(),
            model: model.clone(),
            connectivity,
            clusters: clusters.clone(),
            anchor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaveReason {
    EveryRound,
    Interval,
    Drift,
    Recluster,
    KeepAlive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaveDecision {
    pub round: u64,
    pub reason: Option<SaveReason>,
    pub utility: f64,
    pub evicted: Vec<u64>,
    pub over_budget: bool,
}

impl SaveDecision {
    pub fn saved(&self) -> bool {
        self.reason.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreState {
    pub checkpoints: BTreeMap<u64, Checkpoint>,
    pub p_t: f64,
    pub last_save_round: u64,
    pub last_round: u64,
    pub last_model: TwinModel,
    pub last_connectivity: ConnectivityMatrix,
    pub over_budget: bool,
}

#[derive(Clone, Debug)]
pub struct Retrieval<'a> {
    pub checkpoint: &'a Checkpoint,
    pub target_round: u64,
    /// Extra replay rounds: `target_round - checkpoint.round`.
    pub extension: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub count: usize,
    pub bytes: usize,
    pub total_rounds: u64,
    /// `1 - count / total_rounds`.
    pub reduction: f64,
}

pub fn utility(dw: f64, dc: f64, policy: &StorePolicy) -> f64 {
    policy.lambda_w * dw + policy.lambda_c * dc
}

pub fn update_interval(p_t: f64, u: f64, policy: &StorePolicy) -> f64 {
    (p_t * (policy.kappa * (policy.tau_drift - u)).exp()).clamp(policy.p_min, policy.p_max)
}

#[derive(Clone, Debug)]
pub struct CheckpointStore {
    policy: StorePolicy,
    state: StoreState,
}

impl CheckpointStore {
    /// Creates a store holding the pinned round-0 checkpoint.
    pub fn new(
        policy: StorePolicy,
        initial: &TwinModel,
        connectivity: &ConnectivityMatrix,
        clusters: &ClusterAssignment,
    ) -> Result<Self> {
        policy.validate()?;
        let mut checkpoints = BTreeMap::new();
        checkpoints.insert(
            0,
            Checkpoint::new(0, initial, connectivity, clusters, false),
        );
        Ok(Self {
            state: StoreState {
                checkpoints,
                p_t: policy.p_min,
                last_save_round: 0,
                last_round: 0,
                last_model: initial.clone(),
                last_connectivity: connectivity.clone(),
                over_budget: false,
            },
            policy,
        })
    }

    pub fn policy(&self) -> &StorePolicy {
        &self.policy
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    /// Stored rounds, including the pinned round 0.
    pub fn rounds(&self) -> Vec<u64> {
        self.state.checkpoints.keys().copied().collect()
    }

    /// Number of stored checkpoints, round 0 excluded.
    pub fn count(&self) -> usize {
        self.state.checkpoints.len() - 1
    }

    pub fn get(&self, round: u64) -> Option<&Checkpoint> {
        self.state.checkpoints.get(&round)
    }

    pub fn observe(
        &mut self,
        t: u64,
        model: &TwinModel,
        connectivity: &ConnectivityMatrix,
        clusters: &ClusterAssignment,
        reclustered: bool,
    ) -> Result<SaveDecision> {
        let st = &self.state;
        if t <= st.last_round {
            return Err(Error::invalid(format!(
                "round {t} observed after round {}",
                st.last_round
            )));
        }
        if !model.same_shape(&st.last_model) {
            return Err(Error::invalid(
                "model shape changed between observed rounds",
            ));
        }
        let dw = l2_distance(model.params(), st.last_model.params());
        let dc = topology_drift(connectivity, &st.last_connectivity)?;
        let u = utility(dw, dc, &self.policy);
        let since = t - st.last_save_round;

        let reason = match self.policy.mode {
            StoreMode::Naive => Some(SaveReason::EveryRound),
            StoreMode::Fixed { p } => (since >= p).then_some(SaveReason::Interval),
            StoreMode::Atac => {
                if reclustered {
                    Some(SaveReason::Recluster)
                } else if u >= self.policy.tau_drift {
                    Some(SaveReason::Drift)
                } else if since as f64 >= st.p_t.ceil() {
                    Some(SaveReason::KeepAlive)
                } else {
                    None
                }
            }
        };

        let st = &mut self.state;
        if reason.is_some() {
            st.checkpoints.insert(
                t,
                Checkpoint::new(t, model, connectivity, clusters, reclustered),
            );
            st.last_save_round = t;
        }
        st.last_round = t;
        st.last_model = model.clone();
        st.last_connectivity = connectivity.clone();
        st.last_connectivity.round_tag = t;

        let mut evicted = Vec::new();
        let mut over_budget = false;
        if self.policy.mode == StoreMode::Atac {
            self.state.p_t = update_interval(self.state.p_t, u, &self.policy);
            if self.count() > self.policy.budget {
                match self.coarsen() {
                    Ok(e) => evicted = e,
                    Err(Error::OverBudget { budget, protected }) => {
                        warn!("round {t}: checkpoint budget {budget} unreachable, {protected} protected");
                        over_budget = true;
                        self.state.over_budget = true;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(SaveDecision {
            round: t,
            reason,
            utility: u,
            evicted,
            over_budget,
        })
    }

    fn protected(&self, round: u64, recent_lo: u64) -> bool {
        round == 0 || round > recent_lo || self.state.checkpoints[&round].anchor
    }

    /// One thinning pass. Rounds at or before `T − H` fall into age bands
    /// `[(2^j − 1)H, (2^{j+1} − 1)H)` measured back from `T − H`; band `j` is
    /// cut into slots of `base_width · 2^j` rounds and each slot keeps its
    /// protected checkpoints if it has any, else its newest one.
    pub fn coarsen_pass(&mut self, base_width: u64) -> Vec<u64> {
        let h = self.policy.recent_window;
        let recent_lo = self.state.last_round.saturating_sub(h);
        let mut slots: BTreeMap<(u32, u64), Vec<u64>> = BTreeMap::new();
        for &round in self
            .state
            .checkpoints
            .keys()
            .filter(|&&r| r <= recent_lo && r > 0)
        {
            let age = recent_lo - round;
            let mut band = 0u32;
            while age >= ((1u64 << (band + 1)) - 1) * h {
                band += 1;
            }
            let width = base_width << band;
            slots.entry((band, age / width)).or_default().push(round);
        }
        let mut evicted = Vec::new();
        for members in slots.values() {
            let has_protected = members.iter().any(|&r| self.protected(r, recent_lo));
            let newest = *members.iter().max().expect("non-empty slot");
            for &r in members {
                if !self.protected(r, recent_lo) && (has_protected || r != newest) {
                    evicted.push(r);
                }
            }
        }
        for r in &evicted {
            self.state.checkpoints.remove(r);
        }
        evicted.sort_unstable();
        evicted
    }

    /// Thins old checkpoints with doubling slot widths until the budget holds.
    /// Evictions made before the budget proves unreachable are kept.
    pub fn coarsen(&mut self) -> Result<Vec<u64>> {
        let mut evicted = Vec::new();
        let mut width = 1u64;
        while self.count() > self.policy.budget {
            evicted.extend(self.coarsen_pass(width));
            if self.count() <= self.policy.budget {
                break;
            }
            if width > self.state.last_round.max(1) {
                let recent_lo = self
                    .state
                    .last_round
                    .saturating_sub(self.policy.recent_window);
                let protected = self
                    .state
                    .checkpoints
                    .keys()
                    .filter(|&&r| r > 0 && self.protected(r, recent_lo))
                    .count();
                evicted.sort_unstable();
                return Err(Error::OverBudget {
                    budget: self.policy.budget,
                    protected,
                });
            }
            width *= 2;
        }
        evicted.sort_unstable();
        Ok(evicted)
    }

    /// Latest stored checkpoint at or before `target_round`.
    pub fn retrieve_proximal(&self, target_round: u64) -> Retrieval<'_> {
        let (_, checkpoint) = self
            .state
            .checkpoints
            .range(..=target_round)
            .next_back()
            .expect("round 0 is always stored");
        Retrieval {
            checkpoint,
            target_round,
            extension: target_round - checkpoint.round,
        }
    }

    pub fn storage_report(&self) -> StorageReport {
        let total = self.state.last_round;
        let count = self.count();
        let bytes = self
            .state
            .checkpoints
            .values()
            .filter(|c| c.round > 0)
            .map(|c| c.bytes)
            .sum();
        StorageReport {
            count,
            bytes,
            total_rounds: total,
            reduction: if total == 0 {
                0.0
            } else {
                1.0 - count as f64 / total as f64
            },
        }
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let stale = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"));
            if stale {
                fs::remove_file(path)?;
            }
        }
        for c in self.state.checkpoints.values() {
            let mut f = fs::File::create(dir.join(format!("ckpt_{}.bin", c.round)))?;
            write_checkpoint(&mut f, c)?;
        }
        let st = &self.state;
        let index = StoreIndex {
            policy: self.policy.clone(),
            count: self.count(),
            p_t: st.p_t,
            last_save_round: st.last_save_round,
            last_round: st.last_round,
            last_model: st.last_model.params().to_vec(),
            last_connectivity: st.last_connectivity.values.clone(),
            over_budget: st.over_budget,
            checkpoints: st
                .checkpoints
                .values()
                .map(|c| IndexEntry {
                    round: c.round,
                    anchor: c.anchor,
                    bytes: c.bytes,
                    clusters: c.clusters.clone(),
                })
                .collect(),
        };
        let mut f = fs::File::create(dir.join(INDEX_FILE))?;
        serde_json::to_writer_pretty(&mut f, &index)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: StoreIndex =
            serde_json::from_reader(BufReader::new(fs::File::open(dir.join(INDEX_FILE))?))?;
        index.policy.validate()?;
        let mut checkpoints = BTreeMap::new();
        for e in &index.checkpoints {
            let f = fs::File::open(dir.join(format!("ckpt_{}.bin", e.round)))?;
            let (round, model, connectivity) = read_checkpoint(&mut BufReader::new(f))?;
            if round != e.round {
                return Err(Error::Format(format!(
                    "ckpt_{}.bin holds round {round}",
                    e.round
                )));
            }
            let bytes = model.dim() * 8 + connectivity.byte_size();
            checkpoints.insert(
                round,
                Checkpoint {
                    round,
                    model,
                    connectivity,
                    clusters: e.clusters.clone(),
                    anchor: e.anchor,
                    bytes,
                },
            );
        }
        let first = checkpoints
            .get(&0)
            .ok_or_else(|| Error::Format("store index lacks round 0".into()))?;
        let last_model = first.model.with_params(index.last_model)?;
        let n = first.connectivity.n;
        if index.last_connectivity.len() != n * n {
            return Err(Error::Format("last_connectivity has wrong size".into()));
        }
        let last_connectivity = ConnectivityMatrix {
            n,
            values: index.last_connectivity,
            round_tag: index.last_round,
        };
        Ok(Self {
            policy: index.policy,
            state: StoreState {
                checkpoints,
                p_t: index.p_t,
                last_save_round: index.last_save_round,
                last_round: index.last_round,
                last_model,
                last_connectivity,
                over_budget: index.over_budget,
            },
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    round: u64,
    anchor: bool,
    bytes: usize,
    clusters: ClusterAssignment,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    policy: StorePolicy,
    /// Stored checkpoints, round 0 excluded.
    #[serde(default)]
    count: usize,
    p_t: f64,
    last_save_round: u64,
    last_round: u64,
    last_model: Vec<f64>,
    last_connectivity: Vec<f64>,
    over_budget: bool,
    checkpoints: Vec<IndexEntry>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, c: &Checkpoint) -> Result<()> {
    let m = &c.model;
    let n = c.connectivity.n;
    writeln!(
        w,
        "round={} d={} arch={} input_dim={} n={} bytes={}",
        c.round,
        m.dim(),
        m.arch().tag(),
        m.input_dim(),
        n,
        c.bytes
    )?;
    for v in m.params().iter().chain(&c.connectivity.values) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<(u64, TwinModel, ConnectivityMatrix)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let mut fields = BTreeMap::new();
    for kv in line.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad manifest field {kv:?}")))?;
        fields.insert(k, v);
    }
    let num = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("manifest missing numeric field {k}")))
    };
    let (round, d, input_dim, n, bytes) = (
        num("round")?,
        num("d")?,
        num("input_dim")?,
        num("n")?,
        num("bytes")?,
    );
    let arch = Arch::from_tag(
        fields
            .get("arch")
            .ok_or_else(|| Error::Format("manifest missing arch".into()))?,
    )?;
    if bytes != (d + n * n) * 8 {
        return Err(Error::Format(format!(
            "manifest byte length {bytes} disagrees with d={d}, n={n}"
        )));
    }
    let mut buf = vec![0u8; bytes as usize];
    r.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (params, cells) = vals.split_at(d as usize);
    let model = TwinModel::from_params(arch, input_dim as usize, params.to_vec())?;
    let connectivity = ConnectivityMatrix {
        n: n as usize,
        values: cells.to_vec(),
        round_tag: round,
    };
    Ok((round, model, connectivity))
}
