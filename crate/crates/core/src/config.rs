//! Run configuration and the end-to-end pipeline built from it: scenario
//! generation, forward twinning with checkpointing, and untwinning contexts.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{CheckpointStore, StorePolicy};
use crate::engine::evaluate_mse;
use crate::engine::{
    run_forward, Federation, ForwardOptions, Retention, TopologyTracker, TrainingConfig,
    TwinHistory,
};
use crate::error::{Error, Result};
use crate::oracle::{indistinguishability_probe, retrain_from_scratch, ProbeReport};
use crate::rng::SeedTree;
use crate::synth::{
    generate_traces, similarity_table, split_dataset, NdtDataset, NdtTraces, ScenarioConfig,
    TraceKind,
};
use crate::topology::{
    default_cluster_count, ConnectivityWeights, NdtNode, TopologyShift, TopologyTimeline,
};
use crate::untwin::{build_untwin_set, importance_scores, sru, UntwinConfig, UntwinContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// Explicit node list; when absent nodes are laid out on a line.
    pub nodes: Option<Vec<NdtNode>>,
    pub spacing: f64,
    pub coverage_radius: f64,
    pub shifts: Vec<TopologyShift>,
    pub weights: ConnectivityWeights,
    /// Cluster count M; `⌈N/4⌉` when absent.
    pub num_clusters: Option<usize>,
    /// Re-cluster when drift exceeds this fraction of `‖C‖_F`.
    pub recluster_fraction: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            nodes: None,
            spacing: 800.0,
            coverage_radius: 500.0,
            shifts: Vec::new(),
            weights: ConnectivityWeights::default(),
            num_clusters: None,
            recluster_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Past readings per feature window.
    pub lag: usize,
    pub train_fraction: f64,
    pub trace: TraceKind,
    /// Readings are divided by this; twice the largest possible NDT mean when absent.
    pub scale: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            lag: 6,
            train_fraction: 0.8,
            trace: TraceKind::Flow,
            scale: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream, including data generation (it replaces
    /// `scenario.seed`).
    pub seed: u64,
    pub rounds: u64,
    pub scenario: ScenarioConfig,
    pub topology: TopologyConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub untwin: UntwinConfig,
    pub checkpoint: StorePolicy,
    pub retention: Retention,
    /// Output directory for command-line runs; not part of the hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 200,
            scenario: ScenarioConfig::default(),
            topology: TopologyConfig::default(),
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            untwin: UntwinConfig::default(),
            checkpoint: StorePolicy::default(),
            retention: Retention::Full,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn num_ndts(&self) -> usize {
        self.topology
            .nodes
            .as_ref()
            .map_or(self.scenario.num_ndts, Vec::len)
    }

    /// Sets the NDT count in the scenario and drops any explicit node list.
    pub fn with_num_ndts(mut self, n: usize) -> Self {
        self.scenario.num_ndts = n;
        self.topology.nodes = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be >= 1"));
        }
        if self.num_ndts() != self.scenario.num_ndts {
            return Err(Error::invalid(format!(
                "topology lists {} nodes but scenario.num_ndts is {}",
                self.num_ndts(),
                self.scenario.num_ndts
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::invalid("data.train_fraction must lie in (0, 1)"));
        }
        if !(self.topology.recluster_fraction >= 0.0) {
            return Err(Error::invalid("topology.recluster_fraction must be >= 0"));
        }
        if let Some(m) = self.topology.num_clusters {
            if m == 0 || m > self.num_ndts() {
                return Err(Error::invalid(format!(
                    "num_clusters must lie in [1, {}]",
                    self.num_ndts()
                )));
            }
        }
        self.training.validate()?;
        self.untwin.validate()?;
        self.checkpoint.validate()?;
        self.scenario.validate()
    }

    /// SHA-256 of the canonical JSON form (keys sorted), output directory
    /// excluded.
    pub fn hash(&self) -> String {
        let stripped = RunConfig {
            output: None,
            ..self.clone()
        };
        let value = serde_json::to_value(&stripped).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn nodes(&self) -> Vec<NdtNode> {
        self.topology.nodes.clone().unwrap_or_else(|| {
            NdtNode::line_layout(
                self.scenario.num_ndts,
                self.topology.spacing,
                self.topology.coverage_radius,
            )
        })
    }

    pub fn scale(&self) -> f64 {
        self.data.scale.unwrap_or_else(|| {
            let s = &self.scenario;
            let (explicit, base) = match self.data.trace {
                TraceKind::Flow => (&s.flow_means, s.base_flow),
                TraceKind::Speed => (&s.speed_means, s.base_speed),
            };
            let top = match explicit {
                Some(m) => m.iter().cloned().fold(0.0, f64::max),
                None => base * (1.0 + s.base_spread),
            };
            2.0 * top.max(f64::MIN_POSITIVE)
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.topology
            .num_clusters
            .unwrap_or_else(|| default_cluster_count(self.num_ndts()))
    }

    pub fn build_scenario(&self) -> Result<Scenario> {
        self.validate()?;
        let nodes = self.nodes();
        let scenario = ScenarioConfig {
            seed: self.seed,
            ..self.scenario.clone()
        };
        let traces = generate_traces(&scenario, &nodes)?;
        let kind = self.data.trace;
        let refs: Vec<_> = traces.iter().map(|t| t.get(kind)).collect();
        let tau = similarity_table(&refs)?;
        let scale = self.scale();
        let datasets = refs
            .iter()
            .map(|t| split_dataset(t, self.data.lag, scale, self.data.train_fraction))
            .collect::<Result<Vec<_>>>()?;
        let timeline = TopologyTimeline::new(
            nodes.clone(),
            tau.clone(),
            self.topology.weights,
            self.topology.shifts.clone(),
        )?;
        Ok(Scenario {
            nodes,
            traces,
            tau,
            datasets,
            timeline,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub nodes: Vec<NdtNode>,
    pub traces: Vec<NdtTraces>,
    pub tau: Vec<Vec<f64>>,
    pub datasets: Vec<NdtDataset>,
    pub timeline: TopologyTimeline,
}

/// A completed forward run: scenario, history, checkpoint store and the
/// topology as of round T.
#[derive(Clone, Debug)]
pub struct TwinRun {
    pub config: RunConfig,
    pub scenario: Scenario,
    pub history: TwinHistory,
    pub store: CheckpointStore,
    pub tracker: TopologyTracker,
}

impl TwinRun {
    pub fn federation(&self) -> Federation<'_> {
        Federation {
            cfg: &self.config.training,
            datasets: &self.scenario.datasets,
            seeds: SeedTree::new(self.config.seed),
        }
    }

    pub fn context<'a>(&'a self, untwin: &'a UntwinConfig) -> UntwinContext<'a> {
        UntwinContext {
            fed: self.federation(),
            history: &self.history,
            store: Some(&self.store),
            connectivity: &self.tracker.current,
            cfg: untwin,
        }
    }

    pub fn all_ndts(&self) -> Vec<usize> {
        (0..self.scenario.datasets.len()).collect()
    }
}

/// Forward twinning with topology tracking and checkpointing. `tracked_sets`
/// is only used by summarized retention.
pub fn run_twin(config: &RunConfig, tracked_sets: Vec<BTreeSet<usize>>) -> Result<TwinRun> {
    let scenario = config.build_scenario()?;
    let seeds = SeedTree::new(config.seed);
    let fed = Federation::new(&config.training, &scenario.datasets, seeds)?;
    let mut tracker = TopologyTracker::new(
        scenario.timeline.clone(),
        config.num_clusters(),
        config.topology.recluster_fraction,
    )?;
    let initial = fed.initial_model();
    let mut store = CheckpointStore::new(
        config.checkpoint.clone(),
        &initial,
        &tracker.current,
        &tracker.clusters,
    )?;
    let mut opts = ForwardOptions::rounds(config.rounds);
    opts.retention = config.retention;
    opts.tracked_sets = tracked_sets;
    opts.tracker = Some(&mut tracker);
    opts.store = Some(&mut store);
    let history = run_forward(&fed, initial, opts)?;
    Ok(TwinRun {
        config: config.clone(),
        scenario,
        history,
        store,
        tracker,
    })
}

/// Rebuilds a completed run from its saved history and store. The scenario
/// and topology are regenerated from the config, which determines them.
pub fn resume_twin(
    config: &RunConfig,
    history: TwinHistory,
    store: CheckpointStore,
) -> Result<TwinRun> {
    let scenario = config.build_scenario()?;
    if history.seed != config.seed || history.rounds() != config.rounds {
        return Err(Error::invalid(format!(
            "history (seed {}, {} rounds) does not belong to this config (seed {}, {} rounds)",
            history.seed,
            history.rounds(),
            config.seed,
            config.rounds
        )));
    }
    let mut tracker = TopologyTracker::new(
        scenario.timeline.clone(),
        config.num_clusters(),
        config.topology.recluster_fraction,
    )?;
    for t in 1..=history.rounds() {
        tracker.advance(t)?;
    }
    Ok(TwinRun {
        config: config.clone(),
        scenario,
        history,
        store,
        tracker,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// Forward twinning followed by single-request untwinning.
    Sru,
    /// Retraining from scratch without the untwinning set.
    Scratch,
}

impl Pipeline {
    pub fn as_str(self) -> &'static str {
        match self {
            Pipeline::Sru => "sru",
            Pipeline::Scratch => "scratch",
        }
    }
}

/// Evaluation MSE on the target's data after running `pipeline` with `seed`.
pub fn pipeline_statistic(
    base: &RunConfig,
    seed: u64,
    target: usize,
    pipeline: Pipeline,
) -> Result<f64> {
    let cfg = RunConfig {
        seed,
        ..base.clone()
    };
    match pipeline {
        Pipeline::Sru => {
            let run = run_twin(&cfg, Vec::new())?;
            let out = sru(&run.context(&cfg.untwin), target)?;
            evaluate_mse(&out.model, &run.scenario.datasets, &[target])
        }
        Pipeline::Scratch => {
            let scenario = cfg.build_scenario()?;
            let c = scenario.timeline.matrix_at(cfg.rounds)?;
            let set = build_untwin_set(&importance_scores(&c, target)?, cfg.untwin.theta, target)?;
            let fed = Federation::new(&cfg.training, &scenario.datasets, SeedTree::new(seed))?;
            let all: Vec<usize> = (0..scenario.datasets.len()).collect();
            let model =
                retrain_from_scratch(&fed, &fed.initial_model(), &all, &set.members, cfg.rounds)?;
            evaluate_mse(&model, &scenario.datasets, &[target])
        }
    }
}

/// Probe of `pipeline_a` on `seeds_a` against `pipeline_b` on `seeds_b`.
pub fn run_probe(
    base: &RunConfig,
    target: usize,
    (pipeline_a, seeds_a): (Pipeline, &[u64]),
    (pipeline_b, seeds_b): (Pipeline, &[u64]),
    permutations: usize,
) -> Result<ProbeReport> {
    let stat = |p, seeds: &[u64]| -> Result<Vec<f64>> {
        seeds
            .par_iter()
            .map(|&s| pipeline_statistic(base, s, target, p))
            .collect()
    };
    let a = stat(pipeline_a, seeds_a)?;
    let b = stat(pipeline_b, seeds_b)?;
    let stream = seeds_a.first().copied().unwrap_or(0);
    indistinguishability_probe(
        &a,
        &b,
        permutations,
        0.05,
        &SeedTree::new(base.seed),
        stream,
    )
}
