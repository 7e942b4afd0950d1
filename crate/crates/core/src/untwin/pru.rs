use std::collections::BTreeSet;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{perturb, perturbation_stream, RollbackPlan, UntwinContext, UntwinSet};
use crate::engine::aggregate;
use crate::error::{Error, Result};
use crate::model::TwinModel;
use crate::topology::ClusterAssignment;

/// Routes each request to its NDT's cluster; `U_a` per cluster, in request order.
pub fn partition_requests(
    requests: &[usize],
    clusters: &ClusterAssignment,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); clusters.num_clusters];
    for &r in requests {
        let a = *clusters
            .member_of
            .get(r)
            .ok_or_else(|| Error::invalid(format!("unknown NDT {r}")))?;
        out[a].push(r);
    }
    Ok(out)
}

/// `K_a`: the deepest rollback among the cluster's requests, 0 when none.
pub fn cluster_rollback_depth(depths: &[u64]) -> u64 {
    depths.iter().copied().max().unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub cluster: usize,
    pub members: Vec<usize>,
    pub requests: Vec<usize>,
    pub sets: Vec<UntwinSet>,
    /// Rollback depth of each request, in request order.
    pub depths: Vec<u64>,
    #[serde(rename = "K_a")]
    pub k_a: u64,
    /// Absent for clusters without requests.
    pub plan: Option<RollbackPlan>,
    pub remaining: Vec<usize>,
    pub dropped: bool,
}

impl ClusterPlan {
    /// Round after which the cluster resumes training: its checkpoint round
    /// t*, or `None` for clusters without requests, which train from the
    /// first staggered round with their full membership.
    pub fn restart_round(&self) -> Option<u64> {
        self.plan.as_ref().map(|p| p.t_star)
    }
}

#[derive(Clone, Debug)]
pub struct PruOutcome {
    pub model: TwinModel,
    pub clusters: Vec<ClusterPlan>,
    pub k_max: u64,
    pub rounds_executed: u64,
    pub wall_time: f64,
}

/// Parallel-request untwinning over `clusters`.
pub fn pru(
    ctx: &UntwinContext,
    clusters: &ClusterAssignment,
    requests: &[usize],
) -> Result<PruOutcome> {
    pru_observed(ctx, clusters, requests, |_, _| {})
}

/// [`pru`], calling `observe(round, cluster_models)` after every staggered
/// round with the models held by each cluster (`None` for dropped ones).
pub fn pru_observed<F>(
    ctx: &UntwinContext,
    clusters: &ClusterAssignment,
    requests: &[usize],
    mut observe: F,
) -> Result<PruOutcome>
where
    F: FnMut(u64, &[Option<TwinModel>]),
{
    let start = Instant::now();
    let t = ctx.rounds();
    if clusters.member_of.len() != ctx.fed.num_ndts() {
        return Err(Error::invalid(
            "cluster assignment does not cover every NDT",
        ));
    }
    let unique: BTreeSet<usize> = requests.iter().copied().collect();
    if unique.len() != requests.len() {
        return Err(Error::invalid("duplicate untwinning requests"));
    }
    let routed = partition_requests(requests, clusters)?;
    let participants = ctx.participants();
    let lipschitz = if requests.is_empty() {
        0.0
    } else {
        ctx.lipschitz()?
    };
    let live = ctx.history.final_model();

    let mut plans = Vec::with_capacity(clusters.num_clusters);
    let mut models: Vec<Option<TwinModel>> = Vec::with_capacity(clusters.num_clusters);
    for (a, req) in routed.iter().enumerate() {
        let members: Vec<usize> = clusters
            .members(a)
            .into_iter()
            .filter(|n| participants.contains(n))
            .collect();
        if req.is_empty() {
            plans.push(ClusterPlan {
                cluster: a,
                remaining: members.clone(),
                members,
                requests: Vec::new(),
                sets: Vec::new(),
                depths: Vec::new(),
                k_a: 0,
                plan: None,
                dropped: false,
            });
            models.push(Some(live.clone()));
            continue;
        }
        let analyses = req
            .iter()
            .map(|&u| ctx.analyse(u, &members, lipschitz))
            .collect::<Result<Vec<_>>>()?;
        let depths: Vec<u64> = analyses.iter().map(|x| x.k).collect();
        let k_a = cluster_rollback_depth(&depths);
        let t_safe = t - k_a;
        let excluded: BTreeSet<usize> = analyses
            .iter()
            .flat_map(|x| x.set.members.iter().copied())
            .collect();
        let remaining: Vec<usize> = members
            .iter()
            .copied()
            .filter(|n| !excluded.contains(n))
            .collect();
        let phi_at_safe = analyses
            .iter()
            .map(|x| x.curve.phi[t_safe as usize])
            .fold(0.0, f64::max);
        let sigma = ctx.sigma_for(phi_at_safe)?;
        let (restart, t_star) = ctx.rollback_start(t_safe)?;
        let key = *req.iter().min().expect("non-empty requests") as u64;
        let dropped = remaining.is_empty();
        if dropped {
            warn!("cluster {a}: every member is untwinned, dropping it from aggregation");
            models.push(None);
        } else {
            models.push(Some(perturb(
                &restart,
                sigma,
                &ctx.fed.seeds,
                perturbation_stream(key),
            )?));
        }
        plans.push(ClusterPlan {
            cluster: a,
            members,
            requests: req.clone(),
            sets: analyses.into_iter().map(|x| x.set).collect(),
            depths,
            k_a,
            plan: Some(RollbackPlan {
                targets: req.clone(),
                rounds: t,
                k: k_a,
                t_safe,
                t_star,
                replay_extension: t_safe - t_star,
                phi_at_safe,
                sigma,
                noise_stream: key,
            }),
            remaining,
            dropped,
        });
    }
    if models.iter().all(Option::is_none) {
        return Err(Error::NothingRemains {
            excluded: requests.len(),
            total: participants.len(),
        });
    }

    // dropped clusters still set the start, so the others remap without them
    let first = plans
        .iter()
        .filter_map(ClusterPlan::restart_round)
        .min()
        .unwrap_or(t);
    let mut global = None;
    for round in first + 1..=t {
        let mut active = vec![false; plans.len()];
        for (a, p) in plans.iter().enumerate() {
            let Some(model) = &models[a] else { continue };
            if p.restart_round().is_some_and(|r| round <= r) {
                continue;
            }
            let locals = ctx.fed.run_round(round, model, &p.remaining)?;
            models[a] = Some(aggregate(
                &locals.iter().map(|(_, m)| m).collect::<Vec<_>>(),
            )?);
            active[a] = true;
        }
        let g = aggregate(&models.iter().flatten().collect::<Vec<_>>())?;
        for (a, m) in models.iter_mut().enumerate() {
            if active[a] {
                *m = Some(g.clone());
            }
        }
        observe(round, &models);
        global = Some(g);
    }
    let model = match global {
        Some(g) => g,
        None => aggregate(&models.iter().flatten().collect::<Vec<_>>())?,
    };
    let k_max = plans.iter().map(|p| p.k_a).max().unwrap_or(0);
    info!(
        "pru: {} requests over {} clusters, K_max={k_max}, staggered rounds={}",
        requests.len(),
        plans.len(),
        t - first
    );
    Ok(PruOutcome {
        model,
        clusters: plans,
        k_max,
        rounds_executed: t - first,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
