use std::time::Instant;

use log::info;

use super::{
    perturb, perturbation_stream, RollbackPlan, SensitivityCurve, UntwinContext, UntwinSet,
};
use crate::error::{Error, Result};
use crate::model::TwinModel;

#[derive(Clone, Debug)]
pub struct SruOutcome {
    pub model: TwinModel,
    pub plan: RollbackPlan,
    pub set: UntwinSet,
    pub curve: SensitivityCurve,
    /// NDTs kept in the remapping phase.
    pub remaining: Vec<usize>,
    pub rounds_executed: u64,
    pub stopped_early: bool,
    pub wall_time: f64,
}

/// Single-request untwinning: score neighbours, build `S_u`, find the rollback
/// depth, restart from the nearest stored checkpoint at or before `T − K`,
/// perturb, and remap to round T without `S_u`.
pub fn sru(ctx: &UntwinContext, target: usize) -> Result<SruOutcome> {
    let start = Instant::now();
    let t = ctx.rounds();
    let participants = ctx.participants();
    if target >= ctx.fed.num_ndts() {
        return Err(Error::invalid(format!("unknown NDT {target}")));
    }
    let all: Vec<usize> = (0..ctx.fed.num_ndts()).collect();
    let lipschitz = ctx.lipschitz()?;
    let a = ctx.analyse(target, &all, lipschitz)?;
    let remaining: Vec<usize> = participants
        .iter()
        .copied()
        .filter(|n| !a.set.members.contains(n))
        .collect();
    if remaining.is_empty() {
        return Err(Error::NothingRemains {
            excluded: a.set.members.len(),
            total: participants.len(),
        });
    }

    let phi_at_safe = a.curve.phi[a.t_safe as usize];
    let sigma = ctx.sigma_for(phi_at_safe)?;
    let (restart, t_star) = ctx.rollback_start(a.t_safe)?;
    let noisy = perturb(
        &restart,
        sigma,
        &ctx.fed.seeds,
        perturbation_stream(target as u64),
    )?;
    let replay = ctx
        .fed
        .replay(noisy, t_star, t, &remaining, ctx.cfg.convergence_stop)?;
    info!(
        "sru target {target}: |S_u|={} K={} t*={t_star} sigma={sigma:.3e} remap rounds={}",
        a.set.members.len(),
        a.k,
        replay.rounds_executed
    );
    Ok(SruOutcome {
        model: replay.model,
        plan: RollbackPlan {
            targets: vec![target],
            rounds: t,
            k: a.k,
            t_safe: a.t_safe,
            t_star,
            replay_extension: a.t_safe - t_star,
            phi_at_safe,
            sigma,
            noise_stream: target as u64,
        },
        set: a.set,
        curve: a.curve,
        remaining,
        rounds_executed: replay.rounds_executed,
        stopped_early: replay.stopped_early,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
