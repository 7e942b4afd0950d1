//! Per-round sensitivity Δ_t, cumulative influence φ(t), rollback criterion
//! γ(t) and the rollback depth K derived from them.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::TwinHistory;
use crate::error::{Error, Result};
use crate::model::{gradient, l2_distance, l2_norm, Arch, TrafficSample, TwinModel};
use crate::rng::{Domain, SeedTree, StreamId};
use crate::synth::NdtDataset;

/// Privacy parameters of the Gaussian mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub beta: f64,
    pub omega: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, beta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        Ok(Self {
            epsilon,
            beta,
            omega: omega(beta)?,
        })
    }
}

/// `Ω = √(2(ln 1.25 − ln β))` for `0 < β ≤ 1.25`.
pub fn omega(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta <= 1.25) {
        return Err(Error::invalid(format!(
            "beta must lie in (0, 1.25], got {beta}"
        )));
    }
    Ok((2.0 * (1.25f64.ln() - beta.ln())).max(0.0).sqrt())
}

/// `Δ = importance · ‖mean(all local models) − mean(local models outside S_u)‖₂`
/// for the recorded round `round` (1-based).
pub fn delta_t(
    history: &TwinHistory,
    set: &BTreeSet<usize>,
    round: u64,
    importance: f64,
) -> Result<f64> {
    let rec = round
        .checked_sub(1)
        .and_then(|i| history.records.get(i as usize))
        .ok_or_else(|| Error::invalid(format!("round {round} not recorded")))?;
    let (all, rest) = rec.local.means(set)?;
    let rest = rest.ok_or(Error::NothingRemains {
        excluded: set.len(),
        total: rec.participating.len(),
    })?;
    Ok(importance * l2_distance(&all, &rest))
}

/// `φ(t) = B·φ(t−1) + Δ_{t−1}`, `φ(0) = 0`, `B = 1 + ηL`; returns `φ(0..=len)`.
pub fn phi_curve(deltas: &[f64], eta: f64, lipschitz: f64) -> Vec<f64> {
    let b = 1.0 + eta * lipschitz;
    let mut phi = Vec::with_capacity(deltas.len() + 1);
    phi.push(0.0);
    for d in deltas {
        let last = *phi.last().expect("non-empty");
        phi.push(b * last + d);
    }
    phi
}

/// `γ(t) = Ω / (ε φ(t))`, `+∞` where `φ(t) = 0`.
pub fn gamma_curve(phi: &[f64], budget: &PrivacyBudget) -> Vec<f64> {
    phi.iter()
        .map(|&p| {
            if p == 0.0 {
                f64::INFINITY
            } else {
                budget.omega / (budget.epsilon * p)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RollbackRule {
    /// Latest round whose cumulative influence stays within `φ*`.
    #[default]
    Theorem,
    /// Latest round with `γ(t) ≤ γ*`, read as written in the algorithm.
    Literal,
}

/// `t_safe = max{t | φ(t) ≤ φ*}`; `K = T − t_safe`. Returns `(K, t_safe)`.
pub fn rollback_depth(phi: &[f64], threshold_phi: f64, t: u64) -> (u64, u64) {
    let t_safe = phi
        .iter()
        .take(t as usize + 1)
        .rposition(|&p| p <= threshold_phi)
        .unwrap_or(0) as u64;
    (t - t_safe, t_safe)
}

/// Literal reading: `t_safe = max{t | γ(t) ≤ γ*}`, 0 when no round qualifies.
pub fn rollback_depth_literal(gamma: &[f64], gamma_star: f64, t: u64) -> (u64, u64) {
    let t_safe = gamma
        .iter()
        .take(t as usize + 1)
        .rposition(|&g| g <= gamma_star)
        .unwrap_or(0) as u64;
    (t - t_safe, t_safe)
}

/// Fraction of `max φ` used as `φ*` when no `γ*` is configured.
pub const DEFAULT_PHI_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub rounds: u64,
    /// `Δ_0 ..= Δ_{T−1}`; `Δ_τ` is measured on the local models of round τ+1.
    pub delta: Vec<f64>,
    /// `φ(0) ..= φ(T)`.
    pub phi: Vec<f64>,
    /// `γ(0) ..= γ(T)`.
    #[serde(skip)]
    pub gamma: Vec<f64>,
    pub lipschitz_estimate: f64,
    pub eta: f64,
    pub growth_base: f64,
}

impl SensitivityCurve {
    pub fn compute(
        history: &TwinHistory,
        set: &BTreeSet<usize>,
        importance: f64,
        eta: f64,
        lipschitz: f64,
        budget: &PrivacyBudget,
    ) -> Result<Self> {
        let delta = (1..=history.rounds())
            .map(|t| delta_t(history, set, t, importance))
            .collect::<Result<Vec<_>>>()?;
        let phi = phi_curve(&delta, eta, lipschitz);
        let gamma = gamma_curve(&phi, budget);
        Ok(Self {
            rounds: history.rounds(),
            delta,
            phi,
            gamma,
            lipschitz_estimate: lipschitz,
            eta,
            growth_base: 1.0 + eta * lipschitz,
        })
    }

    /// `φ*`: `Ω/(ε γ*)` when `γ*` is given, else a fixed fraction of `max φ`.
    pub fn phi_threshold(&self, gamma_star: Option<f64>, budget: &PrivacyBudget) -> f64 {
        match gamma_star {
            Some(g) => budget.omega / (budget.epsilon * g),
            None => DEFAULT_PHI_FRACTION * self.phi.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Returns `(K, t_safe)` under `rule`.
    pub fn rollback(
        &self,
        rule: RollbackRule,
        gamma_star: Option<f64>,
        budget: &PrivacyBudget,
    ) -> (u64, u64) {
        let phi_star = self.phi_threshold(gamma_star, budget);
        match rule {
            RollbackRule::Theorem => rollback_depth(&self.phi, phi_star, self.rounds),
            RollbackRule::Literal => {
                let g_star = gamma_star.unwrap_or(budget.omega / (budget.epsilon * phi_star));
                rollback_depth_literal(&self.gamma, g_star, self.rounds)
            }
        }
    }
}

/// Smoothness constant of the pooled training loss.
///
/// Linear models: the largest eigenvalue of `2XᵀX/m` (with a ones column when
/// the model has a bias), which is exact. MLPs: the largest observed ratio
/// `‖∇f(w₁) − ∇f(w₂)‖ / ‖w₁ − w₂‖` over `probes` pairs of global models drawn
/// from the trajectory.
pub fn estimate_lipschitz(
    arch: Arch,
    datasets: &[NdtDataset],
    history: &TwinHistory,
    seeds: &SeedTree,
    probes: usize,
) -> Result<f64> {
    let pooled: Vec<TrafficSample> = datasets
        .iter()
        .flat_map(|d| d.train.iter().cloned())
        .collect();
    if pooled.is_empty() {
        return Err(Error::invalid("no training data to estimate smoothness"));
    }
    match arch {
        Arch::Linear { bias } => {
            let n_in = pooled[0].features.len();
            let d = n_in + usize::from(bias);
            let m = pooled.len() as f64;
            let mut xtx = DMatrix::<f64>::zeros(d, d);
            for s in &pooled {
                let mut row = s.features.clone();
                if bias {
                    row.push(1.0);
                }
                for i in 0..d {
                    for j in 0..d {
                        xtx[(i, j)] += row[i] * row[j];
                    }
                }
            }
            let h = xtx * (2.0 / m);
            let eig = SymmetricEigen::new(h);
            Ok(eig.eigenvalues.iter().cloned().fold(0.0, f64::max))
        }
        Arch::Mlp { .. } => {
            let mut models: Vec<&TwinModel> = vec![&history.initial_model];
            models.extend(history.records.iter().map(|r| &r.global_model));
            let mut rng = seeds.stream(StreamId::new(Domain::Lipschitz, 0, 0));
            let mut best = 0.0f64;
            for _ in 0..probes {
                let a = models[rng.random_range(0..models.len())];
                let b = models[rng.random_range(0..models.len())];
                let gap = l2_distance(a.params(), b.params());
                if gap < 1e-12 {
                    continue;
                }
                let ga = gradient(a, &pooled)?;
                let gb = gradient(b, &pooled)?;
                let diff: Vec<f64> = ga
                    .values
                    .iter()
                    .zip(&gb.values)
                    .map(|(x, y)| x - y)
                    .collect();
                best = best.max(l2_norm(&diff) / gap);
            }
            Ok(best)
        }
    }
}
