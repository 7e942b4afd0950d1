//! Backward optimization: removing the influence of requested NDTs from the
//! global twin by rollback, Gaussian perturbation and remapping, either for a
//! single request (SRU) or for many requests routed through NDT clusters (PRU).

pub mod gaussian;
mod pru;
pub mod sensitivity;
mod sru;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use gaussian::{noise_sigma, perturb, perturbation_stream};
pub use pru::{
    cluster_rollback_depth, partition_requests, pru, pru_observed, ClusterPlan, PruOutcome,
};
pub use sensitivity::{
    delta_t, estimate_lipschitz, gamma_curve, omega, phi_curve, rollback_depth,
    rollback_depth_literal, PrivacyBudget, RollbackRule, SensitivityCurve,
};
pub use sru::{sru, SruOutcome};

use crate::checkpoint::CheckpointStore;
use crate::engine::{ConvergenceStop, Federation, TwinHistory};
use crate::error::{Error, Result};
use crate::model::TwinModel;
use crate::topology::ConnectivityMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UntwinRequest {
    pub target: usize,
    pub issued_round: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UntwinSet {
    pub target: usize,
    pub members: BTreeSet<usize>,
    /// `Φ(n, target)` for every candidate other than the target.
    pub scores: BTreeMap<usize, f64>,
    #[serde(with = "crate::float_serde")]
    pub threshold: f64,
}

impl UntwinSet {
    /// `I(n_u)`: the strongest coupling among non-target members, or 1 when
    /// the set is the target alone.
    pub fn target_importance(&self) -> f64 {
        let coupled = self
            .members
            .iter()
            .filter(|&&n| n != self.target)
            .map(|n| self.scores[n])
            .fold(f64::NEG_INFINITY, f64::max);
        if coupled.is_finite() {
            coupled
        } else {
            1.0
        }
    }
}

/// `I(n) = Φ(n, target)` for every other NDT.
pub fn importance_scores(c: &ConnectivityMatrix, target: usize) -> Result<BTreeMap<usize, f64>> {
    if target >= c.n {
        return Err(Error::invalid(format!(
            "unknown NDT {target} in a network of {}",
            c.n
        )));
    }
    Ok((0..c.n)
        .filter(|&n| n != target)
        .map(|n| (n, c.get(n, target)))
        .collect())
}

/// `S_u = {n : I(n) ≥ θ} ∪ {target}`.
pub fn build_untwin_set(
    scores: &BTreeMap<usize, f64>,
    theta: f64,
    target: usize,
) -> Result<UntwinSet> {
    if !(theta >= 0.0) {
        return Err(Error::invalid(format!(
            "untwinning threshold must be >= 0, got {theta}"
        )));
    }
    let mut members: BTreeSet<usize> = scores
        .iter()
        .filter(|(_, &s)| s >= theta)
        .map(|(&n, _)| n)
        .collect();
    members.insert(target);
    Ok(UntwinSet {
        target,
        members,
        scores: scores.clone(),
        threshold: theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackPlan {
    pub targets: Vec<usize>,
    /// Current round T.
    pub rounds: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub t_safe: u64,
    pub t_star: u64,
    pub replay_extension: u64,
    pub phi_at_safe: f64,
    pub sigma: f64,
    /// Key of the perturbation substream.
    pub noise_stream: u64,
}

impl RollbackPlan {
    /// Remap rounds the plan schedules: `K + replay_extension`.
    pub fn remap_rounds(&self) -> u64 {
        self.rounds - self.t_star
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UntwinConfig {
    /// Untwinning threshold θ; `"inf"` keeps only the target.
    #[serde(with = "crate::float_serde")]
    pub theta: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub gamma_star: Option<f64>,
    pub sigma_min: f64,
    pub rollback_rule: RollbackRule,
    pub convergence_stop: Option<ConvergenceStop>,
    /// Overrides the calibrated noise scale.
    pub noise_override: Option<f64>,
    /// Forces the rollback round; sets both t_safe and t*.
    pub force_t_star: Option<u64>,
    /// Overrides the estimated smoothness constant L.
    pub lipschitz: Option<f64>,
    pub lipschitz_probes: usize,
}

impl Default for UntwinConfig {
    fn default() -> Self {
        Self {
            theta: 1.2,
            epsilon: 1.0,
            beta: 0.05,
            gamma_star: None,
            sigma_min: 1e-6,
            rollback_rule: RollbackRule::Theorem,
            convergence_stop: None,
            noise_override: None,
            force_t_star: None,
            lipschitz: None,
            lipschitz_probes: 100,
        }
    }
}

impl UntwinConfig {
    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        self.budget()?;
        if !(self.theta >= 0.0) {
            return Err(Error::invalid("theta must be >= 0"));
        }
        if !(self.sigma_min >= 0.0) {
            return Err(Error::invalid("sigma_min must be >= 0"));
        }
        if self.gamma_star.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::invalid("gamma_star must be positive"));
        }
        if self
            .noise_override
            .is_some_and(|s| !(s >= 0.0 && s.is_finite()))
        {
            return Err(Error::invalid("noise override must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Everything an untwinning run reads: the forward history, the store, the
/// current connectivity and the training context used for remapping.
#[derive(Clone, Copy)]
pub struct UntwinContext<'a> {
    pub fed: Federation<'a>,
    pub history: &'a TwinHistory,
    pub store: Option<&'a CheckpointStore>,
    pub connectivity: &'a ConnectivityMatrix,
    pub cfg: &'a UntwinConfig,
}

/// Sensitivity analysis of one request over a candidate NDT list.
#[derive(Clone, Debug)]
pub(crate) struct TargetAnalysis {
    pub set: UntwinSet,
    pub curve: SensitivityCurve,
    pub k: u64,
    pub t_safe: u64,
}

impl<'a> UntwinContext<'a> {
    pub fn rounds(&self) -> u64 {
        self.history.rounds()
    }

    /// NDTs that took part in the last recorded round.
    pub fn participants(&self) -> Vec<usize> {
        self.history.records.last().map_or_else(
            || (0..self.fed.num_ndts()).collect(),
            |r| r.participating.clone(),
        )
    }

    pub fn lipschitz(&self) -> Result<f64> {
        match self.cfg.lipschitz {
            Some(l) => Ok(l),
            None => estimate_lipschitz(
                self.fed.cfg.arch,
                self.fed.datasets,
                self.history,
                &self.fed.seeds,
                self.cfg.lipschitz_probes,
            ),
        }
    }

    pub(crate) fn analyse(
        &self,
        target: usize,
        candidates: &[usize],
        lipschitz: f64,
    ) -> Result<TargetAnalysis> {
        let budget = self.cfg.budget()?;
        let mut scores = importance_scores(self.connectivity, target)?;
        scores.retain(|n, _| candidates.contains(n));
        let set = build_untwin_set(&scores, self.cfg.theta, target)?;
        let curve = SensitivityCurve::compute(
            self.history,
            &set.members,
            set.target_importance(),
            self.fed.cfg.eta,
            lipschitz,
            &budget,
        )?;
        let (k, t_safe) = match self.cfg.force_t_star {
            Some(t) if t > self.rounds() => {
                return Err(Error::invalid(format!(
                    "forced rollback round {t} is past T = {}",
                    self.rounds()
                )))
            }
            Some(t) => (self.rounds() - t, t),
            None => curve.rollback(self.cfg.rollback_rule, self.cfg.gamma_star, &budget),
        };
        Ok(TargetAnalysis {
            set,
            curve,
            k,
            t_safe,
        })
    }

    pub(crate) fn sigma_for(&self, phi_at_safe: f64) -> Result<f64> {
        match self.cfg.noise_override {
            Some(s) => Ok(s),
            None => Ok(noise_sigma(
                phi_at_safe,
                &self.cfg.budget()?,
                self.cfg.sigma_min,
            )),
        }
    }

    /// Model to restart from for a rollback to `t_safe`, and its round t*.
    pub(crate) fn rollback_start(&self, t_safe: u64) -> Result<(TwinModel, u64)> {
        let t = self.rounds();
        if t_safe >= t {
            return Ok((self.history.final_model().clone(), t));
        }
        match (self.cfg.force_t_star, self.store) {
            (None, Some(store)) => {
                let r = store.retrieve_proximal(t_safe);
                Ok((r.checkpoint.model.clone(), r.checkpoint.round))
            }
            _ => {
                let m = self.history.model_at(t_safe).ok_or_else(|| {
                    Error::invalid(format!("round {t_safe} missing from history"))
                })?;
                Ok((m.clone(), t_safe))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> ConnectivityMatrix {
        let mut c = ConnectivityMatrix::zeros(4);
        c.set_symmetric(1, 0, 0.9);
        c.set_symmetric(2, 0, 0.4);
        c.set_symmetric(3, 0, 0.7);
        c
    }

    #[test]
    fn importance_examples() {
        let mut c = ConnectivityMatrix::zeros(2);
        c.set_symmetric(0, 1, 0.7);
        assert_eq!(importance_scores(&c, 1).unwrap()[&0], 0.7);
        assert!(importance_scores(&ConnectivityMatrix::zeros(3), 0)
            .unwrap()
            .values()
            .all(|&s| s == 0.0));
        let m = matrix();
        let s = importance_scores(&m, 0).unwrap();
        assert!((1..4).all(|n| s[&n] == m.get(n, 0)));
        assert!(!s.contains_key(&0));
        assert!(importance_scores(&m, 4).is_err());
    }

    #[test]
    fn untwin_set_examples() {
        let s = importance_scores(&matrix(), 0).unwrap();
        let set = build_untwin_set(&s, 0.6, 0).unwrap();
        assert_eq!(set.members, [0, 1, 3].into());
        assert_eq!(set.target_importance(), 0.9);
        assert_eq!(
            build_untwin_set(&s, 0.0, 0).unwrap().members,
            [0, 1, 2, 3].into()
        );
        let alone = build_untwin_set(&s, f64::INFINITY, 0).unwrap();
        assert_eq!(alone.members, [0].into());
        assert_eq!(alone.target_importance(), 1.0);
        assert!(build_untwin_set(&s, -1.0, 0).is_err());
    }

    #[test]
    fn set_serializes_infinite_threshold() {
        let s = importance_scores(&matrix(), 0).unwrap();
        let set = build_untwin_set(&s, f64::INFINITY, 0).unwrap();
        let json = serde_json::to_string(&set).unwrap();
        assert_eq!(serde_json::from_str::<UntwinSet>(&json).unwrap(), set);
    }
}
