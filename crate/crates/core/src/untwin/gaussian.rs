use rand_distr::{Distribution, Normal};

use super::sensitivity::PrivacyBudget;
use crate::error::{Error, Result};
use crate::model::TwinModel;
use crate::rng::{Domain, SeedTree, StreamId};

/// `σ = max(σ_min, Ω·φ(t_safe)/ε)`.
pub fn noise_sigma(phi_at_safe: f64, budget: &PrivacyBudget, sigma_min: f64) -> f64 {
    sigma_min.max(budget.omega * phi_at_safe / budget.epsilon)
}

pub fn perturbation_stream(key: u64) -> StreamId {
    StreamId::new(Domain::Perturb, key, 0)
}

/// Adds i.i.d. `N(0, σ²)` noise to every coordinate, drawn from `stream`.
pub fn perturb(
    model: &TwinModel,
    sigma: f64,
    seeds: &SeedTree,
    stream: StreamId,
) -> Result<TwinModel> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise scale must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(model.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seeds.stream(stream);
    let params = model
        .params()
        .iter()
        .map(|w| w + normal.sample(&mut rng))
        .collect();
    model.with_params(params)
}
