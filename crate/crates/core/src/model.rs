//! Twin model: a flat parameter vector plus a small regression predictor.
//!
//! Two architectures are supported. `Linear` is an affine map over the lag
//! window (optionally bias-free) and `Mlp` is a single hidden tanh layer
//! followed by a linear read-out. Parameters of the MLP are laid out as
//! `[W1 (hidden x input, row-major) | b1 (hidden) | w2 (hidden) | b2]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Linear { bias: bool },
    Mlp { hidden: usize },
}

impl Default for Arch {
    fn default() -> Self {
        Arch::Linear { bias: true }
    }
}

impl Arch {
    pub fn param_count(&self, input_dim: usize) -> usize {
        match *self {
            Arch::Linear { bias } => input_dim + usize::from(bias),
            Arch::Mlp { hidden } => hidden * input_dim + 2 * hidden + 1,
        }
    }

    /// Short textual tag used in checkpoint manifests.
    pub fn tag(&self) -> String {
        match *self {
            Arch::Linear { bias: true } => "linear".to_string(),
            Arch::Linear { bias: false } => "linear-nobias".to_string(),
            Arch::Mlp { hidden } => format!("mlp-{hidden}"),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "linear" => Ok(Arch::Linear { bias: true }),
            "linear-nobias" => Ok(Arch::Linear { bias: false }),
            _ => tag
                .strip_prefix("mlp-")
                .and_then(|h| h.parse().ok())
                .filter(|&h: &usize| h > 0)
                .map(|hidden| Arch::Mlp { hidden })
                .ok_or_else(|| Error::Format(format!("unknown architecture tag {tag:?}"))),
        }
    }
}

/// Equality compares architecture and parameters; the version counter is
/// bookkeeping and ignored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwinModel {
    params: Vec<f64>,
    arch: Arch,
    input_dim: usize,
    version: u64,
}

impl PartialEq for TwinModel {
    fn eq(&self, other: &Self) -> bool {
        self.same_shape(other) && self.params == other.params
    }
}

impl TwinModel {
    pub fn zeros(arch: Arch, input_dim: usize) -> Self {
        Self {
            params: vec![0.0; arch.param_count(input_dim)],
            arch,
            input_dim,
            version: 0,
        }
    }

    pub fn from_params(arch: Arch, input_dim: usize, params: Vec<f64>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        let expected = arch.param_count(input_dim);
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "{} expects {expected} parameters for input_dim {input_dim}, got {}",
                arch.tag(),
                params.len()
            )));
        }
        check_finite(&params)?;
        Ok(Self {
            params,
            arch,
            input_dim,
            version: 0,
        })
    }

    /// Initial model. Linear models start at zero; MLP weights are drawn
    /// Glorot-uniform with zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Arch, input_dim: usize, rng: &mut R) -> Self {
        let mut model = Self::zeros(arch, input_dim);
        if let Arch::Mlp { hidden } = arch {
            let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
            let a2 = (6.0 / (hidden + 1) as f64).sqrt();
            let (w1, rest) = model.params.split_at_mut(hidden * input_dim);
            for w in w1 {
                *w = rng.random_range(-a1..a1);
            }
            for w in &mut rest[hidden..2 * hidden] {
                *w = rng.random_range(-a2..a2);
            }
        }
        model
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// Replaces the parameters, bumping the version.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "parameter length {} does not match model dimension {}",
                params.len(),
                self.params.len()
            )));
        }
        check_finite(&params)?;
        Ok(Self {
            params,
            arch: self.arch,
            input_dim: self.input_dim,
            version: self.version + 1,
        })
    }

    pub fn same_shape(&self, other: &TwinModel) -> bool {
        self.arch == other.arch && self.input_dim == other.input_dim
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        predict(self, features)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("non-finite model parameters"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficSample {
    pub features: Vec<f64>,
    pub label: f64,
    pub sensor_id: usize,
    pub time_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub clip_threshold_applied: Option<f64>,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            clip_threshold_applied: None,
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn predict(model: &TwinModel, features: &[f64]) -> Result<f64> {
    if features.len() != model.input_dim {
        return Err(Error::invalid(format!(
            "feature length {} does not match input_dim {}",
            features.len(),
            model.input_dim
        )));
    }
    Ok(forward(model, features))
}

fn forward(model: &TwinModel, x: &[f64]) -> f64 {
    let p = &model.params;
    match model.arch {
        Arch::Linear { bias } => {
            let dot: f64 = p.iter().zip(x).map(|(w, xi)| w * xi).sum();
            if bias {
                dot + p[x.len()]
            } else {
                dot
            }
        }
        Arch::Mlp { hidden } => {
            let n_in = x.len();
            let (w1, rest) = p.split_at(hidden * n_in);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden);
            let mut y = b2[0];
            for j in 0..hidden {
                let row = &w1[j * n_in..(j + 1) * n_in];
                let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j];
                y += w2[j] * z.tanh();
            }
            y
        }
    }
}

fn check_batch(model: &TwinModel, batch: &[TrafficSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.features.len() != model.input_dim) {
        return Err(Error::invalid(format!(
            "sample of sensor {} at t={} has {} features, model expects {}",
            s.sensor_id,
            s.time_index,
            s.features.len(),
            model.input_dim
        )));
    }
    Ok(())
}

/// Mean squared error over the batch.
pub fn loss(model: &TwinModel, batch: &[TrafficSample]) -> Result<f64> {
    check_batch(model, batch)?;
    let sum: f64 = batch
        .iter()
        .map(|s| {
            let r = forward(model, &s.features) - s.label;
            r * r
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Analytic gradient of [`loss`].
pub fn gradient(model: &TwinModel, batch: &[TrafficSample]) -> Result<Gradient> {
    let refs: Vec<&TrafficSample> = batch.iter().collect();
    gradient_of(model, &refs)
}

pub(crate) fn gradient_of(model: &TwinModel, batch: &[&TrafficSample]) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n_in = model.input_dim;
    if batch.iter().any(|s| s.features.len() != n_in) {
        return Err(Error::invalid(
            "sample feature length does not match input_dim",
        ));
    }
    let p = &model.params;
    let mut g = vec![0.0; p.len()];
    let scale = 2.0 / batch.len() as f64;
    match model.arch {
        Arch::Linear { bias } => {
            for s in batch {
                let r = scale * (forward(model, &s.features) - s.label);
                for (gi, xi) in g.iter_mut().zip(&s.features) {
                    *gi += r * xi;
                }
                if bias {
                    g[n_in] += r;
                }
            }
        }
        Arch::Mlp { hidden } => {
            let (w1, rest) = p.split_at(hidden * n_in);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden);
            let mut act = vec![0.0; hidden];
            for s in batch {
                let x = &s.features;
                let mut y = b2[0];
                for j in 0..hidden {
                    let row = &w1[j * n_in..(j + 1) * n_in];
                    let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j];
                    act[j] = z.tanh();
                    y += w2[j] * act[j];
                }
                let dy = scale * (y - s.label);
                let (gw1, grest) = g.split_at_mut(hidden * n_in);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (gw2, gb2) = grest.split_at_mut(hidden);
                gb2[0] += dy;
                for j in 0..hidden {
                    gw2[j] += dy * act[j];
                    let dz = dy * w2[j] * (1.0 - act[j] * act[j]);
                    gb1[j] += dz;
                    for (gw, xi) in gw1[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                        *gw += dz * xi;
                    }
                }
            }
        }
    }
    Ok(Gradient::new(g))
}

/// Rescales `g` onto the ball of radius `threshold` when it lies outside.
pub fn clip(g: &Gradient, threshold: f64) -> Gradient {
    debug_assert!(threshold > 0.0);
    let norm = g.norm();
    if norm <= threshold {
        return g.clone();
    }
    let s = threshold / norm;
    Gradient {
        values: g.values.iter().map(|v| v * s).collect(),
        clip_threshold_applied: Some(threshold),
    }
}

pub fn sgd_step(model: &TwinModel, g: &Gradient, eta: f64) -> Result<TwinModel> {
    if g.values.len() != model.params.len() {
        return Err(Error::invalid(format!(
            "gradient length {} does not match model dimension {}",
            g.values.len(),
            model.params.len()
        )));
    }
    let params = model
        .params
        .iter()
        .zip(&g.values)
        .map(|(w, gi)| w - eta * gi)
        .collect();
    model.with_params(params)
}
