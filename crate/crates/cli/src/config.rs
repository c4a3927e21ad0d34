//! Experiment configuration: a flat TOML document with a single nested
//! `[params]` table for the scaling parameters.
//!
//! ```toml
//! experiment = "lln"
//! phi0 = "cosine"
//! observable = "cos_x1"
//! t = 0.5
//! members = 200
//! samples = 4000
//! seed = 1
//! out = "out"
//!
//! [params]
//! epsilon = 0.005
//! beta = 1.0
//! dim = 2
//! lambda = 10.0
//! # mu = 1.0   # optional override for test-scale regimes
//! ```

use rayleigh_core::ensemble::Perturbation;
use rayleigh_core::geom::ScalingParams;
use rayleigh_core::stats::Observable;
use serde::{Deserialize, Serialize};

pub const EXPERIMENTS: [&str; 6] = ["simulate", "kinetic", "cluster", "dyson", "lln", "partition"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub epsilon: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "two")]
    pub dim: usize,
    #[serde(default)]
    pub lambda: f64,
    /// Optional fugacity override; when absent mu = epsilon^(1-d).
    #[serde(default)]
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default = "default_phi0")]
    pub phi0: String,
    #[serde(default = "default_observable")]
    pub observable: String,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_members")]
    pub members: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: String,
    /// Cluster order (tree counts and cumulant integrals up to this k).
    #[serde(default = "default_k")]
    pub k: usize,
    pub params: ParamsConfig,
}

fn one() -> f64 {
    1.0
}
fn two() -> usize {
    2
}
fn default_phi0() -> String {
    "cosine".into()
}
fn default_observable() -> String {
    "cos_x1".into()
}
fn default_t() -> f64 {
    0.5
}
fn default_members() -> usize {
    200
}
fn default_samples() -> usize {
    4000
}
fn default_seed() -> u64 {
    1
}
fn default_out() -> String {
    "out".into()
}
fn default_k() -> usize {
    4
}

impl Default for ExperimentConfig {
    /// The law-of-large-numbers recipe at its headline scale.
    fn default() -> Self {
        Self {
            experiment: "lln".into(),
            phi0: default_phi0(),
            observable: default_observable(),
            t: default_t(),
            members: default_members(),
            samples: default_samples(),
            seed: default_seed(),
            out: default_out(),
            k: default_k(),
            params: ParamsConfig {
                epsilon: 0.005,
                beta: 1.0,
                dim: 2,
                lambda: 10.0,
                mu: None,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config parse error: {e}"))
    }

    /// Validate every field; returns the full list of offenses so a bad
    /// config is fixed in one round trip.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            errs.push(format!(
                "experiment: unknown name `{}` (expected one of {})",
                self.experiment,
                EXPERIMENTS.join(", ")
            ));
        }
        if Perturbation::by_name(&self.phi0).is_none() {
            errs.push(format!(
                "phi0: unknown preset `{}` (expected uniform, cosine, gauss-shift or zero)",
                self.phi0
            ));
        }
        if Observable::by_name(&self.observable).is_none() {
            errs.push(format!(
                "observable: unknown preset `{}` (expected one, cos_x1 or tag)",
                self.observable
            ));
        }
        if !(self.t.is_finite() && self.t >= 0.0) {
            errs.push(format!("t: must be a finite nonnegative time, got {}", self.t));
        }
        if self.experiment == "lln" && self.members < 100 {
            errs.push(format!(
                "members: the lln experiment needs at least 100 members, got {}",
                self.members
            ));
        }
        if self.samples < 2 {
            errs.push(format!("samples: need at least 2, got {}", self.samples));
        }
        if !(2..=7).contains(&self.k) {
            errs.push(format!("k: cluster order must lie in 2..=7, got {}", self.k));
        }
        let p = &self.params;
        if !(p.dim == 2 || p.dim == 3) {
            errs.push(format!("params.dim: must be 2 or 3, got {}", p.dim));
        }
        let eps_ok = if p.mu.is_some() {
            p.epsilon >= 0.0 && p.epsilon < 0.25
        } else {
            p.epsilon > 0.0 && p.epsilon < 0.25
        };
        if !eps_ok {
            errs.push(format!(
                "params.epsilon: must lie in {} 1/4), got {}",
                if p.mu.is_some() { "[0," } else { "(0," },
                p.epsilon
            ));
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            errs.push(format!("params.beta: must be positive, got {}", p.beta));
        }
        let mu = p.mu.unwrap_or_else(|| {
            if p.epsilon > 0.0 {
                p.epsilon.powi(1 - p.dim as i32)
            } else {
                f64::INFINITY
            }
        });
        if let Some(m) = p.mu {
            if !(m > 0.0 && m.is_finite()) {
                errs.push(format!("params.mu: must be positive, got {m}"));
            }
        }
        if !(p.lambda >= 0.0 && p.lambda < mu) {
            errs.push(format!(
                "params.lambda: must satisfy 0 <= lambda < mu = {mu}, got {}",
                p.lambda
            ));
        }
        if matches!(self.experiment.as_str(), "kinetic" | "dyson" | "lln") && p.dim != 2 {
            errs.push(format!(
                "params.dim: the {} experiment uses the planar grid solver, dim must be 2",
                self.experiment
            ));
        }
        if self.experiment == "partition" && mu > 2.0 {
            errs.push(format!(
                "params.mu: the partition experiment needs mu <= 2 for the series form, got {mu}"
            ));
        }
        errs
    }

    pub fn scaling(&self) -> Result<ScalingParams, rayleigh_core::Error> {
        let p = &self.params;
        match p.mu {
            Some(mu) => ScalingParams::with_mu(p.epsilon, p.beta, p.dim, p.lambda, mu),
            None => ScalingParams::new(p.epsilon, p.beta, p.dim, p.lambda),
        }
    }
}
