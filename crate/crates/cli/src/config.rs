//! Run configuration: an optional TOML file, overridden by flags.

use std::path::Path;

use serde::Deserialize;

use molgrad::imaging::Boundary;
use molgrad::pnp::{StepMode, DEFAULT_GAMMA_STEP, DEFAULT_MAX_ITER, DEFAULT_REL_TOL};
use molgrad::training::{LrSegment, TrainConfig};
use molgrad::JacobianMode;

use crate::exit::Failure;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub train: TrainSection,
    pub solver: SolverSection,
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_barrier: f64,
    pub noise_sigma: f64,
    /// `[first_epoch, last_epoch, rate]` triples; defaults to the two-phase
    /// schedule.
    pub learning_rates: Option<Vec<(usize, usize, f64)>>,
    pub checkpoint_every: usize,
    /// `"warm"` or `"random"`.
    pub init: String,
    pub hidden: usize,
    pub top: usize,
    /// sReLU half-width for `init = "random"`.
    pub gamma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(100);
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            alpha_barrier: t.alpha_barrier,
            noise_sigma: t.noise_sigma,
            learning_rates: None,
            checkpoint_every: 0,
            init: "warm".into(),
            hidden: 0,
            top: 0,
            gamma: 0.1,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.epochs);
        cfg.batch_size = self.batch_size;
        cfg.alpha_barrier = self.alpha_barrier;
        cfg.noise_sigma = self.noise_sigma;
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.seed = seed;
        if let Some(rates) = &self.learning_rates {
            cfg.schedule = rates
                .iter()
                .map(|&(first, last, rate)| LrSegment { first, last, rate })
                .collect();
        }
        cfg
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub mu: f64,
    pub sigma: Option<f64>,
    pub gamma_step: f64,
    pub mode: String,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub boundary: String,
    /// Random probes added to the degraded image when estimating `L̂_D`.
    pub lipschitz_probes: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            mu: 1000.0,
            sigma: None,
            gamma_step: DEFAULT_GAMMA_STEP,
            mode: "strict".into(),
            max_iter: DEFAULT_MAX_ITER,
            rel_tol: DEFAULT_REL_TOL,
            boundary: "replicate".into(),
            lipschitz_probes: 8,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub samples: usize,
    pub pairs: usize,
    pub low: f64,
    pub high: f64,
    /// `"analytic"` or `"fd"`.
    pub jacobian: String,
    pub sprox_grid: (f64, f64, usize),
    pub sprox_points: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            samples: 20,
            pairs: 1000,
            low: 0.0,
            high: 1.0,
            jacobian: "analytic".into(),
            sprox_grid: (-5.0, 5.0, 10_000),
            sprox_points: 20,
        }
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

pub fn parse_mode(s: &str) -> Result<StepMode, Failure> {
    match s {
        "strict" => Ok(StepMode::Strict),
        "relaxed" => Ok(StepMode::Relaxed),
        _ => Err(Failure::validation(format!("mode must be strict or relaxed, got '{s}'"))),
    }
}

pub fn parse_boundary(s: &str) -> Result<Boundary, Failure> {
    match s {
        "zero" | "zero-pad" => Ok(Boundary::ZeroPad),
        "replicate" => Ok(Boundary::Replicate),
        _ => Err(Failure::validation(format!("boundary must be zero or replicate, got '{s}'"))),
    }
}

pub fn parse_jacobian(s: &str) -> Result<JacobianMode, Failure> {
    match s {
        "analytic" => Ok(JacobianMode::Analytic),
        "fd" => Ok(JacobianMode::FiniteDifference),
        _ => Err(Failure::validation(format!("jacobian must be analytic or fd, got '{s}'"))),
    }
}
