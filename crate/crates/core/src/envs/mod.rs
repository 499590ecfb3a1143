//! Desk-scale structured-action environments.
//!
//! Two deterministic environments stand behind one interface: a line of
//! traffic signals with physically coupled queues, and a torus pursuit game
//! whose dependencies come from spatial proximity. Both are exactly
//! reproducible from `(config, seed)`.

mod grid_signals;
mod prey_capture;

pub use grid_signals::GridSignals;
pub use prey_capture::{PreyCapture, PreyLayout};

use crate::action_space::{ActionSpaceSpec, StructuredAction};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-atomic observation rows: each row is the adjacency row `l_i`
/// (length `N`) concatenated with the environment's local features `o_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvObservation {
    pub per_atomic: Vec<Vec<f64>>,
    pub global_step: u64,
}

impl EnvObservation {
    pub fn n_atomic(&self) -> usize {
        self.per_atomic.len()
    }

    pub fn width(&self) -> usize {
        self.per_atomic.first().map_or(0, |r| r.len())
    }

    pub fn is_finite(&self) -> bool {
        self.per_atomic.iter().flatten().all(|v| v.is_finite())
    }

    /// A stable dedup/cache key over the observation contents.
    pub fn cache_key(&self) -> Vec<u64> {
        self.per_atomic.iter().flatten().map(|v| v.to_bits()).collect()
    }
}

/// One environment interaction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: EnvObservation,
    pub action: StructuredAction,
    pub reward: f64,
    pub next_obs: EnvObservation,
    pub done: bool,
}

/// Configuration of an environment instance, as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    GridSignals {
        n_signals: usize,
    },
    PreyCapture {
        n_predators: usize,
        grid: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layout: Option<PreyLayout>,
    },
}

impl EnvConfig {
    pub fn build(&self, seed: u64) -> Result<Env> {
        match self {
            EnvConfig::GridSignals { n_signals } => {
                Ok(Env::GridSignals(GridSignals::reset(*n_signals, seed)?))
            }
            EnvConfig::PreyCapture { n_predators, grid, layout } => Ok(Env::PreyCapture(
                PreyCapture::reset(*n_predators, *grid, seed, layout.clone())?,
            )),
        }
    }
}

/// Concrete environment instance. An enum rather than a trait object so the
/// whole simulator state can be serialized into checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Env {
    GridSignals(GridSignals),
    PreyCapture(PreyCapture),
}

impl Env {
    pub fn action_spec(&self) -> &ActionSpaceSpec {
        match self {
            Env::GridSignals(e) => e.action_spec(),
            Env::PreyCapture(e) => e.action_spec(),
        }
    }

    pub fn obs(&self) -> EnvObservation {
        match self {
            Env::GridSignals(e) => e.obs(),
            Env::PreyCapture(e) => e.obs(),
        }
    }

    pub fn step(&mut self, action: &StructuredAction) -> Result<(EnvObservation, f64, bool)> {
        match self {
            Env::GridSignals(e) => e.step(action),
            Env::PreyCapture(e) => e.step(action),
        }
    }

    pub fn done(&self) -> bool {
        match self {
            Env::GridSignals(e) => e.done(),
            Env::PreyCapture(e) => e.done(),
        }
    }

    pub fn horizon(&self) -> u64 {
        match self {
            Env::GridSignals(e) => e.horizon(),
            Env::PreyCapture(e) => e.horizon(),
        }
    }
}

pub(crate) fn check_action(action: &StructuredAction, spec: &ActionSpaceSpec) -> Result<()> {
    if action.len() != spec.n_atomic {
        return Err(Error::InvalidInput(format!(
            "action length {} != n_atomic {}",
            action.len(),
            spec.n_atomic
        )));
    }
    if action.values().iter().any(|&v| v as usize >= spec.arity) {
        return Err(Error::InvalidInput("action value out of range".into()));
    }
    Ok(())
}
