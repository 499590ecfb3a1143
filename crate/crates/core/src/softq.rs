//! The soft-Q energy model.
//!
//! `Q(s_e, a_e)` scores a full structured action against an environment
//! observation; the induced policy is `pi(a|s) ∝ exp(Q(s,a)/alpha)`. The
//! module provides importance-weighted and exhaustive soft-value estimates,
//! soft Bellman targets against the target copy, the squared-error
//! regression loss with gradients, and a tabular soft-Q-iteration oracle
//! for explicit MDPs.

use crate::action_space::{enumerate_actions, ActionSpaceSpec, StructuredAction};
use crate::autodiff::params::{logsumexp, soft_update, ParameterSet};
use crate::autodiff::tape::{NodeId, Tape};
use crate::encoder::{build_mlp_head, build_trunk, init_mlp_head, init_trunk, split_obs_action, EncoderConfig};
use crate::envs::EnvObservation;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Which copy of the parameters to evaluate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Online,
    Target,
}

const SET_Q: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftQConfig {
    pub alpha: f64,
    /// Discount factor.
    pub gamma: f64,
    pub encoder: EncoderConfig,
}

impl Default for SoftQConfig {
    fn default() -> Self {
        Self { alpha: 1.0, gamma: 0.95, encoder: EncoderConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct SoftQFunction {
    pub params: ParameterSet,
    pub target_params: ParameterSet,
    pub config: SoftQConfig,
    local_dim: usize,
}

impl SoftQFunction {
    /// Builds a fresh network for observations of `obs_width` columns.
    pub fn new(spec: &ActionSpaceSpec, obs_width: usize, config: SoftQConfig, seed: u64) -> Result<Self> {
        if !(config.alpha > 0.0) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        if !(0.0 < config.gamma && config.gamma < 1.0) {
            return Err(Error::InvalidInput("gamma must lie in (0,1)".into()));
        }
        if obs_width < spec.n_atomic {
            return Err(Error::InvalidInput("observation narrower than adjacency block".into()));
        }
        let local_dim = obs_width - spec.n_atomic + spec.arity;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        init_trunk(&mut params, &mut rng, "enc", local_dim, &config.encoder)?;
        init_mlp_head(&mut params, &mut rng, "head", config.encoder.hidden_dim, 1, false)?;
        let target_params = params.clone();
        Ok(Self { params, target_params, config, local_dim })
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        self.config.alpha = alpha;
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn pick(&self, kind: ParamKind) -> &ParameterSet {
        match kind {
            ParamKind::Online => &self.params,
            ParamKind::Target => &self.target_params,
        }
    }

    /// Builds the scalar Q node on a tape.
    pub fn build_q_node(
        &self,
        tape: &mut Tape,
        kind: ParamKind,
        obs: &EnvObservation,
        action: &StructuredAction,
        spec: &ActionSpaceSpec,
    ) -> Result<NodeId> {
        let params = self.pick(kind);
        let (deg, local) = split_obs_action(obs, action, spec)?;
        if local.cols() != self.local_dim {
            return Err(Error::InvalidInput(format!(
                "observation width does not match network input {}",
                self.local_dim
            )));
        }
        let deg = tape.constant(deg);
        let local = tape.constant(local);
        let trunk =
            build_trunk(tape, SET_Q, "enc", params, deg, local, spec, &self.config.encoder, &mut None)?;
        let pooled = tape.mean_rows(trunk);
        build_mlp_head(tape, SET_Q, "head", params, pooled)
    }

    /// Scalar energy-model score for one (observation, action) pair.
    pub fn q_value(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        action: &StructuredAction,
        spec: &ActionSpaceSpec,
    ) -> Result<f64> {
        let mut tape = Tape::with_capacity(64);
        let node = self.build_q_node(&mut tape, kind, obs, action, spec)?;
        let q = tape.value(node).item();
        if !q.is_finite() {
            return Err(Error::ModelDivergence("q_value is non-finite".into()));
        }
        Ok(q)
    }

    /// Batch evaluation; identical to looping `q_value` over the items.
    pub fn q_values(
        &self,
        kind: ParamKind,
        items: &[(&EnvObservation, &StructuredAction)],
        spec: &ActionSpaceSpec,
    ) -> Result<Vec<f64>> {
        items.iter().map(|(o, a)| self.q_value(kind, o, a, spec)).collect()
    }

    /// Importance-weighted soft value of Eq.-style form
    /// `alpha * log( (1/M) * sum exp(Q/alpha) / q(a) )`, max-subtracted.
    pub fn soft_value_estimate(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        samples: &[(StructuredAction, f64)],
        spec: &ActionSpaceSpec,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("soft value needs at least one sample".into()));
        }
        let alpha = self.config.alpha;
        // log of each summand: Q/alpha - log q(a); constants folded outside.
        let mut terms = Vec::with_capacity(samples.len());
        for (action, q_prob) in samples {
            if !(*q_prob > 0.0) {
                return Err(Error::InvalidInput("proposal probability must be positive".into()));
            }
            let q = self.q_value(kind, obs, action, spec)?;
            terms.push(q - alpha * q_prob.ln());
        }
        // alpha * [ log sum exp(term/alpha) - log M ]
        let lse = logsumexp(&terms, alpha)?;
        Ok(lse - alpha * (samples.len() as f64).ln())
    }

    /// Exact soft value by exhaustive enumeration: `alpha * logsumexp_a Q/alpha`.
    pub fn soft_value_exhaustive(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        spec: &ActionSpaceSpec,
        limit: u64,
    ) -> Result<f64> {
        let actions = enumerate_actions(spec, limit)?;
        let qs = actions
            .iter()
            .map(|a| self.q_value(kind, obs, a, spec))
            .collect::<Result<Vec<f64>>>()?;
        logsumexp(&qs, self.config.alpha)
    }

    /// Soft Bellman target `r + gamma * V_target(s')`, or `r` when done.
    /// `v_next` must come from a target-parameter soft value estimate.
    pub fn bellman_target(&self, reward: f64, v_next: f64, done: bool) -> f64 {
        if done {
            reward
        } else {
            reward + self.config.gamma * v_next
        }
    }

    /// Mean of `0.5 * (target - Q(s,a))^2` over the batch, with gradients
    /// accumulated into the online parameters. Targets are plain numbers, so
    /// nothing flows back through them.
    pub fn q_loss(
        &mut self,
        items: &[(&EnvObservation, &StructuredAction, f64)],
        spec: &ActionSpaceSpec,
    ) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::InvalidInput("q_loss over empty batch".into()));
        }
        let mut tape = Tape::with_capacity(64 * items.len());
        let mut residual_nodes = Vec::with_capacity(items.len());
        for (obs, action, target) in items {
            let q = self.build_q_node(&mut tape, ParamKind::Online, obs, action, spec)?;
            let t = tape.scalar(*target);
            let d = tape.sub(t, q);
            let sq = tape.mul(d, d);
            residual_nodes.push(sq);
        }
        let mut total = residual_nodes[0];
        for &n in &residual_nodes[1..] {
            total = tape.add(total, n);
        }
        let loss = tape.scale(total, 0.5 / items.len() as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingDivergence("q_loss is non-finite".into()));
        }
        tape.backward(loss)?;
        self.params.pull_grads_scaled(&tape, SET_Q, 1.0)?;
        Ok(value)
    }

    /// Log Boltzmann reward `log R(a|s) = Q(s,a) / alpha`.
    pub fn boltzmann_log_reward(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        action: &StructuredAction,
        spec: &ActionSpaceSpec,
    ) -> Result<f64> {
        Ok(self.q_value(kind, obs, action, spec)? / self.config.alpha)
    }

    /// Soft-updates the target copy toward the online parameters.
    pub fn update_target(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.target_params, &self.params, tau)
    }
}

/// An explicit finite MDP for the soft-Q-iteration oracle.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// reward[s][a]
    pub reward: Vec<Vec<f64>>,
    /// transitions[s][a] = [(next_state, probability)]
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.n_states * self.n_actions > 100_000 {
            return Err(Error::InvalidInput("MDP too large for tabular iteration".into()));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let total: f64 = self.transitions[s][a].iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "transitions from ({s},{a}) sum to {total}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fixed-point iteration of the soft Bellman backup:
/// `Q_{t+1}(s,a) = r(s,a) + gamma * E_{s'}[alpha * logsumexp_a' Q_t(s',a')/alpha]`.
pub fn tabular_soft_q_iteration(
    mdp: &TabularMdp,
    alpha: f64,
    gamma: f64,
    iters: usize,
) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for _ in 0..iters {
        let values: Vec<f64> =
            q.iter().map(|row| logsumexp(row, alpha)).collect::<Result<Vec<f64>>>()?;
        let mut next = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let ev: f64 =
                    mdp.transitions[s][a].iter().map(|&(s2, p)| p * values[s2]).sum();
                next[s][a] = mdp.reward[s][a] + gamma * ev;
            }
        }
        q = next;
    }
    Ok(q)
}
