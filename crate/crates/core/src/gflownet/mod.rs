//! The reward-conditional flow-network sampler.
//!
//! A forward policy incrementally assigns atomic actions; a backward policy
//! scores which assignment to undo; a conditional log-partition head
//! estimates the total flow of each conditioning observation. Training uses
//! the trajectory-balance objective in the log domain, optionally mixed with
//! a regression of log Z onto the soft value. The exact terminating
//! distribution of the current policy is computable by dynamic programming
//! at desk scale, which is what every oracle check in this crate leans on.

pub mod dp;
pub mod tabular;

pub use tabular::{all_complete_trajectories, TabularFlow};

use crate::action_space::{
    apply, children, ActionSpaceSpec, BuildStep, BuildTrajectory, PartialAction, StructuredAction,
};
use crate::autodiff::kernels::linear_attention;
use crate::autodiff::params::{soft_update, xavier_uniform, ParameterSet};
use crate::autodiff::tape::{NodeId, Tape, NEG_MASK};
use crate::encoder::{
    assignment_onehot, build_mlp_head, build_trunk, init_mlp_head, init_trunk, maybe_dropout,
    split_obs, EncoderConfig,
};
use crate::envs::EnvObservation;
use crate::error::{Error, Result};
use crate::softq::ParamKind;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const SET_F: u8 = 1;
const SET_B: u8 = 2;
const SET_Z: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GFlowNetConfig {
    pub encoder: EncoderConfig,
    /// Width of attention queries/keys/values.
    pub attn_dim: usize,
    /// Uniform mixing weight during exploratory sampling.
    pub epsilon_uniform: f64,
    /// Temperature applied to logits before sampling.
    pub sampling_temperature: f64,
    /// Dropout on the attention output; 0 disables.
    pub attn_dropout: f64,
}

impl Default for GFlowNetConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            attn_dim: 32,
            epsilon_uniform: 0.05,
            sampling_temperature: 1.0,
            attn_dropout: 0.0,
        }
    }
}

/// Forward-policy output for one state: logits over the full
/// position-major layout (`N*K` entries, assigned rows masked), plus the
/// terminate entry when legal.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub n: usize,
    pub k: usize,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub has_terminate: bool,
}

impl StepDistribution {
    pub fn flat_index(&self, step: &BuildStep) -> usize {
        match *step {
            BuildStep::Assign { position, value } => position * self.k + value as usize,
            BuildStep::Terminate => self.n * self.k,
        }
    }

    pub fn step_at(&self, flat: usize) -> BuildStep {
        if flat == self.n * self.k {
            BuildStep::Terminate
        } else {
            BuildStep::Assign { position: flat / self.k, value: (flat % self.k) as u8 }
        }
    }

    pub fn log_prob(&self, step: &BuildStep) -> f64 {
        self.log_probs[self.flat_index(step)]
    }

    /// Legal steps (unmasked entries) with their log-probabilities.
    pub fn legal(&self) -> Vec<(BuildStep, f64)> {
        self.logits
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > NEG_MASK)
            .map(|(i, _)| (self.step_at(i), self.log_probs[i]))
            .collect()
    }

    /// Draws a step: logits are tempered, softmaxed over legal entries, then
    /// mixed with the uniform distribution with weight `epsilon`.
    pub fn sample(&self, rng: &mut ChaCha12Rng, epsilon: f64, temperature: f64) -> BuildStep {
        let legal: Vec<usize> = (0..self.logits.len())
            .filter(|&i| self.logits[i] > NEG_MASK)
            .collect();
        let tempered: Vec<f64> = legal.iter().map(|&i| self.logits[i] / temperature).collect();
        let m = tempered.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = tempered.iter().map(|&l| (l - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let uni = 1.0 / legal.len() as f64;
        let probs: Vec<f64> =
            exps.iter().map(|e| (1.0 - epsilon) * e / total + epsilon * uni).collect();

        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.step_at(legal[j]);
            }
        }
        self.step_at(*legal.last().unwrap())
    }
}

#[derive(Debug, Clone)]
pub struct ConditionalGFlowNet {
    pub forward_params: ParameterSet,
    pub backward_params: ParameterSet,
    pub logz_params: ParameterSet,
    pub target_forward: ParameterSet,
    pub target_backward: ParameterSet,
    pub target_logz: ParameterSet,
    pub config: GFlowNetConfig,
    local_dim: usize,
    arity: usize,
}

/// Value and gradient bookkeeping returned by the trajectory-balance loss.
#[derive(Debug, Clone, Copy)]
pub struct TbLossOutput {
    pub loss: f64,
    pub log_z: f64,
    pub log_pf_sum: f64,
    pub log_pb_sum: f64,
}

impl ConditionalGFlowNet {
    pub fn new(
        spec: &ActionSpaceSpec,
        obs_width: usize,
        config: GFlowNetConfig,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&config.epsilon_uniform) {
            return Err(Error::InvalidInput("epsilon_uniform must lie in [0,1)".into()));
        }
        if !(config.sampling_temperature > 0.0) {
            return Err(Error::InvalidInput("sampling_temperature must be positive".into()));
        }
        if obs_width < spec.n_atomic {
            return Err(Error::InvalidInput("observation narrower than adjacency block".into()));
        }
        let local_dim = obs_width - spec.n_atomic;
        let d = config.encoder.hidden_dim;
        let da = config.attn_dim;
        let k = spec.arity;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);

        let mut forward = ParameterSet::new();
        init_trunk(&mut forward, &mut rng, "env", local_dim, &config.encoder)?;
        forward.insert("state.ref", xavier_uniform(&mut rng, 1, d))?;
        init_trunk(&mut forward, &mut rng, "state", d + k + 1, &config.encoder)?;
        forward.insert("attn.wq", xavier_uniform(&mut rng, d, da))?;
        forward.insert("attn.wk", xavier_uniform(&mut rng, d, da))?;
        forward.insert("attn.wv", xavier_uniform(&mut rng, d, da))?;
        forward.insert("point.w", xavier_uniform(&mut rng, da, k))?;
        forward.insert("point.b", crate::autodiff::Tensor::zeros(1, k))?;
        init_mlp_head(&mut forward, &mut rng, "term", d, 1, false)?;

        let mut backward = ParameterSet::new();
        init_trunk(&mut backward, &mut rng, "env", local_dim, &config.encoder)?;
        backward.insert("state.ref", xavier_uniform(&mut rng, 1, d))?;
        init_trunk(&mut backward, &mut rng, "state", d + k + 1, &config.encoder)?;
        backward.insert("attn.wq", xavier_uniform(&mut rng, d, da))?;
        backward.insert("attn.wk", xavier_uniform(&mut rng, d, da))?;
        backward.insert("attn.wv", xavier_uniform(&mut rng, d, da))?;
        backward.insert("score.w", xavier_uniform(&mut rng, da, 1))?;
        backward.insert("score.b", crate::autodiff::Tensor::zeros(1, 1))?;

        let mut logz = ParameterSet::new();
        init_trunk(&mut logz, &mut rng, "env", local_dim, &config.encoder)?;
        init_mlp_head(&mut logz, &mut rng, "head", d, 1, false)?;

        Ok(Self {
            target_forward: forward.clone(),
            target_backward: backward.clone(),
            target_logz: logz.clone(),
            forward_params: forward,
            backward_params: backward,
            logz_params: logz,
            config,
            local_dim,
            arity: k,
        })
    }

    fn pick(&self, set: u8, kind: ParamKind) -> &ParameterSet {
        match (set, kind) {
            (SET_F, ParamKind::Online) => &self.forward_params,
            (SET_F, ParamKind::Target) => &self.target_forward,
            (SET_B, ParamKind::Online) => &self.backward_params,
            (SET_B, ParamKind::Target) => &self.target_backward,
            (SET_Z, ParamKind::Online) => &self.logz_params,
            (SET_Z, ParamKind::Target) => &self.target_logz,
            _ => unreachable!("unknown parameter set"),
        }
    }

    fn check_obs(&self, obs: &EnvObservation, spec: &ActionSpaceSpec) -> Result<()> {
        if spec.arity != self.arity {
            return Err(Error::InvalidInput("arity mismatch with network".into()));
        }
        if obs.width() != spec.n_atomic + self.local_dim {
            return Err(Error::InvalidInput(format!(
                "observation width {} does not match network (adjacency {} + local {})",
                obs.width(),
                spec.n_atomic,
                self.local_dim
            )));
        }
        Ok(())
    }

    /// Shared trunk of the policy networks: environmental encoding, then the
    /// state encoding relative to the reference row of the partial
    /// assignment, re-encoded over the graph.
    #[allow(clippy::too_many_arguments)]
    fn build_state_encoding(
        &self,
        tape: &mut Tape,
        set: u8,
        params: &ParameterSet,
        obs: &EnvObservation,
        state: &PartialAction,
        spec: &ActionSpaceSpec,
        dropout_rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<NodeId> {
        let (deg_t, local_t) = split_obs(obs, spec)?;
        let deg = tape.constant(deg_t);
        let local = tape.constant(local_t);
        let env =
            build_trunk(tape, set, "env", params, deg, local, spec, &self.config.encoder, dropout_rng)?;

        // Reference row: the highest assigned position's embedding, or a
        // learned row for the all-void state. Any rule here must depend on
        // the state alone, not on trajectory order, or the policy would stop
        // being a function of the DAG vertex.
        let reference = match highest_assigned(state) {
            Some(r) => tape.row(env, r),
            None => {
                let v = params.get("state.ref").unwrap().clone();
                tape.param(set, "state.ref", &v)
            }
        };
        let rel = tape.sub_row(env, reference);
        let onehot = tape.constant(assignment_onehot(state, spec.arity));
        let with_values = tape.concat_cols(rel, onehot);
        build_trunk(tape, set, "state", params, deg, with_values, spec, &self.config.encoder, dropout_rng)
    }

    /// Forward logits node: `1 x (N*K)` position-major, assigned rows
    /// masked, with the terminate logit appended when legal.
    fn build_forward_logits(
        &self,
        tape: &mut Tape,
        kind: ParamKind,
        obs: &EnvObservation,
        state: &PartialAction,
        spec: &ActionSpaceSpec,
        dropout_rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<NodeId> {
        let params = self.pick(SET_F, kind);
        let enc = self.build_state_encoding(tape, SET_F, params, obs, state, spec, dropout_rng)?;
        let attn = linear_attention(tape, enc, params, SET_F, "attn")?;
        let attn = maybe_dropout(tape, attn, self.config.attn_dropout, dropout_rng);

        let wv = params.get("point.w").unwrap().clone();
        let bv = params.get("point.b").unwrap().clone();
        let w = tape.param(SET_F, "point.w", &wv);
        let b = tape.param(SET_F, "point.b", &bv);
        let raw = tape.matmul(attn, w);
        let raw = tape.add_row(raw, b);

        let mask: Vec<bool> = (0..spec.n_atomic).map(|p| state.get(p).is_some()).collect();
        let masked = tape.mask_rows_neg(raw, &mask);
        let flat = tape.reshape(masked, 1, spec.n_atomic * spec.arity);

        if spec.termination_enabled && !state.is_complete() {
            let pooled = tape.mean_rows(enc);
            let term = build_mlp_head(tape, SET_F, "term", params, pooled)?;
            Ok(tape.concat_flat(flat, term))
        } else {
            Ok(flat)
        }
    }

    /// Backward logits over positions: `1 x N`, void positions masked.
    fn build_backward_logits(
        &self,
        tape: &mut Tape,
        kind: ParamKind,
        obs: &EnvObservation,
        state: &PartialAction,
        spec: &ActionSpaceSpec,
        dropout_rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<NodeId> {
        let params = self.pick(SET_B, kind);
        let enc = self.build_state_encoding(tape, SET_B, params, obs, state, spec, dropout_rng)?;
        let attn = linear_attention(tape, enc, params, SET_B, "attn")?;
        let attn = maybe_dropout(tape, attn, self.config.attn_dropout, dropout_rng);

        let wv = params.get("score.w").unwrap().clone();
        let bv = params.get("score.b").unwrap().clone();
        let w = tape.param(SET_B, "score.w", &wv);
        let b = tape.param(SET_B, "score.b", &bv);
        let raw = tape.matmul(attn, w);
        let raw = tape.add_row(raw, b);

        let mask: Vec<bool> = (0..spec.n_atomic).map(|p| state.get(p).is_none()).collect();
        let masked = tape.mask_rows_neg(raw, &mask);
        Ok(tape.reshape(masked, 1, spec.n_atomic))
    }

    /// Scalar log-partition node for the conditioning observation.
    fn build_log_z(
        &self,
        tape: &mut Tape,
        kind: ParamKind,
        obs: &EnvObservation,
        spec: &ActionSpaceSpec,
    ) -> Result<NodeId> {
        let params = self.pick(SET_Z, kind);
        let (deg_t, local_t) = split_obs(obs, spec)?;
        let deg = tape.constant(deg_t);
        let local = tape.constant(local_t);
        let env =
            build_trunk(tape, SET_Z, "env", params, deg, local, spec, &self.config.encoder, &mut None)?;
        let pooled = tape.mean_rows(env);
        build_mlp_head(tape, SET_Z, "head", params, pooled)
    }

    /// The forward policy at one state, as plain numbers.
    pub fn forward_step_distribution(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        state: &PartialAction,
        spec: &ActionSpaceSpec,
    ) -> Result<StepDistribution> {
        self.check_obs(obs, spec)?;
        if state.is_complete() {
            return Err(Error::IllegalQuery("complete state has no forward steps".into()));
        }
        let mut tape = Tape::with_capacity(96);
        let logits = self.build_forward_logits(&mut tape, kind, obs, state, spec, &mut None)?;
        let lse = tape.logsumexp(logits);
        let lse_v = tape.value(lse).item();
        if !lse_v.is_finite() {
            return Err(Error::ModelDivergence("forward logits diverged".into()));
        }
        let logits_v = tape.value(logits).data().to_vec();
        let log_probs = logits_v.iter().map(|l| l - lse_v).collect();
        Ok(StepDistribution {
            n: spec.n_atomic,
            k: spec.arity,
            logits: logits_v,
            log_probs,
            has_terminate: spec.termination_enabled,
        })
    }

    /// Log-probability of undoing `position` from `state` under the
    /// backward policy.
    pub fn backward_step_log_prob(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        state: &PartialAction,
        position: usize,
        spec: &ActionSpaceSpec,
    ) -> Result<f64> {
        self.check_obs(obs, spec)?;
        if position >= state.len() || state.get(position).is_none() {
            return Err(Error::InvalidInput(format!(
                "position {position} is not assigned in the state"
            )));
        }
        let mut tape = Tape::with_capacity(96);
        let logits = self.build_backward_logits(&mut tape, kind, obs, state, spec, &mut None)?;
        let lse = tape.logsumexp(logits);
        Ok(tape.value(logits).data()[position] - tape.value(lse).item())
    }

    /// Rolls out the forward policy from the all-void state. When `explore`
    /// is set the per-step distribution is mixed with a uniform one using
    /// the configured epsilon. Terminate steps complete the remaining void
    /// positions from `fill` (all zeros when `None`).
    pub fn sample_trajectory(
        &self,
        obs: &EnvObservation,
        spec: &ActionSpaceSpec,
        rng: &mut ChaCha12Rng,
        explore: bool,
        fill: Option<&StructuredAction>,
    ) -> Result<BuildTrajectory> {
        let epsilon = if explore { self.config.epsilon_uniform } else { 0.0 };
        let temperature = self.config.sampling_temperature;
        let mut state = PartialAction::empty(spec.n_atomic);
        let mut steps: Vec<(PartialAction, BuildStep)> = Vec::new();
        let terminal = loop {
            if state.is_complete() {
                break state.to_complete()?;
            }
            if steps.len() > spec.n_atomic {
                return Err(Error::InternalInvariant("trajectory exceeded N+1 steps".into()));
            }
            let dist = self.forward_step_distribution(ParamKind::Online, obs, &state, spec)?;
            let step = dist.sample(rng, epsilon, temperature);
            steps.push((state.clone(), step));
            match step {
                BuildStep::Assign { .. } => state = apply(&state, &step)?,
                BuildStep::Terminate => {
                    let zeros;
                    let fill = match fill {
                        Some(f) => f,
                        None => {
                            zeros = StructuredAction::from_values_unchecked(vec![0; spec.n_atomic]);
                            &zeros
                        }
                    };
                    break state.complete_with(fill)?;
                }
            }
        };
        Ok(BuildTrajectory { steps, terminal })
    }

    /// Squared log-ratio balance loss along one trajectory, with gradients
    /// flowing to the forward, backward and log-partition parameters
    /// (scaled by `grad_scale`).
    pub fn trajectory_balance_loss(
        &mut self,
        tau: &BuildTrajectory,
        obs: &EnvObservation,
        spec: &ActionSpaceSpec,
        log_reward: f64,
        grad_scale: f64,
    ) -> Result<TbLossOutput> {
        self.check_obs(obs, spec)?;
        if !log_reward.is_finite() {
            return Err(Error::TrainingDivergence("log reward is non-finite".into()));
        }
        if tau.steps.is_empty() {
            return Err(Error::InvalidInput("empty trajectory".into()));
        }

        let mut tape = Tape::with_capacity(256 * tau.steps.len());
        let z = self.build_log_z(&mut tape, ParamKind::Online, obs, spec)?;
        let log_z = tape.value(z).item();
        if !log_z.is_finite() {
            return Err(Error::TrainingDivergence("log Z is non-finite".into()));
        }

        let mut residual = z;
        let mut log_pf_sum = 0.0;
        let mut log_pb_sum = 0.0;
        for (state, step) in &tau.steps {
            let logits =
                self.build_forward_logits(&mut tape, ParamKind::Online, obs, state, spec, &mut None)?;
            let lse = tape.logsumexp(logits);
            let flat = match step {
                BuildStep::Assign { position, value } => position * spec.arity + *value as usize,
                BuildStep::Terminate => spec.n_atomic * spec.arity,
            };
            let picked = tape.entry(logits, flat);
            let logp = tape.sub(picked, lse);
            let logp_v = tape.value(logp).item();
            if !logp_v.is_finite() {
                return Err(Error::TrainingDivergence(
                    "forward log-probability is non-finite".into(),
                ));
            }
            log_pf_sum += logp_v;
            residual = tape.add(residual, logp);

            // Terminate edges carry no backward factor: the backward policy
            // ranges over construction parents only.
            if let BuildStep::Assign { position, .. } = step {
                let child = apply(state, step)?;
                let blogits = self
                    .build_backward_logits(&mut tape, ParamKind::Online, obs, &child, spec, &mut None)?;
                let lse_b = tape.logsumexp(blogits);
                let picked_b = tape.entry(blogits, *position);
                let logp_b = tape.sub(picked_b, lse_b);
                let logp_b_v = tape.value(logp_b).item();
                if !logp_b_v.is_finite() {
                    return Err(Error::TrainingDivergence(
                        "backward log-probability is non-finite".into(),
                    ));
                }
                log_pb_sum += logp_b_v;
                let neg = tape.scale(logp_b, -1.0);
                residual = tape.add(residual, neg);
            }
        }
        let lr = tape.scalar(log_reward);
        residual = tape.sub(residual, lr);
        let loss = tape.mul(residual, residual);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingDivergence("TB loss is non-finite".into()));
        }

        if grad_scale != 0.0 {
            tape.backward(loss)?;
            self.forward_params.pull_grads_scaled(&tape, SET_F, grad_scale)?;
            self.backward_params.pull_grads_scaled(&tape, SET_B, grad_scale)?;
            self.logz_params.pull_grads_scaled(&tape, SET_Z, grad_scale)?;
        }
        Ok(TbLossOutput { loss: value, log_z, log_pf_sum, log_pb_sum })
    }

    /// Regression of the log-partition head onto `soft_value / alpha`.
    /// Gradients flow to the log-partition parameters only.
    pub fn z_regression_loss(
        &mut self,
        obs: &EnvObservation,
        spec: &ActionSpaceSpec,
        soft_value: f64,
        alpha: f64,
        grad_scale: f64,
    ) -> Result<(f64, f64)> {
        self.check_obs(obs, spec)?;
        let mut tape = Tape::with_capacity(64);
        let z = self.build_log_z(&mut tape, ParamKind::Online, obs, spec)?;
        let log_z = tape.value(z).item();
        let target = tape.scalar(soft_value / alpha);
        let d = tape.sub(z, target);
        let loss = tape.mul(d, d);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingDivergence("Z regression loss is non-finite".into()));
        }
        if grad_scale != 0.0 {
            tape.backward(loss)?;
            self.logz_params.pull_grads_scaled(&tape, SET_Z, grad_scale)?;
        }
        Ok((value, log_z))
    }

    /// The log-partition estimate for an observation.
    pub fn log_z(&self, kind: ParamKind, obs: &EnvObservation, spec: &ActionSpaceSpec) -> Result<f64> {
        self.check_obs(obs, spec)?;
        let mut tape = Tape::with_capacity(64);
        let z = self.build_log_z(&mut tape, kind, obs, spec)?;
        Ok(tape.value(z).item())
    }

    /// Exact terminating distribution of the current forward policy under
    /// conditioning `obs`, by dynamic programming over the DAG.
    pub fn exact_terminating_distribution(
        &self,
        kind: ParamKind,
        obs: &EnvObservation,
        spec: &ActionSpaceSpec,
        limit: u64,
        fill: Option<&StructuredAction>,
    ) -> Result<BTreeMap<StructuredAction, f64>> {
        dp::terminating_distribution(spec, limit, fill, |state| {
            let dist = self.forward_step_distribution(kind, obs, state, spec)?;
            Ok(children(state, spec)?
                .into_iter()
                .map(|s| {
                    let p = dist.log_probs[dist.flat_index(&s)].exp();
                    (s, p)
                })
                .collect())
        })
    }

    /// Soft-updates all three target copies toward the online parameters.
    pub fn update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.target_forward, &self.forward_params, tau)?;
        soft_update(&mut self.target_backward, &self.backward_params, tau)?;
        soft_update(&mut self.target_logz, &self.logz_params, tau)
    }

    /// Max absolute distance between online parameters and target copies.
    pub fn target_distance(&self) -> f64 {
        self.forward_params
            .max_abs_diff(&self.target_forward)
            .max(self.backward_params.max_abs_diff(&self.target_backward))
            .max(self.logz_params.max_abs_diff(&self.target_logz))
    }
}

fn highest_assigned(state: &PartialAction) -> Option<usize> {
    (0..state.len()).rev().find(|&p| state.get(p).is_some())
}
