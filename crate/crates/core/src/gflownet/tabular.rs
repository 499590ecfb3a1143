//! A flow with one explicit logit per DAG edge, for oracle-grade training
//! runs on tiny spaces. The trajectory-balance objective is exactly the one
//! the neural sampler trains on; with free per-edge parameters its global
//! optimum is attainable, which makes this the reference implementation the
//! neural path is checked against.

use crate::action_space::{
    apply, children, ActionSpaceSpec, BuildStep, BuildTrajectory, PartialAction, StructuredAction,
};
use crate::autodiff::params::ParameterSet;
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

const SET_TAB: u8 = 7;

#[derive(Debug, Clone)]
pub struct TabularFlow {
    pub spec: ActionSpaceSpec,
    /// "f": S x (N*K [+1]) forward logits, "b": S x N backward logits,
    /// "z": 1 x 1 log partition.
    pub params: ParameterSet,
    n_states: usize,
}

impl TabularFlow {
    pub fn new(spec: ActionSpaceSpec, limit: u64) -> Result<Self> {
        let n_states = spec
            .num_states()
            .filter(|&s| s <= limit as u128)
            .ok_or(Error::EnumerationTooLarge { required: u128::MAX, limit })?
            as usize;
        let n = spec.n_atomic;
        let k = spec.arity;
        let fwd_width = n * k + usize::from(spec.termination_enabled);
        let mut params = ParameterSet::new();
        params.insert("f", Tensor::zeros(n_states, fwd_width))?;
        params.insert("b", Tensor::zeros(n_states, n))?;
        params.insert("z", Tensor::scalar(0.0))?;
        Ok(Self { spec, params, n_states })
    }

    /// Mixed-radix rank of a state's dense encoding.
    pub fn state_index(&self, state: &PartialAction) -> usize {
        let base = self.spec.arity + 1;
        state
            .to_dense(self.spec.arity)
            .iter()
            .fold(0usize, |acc, &d| acc * base + d as usize)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn log_z(&self) -> f64 {
        self.params.get("z").unwrap().item()
    }

    fn forward_mask(&self, state: &PartialAction) -> Vec<bool> {
        (0..self.spec.n_atomic).map(|p| state.get(p).is_some()).collect()
    }

    /// Forward logits node: `1 x (N*K [+1])` with assigned positions masked.
    fn build_forward_logits(&self, tape: &mut Tape, state: &PartialAction) -> NodeId {
        let (n, k) = (self.spec.n_atomic, self.spec.arity);
        let f = tape.param(SET_TAB, "f", self.params.get("f").unwrap());
        let row = tape.row(f, self.state_index(state));
        if self.spec.termination_enabled {
            let assign_part = tape.slice_flat(row, 0, n * k);
            let assign = tape.reshape(assign_part, n, k);
            let masked = tape.mask_rows_neg(assign, &self.forward_mask(state));
            let flat = tape.reshape(masked, 1, n * k);
            let term = tape.entry(row, n * k);
            tape.concat_flat(flat, term)
        } else {
            let grid = tape.reshape(row, n, k);
            let masked = tape.mask_rows_neg(grid, &self.forward_mask(state));
            tape.reshape(masked, 1, n * k)
        }
    }

    /// Backward logits node over positions: `1 x N`, void positions masked.
    fn build_backward_logits(&self, tape: &mut Tape, state: &PartialAction) -> NodeId {
        let n = self.spec.n_atomic;
        let b = tape.param(SET_TAB, "b", self.params.get("b").unwrap());
        let row = tape.row(b, self.state_index(state));
        let col = tape.reshape(row, n, 1);
        let mask: Vec<bool> = (0..n).map(|p| state.get(p).is_none()).collect();
        let masked = tape.mask_rows_neg(col, &mask);
        tape.reshape(masked, 1, n)
    }

    /// Step probabilities for the exact DP.
    pub fn step_probs(&self, state: &PartialAction) -> Result<Vec<(BuildStep, f64)>> {
        let mut tape = Tape::with_capacity(16);
        let logits = self.build_forward_logits(&mut tape, state);
        let lse = tape.logsumexp(logits);
        let lse_v = tape.value(lse).item();
        let logits_v = tape.value(logits).data().to_vec();
        let steps = children(state, &self.spec)?;
        let (k, n) = (self.spec.arity, self.spec.n_atomic);
        Ok(steps
            .into_iter()
            .map(|s| {
                let flat = match s {
                    BuildStep::Assign { position, value } => position * k + value as usize,
                    BuildStep::Terminate => n * k,
                };
                (s, (logits_v[flat] - lse_v).exp())
            })
            .collect())
    }

    pub fn terminating_distribution(
        &self,
        limit: u64,
        fill: Option<&StructuredAction>,
    ) -> Result<BTreeMap<StructuredAction, f64>> {
        super::dp::terminating_distribution(&self.spec, limit, fill, |s| self.step_probs(s))
    }

    /// Squared trajectory-balance residual for one trajectory, with
    /// gradients accumulated into the parameters (scaled by `grad_scale`).
    pub fn tb_loss(
        &mut self,
        tau: &BuildTrajectory,
        log_reward: f64,
        grad_scale: f64,
    ) -> Result<f64> {
        let mut tape = Tape::with_capacity(32 * tau.steps.len() + 8);
        let z = tape.param(SET_TAB, "z", self.params.get("z").unwrap());
        let (k, n) = (self.spec.arity, self.spec.n_atomic);

        let mut residual = z;
        for (state, step) in &tau.steps {
            let logits = self.build_forward_logits(&mut tape, state);
            let lse = tape.logsumexp(logits);
            let flat = match step {
                BuildStep::Assign { position, value } => position * k + *value as usize,
                BuildStep::Terminate => n * k,
            };
            let picked = tape.entry(logits, flat);
            let logp = tape.sub(picked, lse);
            residual = tape.add(residual, logp);

            if let BuildStep::Assign { position, .. } = step {
                let child = apply(state, step)?;
                let blogits = self.build_backward_logits(&mut tape, &child);
                let lse_b = tape.logsumexp(blogits);
                let picked_b = tape.entry(blogits, *position);
                let logp_b = tape.sub(picked_b, lse_b);
                let neg = tape.scale(logp_b, -1.0);
                residual = tape.add(residual, neg);
            }
        }
        let lr = tape.scalar(log_reward);
        residual = tape.sub(residual, lr);
        let loss = tape.mul(residual, residual);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingDivergence("tabular TB loss non-finite".into()));
        }
        tape.backward(loss)?;
        self.params.pull_grads_scaled(&tape, SET_TAB, grad_scale)?;
        Ok(value)
    }
}

/// Every complete trajectory of a termination-free space, by DFS in
/// canonical child order.
pub fn all_complete_trajectories(spec: &ActionSpaceSpec) -> Result<Vec<BuildTrajectory>> {
    if spec.termination_enabled {
        return Err(Error::InvalidInput(
            "trajectory enumeration requires termination disabled".into(),
        ));
    }
    let mut out = Vec::new();
    let mut steps: Vec<(PartialAction, BuildStep)> = Vec::new();
    fn rec(
        state: PartialAction,
        spec: &ActionSpaceSpec,
        steps: &mut Vec<(PartialAction, BuildStep)>,
        out: &mut Vec<BuildTrajectory>,
    ) -> Result<()> {
        if state.is_complete() {
            out.push(BuildTrajectory { steps: steps.clone(), terminal: state.to_complete()? });
            return Ok(());
        }
        for step in children(&state, spec)? {
            let next = apply(&state, &step)?;
            steps.push((state.clone(), step));
            rec(next, spec, steps, out)?;
            steps.pop();
        }
        Ok(())
    }
    rec(PartialAction::empty(spec.n_atomic), spec, &mut steps, &mut out)?;
    Ok(out)
}
