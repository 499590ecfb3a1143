//! Shared network plumbing: observation featurization, the embed + graph
//! convolution trunk, and small MLP heads. Both the energy model and the
//! policy networks are assembled from these pieces.
//!
//! Observation rows are `[l_i || o_i]` with `l_i` the adjacency row. A dense
//! weight on `l_i` would make the network depend on the labelling of atomic
//! positions, so the adjacency block enters through a single tied weight row
//! (equivalent to a degree feature); the graph structure itself acts through
//! the GNN aggregation. This keeps every score invariant under consistent
//! relabelling of positions, adjacency and action entries.

use crate::action_space::{ActionSpaceSpec, StructuredAction};
use crate::autodiff::kernels::{gnn_agg_node, gnn_layer};
use crate::autodiff::params::{xavier_uniform, ParameterSet};
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::envs::EnvObservation;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Shape and regularization knobs shared by all encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub gnn_layers: usize,
    /// Gate between the projection and aggregation branches of each layer.
    pub gnn_gamma: f64,
    /// Per-row normalization between layers.
    pub layer_norm: bool,
    /// Dropout rate on layer outputs; 0 disables.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden_dim: 32, gnn_layers: 2, gnn_gamma: 0.5, layer_norm: true, dropout: 0.0 }
    }
}

/// Splits observation rows into the adjacency degree column (`N x 1`) and the
/// local-feature block (`N x w`).
pub fn split_obs(obs: &EnvObservation, spec: &ActionSpaceSpec) -> Result<(Tensor, Tensor)> {
    let n = spec.n_atomic;
    if obs.n_atomic() != n {
        return Err(Error::InvalidInput(format!(
            "observation has {} rows for n_atomic {n}",
            obs.n_atomic()
        )));
    }
    if obs.width() < n {
        return Err(Error::InvalidInput("observation rows shorter than adjacency block".into()));
    }
    let deg: Vec<Vec<f64>> =
        obs.per_atomic.iter().map(|r| vec![r[..n].iter().sum::<f64>()]).collect();
    let rest: Vec<Vec<f64>> = obs.per_atomic.iter().map(|r| r[n..].to_vec()).collect();
    Ok((Tensor::from_rows(&deg)?, Tensor::from_rows(&rest)?))
}

/// Like [`split_obs`] but with the action appended one-hot to the local block.
pub fn split_obs_action(
    obs: &EnvObservation,
    action: &StructuredAction,
    spec: &ActionSpaceSpec,
) -> Result<(Tensor, Tensor)> {
    let (deg, rest) = split_obs(obs, spec)?;
    if action.len() != spec.n_atomic {
        return Err(Error::InvalidInput("action length mismatch".into()));
    }
    let rows: Vec<Vec<f64>> = (0..spec.n_atomic)
        .map(|i| {
            let mut r = rest.row_slice(i).to_vec();
            let mut onehot = vec![0.0; spec.arity];
            onehot[action.get(i) as usize] = 1.0;
            r.extend(onehot);
            r
        })
        .collect();
    Ok((deg, Tensor::from_rows(&rows)?))
}

/// One-hot rows of the current partial assignment, with a trailing slot for
/// void: `N x (K + 1)`.
pub fn assignment_onehot(state: &crate::action_space::PartialAction, arity: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = state
        .values()
        .iter()
        .map(|v| {
            let mut onehot = vec![0.0; arity + 1];
            match v {
                Some(a) => onehot[*a as usize] = 1.0,
                None => onehot[arity] = 1.0,
            }
            onehot
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Registers the parameters of an embed + GNN trunk under `prefix`.
/// `local_dim` is the width of the local-feature block.
pub fn init_trunk(
    ps: &mut ParameterSet,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    local_dim: usize,
    cfg: &EncoderConfig,
) -> Result<()> {
    let d = cfg.hidden_dim;
    ps.insert(&format!("{prefix}.embed.w"), xavier_uniform(rng, local_dim, d))?;
    ps.insert(&format!("{prefix}.embed.w_adj"), xavier_uniform(rng, 1, d))?;
    ps.insert(&format!("{prefix}.embed.b"), Tensor::zeros(1, d))?;
    for l in 0..cfg.gnn_layers {
        let p = format!("{prefix}.gnn.{l}");
        ps.insert(&format!("{p}.theta"), xavier_uniform(rng, d, d))?;
        ps.insert(&format!("{p}.phi.w1"), xavier_uniform(rng, d, d))?;
        ps.insert(&format!("{p}.phi.b1"), Tensor::zeros(1, d))?;
        ps.insert(&format!("{p}.phi.w2"), xavier_uniform(rng, d, d))?;
        ps.insert(&format!("{p}.phi.b2"), Tensor::zeros(1, d))?;
    }
    Ok(())
}

/// Builds the trunk on a tape: tied-adjacency + local embed, ReLU, then the
/// GNN stack with optional per-row normalization and dropout between layers.
#[allow(clippy::too_many_arguments)]
pub fn build_trunk(
    tape: &mut Tape,
    set: u8,
    prefix: &str,
    params: &ParameterSet,
    deg: NodeId,
    local: NodeId,
    spec: &ActionSpaceSpec,
    cfg: &EncoderConfig,
    dropout_rng: &mut Option<&mut ChaCha12Rng>,
) -> Result<NodeId> {
    let get = |params: &ParameterSet, name: &str| -> Result<Tensor> {
        params
            .get(&format!("{prefix}.{name}"))
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {prefix}.{name}")))
    };
    let w = get(params, "embed.w")?;
    let w = tape.param(set, &format!("{prefix}.embed.w"), &w);
    let w_adj = get(params, "embed.w_adj")?;
    let w_adj = tape.param(set, &format!("{prefix}.embed.w_adj"), &w_adj);
    let b = get(params, "embed.b")?;
    let b = tape.param(set, &format!("{prefix}.embed.b"), &b);

    let dense = tape.matmul(local, w);
    let tied = tape.matmul(deg, w_adj);
    let mut x = tape.add(dense, tied);
    x = tape.add_row(x, b);
    x = tape.relu(x);

    let agg = gnn_agg_node(tape, spec);
    for l in 0..cfg.gnn_layers {
        x = gnn_layer(tape, x, agg, params, set, &format!("{prefix}.gnn.{l}"), cfg.gnn_gamma)?;
        if cfg.layer_norm {
            x = tape.layer_norm(x, 1e-5);
        }
        x = maybe_dropout(tape, x, cfg.dropout, dropout_rng);
    }
    Ok(x)
}

/// Registers a two-layer scalar (or `out_dim`-wide) head under `prefix`.
pub fn init_mlp_head(
    ps: &mut ParameterSet,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    zero_output: bool,
) -> Result<()> {
    ps.insert(&format!("{prefix}.w1"), xavier_uniform(rng, in_dim, in_dim))?;
    ps.insert(&format!("{prefix}.b1"), Tensor::zeros(1, in_dim))?;
    let w2 = if zero_output {
        Tensor::zeros(in_dim, out_dim)
    } else {
        xavier_uniform(rng, in_dim, out_dim)
    };
    ps.insert(&format!("{prefix}.w2"), w2)?;
    ps.insert(&format!("{prefix}.b2"), Tensor::zeros(1, out_dim))?;
    Ok(())
}

pub fn build_mlp_head(
    tape: &mut Tape,
    set: u8,
    prefix: &str,
    params: &ParameterSet,
    input: NodeId,
) -> Result<NodeId> {
    let get = |name: &str| -> Result<Tensor> {
        params
            .get(&format!("{prefix}.{name}"))
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {prefix}.{name}")))
    };
    let w1v = get("w1")?;
    let b1v = get("b1")?;
    let w2v = get("w2")?;
    let b2v = get("b2")?;
    let w1 = tape.param(set, &format!("{prefix}.w1"), &w1v);
    let b1 = tape.param(set, &format!("{prefix}.b1"), &b1v);
    let w2 = tape.param(set, &format!("{prefix}.w2"), &w2v);
    let b2 = tape.param(set, &format!("{prefix}.b2"), &b2v);
    let mut h = tape.matmul(input, w1);
    h = tape.add_row(h, b1);
    h = tape.relu(h);
    h = tape.matmul(h, w2);
    Ok(tape.add_row(h, b2))
}

pub fn maybe_dropout(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    rng: &mut Option<&mut ChaCha12Rng>,
) -> NodeId {
    if rate <= 0.0 {
        return x;
    }
    let Some(rng) = rng.as_deref_mut() else { return x };
    let keep = 1.0 - rate;
    let len = tape.value(x).len();
    let mask: Vec<f64> =
        (0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    tape.dropout(x, mask)
}
