//! Minimal differentiable-computation engine: dense f64 tensors, a
//! reverse-mode tape, the neural kernels the policy and energy networks
//! need, and the optimizer.

pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use kernels::{gnn_agg_node, gnn_layer, linear_attention, masked_pointer_logits};
pub use params::{adamw_step, logsumexp, soft_update, xavier_uniform, ParameterSet};
pub use tape::{NodeId, Tape, NEG_MASK};
pub use tensor::Tensor;
