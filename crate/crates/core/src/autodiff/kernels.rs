//! The neural building blocks used by both the energy model and the policy
//! networks: a graph-convolution layer with a gated skip term, linearized
//! attention, and pointer-style row masking. All are expressed as tape
//! programs so gradients come for free.

use super::params::ParameterSet;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::action_space::ActionSpaceSpec;
use crate::error::{Error, Result};

/// Strictly positive feature map for linear attention: softplus(x) + 1e-6.
pub const PSI_EPS: f64 = 1e-6;

/// Row-normalized aggregation matrix over `N(i) ∪ {i}`.
pub fn neighbor_mean_matrix(spec: &ActionSpaceSpec) -> Tensor {
    let n = spec.n_atomic;
    let sets = spec.neighbor_sets();
    let mut m = Tensor::zeros(n, n);
    for (i, set) in sets.iter().enumerate() {
        let deg = (set.len() + 1) as f64;
        m.set(i, i, 1.0 / deg);
        for &j in set {
            m.set(i, j, 1.0 / deg);
        }
    }
    m
}

/// One graph-convolution layer:
/// `out_i = gamma * x_i Θ + (1 - gamma) * phi(mean_{j in N(i) ∪ {i}} x_j)`
/// where `phi` is a one-hidden-layer perceptron with ReLU.
///
/// Parameters read from `params` under `prefix`: `theta`, `phi.w1`, `phi.b1`,
/// `phi.w2`, `phi.b2`.
pub fn gnn_layer(
    tape: &mut Tape,
    x: NodeId,
    agg: NodeId,
    params: &ParameterSet,
    set: u8,
    prefix: &str,
    gamma: f64,
) -> Result<NodeId> {
    let get = |name: &str| -> Result<&Tensor> {
        params
            .get(&format!("{prefix}.{name}"))
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {prefix}.{name}")))
    };
    let theta = tape.param(set, &format!("{prefix}.theta"), get("theta")?);
    let w1 = tape.param(set, &format!("{prefix}.phi.w1"), get("phi.w1")?);
    let b1 = tape.param(set, &format!("{prefix}.phi.b1"), get("phi.b1")?);
    let w2 = tape.param(set, &format!("{prefix}.phi.w2"), get("phi.w2")?);
    let b2 = tape.param(set, &format!("{prefix}.phi.b2"), get("phi.b2")?);

    let skip = tape.matmul(x, theta);
    let skip = tape.scale(skip, gamma);

    let pooled = tape.matmul(agg, x);
    let h = tape.matmul(pooled, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    let h = tape.scale(h, 1.0 - gamma);

    Ok(tape.add(skip, h))
}

/// Builds the aggregation constant for `spec` on the tape.
pub fn gnn_agg_node(tape: &mut Tape, spec: &ActionSpaceSpec) -> NodeId {
    tape.constant(neighbor_mean_matrix(spec))
}

/// Linearized attention over row features:
/// `out_k = sum_j (psi(Q_k)·psi(K_j)) V_j / sum_j psi(Q_k)·psi(K_j)`
/// with `psi(x) = softplus(x) + 1e-6`, computed via the factored form
/// `psi(Q)(psi(K)ᵀV) / psi(Q)(psi(K)ᵀ1)`.
///
/// Parameters under `prefix`: `wq`, `wk`, `wv`.
pub fn linear_attention(
    tape: &mut Tape,
    x: NodeId,
    params: &ParameterSet,
    set: u8,
    prefix: &str,
) -> Result<NodeId> {
    let get = |name: &str| -> Result<&Tensor> {
        params
            .get(&format!("{prefix}.{name}"))
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {prefix}.{name}")))
    };
    let wq = tape.param(set, &format!("{prefix}.wq"), get("wq")?);
    let wk = tape.param(set, &format!("{prefix}.wk"), get("wk")?);
    let wv = tape.param(set, &format!("{prefix}.wv"), get("wv")?);

    let n = tape.value(x).rows();
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);

    let pq = tape.softplus(q);
    let pq = tape.add_scalar(pq, PSI_EPS);
    let pk = tape.softplus(k);
    let pk = tape.add_scalar(pk, PSI_EPS);

    let kv = tape.matmul_ta(pk, v); // d_k x d_v
    let ones = tape.constant(Tensor::filled(n, 1, 1.0));
    let ksum = tape.matmul_ta(pk, ones); // d_k x 1

    let num = tape.matmul(pq, kv); // n x d_v
    let den = tape.matmul(pq, ksum); // n x 1
    Ok(tape.div_col(num, den))
}

/// Pointer-style masking: rows whose position is already assigned are
/// replaced by the most negative finite value so a downstream softmax gives
/// them zero probability.
pub fn masked_pointer_logits(tape: &mut Tape, raw_logits: NodeId, mask: &[bool]) -> NodeId {
    tape.mask_rows_neg(raw_logits, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::xavier_uniform;
    use crate::autodiff::tape::NEG_MASK;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn gnn_params(rng: &mut ChaCha12Rng, d_in: usize, d_out: usize) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("g.theta", xavier_uniform(rng, d_in, d_out)).unwrap();
        ps.insert("g.phi.w1", xavier_uniform(rng, d_in, d_out)).unwrap();
        ps.insert("g.phi.b1", Tensor::zeros(1, d_out)).unwrap();
        ps.insert("g.phi.w2", xavier_uniform(rng, d_out, d_out)).unwrap();
        ps.insert("g.phi.b2", Tensor::zeros(1, d_out)).unwrap();
        ps
    }

    #[test]
    fn gnn_gamma_one_is_pure_projection() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let spec = ActionSpaceSpec::new(3, 2, [(0, 1)], false).unwrap();
        let ps = gnn_params(&mut rng, 4, 5);
        let x = xavier_uniform(&mut rng, 3, 4);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let agg = gnn_agg_node(&mut tape, &spec);
        let out = gnn_layer(&mut tape, xn, agg, &ps, 0, "g", 1.0).unwrap();

        let expect = crate::autodiff::tensor::matmul(&x, ps.get("g.theta").unwrap());
        for (a, b) in tape.value(out).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gnn_isolated_node_aggregates_itself() {
        // Node 2 has no neighbours; with gamma = 0 its output is phi(x_2).
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let spec = ActionSpaceSpec::new(3, 2, [(0, 1)], false).unwrap();
        let ps = gnn_params(&mut rng, 4, 4);
        let x = xavier_uniform(&mut rng, 3, 4);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let agg = gnn_agg_node(&mut tape, &spec);
        let out = gnn_layer(&mut tape, xn, agg, &ps, 0, "g", 0.0).unwrap();

        // phi(x_2) computed by hand on a fresh tape.
        let mut t2 = Tape::new();
        let row = t2.constant(Tensor::from_flat(x.row_slice(2).to_vec()));
        let w1 = t2.constant(ps.get("g.phi.w1").unwrap().clone());
        let b1 = t2.constant(ps.get("g.phi.b1").unwrap().clone());
        let w2 = t2.constant(ps.get("g.phi.w2").unwrap().clone());
        let b2 = t2.constant(ps.get("g.phi.b2").unwrap().clone());
        let h = t2.matmul(row, w1);
        let h = t2.add_row(h, b1);
        let h = t2.relu(h);
        let h = t2.matmul(h, w2);
        let h = t2.add_row(h, b2);

        for (a, b) in tape.value(out).row_slice(2).iter().zip(t2.value(h).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gnn_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let spec = ActionSpaceSpec::new(3, 2, [(0, 1), (1, 2)], false).unwrap();
        let mut ps = gnn_params(&mut rng, 3, 3);
        let x = xavier_uniform(&mut rng, 3, 3);
        let w = xavier_uniform(&mut rng, 3, 1);

        let loss = |ps: &ParameterSet| -> f64 {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let agg = gnn_agg_node(&mut tape, &spec);
            let out = gnn_layer(&mut tape, xn, agg, ps, 0, "g", 0.4).unwrap();
            let wn = tape.constant(w.clone());
            let s = tape.matmul(out, wn);
            let l = tape.sum_all(s);
            tape.value(l).item()
        };

        // Analytic gradients.
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let agg = gnn_agg_node(&mut tape, &spec);
        let out = gnn_layer(&mut tape, xn, agg, &ps, 0, "g", 0.4).unwrap();
        let wn = tape.constant(w.clone());
        let s = tape.matmul(out, wn);
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        ps.pull_grads_scaled(&tape, 0, 1.0).unwrap();

        let names: Vec<String> = ps.names().cloned().collect();
        for name in names {
            let n_entries = ps.get(&name).unwrap().len();
            for i in 0..n_entries {
                let orig = ps.get(&name).unwrap().data()[i];
                let h = 1e-5;
                ps.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = loss(&ps);
                ps.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let dn = loss(&ps);
                ps.get_mut(&name).unwrap().data_mut()[i] = orig;
                let numeric = (up - dn) / (2.0 * h);
                let analytic = ps.grad(&name).unwrap().data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{name}[{i}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    fn attn_params(rng: &mut ChaCha12Rng, d: usize, dk: usize, dv: usize) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("a.wq", xavier_uniform(rng, d, dk)).unwrap();
        ps.insert("a.wk", xavier_uniform(rng, d, dk)).unwrap();
        ps.insert("a.wv", xavier_uniform(rng, d, dv)).unwrap();
        ps
    }

    /// Brute-force O(N^2) attention oracle.
    fn naive_attention(x: &Tensor, ps: &ParameterSet) -> Tensor {
        use crate::autodiff::tape::softplus;
        use crate::autodiff::tensor::matmul;
        let q = matmul(x, ps.get("a.wq").unwrap());
        let k = matmul(x, ps.get("a.wk").unwrap());
        let v = matmul(x, ps.get("a.wv").unwrap());
        let psi = |t: &Tensor| {
            let data = t.data().iter().map(|&x| softplus(x) + PSI_EPS).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let (pq, pk) = (psi(&q), psi(&k));
        let (n, dv) = (x.rows(), v.cols());
        let mut out = Tensor::zeros(n, dv);
        for i in 0..n {
            let mut den = 0.0;
            let mut num = vec![0.0; dv];
            for j in 0..n {
                let w: f64 =
                    pq.row_slice(i).iter().zip(pk.row_slice(j)).map(|(a, b)| a * b).sum();
                den += w;
                for c in 0..dv {
                    num[c] += w * v.get(j, c);
                }
            }
            for c in 0..dv {
                out.set(i, c, num[c] / den);
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive_double_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..10 {
            let n = rng.random_range(1..6usize);
            let ps = attn_params(&mut rng, 4, 3, 5);
            let x = xavier_uniform(&mut rng, n, 4);
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let out = linear_attention(&mut tape, xn, &ps, 0, "a").unwrap();
            let oracle = naive_attention(&x, &ps);
            for (a, b) in tape.value(out).data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_single_row_returns_value_row() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let ps = attn_params(&mut rng, 4, 3, 5);
        let x = xavier_uniform(&mut rng, 1, 4);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let out = linear_attention(&mut tape, xn, &ps, 0, "a").unwrap();
        let v = crate::autodiff::tensor::matmul(&x, ps.get("a.wv").unwrap());
        for (a, b) in tape.value(out).data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_rows_give_identical_outputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let ps = attn_params(&mut rng, 4, 3, 3);
        let row = xavier_uniform(&mut rng, 1, 4);
        let x = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let out = linear_attention(&mut tape, xn, &ps, 0, "a").unwrap();
        let first = tape.value(out).row_slice(0).to_vec();
        for r in 1..4 {
            assert_eq!(tape.value(out).row_slice(r), &first[..]);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // Weights are nonnegative and normalize to 1, so each output row must
        // lie inside the componentwise envelope of the V rows.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(2..6usize);
            let ps = attn_params(&mut rng, 3, 4, 2);
            let x = xavier_uniform(&mut rng, n, 3);
            let v = crate::autodiff::tensor::matmul(&x, ps.get("a.wv").unwrap());
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let out = linear_attention(&mut tape, xn, &ps, 0, "a").unwrap();
            for r in 0..n {
                for c in 0..2 {
                    let lo = (0..n).map(|j| v.get(j, c)).fold(f64::INFINITY, f64::min);
                    let hi = (0..n).map(|j| v.get(j, c)).fold(f64::NEG_INFINITY, f64::max);
                    let val = tape.value(out).get(r, c);
                    assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_pointer_logits_examples() {
        let raw = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();

        // All-false mask: unchanged.
        let mut tape = Tape::new();
        let x = tape.constant(raw.clone());
        let out = masked_pointer_logits(&mut tape, x, &[false, false]);
        assert_eq!(tape.value(out), &raw);

        // One masked row with uniform logits: softmax over the two survivors
        // is 0.5 each.
        let mut tape = Tape::new();
        let x = tape.constant(raw);
        let out = masked_pointer_logits(&mut tape, x, &[false, true]);
        assert_eq!(tape.value(out).get(1, 0), NEG_MASK);
        let flat = tape.reshape(out, 1, 4);
        let lse = tape.logsumexp(flat);
        let p0 = (tape.value(flat).data()[0] - tape.value(lse).item()).exp();
        let p1 = (tape.value(flat).data()[1] - tape.value(lse).item()).exp();
        assert!((p0 - 0.5).abs() < 1e-12 && (p1 - 0.5).abs() < 1e-12);
    }
}
