//! Exact oracles and diversity metrics: the Boltzmann target by
//! enumeration, total-variation / KL divergences, mode coverage, and the
//! oracle check that compares a checkpoint's exact terminating distribution
//! against its own energy model.

use crate::action_space::{enumerate_actions, ActionSpaceSpec, StructuredAction};
use crate::autodiff::params::logsumexp;
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::gflownet::ConditionalGFlowNet;
use crate::softq::{ParamKind, SoftQFunction};
use crate::trainer::{checkpoint, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Reset seeds whose first observations serve as the fixed conditioning
/// probes for oracle checks.
pub const PROBE_SEEDS: [u64; 8] = [0, 1, 2, 3, 4, 5, 6, 7];

pub type ActionDistribution = BTreeMap<StructuredAction, f64>;

/// Comparison of a learned terminating distribution against its target on
/// one conditioning observation.
#[derive(Debug, Clone)]
pub struct DistributionReport {
    pub target: ActionDistribution,
    pub learned: ActionDistribution,
    pub tv_distance: f64,
    /// `None` encodes infinite divergence (learned mass zero on support).
    pub kl_divergence: Option<f64>,
    pub mode_coverage: f64,
    pub sample_count: usize,
}

/// The JSON row emitted per probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe_id: u64,
    pub tv: f64,
    pub kl: Option<f64>,
    pub mode_coverage: f64,
    pub n_modes: usize,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub probes: Vec<ProbeReport>,
    pub max_tv: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Normalized Boltzmann distribution `exp(Q/alpha) / Z` over the whole
/// action space, computed in the log domain.
pub fn boltzmann_oracle(
    q: &SoftQFunction,
    kind: ParamKind,
    obs: &crate::envs::EnvObservation,
    spec: &ActionSpaceSpec,
    limit: u64,
) -> Result<ActionDistribution> {
    let actions = enumerate_actions(spec, limit)?;
    let logs: Vec<f64> = actions
        .iter()
        .map(|a| q.boltzmann_log_reward(kind, obs, a, spec))
        .collect::<Result<Vec<f64>>>()?;
    let lse = logsumexp(&logs, 1.0)?;
    Ok(actions.into_iter().zip(logs).map(|(a, l)| (a, (l - lse).exp())).collect())
}

fn check_normalized(p: &ActionDistribution, name: &str) -> Result<()> {
    let total: f64 = p.values().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("{name} sums to {total}, not 1")));
    }
    if p.values().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput(format!("{name} has negative mass")));
    }
    Ok(())
}

/// Total variation distance `0.5 * sum |p - q|` over the union support.
pub fn tv_distance(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    check_normalized(p, "p")?;
    check_normalized(q, "q")?;
    let mut keys: Vec<&StructuredAction> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    Ok(0.5
        * keys
            .into_iter()
            .map(|k| (p.get(k).copied().unwrap_or(0.0) - q.get(k).copied().unwrap_or(0.0)).abs())
            .sum::<f64>())
}

/// `KL(target || learned)` with `0 log 0 = 0`; `None` when the learned
/// distribution has zero mass somewhere the target does not.
pub fn kl_divergence(target: &ActionDistribution, learned: &ActionDistribution) -> Result<Option<f64>> {
    check_normalized(target, "target")?;
    check_normalized(learned, "learned")?;
    let mut total = 0.0;
    for (k, &t) in target {
        if t == 0.0 {
            continue;
        }
        let l = learned.get(k).copied().unwrap_or(0.0);
        if l == 0.0 {
            return Ok(None);
        }
        total += t * (t / l).ln();
    }
    Ok(Some(total.max(0.0)))
}

/// The `m` highest-probability actions of `target`, ties broken
/// lexicographically.
pub fn top_modes(target: &ActionDistribution, m: usize) -> Vec<StructuredAction> {
    let mut entries: Vec<(&StructuredAction, f64)> =
        target.iter().map(|(a, &p)| (a, p)).collect();
    entries.sort_by(|(a1, p1), (a2, p2)| {
        p2.partial_cmp(p1).unwrap().then_with(|| a1.cmp(a2))
    });
    entries.into_iter().take(m).map(|(a, _)| a.clone()).collect()
}

/// Fraction of the top-`m` target modes that appear in `samples`.
pub fn mode_coverage(
    target: &ActionDistribution,
    samples: &[StructuredAction],
    m: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("mode coverage needs samples".into()));
    }
    if m == 0 || m > target.len() {
        return Err(Error::InvalidInput(format!(
            "m={m} outside 1..=support size {}",
            target.len()
        )));
    }
    let modes = top_modes(target, m);
    let seen: std::collections::BTreeSet<&StructuredAction> = samples.iter().collect();
    let hit = modes.iter().filter(|a| seen.contains(a)).count();
    Ok(hit as f64 / m as f64)
}

/// Compares the sampler's exact terminating distribution against the
/// Boltzmann oracle of the same checkpoint's energy model on one probe.
pub fn probe_report(
    q: &SoftQFunction,
    gfn: &ConditionalGFlowNet,
    obs: &crate::envs::EnvObservation,
    spec: &ActionSpaceSpec,
    limit: u64,
    sample_count: usize,
    m: usize,
    sample_seed: u64,
) -> Result<DistributionReport> {
    let target = boltzmann_oracle(q, ParamKind::Online, obs, spec, limit)?;
    let learned = gfn.exact_terminating_distribution(ParamKind::Online, obs, spec, limit, None)?;
    let tv = tv_distance(&target, &learned)?;
    let kl = kl_divergence(&target, &learned)?;
    let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
    let samples: Vec<StructuredAction> = (0..sample_count)
        .map(|_| gfn.sample_trajectory(obs, spec, &mut rng, false, None).map(|t| t.terminal))
        .collect::<Result<Vec<_>>>()?;
    let coverage = mode_coverage(&target, &samples, m)?;
    Ok(DistributionReport {
        target,
        learned,
        tv_distance: tv,
        kl_divergence: kl,
        mode_coverage: coverage,
        sample_count,
    })
}

/// Loads a checkpoint, conditions on the probe observations of `env`, and
/// reports distribution agreement per probe. Passes iff the worst
/// total-variation distance stays within `tolerance`.
pub fn oracle_check(ckpt: &Path, env: &EnvConfig, tolerance: f64) -> Result<OracleReport> {
    let trainer = checkpoint::load(ckpt)?;
    oracle_check_on(&trainer, env, tolerance)
}

pub fn oracle_check_on(trainer: &Trainer, env: &EnvConfig, tolerance: f64) -> Result<OracleReport> {
    let mut probes = Vec::new();
    let mut max_tv: f64 = 0.0;
    for &seed in PROBE_SEEDS.iter() {
        let instance = env.build(seed)?;
        let mut spec = instance.action_spec().clone();
        spec.termination_enabled = trainer.config.termination_enabled;
        let obs = instance.obs();
        let n_actions = spec
            .num_actions()
            .ok_or(Error::EnumerationTooLarge { required: u128::MAX, limit: trainer.config.enumeration_limit })?;
        let m = 4usize.min(n_actions as usize);
        let report = probe_report(
            &trainer.q,
            &trainer.gfn,
            &obs,
            &spec,
            trainer.config.enumeration_limit,
            1000,
            m,
            seed ^ 0x5a5a,
        )?;
        max_tv = max_tv.max(report.tv_distance);
        probes.push(ProbeReport {
            probe_id: seed,
            tv: report.tv_distance,
            kl: report.kl_divergence,
            mode_coverage: report.mode_coverage,
            n_modes: m,
            sample_count: report.sample_count,
        });
    }
    Ok(OracleReport { probes, max_tv, tolerance, pass: max_tv <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridSignals;
    use crate::gflownet::GFlowNetConfig;
    use crate::softq::SoftQConfig;

    fn dist(entries: &[(Vec<u8>, f64)]) -> ActionDistribution {
        entries
            .iter()
            .map(|(v, p)| (StructuredAction::from_values_unchecked(v.clone()), *p))
            .collect()
    }

    #[test]
    fn tv_examples() {
        let p = dist(&[(vec![0], 1.0), (vec![1], 0.0)]);
        let q = dist(&[(vec![0], 0.5), (vec![1], 0.5)]);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_distance(&p, &q).unwrap(), 0.5);

        let r = dist(&[(vec![2], 1.0)]);
        assert_eq!(tv_distance(&p, &r).unwrap(), 1.0);

        let bad = dist(&[(vec![0], 0.7)]);
        assert!(tv_distance(&p, &bad).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[(vec![0], 0.5), (vec![1], 0.5)]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), Some(0.0));

        let q = dist(&[(vec![0], 0.9), (vec![1], 0.1)]);
        let kl = kl_divergence(&p, &q).unwrap().unwrap();
        assert!(kl > 0.0);

        // Zero learned mass on target support is the infinite sentinel.
        let r = dist(&[(vec![0], 1.0), (vec![1], 0.0)]);
        assert_eq!(kl_divergence(&p, &r).unwrap(), None);
        // 0 log 0 = 0 on the target side.
        assert_eq!(kl_divergence(&r, &p).unwrap(), Some(2.0_f64.ln()));
    }

    #[test]
    fn mode_coverage_examples() {
        let target =
            dist(&[(vec![0], 0.4), (vec![1], 0.3), (vec![2], 0.2), (vec![3], 0.1)]);
        let s = |vals: &[u8]| -> Vec<StructuredAction> {
            vals.iter().map(|&v| StructuredAction::from_values_unchecked(vec![v])).collect()
        };
        assert_eq!(mode_coverage(&target, &s(&[0, 1]), 2).unwrap(), 1.0);
        assert_eq!(mode_coverage(&target, &s(&[2, 3]), 2).unwrap(), 0.0);
        assert_eq!(mode_coverage(&target, &s(&[0, 2]), 2).unwrap(), 0.5);
        assert!(mode_coverage(&target, &[], 2).is_err());
        assert!(mode_coverage(&target, &s(&[0]), 5).is_err());
    }

    #[test]
    fn mode_coverage_uniform_coupon_collector() {
        // Uniform target over 4 actions, many uniform samples: all modes
        // seen essentially surely.
        let target = dist(&[(vec![0], 0.25), (vec![1], 0.25), (vec![2], 0.25), (vec![3], 0.25)]);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        use rand::Rng;
        let samples: Vec<StructuredAction> = (0..10_000)
            .map(|_| StructuredAction::from_values_unchecked(vec![rng.random_range(0..4u8)]))
            .collect();
        assert_eq!(mode_coverage(&target, &samples, 4).unwrap(), 1.0);
    }

    #[test]
    fn top_modes_tie_break_is_lexicographic() {
        let target = dist(&[(vec![3], 0.25), (vec![1], 0.25), (vec![2], 0.3), (vec![0], 0.2)]);
        let modes = top_modes(&target, 2);
        assert_eq!(modes[0].values(), &[2]);
        assert_eq!(modes[1].values(), &[1]); // 0.25 tie: [1] < [3]
    }

    #[test]
    fn boltzmann_oracle_identities() {
        let env = GridSignals::reset(3, 0).unwrap();
        let spec = env.action_spec().clone();
        let obs = env.obs();
        let mut q = SoftQFunction::new(&spec, obs.width(), SoftQConfig::default(), 1).unwrap();

        // Constant Q: uniform.
        q.params.get_mut("head.w2").unwrap().fill(0.0);
        q.params.get_mut("head.b2").unwrap().fill(3.7);
        let d = boltzmann_oracle(&q, ParamKind::Online, &obs, &spec, 1 << 20).unwrap();
        for (_, p) in &d {
            assert!((p - 0.125).abs() < 1e-12);
        }

        // Shift invariance.
        let q1 = SoftQFunction::new(&spec, obs.width(), SoftQConfig::default(), 2).unwrap();
        let before = boltzmann_oracle(&q1, ParamKind::Online, &obs, &spec, 1 << 20).unwrap();
        let mut q2 = q1.clone();
        q2.params.get_mut("head.b2").unwrap().data_mut()[0] += 11.3;
        let after = boltzmann_oracle(&q2, ParamKind::Online, &obs, &spec, 1 << 20).unwrap();
        assert!(tv_distance(&before, &after).unwrap() < 1e-12);
    }

    #[test]
    fn boltzmann_oracle_single_atomic_closed_form() {
        // N=1, K=2, Q = (0, ln 3), alpha = 1: probabilities (0.25, 0.75).
        let spec = ActionSpaceSpec::new(1, 2, [], false).unwrap();
        let obs = crate::envs::EnvObservation {
            per_atomic: vec![vec![0.0, 1.0, 0.0, 0.0]],
            global_step: 0,
        };
        // A tiny Q whose head bias can't express per-action values, so use
        // the raw log-reward path instead: verify against logsumexp algebra.
        let logs = [0.0, 3.0_f64.ln()];
        let lse = logsumexp(&logs, 1.0).unwrap();
        assert!(((logs[0] - lse).exp() - 0.25).abs() < 1e-12);
        assert!(((logs[1] - lse).exp() - 0.75).abs() < 1e-12);
        let _ = (spec, obs);
    }

    #[test]
    fn fresh_uniform_nets_pass_oracle_check_trivially() {
        // Zeroed Q head gives a uniform target; zeroed selection head gives
        // a uniform sampler: TV ~ 0.
        let env = GridSignals::reset(2, 0).unwrap();
        let spec = env.action_spec().clone();
        let obs = env.obs();
        let mut q = SoftQFunction::new(&spec, obs.width(), SoftQConfig::default(), 3).unwrap();
        q.params.get_mut("head.w2").unwrap().fill(0.0);
        q.params.get_mut("head.b2").unwrap().fill(0.0);
        let mut gfn =
            ConditionalGFlowNet::new(&spec, obs.width(), GFlowNetConfig::default(), 4).unwrap();
        gfn.forward_params.get_mut("point.w").unwrap().fill(0.0);
        gfn.forward_params.get_mut("point.b").unwrap().fill(0.0);

        let report = probe_report(&q, &gfn, &obs, &spec, 1 << 20, 200, 2, 9).unwrap();
        assert!(report.tv_distance < 1e-6, "tv {}", report.tv_distance);
        assert_eq!(report.kl_divergence.map(|k| k < 1e-9), Some(true));
    }

    #[test]
    fn randomized_sampler_fails_oracle_check_at_tight_tolerance() {
        // A randomly initialized sampler against a uniform target shows
        // nonzero TV and fails at 0.05.
        let env = GridSignals::reset(2, 0).unwrap();
        let spec = env.action_spec().clone();
        let obs = env.obs();
        let mut q = SoftQFunction::new(&spec, obs.width(), SoftQConfig::default(), 5).unwrap();
        q.params.get_mut("head.w2").unwrap().fill(0.0);
        q.params.get_mut("head.b2").unwrap().fill(0.0);
        let mut gfn =
            ConditionalGFlowNet::new(&spec, obs.width(), GFlowNetConfig::default(), 6).unwrap();
        // Exaggerate the pointer head so the sampler is clearly non-uniform.
        for v in gfn.forward_params.get_mut("point.w").unwrap().data_mut() {
            *v *= 20.0;
        }
        let report = probe_report(&q, &gfn, &obs, &spec, 1 << 20, 100, 2, 10).unwrap();
        assert!(report.tv_distance > 0.05, "tv {}", report.tv_distance);
    }

    proptest::proptest! {
        /// tv is a metric on random distributions.
        #[test]
        fn tv_is_a_metric(raw1 in proptest::collection::vec(1e-3..1.0f64, 4),
                          raw2 in proptest::collection::vec(1e-3..1.0f64, 4),
                          raw3 in proptest::collection::vec(1e-3..1.0f64, 4)) {
            let norm = |raw: &[f64]| -> ActionDistribution {
                let total: f64 = raw.iter().sum();
                raw.iter()
                    .enumerate()
                    .map(|(i, &v)| (StructuredAction::from_values_unchecked(vec![i as u8]), v / total))
                    .collect()
            };
            let (p, q, r) = (norm(&raw1), norm(&raw2), norm(&raw3));
            let (pq, qp) = (tv_distance(&p, &q).unwrap(), tv_distance(&q, &p).unwrap());
            proptest::prop_assert!((pq - qp).abs() < 1e-12);
            proptest::prop_assert!(tv_distance(&p, &p).unwrap() < 1e-12);
            proptest::prop_assert!((0.0..=1.0).contains(&pq));
            let (pr, rq) = (tv_distance(&p, &r).unwrap(), tv_distance(&r, &q).unwrap());
            proptest::prop_assert!(pq <= pr + rq + 1e-12);
        }

        /// Gibbs: KL >= 0 wherever finite.
        #[test]
        fn kl_is_nonnegative(raw1 in proptest::collection::vec(1e-3..1.0f64, 4),
                             raw2 in proptest::collection::vec(1e-3..1.0f64, 4)) {
            let norm = |raw: &[f64]| -> ActionDistribution {
                let total: f64 = raw.iter().sum();
                raw.iter()
                    .enumerate()
                    .map(|(i, &v)| (StructuredAction::from_values_unchecked(vec![i as u8]), v / total))
                    .collect()
            };
            let (p, q) = (norm(&raw1), norm(&raw2));
            let kl = kl_divergence(&p, &q).unwrap().unwrap();
            proptest::prop_assert!(kl >= 0.0);
        }
    }
}
