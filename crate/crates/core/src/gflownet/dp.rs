//! Exact terminating distribution of a forward policy by dynamic
//! programming over the graded construction DAG.

use crate::action_space::{apply, ActionSpaceSpec, BuildStep, PartialAction, StructuredAction};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Pushes unit probability mass from the empty state through `step_probs`
/// and returns the resulting distribution over complete actions.
///
/// `step_probs` must return the probability of every legal step from the
/// given state (summing to 1). `fill` resolves terminate steps: remaining
/// void positions are completed from it (all zeros when `None`).
pub fn terminating_distribution<F>(
    spec: &ActionSpaceSpec,
    limit: u64,
    fill: Option<&StructuredAction>,
    mut step_probs: F,
) -> Result<BTreeMap<StructuredAction, f64>>
where
    F: FnMut(&PartialAction) -> Result<Vec<(BuildStep, f64)>>,
{
    let states = spec
        .num_states()
        .ok_or(Error::EnumerationTooLarge { required: u128::MAX, limit })?;
    if states > limit as u128 {
        return Err(Error::EnumerationTooLarge { required: states, limit });
    }

    let default_fill;
    let fill = match fill {
        Some(f) => f,
        None => {
            default_fill = StructuredAction::from_values_unchecked(vec![0; spec.n_atomic]);
            &default_fill
        }
    };

    let mut terminal: BTreeMap<StructuredAction, f64> = BTreeMap::new();
    let mut grade: BTreeMap<PartialAction, f64> = BTreeMap::new();
    grade.insert(PartialAction::empty(spec.n_atomic), 1.0);

    for _ in 0..spec.n_atomic {
        let mut next: BTreeMap<PartialAction, f64> = BTreeMap::new();
        for (state, mass) in grade {
            if mass == 0.0 {
                continue;
            }
            let probs = step_probs(&state)?;
            let total: f64 = probs.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InternalInvariant(format!(
                    "step probabilities sum to {total}"
                )));
            }
            for (step, p) in probs {
                if p < 0.0 {
                    return Err(Error::InternalInvariant("negative step probability".into()));
                }
                match step {
                    BuildStep::Assign { .. } => {
                        let child = apply(&state, &step)?;
                        *next.entry(child).or_insert(0.0) += mass * p;
                    }
                    BuildStep::Terminate => {
                        let t = state.complete_with(fill)?;
                        *terminal.entry(t).or_insert(0.0) += mass * p;
                    }
                }
            }
        }
        grade = next;
    }

    for (state, mass) in grade {
        *terminal.entry(state.to_complete()?).or_insert(0.0) += mass;
    }

    let total: f64 = terminal.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InternalInvariant(format!(
            "terminating distribution sums to {total}"
        )));
    }
    Ok(terminal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_space::children;

    fn uniform_policy(
        spec: &ActionSpaceSpec,
    ) -> impl FnMut(&PartialAction) -> Result<Vec<(BuildStep, f64)>> + '_ {
        move |state| {
            let steps = children(state, spec)?;
            let p = 1.0 / steps.len() as f64;
            Ok(steps.into_iter().map(|s| (s, p)).collect())
        }
    }

    #[test]
    fn uniform_policy_is_uniform_over_actions() {
        let spec = ActionSpaceSpec::new(2, 2, [], false).unwrap();
        let dist = terminating_distribution(&spec, 1 << 20, None, uniform_policy(&spec)).unwrap();
        assert_eq!(dist.len(), 4);
        for (_, p) in dist {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_matches_step_distribution() {
        let spec = ActionSpaceSpec::new(1, 3, [], false).unwrap();
        let probs = [0.2, 0.5, 0.3];
        let dist = terminating_distribution(&spec, 1 << 20, None, |state| {
            let steps = children(state, &spec)?;
            Ok(steps
                .into_iter()
                .map(|s| {
                    let p = match s {
                        BuildStep::Assign { value, .. } => probs[value as usize],
                        BuildStep::Terminate => unreachable!(),
                    };
                    (s, p)
                })
                .collect())
        })
        .unwrap();
        for (a, p) in dist {
            assert!((p - probs[a.get(0) as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn terminate_mass_flows_to_fill_completion() {
        let spec = ActionSpaceSpec::new(2, 2, [], true).unwrap();
        let fill = StructuredAction::from_values_unchecked(vec![1, 1]);
        // Terminate immediately with probability 1 from the empty state.
        let dist = terminating_distribution(&spec, 1 << 20, Some(&fill), |state| {
            let steps = children(state, &spec)?;
            Ok(steps
                .iter()
                .map(|&s| (s, if s == BuildStep::Terminate { 1.0 } else { 0.0 }))
                .collect())
        })
        .unwrap();
        assert_eq!(dist.len(), 1);
        assert!((dist[&fill] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn limit_is_enforced() {
        let spec = ActionSpaceSpec::new(4, 2, [], false).unwrap(); // 81 states
        let err =
            terminating_distribution(&spec, 80, None, uniform_policy(&spec)).unwrap_err();
        assert!(matches!(err, Error::EnumerationTooLarge { required: 81, limit: 80 }));
    }
}
