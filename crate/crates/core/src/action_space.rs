//! Structured action spaces and the construction DAG.
//!
//! A structured action is a length-`N` vector of atomic actions, each taking
//! one of `K` discrete values. Actions are built incrementally: starting from
//! the all-void assignment, each step fills one void position with a value,
//! so the partial assignments form a DAG graded by the number of assigned
//! positions. This module holds the value types for that DAG plus the pure
//! combinatorial operations on it: child/parent enumeration, step
//! application, adjacency derivation from geometry, and exhaustive
//! enumeration used by the exact oracles.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Default cap on exhaustive enumeration (states or actions).
pub const DEFAULT_ENUMERATION_LIMIT: u64 = 1_000_000;

/// Shape of a structured action space: `N` atomic actions over `K` values,
/// plus the undirected local-dependency graph between atomic positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpaceSpec {
    pub n_atomic: usize,
    pub arity: usize,
    /// Unordered index pairs, stored with the smaller index first.
    pub adjacency: BTreeSet<(usize, usize)>,
    pub termination_enabled: bool,
}

impl ActionSpaceSpec {
    pub fn new(
        n_atomic: usize,
        arity: usize,
        adjacency: impl IntoIterator<Item = (usize, usize)>,
        termination_enabled: bool,
    ) -> Result<Self> {
        if n_atomic < 1 {
            return Err(Error::InvalidInput("n_atomic must be >= 1".into()));
        }
        if arity < 2 {
            return Err(Error::InvalidInput("arity must be >= 2".into()));
        }
        let mut edges = BTreeSet::new();
        for (a, b) in adjacency {
            if a == b {
                return Err(Error::InvalidInput(format!("self-pair ({a},{b}) in adjacency")));
            }
            if a >= n_atomic || b >= n_atomic {
                return Err(Error::InvalidInput(format!(
                    "adjacency pair ({a},{b}) out of range for n_atomic={n_atomic}"
                )));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        Ok(Self { n_atomic, arity, adjacency: edges, termination_enabled })
    }

    /// Neighbour index sets, one per atomic position.
    pub fn neighbor_sets(&self) -> Vec<BTreeSet<usize>> {
        let mut sets = vec![BTreeSet::new(); self.n_atomic];
        for &(a, b) in &self.adjacency {
            sets[a].insert(b);
            sets[b].insert(a);
        }
        sets
    }

    /// The 0/1 adjacency row for position `i` (length `n_atomic`, zero diagonal).
    pub fn adjacency_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_atomic];
        for &(a, b) in &self.adjacency {
            if a == i {
                row[b] = 1.0;
            } else if b == i {
                row[a] = 1.0;
            }
        }
        row
    }

    /// Number of complete actions `K^N`, if it fits `u128`.
    pub fn num_actions(&self) -> Option<u128> {
        let mut acc: u128 = 1;
        for _ in 0..self.n_atomic {
            acc = acc.checked_mul(self.arity as u128)?;
        }
        Some(acc)
    }

    /// Number of DAG states `(K+1)^N`, if it fits `u128`.
    pub fn num_states(&self) -> Option<u128> {
        let mut acc: u128 = 1;
        for _ in 0..self.n_atomic {
            acc = acc.checked_mul(self.arity as u128 + 1)?;
        }
        Some(acc)
    }
}

/// A partially built structured action: each position is either assigned a
/// value in `0..K` or still void.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartialAction {
    values: Vec<Option<u8>>,
}

impl PartialAction {
    /// The all-void initial state.
    pub fn empty(n_atomic: usize) -> Self {
        Self { values: vec![None; n_atomic] }
    }

    pub fn from_values(values: Vec<Option<u8>>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<u8> {
        self.values[pos]
    }

    pub fn values(&self) -> &[Option<u8>] {
        &self.values
    }

    /// Number of assigned (non-void) positions.
    pub fn assigned_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_some())
    }

    /// Dense integer encoding with `K` as the void sentinel.
    pub fn to_dense(&self, arity: usize) -> Vec<u8> {
        self.values.iter().map(|v| v.unwrap_or(arity as u8)).collect()
    }

    pub fn from_dense(dense: &[u8], arity: usize) -> Result<Self> {
        let values = dense
            .iter()
            .map(|&v| {
                if (v as usize) < arity {
                    Ok(Some(v))
                } else if v as usize == arity {
                    Ok(None)
                } else {
                    Err(Error::InvalidInput(format!("dense value {v} exceeds arity {arity}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { values })
    }

    /// Converts to a complete action; errors if any position is void.
    pub fn to_complete(&self) -> Result<StructuredAction> {
        let values = self
            .values
            .iter()
            .map(|v| v.ok_or_else(|| Error::InvalidInput("state has void positions".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(StructuredAction { values })
    }

    /// Completes void positions from `fill`, leaving assigned ones unchanged.
    pub fn complete_with(&self, fill: &StructuredAction) -> Result<StructuredAction> {
        if fill.len() != self.len() {
            return Err(Error::InvalidInput("fill action length mismatch".into()));
        }
        let values = self
            .values
            .iter()
            .zip(fill.values())
            .map(|(v, &f)| v.unwrap_or(f))
            .collect();
        Ok(StructuredAction { values })
    }
}

/// A complete structured action: every position assigned.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructuredAction {
    values: Vec<u8>,
}

impl StructuredAction {
    pub fn new(values: Vec<u8>, spec: &ActionSpaceSpec) -> Result<Self> {
        if values.len() != spec.n_atomic {
            return Err(Error::InvalidInput(format!(
                "action length {} != n_atomic {}",
                values.len(),
                spec.n_atomic
            )));
        }
        if let Some(&v) = values.iter().find(|&&v| v as usize >= spec.arity) {
            return Err(Error::InvalidInput(format!("value {v} exceeds arity {}", spec.arity)));
        }
        Ok(Self { values })
    }

    pub fn from_values_unchecked(values: Vec<u8>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, pos: usize) -> u8 {
        self.values[pos]
    }

    pub fn to_partial(&self) -> PartialAction {
        PartialAction { values: self.values.iter().map(|&v| Some(v)).collect() }
    }

    /// Lexicographic rank of this action among all `K^N` complete actions.
    pub fn lex_index(&self, arity: usize) -> u128 {
        self.values.iter().fold(0u128, |acc, &v| acc * arity as u128 + v as u128)
    }
}

/// One edge of the construction DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BuildStep {
    /// Fill `position` (currently void) with `value`.
    Assign { position: usize, value: u8 },
    /// Early exit: remaining void positions are completed from a reference
    /// action. Only legal when the space enables termination.
    Terminate,
}

/// A complete construction trajectory: the visited states paired with the
/// step taken from each, plus the terminal action reached.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildTrajectory {
    pub steps: Vec<(PartialAction, BuildStep)>,
    pub terminal: StructuredAction,
}

impl BuildTrajectory {
    /// Checks the chaining invariants: consecutive states connected by the
    /// recorded steps, terminal complete.
    pub fn validate(&self, spec: &ActionSpaceSpec, fill: Option<&StructuredAction>) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InternalInvariant("empty trajectory".into()));
        }
        if self.steps.len() > spec.n_atomic + 1 {
            return Err(Error::InternalInvariant(format!(
                "trajectory has {} steps for n_atomic={}",
                self.steps.len(),
                spec.n_atomic
            )));
        }
        let mut state = self.steps[0].0.clone();
        for (i, (s, step)) in self.steps.iter().enumerate() {
            if *s != state {
                return Err(Error::InternalInvariant(format!("state chain broken at step {i}")));
            }
            match step {
                BuildStep::Assign { .. } => {
                    state = apply(&state, step)?;
                }
                BuildStep::Terminate => {
                    if i + 1 != self.steps.len() {
                        return Err(Error::InternalInvariant("terminate before last step".into()));
                    }
                    let fill = fill.ok_or_else(|| {
                        Error::InternalInvariant("terminate without fill action".into())
                    })?;
                    state = state.complete_with(fill)?.to_partial();
                }
            }
        }
        if state.to_complete()? != self.terminal {
            return Err(Error::InternalInvariant("terminal does not match step chain".into()));
        }
        Ok(())
    }
}

/// All steps available from `state`, in canonical order: assignments
/// position-major then value-minor, with the optional terminate step last.
///
/// The flat index of `Assign{position: p, value: k}` in the full logit
/// layout is `p*K + k`; this ordering is what aligns policy logits with
/// steps everywhere else in the crate.
pub fn children(state: &PartialAction, spec: &ActionSpaceSpec) -> Result<Vec<BuildStep>> {
    if state.len() != spec.n_atomic {
        return Err(Error::InvalidInput(format!(
            "state length {} != n_atomic {}",
            state.len(),
            spec.n_atomic
        )));
    }
    let mut steps = Vec::new();
    for position in 0..spec.n_atomic {
        if state.get(position).is_none() {
            for value in 0..spec.arity as u8 {
                steps.push(BuildStep::Assign { position, value });
            }
        }
    }
    if spec.termination_enabled && !state.is_complete() {
        steps.push(BuildStep::Terminate);
    }
    Ok(steps)
}

/// All parents of `state`: for each assigned position, the state with that
/// position voided again, paired with the assign step that restores it.
pub fn parents(state: &PartialAction) -> Vec<(PartialAction, BuildStep)> {
    let mut out = Vec::new();
    for (position, v) in state.values().iter().enumerate() {
        if let Some(value) = *v {
            let mut parent = state.clone();
            parent.values[position] = None;
            out.push((parent, BuildStep::Assign { position, value }));
        }
    }
    out
}

/// Applies a step, returning the successor state. Value semantics: the input
/// state is untouched.
pub fn apply(state: &PartialAction, step: &BuildStep) -> Result<PartialAction> {
    match *step {
        BuildStep::Assign { position, value } => {
            if position >= state.len() {
                return Err(Error::InvalidInput(format!(
                    "position {position} out of range for N={}",
                    state.len()
                )));
            }
            if state.get(position).is_some() {
                return Err(Error::IllegalTransition(format!(
                    "position {position} already assigned"
                )));
            }
            let mut next = state.clone();
            next.values[position] = Some(value);
            Ok(next)
        }
        BuildStep::Terminate => Err(Error::IllegalTransition(
            "terminate does not produce a partial state; complete with a fill action".into(),
        )),
    }
}

/// Rule for deriving a dependency graph from atomic positions in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AdjacencyRule {
    /// Link every pair within Euclidean distance `d`.
    Radius(f64),
    /// Link each position to its `k` nearest others, symmetrized by union.
    /// Distance ties break toward the lower index.
    KNearest(usize),
}

/// Derives the unordered adjacency pairs for positions in Euclidean space.
pub fn adjacency_from_geometry(
    positions: &[Vec<f64>],
    rule: AdjacencyRule,
) -> Result<BTreeSet<(usize, usize)>> {
    let n = positions.len();
    for i in 0..n {
        for j in (i + 1)..n {
            if positions[i] == positions[j] {
                return Err(Error::InvalidInput(format!("positions {i} and {j} coincide")));
            }
        }
    }
    let dist = |i: usize, j: usize| -> f64 {
        positions[i]
            .iter()
            .zip(&positions[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut edges = BTreeSet::new();
    match rule {
        AdjacencyRule::Radius(d) => {
            if d <= 0.0 {
                return Err(Error::InvalidInput("radius must be positive".into()));
            }
            for i in 0..n {
                for j in (i + 1)..n {
                    if dist(i, j) <= d {
                        edges.insert((i, j));
                    }
                }
            }
        }
        AdjacencyRule::KNearest(k) => {
            if k < 1 {
                return Err(Error::InvalidInput("k must be >= 1".into()));
            }
            if k >= n {
                return Err(Error::InvalidInput(format!("k={k} must be < n_atomic={n}")));
            }
            for i in 0..n {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| {
                    dist(i, a).partial_cmp(&dist(i, b)).unwrap().then(a.cmp(&b))
                });
                for &j in others.iter().take(k) {
                    edges.insert((i.min(j), i.max(j)));
                }
            }
        }
    }
    Ok(edges)
}

/// All `K^N` complete actions in lexicographic order.
pub fn enumerate_actions(spec: &ActionSpaceSpec, limit: u64) -> Result<Vec<StructuredAction>> {
    let count = spec
        .num_actions()
        .ok_or(Error::EnumerationTooLarge { required: u128::MAX, limit })?;
    if count > limit as u128 {
        return Err(Error::EnumerationTooLarge { required: count, limit });
    }
    let n = spec.n_atomic;
    let k = spec.arity as u8;
    let mut out = Vec::with_capacity(count as usize);
    let mut values = vec![0u8; n];
    loop {
        out.push(StructuredAction { values: values.clone() });
        // Odometer increment, most significant digit first.
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            values[pos] += 1;
            if values[pos] < k {
                break;
            }
            values[pos] = 0;
        }
    }
}

/// Number of distinct complete trajectories from the empty state to any
/// fixed terminal: one per assignment order, hence `N!`.
pub fn count_complete_trajectories(
    spec: &ActionSpaceSpec,
    terminal: &StructuredAction,
) -> Result<u128> {
    if spec.termination_enabled {
        return Err(Error::InvalidInput(
            "trajectory count is only N! with termination disabled".into(),
        ));
    }
    if terminal.len() != spec.n_atomic {
        return Err(Error::InvalidInput("terminal length mismatch".into()));
    }
    let mut acc: u128 = 1;
    for i in 1..=spec.n_atomic as u128 {
        acc = acc.checked_mul(i).ok_or(Error::EnumerationTooLarge {
            required: u128::MAX,
            limit: u64::MAX,
        })?;
    }
    Ok(acc)
}
