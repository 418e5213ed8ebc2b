//! Distortion risk functionals, conditional risk on tree nodes and nested
//! risk functionals.
//!
//! A distortion functional evaluates `∫₀¹ F_Y^{-1}(u) σ(u) du`. With `Y`
//! finitely supported and `σ` a step function this integral is exact: in
//! Abel form it is `y_(1) T(0) + Σ_k (y_(k) − y_(k−1)) T(c_{k−1})`, where
//! `T(u) = ∫_u^1 σ` is the tail integral of the distortion and `c_k` are the
//! cumulative probabilities of the sorted, tie-merged atoms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{NodeId, ScenarioTree};

pub const DISTORTION_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("risk level {0} outside [0, 1]")]
    LevelOutOfRange(f64),
    #[error("invalid distortion: {0}")]
    InvalidDistortion(String),
    #[error("invalid random variable: {0}")]
    InvalidRv(String),
    #[error("risk collection is empty")]
    EmptyCollection,
    #[error("ladder has {got} stages, tree horizon is {expected}")]
    LadderLength { got: usize, expected: usize },
    #[error("no value supplied for node {0}")]
    MissingValue(NodeId),
    #[error("node {0} is a leaf")]
    LeafNode(NodeId),
    #[error("exponent q = {0} must be at least 1")]
    InvalidExponent(f64),
    #[error("stages s = {s}, t = {t} must satisfy s < t <= {horizon}")]
    InvalidStages { s: usize, t: usize, horizon: usize },
}

/// Finitely supported real random variable.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRv {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteRv {
    /// Atoms are `(value, probability)` with positive probabilities summing
    /// to one.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self, RiskError> {
        if atoms.is_empty() {
            return Err(RiskError::InvalidRv("no atoms".into()));
        }
        if atoms.iter().any(|a| !(a.1 > 0.0) || a.0.is_nan() || a.0 == f64::NEG_INFINITY) {
            return Err(RiskError::InvalidRv("probabilities must be positive, values not NaN".into()));
        }
        let sum: f64 = atoms.iter().map(|a| a.1).sum();
        if (sum - 1.0).abs() > DISTORTION_TOL {
            return Err(RiskError::InvalidRv(format!("probabilities sum to {sum}")));
        }
        Ok(Self { atoms })
    }

    pub fn uniform(values: &[f64]) -> Result<Self, RiskError> {
        let p = 1.0 / values.len() as f64;
        Self::new(values.iter().map(|&v| (v, p)).collect())
    }

    pub fn from_parts(values: &[f64], probs: &[f64]) -> Result<Self, RiskError> {
        if values.len() != probs.len() {
            return Err(RiskError::InvalidRv("values and probabilities differ in length".into()));
        }
        Self::new(values.iter().copied().zip(probs.iter().copied()).collect())
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum()
    }

    pub fn max(&self) -> f64 {
        self.atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sorted ascending with equal values merged.
    pub fn sorted_merged(&self) -> Vec<(f64, f64)> {
        sorted_merged(&self.atoms)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { atoms: self.atoms.iter().map(|&(v, p)| (f(v), p)).collect() }
    }
}

fn sorted_merged(atoms: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = atoms.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (v, p) in sorted {
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 += p,
            _ => out.push((v, p)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Step { breakpoints: Vec<f64>, levels: Vec<f64> },
    /// Limit of `σ_α` as `α → 1`: the essential supremum.
    Supremum,
}

/// Nondecreasing, nonnegative step function on `[0, 1)` with unit integral.
#[derive(Debug, Clone, PartialEq)]
pub struct Distortion {
    kind: Kind,
}

impl Distortion {
    /// `breakpoints` are `0 = u_0 < … < u_k = 1`; `levels[i]` is the value on
    /// `[u_i, u_{i+1})`.
    pub fn new(breakpoints: Vec<f64>, levels: Vec<f64>) -> Result<Self, RiskError> {
        let bad = |m: &str| Err(RiskError::InvalidDistortion(m.to_string()));
        if levels.is_empty() || breakpoints.len() != levels.len() + 1 {
            return bad("need k levels and k+1 breakpoints");
        }
        if breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
            return bad("breakpoints must start at 0 and end at 1");
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("breakpoints must be strictly increasing");
        }
        if levels.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("levels must be finite and nonnegative");
        }
        if levels.windows(2).any(|w| w[0] > w[1]) {
            return bad("levels must be nondecreasing");
        }
        let integral: f64 = levels.iter().zip(breakpoints.windows(2)).map(|(s, w)| s * (w[1] - w[0])).sum();
        if (integral - 1.0).abs() > DISTORTION_TOL {
            return Err(RiskError::InvalidDistortion(format!("integral is {integral}, expected 1")));
        }
        Ok(Self { kind: Kind::Step { breakpoints, levels } })
    }

    /// `σ ≡ 1`, the expectation.
    pub fn expectation() -> Self {
        Self { kind: Kind::Step { breakpoints: vec![0.0, 1.0], levels: vec![1.0] } }
    }

    /// `σ_α`: zero below `α`, `1/(1−α)` above. `α = 1` gives the supremum.
    pub fn avar(alpha: f64) -> Result<Self, RiskError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(RiskError::LevelOutOfRange(alpha));
        }
        Ok(if alpha == 1.0 {
            Self { kind: Kind::Supremum }
        } else if alpha == 0.0 {
            Self::expectation()
        } else {
            Self {
                kind: Kind::Step { breakpoints: vec![0.0, alpha, 1.0], levels: vec![0.0, 1.0 / (1.0 - alpha)] },
            }
        })
    }

    pub fn breakpoints(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Step { breakpoints, .. } => Some(breakpoints),
            Kind::Supremum => None,
        }
    }

    pub fn levels(&self) -> Option<&[f64]> {
        match &self.kind {
            Kind::Step { levels, .. } => Some(levels),
            Kind::Supremum => None,
        }
    }

    pub fn is_supremum(&self) -> bool {
        matches!(self.kind, Kind::Supremum)
    }

    /// `σ(u)` for `u ∈ [0, 1)`.
    pub fn eval(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Supremum => {
                if u < 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Kind::Step { breakpoints, levels } => {
                let k = breakpoints[1..].partition_point(|&b| b <= u).min(levels.len() - 1);
                levels[k]
            }
        }
    }

    /// Tail integral `∫_u^1 σ`.
    pub fn tail(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Supremum => {
                if u < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Kind::Step { breakpoints, levels } => {
                let mut acc = 0.0;
                for (k, s) in levels.iter().enumerate().rev() {
                    let (lo, hi) = (breakpoints[k], breakpoints[k + 1]);
                    if hi <= u {
                        break;
                    }
                    acc += s * (hi - lo.max(u));
                }
                acc
            }
        }
    }
}

/// `R_σ(Y) = ∫₀¹ F_Y^{-1}(u) σ(u) du`.
pub fn distortion_risk(y: &DiscreteRv, sigma: &Distortion) -> f64 {
    risk_of_atoms(y.atoms(), sigma)
}

fn risk_of_atoms(atoms: &[(f64, f64)], sigma: &Distortion) -> f64 {
    if atoms.iter().any(|a| a.0 == f64::INFINITY) {
        return f64::INFINITY;
    }
    let sorted = sorted_merged(atoms);
    let mut acc = sorted[0].0 * sigma.tail(0.0);
    let mut cum = 0.0;
    for w in sorted.windows(2) {
        cum += w[0].1;
        acc += (w[1].0 - w[0].0) * sigma.tail(cum);
    }
    acc
}

/// Average Value-at-Risk: the mean of the upper `1 − α` tail of `Y`.
pub fn avar(y: &DiscreteRv, alpha: f64) -> Result<f64, RiskError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RiskError::LevelOutOfRange(alpha));
    }
    if alpha == 1.0 {
        return Ok(y.max());
    }
    let mut sorted = y.atoms().to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let budget = 1.0 - alpha;
    let mut left = budget;
    let mut acc = 0.0;
    for (v, p) in sorted {
        if left <= 0.0 {
            break;
        }
        let take = p.min(left);
        acc += v * take;
        left -= take;
    }
    Ok(acc / budget)
}

/// Finite, nonempty set of distortions; its functional is the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskCollection {
    members: Vec<Distortion>,
}

impl RiskCollection {
    pub fn new(members: Vec<Distortion>) -> Result<Self, RiskError> {
        if members.is_empty() {
            return Err(RiskError::EmptyCollection);
        }
        Ok(Self { members })
    }

    pub fn single(sigma: Distortion) -> Self {
        Self { members: vec![sigma] }
    }

    pub fn expectation() -> Self {
        Self::single(Distortion::expectation())
    }

    pub fn avar(alpha: f64) -> Result<Self, RiskError> {
        Ok(Self::single(Distortion::avar(alpha)?))
    }

    pub fn members(&self) -> &[Distortion] {
        &self.members
    }

    /// `sup_{σ∈S} ‖σ‖_q`.
    pub fn max_norm(&self, q: f64) -> Result<f64, RiskError> {
        let mut best: f64 = 0.0;
        for s in &self.members {
            best = best.max(sigma_norm(s, q)?);
        }
        Ok(best)
    }

    pub(crate) fn eval_atoms(&self, atoms: &[(f64, f64)]) -> f64 {
        self.members.iter().map(|s| risk_of_atoms(atoms, s)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `max_{σ∈S} R_σ(Y)`.
pub fn collection_risk(y: &DiscreteRv, s: &RiskCollection) -> f64 {
    s.eval_atoms(y.atoms())
}

/// One collection per stage; entry `t − 1` is applied at stage `t − 1` nodes
/// to their stage-`t` children.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLadder {
    stages: Vec<RiskCollection>,
}

impl RiskLadder {
    pub fn new(stages: Vec<RiskCollection>) -> Self {
        Self { stages }
    }

    pub fn uniform(s: RiskCollection, horizon: usize) -> Self {
        Self { stages: vec![s; horizon] }
    }

    pub fn expectation(horizon: usize) -> Self {
        Self::uniform(RiskCollection::expectation(), horizon)
    }

    pub fn avar(alphas: &[f64]) -> Result<Self, RiskError> {
        Ok(Self { stages: alphas.iter().map(|&a| RiskCollection::avar(a)).collect::<Result<_, _>>()? })
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Collection `S_t`, `t` in `1..=T`.
    pub fn stage(&self, t: usize) -> &RiskCollection {
        &self.stages[t - 1]
    }

    pub fn stages(&self) -> &[RiskCollection] {
        &self.stages
    }

    /// `∏_t sup_{σ∈S_t} ‖σ‖_q`.
    pub fn norm_product(&self, q: f64) -> Result<f64, RiskError> {
        self.stages.iter().try_fold(1.0, |acc, s| Ok(acc * s.max_norm(q)?))
    }

    pub(crate) fn check(&self, tree: &ScenarioTree) -> Result<(), RiskError> {
        if self.stages.len() != tree.horizon() {
            return Err(RiskError::LadderLength { got: self.stages.len(), expected: tree.horizon() });
        }
        Ok(())
    }
}

/// Risk of the one-step-ahead values under the kernel of `node`.
pub fn conditional_risk(
    tree: &ScenarioTree,
    node: NodeId,
    child_values: &BTreeMap<NodeId, f64>,
    s: &RiskCollection,
) -> Result<f64, RiskError> {
    if tree.is_leaf(node) {
        return Err(RiskError::LeafNode(node));
    }
    let mut atoms = Vec::with_capacity(tree.children(node).len());
    for &c in tree.children(node) {
        let v = *child_values.get(&c).ok_or(RiskError::MissingValue(c))?;
        atoms.push((v, tree.node(c).cond_prob));
    }
    Ok(s.eval_atoms(&atoms))
}

/// Same as [`conditional_risk`] with child values read from a node-indexed slice.
pub(crate) fn conditional_risk_dense(tree: &ScenarioTree, node: NodeId, values: &[f64], s: &RiskCollection) -> f64 {
    let atoms: Vec<(f64, f64)> =
        tree.children(node).iter().map(|c| (values[c.0], tree.node(*c).cond_prob)).collect();
    s.eval_atoms(&atoms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedRisk {
    pub value: f64,
    /// Value at every node, indexed by node id.
    pub node_values: Vec<f64>,
}

/// Nested risk functional `R_{S_1}(… R_{S_T}(Y | x_{1:T−1}) …)`.
pub fn nested_risk(
    tree: &ScenarioTree,
    leaf_values: &BTreeMap<NodeId, f64>,
    ladder: &RiskLadder,
) -> Result<NestedRisk, RiskError> {
    ladder.check(tree)?;
    let mut values = vec![f64::NAN; tree.len()];
    for &leaf in tree.leaves() {
        values[leaf.0] = *leaf_values.get(&leaf).ok_or(RiskError::MissingValue(leaf))?;
    }
    backward(tree, &mut values, ladder, 0, tree.horizon());
    Ok(NestedRisk { value: values[0], node_values: values })
}

/// Nested risk with leaf values given by a node-indexed slice.
pub fn nested_risk_dense(tree: &ScenarioTree, leaf_values: &[f64], ladder: &RiskLadder) -> Result<NestedRisk, RiskError> {
    ladder.check(tree)?;
    let mut values = leaf_values.to_vec();
    values.resize(tree.len(), f64::NAN);
    backward(tree, &mut values, ladder, 0, tree.horizon());
    Ok(NestedRisk { value: values[0], node_values: values })
}

/// Fills stages `t−1` down to `s` from the stage-`t` values already present
/// in `values`, producing `R_{S_{s+1:t}}(v_t | x_{1:s})` at every stage-`s` node.
pub fn backward(tree: &ScenarioTree, values: &mut [f64], ladder: &RiskLadder, s: usize, t: usize) {
    for stage in (s..t).rev() {
        let coll = ladder.stage(stage + 1);
        for &n in tree.stage_nodes(stage) {
            values[n.0] = conditional_risk_dense(tree, n, values, coll);
        }
    }
}

/// `R_{S_{s+1:t}}` applied to stage-`t` node values; returns the node-indexed
/// vector with stages `s..t` filled.
pub fn nested_between(
    tree: &ScenarioTree,
    stage_values: &[f64],
    ladder: &RiskLadder,
    s: usize,
    t: usize,
) -> Result<Vec<f64>, RiskError> {
    ladder.check(tree)?;
    if s >= t || t > tree.horizon() {
        return Err(RiskError::InvalidStages { s, t, horizon: tree.horizon() });
    }
    let mut values = vec![f64::NAN; tree.len()];
    for &n in tree.stage_nodes(t) {
        values[n.0] = stage_values[n.0];
    }
    backward(tree, &mut values, ladder, s, t);
    Ok(values)
}

/// Nested Average Value-at-Risk with one level per stage.
pub fn nested_avar(tree: &ScenarioTree, leaf_values: &BTreeMap<NodeId, f64>, alphas: &[f64]) -> Result<f64, RiskError> {
    let ladder = RiskLadder::avar(alphas)?;
    Ok(nested_risk(tree, leaf_values, &ladder)?.value)
}

/// `(∫₀¹ σ^q)^{1/q}`; the largest level for `q = ∞`.
pub fn sigma_norm(sigma: &Distortion, q: f64) -> Result<f64, RiskError> {
    if !(q >= 1.0) {
        return Err(RiskError::InvalidExponent(q));
    }
    match &sigma.kind {
        Kind::Supremum => Ok(if q == 1.0 { 1.0 } else { f64::INFINITY }),
        Kind::Step { breakpoints, levels } => {
            if q == f64::INFINITY {
                return Ok(*levels.last().unwrap());
            }
            let sum: f64 = levels.iter().zip(breakpoints.windows(2)).map(|(s, w)| s.powf(q) * (w[1] - w[0])).sum();
            Ok(sum.powf(1.0 / q))
        }
    }
}

/// One distortion in the JSON risk specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistortionSpec {
    Avar { avar: f64 },
    Step { breakpoints: Vec<f64>, levels: Vec<f64> },
}

impl DistortionSpec {
    pub fn build(&self) -> Result<Distortion, RiskError> {
        match self {
            Self::Avar { avar } => Distortion::avar(*avar),
            Self::Step { breakpoints, levels } => Distortion::new(breakpoints.clone(), levels.clone()),
        }
    }
}

/// `{"stages": [[distortion, ...], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskSpec {
    pub stages: Vec<Vec<DistortionSpec>>,
}

impl RiskSpec {
    pub fn build(&self) -> Result<RiskLadder, RiskError> {
        let stages = self
            .stages
            .iter()
            .map(|s| RiskCollection::new(s.iter().map(DistortionSpec::build).collect::<Result<_, _>>()?))
            .collect::<Result<_, _>>()?;
        Ok(RiskLadder::new(stages))
    }
}
