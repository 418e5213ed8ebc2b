//! Risk-averse multistage problems on a scenario tree.
//!
//! The total cost is `Q(z; x) = Σ_{t=0}^T q_t(z_t, a_t, x_{1:t})` where `a_t` is a
//! finite auxiliary state with `a_{t+1} = next[t][a_t][z_t]` and `a_0` fixed.
//! Translation equivariance lets the cost already paid be pulled out of every
//! risk functional, so backward induction over `(node, state)` pairs is exact:
//!
//! `V_t(n, a) = min_z [ q_t(z, a, x_{1:t}) + R_{S_{t+1}}(V_{t+1}(·, next[t][a][z]) | n) ]`.
//!
//! Infeasible actions carry cost `+∞`. A policy assigns one action index to
//! every node, which is exactly a nonanticipative decision rule on a tree.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nested_distance::{self, NestedError, TerminalCost};
use crate::risk::{self, RiskError, RiskLadder};
use crate::transport::holder_conjugate;
use crate::tree::{NodeId, ScenarioTree};

/// Default limit on the number of policies the enumerators may visit.
pub const ENUMERATION_CAP: u64 = 1 << 22;

#[derive(Debug, Error)]
pub enum MultistageError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("the cost has a path-dependent part; only brute-force enumeration supports it")]
    NonDecomposable,
    #[error("problem is infeasible: every policy has cost +inf")]
    Infeasible,
    #[error("policy: {0}")]
    InvalidPolicy(String),
    #[error("problem declares no Lipschitz constant")]
    MissingLipschitz,
    #[error("{count} policies exceed the enumeration cap of {cap}")]
    CapExceeded { count: f64, cap: u64 },
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Nested(#[from] NestedError),
}

/// One component `q_t` of the stage cost. Here `x` is the stage value `x_t`
/// (all zeros at the root) and `z` the action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageCost {
    /// `c·z + e·x + constant`; `e` is ignored at the root.
    Linear {
        c: Vec<f64>,
        #[serde(default)]
        e: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    /// `scale · ‖z − x‖₁`.
    Tracking { scale: f64 },
    /// `Σ_k h (z_k − x_k)_+ + b (x_k − z_k)_+`.
    Newsvendor { h: f64, b: f64 },
    /// Cost depending only on the auxiliary state.
    StatePenalty { penalty: Vec<f64> },
    /// `values[node id][action][state]`; `null` marks an infeasible action.
    Table {
        #[serde(deserialize_with = "node_keyed")]
        values: NodeTable,
    },
    Sum { terms: Vec<StageCost> },
}

type NodeTable = BTreeMap<usize, Vec<Vec<Option<f64>>>>;

// JSON object keys arrive as strings inside tagged enums
fn node_keyed<'de, D: serde::Deserializer<'de>>(d: D) -> Result<NodeTable, D::Error> {
    let raw = BTreeMap::<String, Vec<Vec<Option<f64>>>>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| serde::de::Error::custom(format!("bad node id '{k}'"))))
        .collect()
}

impl StageCost {
    fn eval(&self, node: NodeId, zi: usize, z: &[f64], a: usize, x: Option<&[f64]>) -> f64 {
        let xk = |k: usize| x.map_or(0.0, |x| x[k]);
        match self {
            StageCost::Linear { c, e, constant } => {
                let cz: f64 = c.iter().zip(z).map(|(c, z)| c * z).sum();
                let ex: f64 = x.map_or(0.0, |x| e.iter().zip(x).map(|(e, x)| e * x).sum());
                cz + ex + constant
            }
            StageCost::Tracking { scale } => scale * (0..z.len()).map(|k| (z[k] - xk(k)).abs()).sum::<f64>(),
            StageCost::Newsvendor { h, b } => (0..z.len())
                .map(|k| {
                    let d = z[k] - xk(k);
                    if d > 0.0 { h * d } else { -b * d }
                })
                .sum(),
            StageCost::StatePenalty { penalty } => penalty[a],
            StageCost::Table { values } => values[&node.0][zi][a].unwrap_or(f64::INFINITY),
            StageCost::Sum { terms } => terms.iter().map(|c| c.eval(node, zi, z, a, x)).sum(),
        }
    }

    fn check(&self, tree: &ScenarioTree, t: usize, actions: &[Vec<f64>], states: usize) -> Result<(), String> {
        let zdim = actions[0].len();
        let xdim = if t == 0 { None } else { Some(tree.stage_dims()[t - 1]) };
        let finite = |v: f64, what: &str| if v.is_finite() { Ok(()) } else { Err(format!("stage {t}: {what} must be finite")) };
        match self {
            StageCost::Linear { c, e, constant } => {
                if c.len() != zdim {
                    return Err(format!("stage {t}: linear c has length {}, actions have dimension {zdim}", c.len()));
                }
                if let Some(d) = xdim {
                    if !e.is_empty() && e.len() != d {
                        return Err(format!("stage {t}: linear e has length {}, stage dimension is {d}", e.len()));
                    }
                }
                c.iter().chain(e).chain([constant]).try_for_each(|v| finite(*v, "linear coefficients"))
            }
            StageCost::Tracking { scale } => {
                finite(*scale, "tracking scale")?;
                match xdim {
                    Some(d) if d != zdim => Err(format!("stage {t}: tracking needs action dimension {d}, got {zdim}")),
                    _ => Ok(()),
                }
            }
            StageCost::Newsvendor { h, b } => {
                finite(*h, "newsvendor h")?;
                finite(*b, "newsvendor b")?;
                match xdim {
                    Some(d) if d != zdim => Err(format!("stage {t}: newsvendor needs action dimension {d}, got {zdim}")),
                    _ => Ok(()),
                }
            }
            StageCost::StatePenalty { penalty } => {
                if penalty.len() != states {
                    return Err(format!("stage {t}: state penalty has {} entries for {states} states", penalty.len()));
                }
                penalty.iter().try_for_each(|v| finite(*v, "state penalty"))
            }
            StageCost::Table { values } => {
                for &n in tree.stage_nodes(t) {
                    let rows = values.get(&n.0).ok_or_else(|| format!("stage {t}: table has no entry for node {n}"))?;
                    if rows.len() != actions.len() || rows.iter().any(|r| r.len() != states) {
                        return Err(format!("node {n}: table must be {} actions x {states} states", actions.len()));
                    }
                    if rows.iter().flatten().flatten().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
                        return Err(format!("node {n}: table entries must be numbers or null"));
                    }
                }
                Ok(())
            }
            StageCost::Sum { terms } => terms.iter().try_for_each(|c| c.check(tree, t, actions, states)),
        }
    }

    /// Lipschitz constant in `x_t` with respect to the Euclidean norm, for
    /// components that do not depend on the tree.
    fn lipschitz(&self, xdim: usize) -> Option<f64> {
        let root_m = (xdim as f64).sqrt();
        match self {
            StageCost::Linear { e, .. } => Some(e.iter().map(|v| v * v).sum::<f64>().sqrt()),
            StageCost::Tracking { scale } => Some(scale.abs() * root_m),
            StageCost::Newsvendor { h, b } => Some(h.abs().max(b.abs()) * root_m),
            StageCost::StatePenalty { .. } => Some(0.0),
            StageCost::Table { .. } => None,
            StageCost::Sum { terms } => terms.iter().map(|c| c.lipschitz(xdim)).sum(),
        }
    }

    fn uses_table(&self) -> bool {
        match self {
            StageCost::Table { .. } => true,
            StageCost::Sum { terms } => terms.iter().any(StageCost::uses_table),
            _ => false,
        }
    }
}

/// JSON problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistageProblem {
    /// `Z_0, …, Z_T`, each a list of action vectors.
    pub action_sets: Vec<Vec<Vec<f64>>>,
    /// `q_0, …, q_T`.
    pub stage_costs: Vec<StageCost>,
    #[serde(rename = "lipschitz_L", default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_l: Option<f64>,
    #[serde(default)]
    pub a0: usize,
    /// `transitions[t][a][z]` is the state at stage `t + 1`; omitted means a
    /// single state.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transitions: Vec<Vec<Vec<usize>>>,
    /// Optional path-dependent cost added at the leaves:
    /// `path_costs[leaf id][k]` with `k` the mixed-radix code of the action
    /// indices `z_0, …, z_T` along the path (`z_0` most significant).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub path_costs: BTreeMap<usize, Vec<f64>>,
}

impl MultistageProblem {
    /// Stateless problem with the given actions and stage costs.
    pub fn new(action_sets: Vec<Vec<Vec<f64>>>, stage_costs: Vec<StageCost>, lipschitz_l: Option<f64>) -> Self {
        Self { action_sets, stage_costs, lipschitz_l, a0: 0, transitions: Vec::new(), path_costs: BTreeMap::new() }
    }

    pub fn from_json_str(s: &str) -> Result<Self, MultistageError> {
        serde_json::from_str(s).map_err(|e| MultistageError::Invalid(e.to_string()))
    }

    pub fn n_states(&self) -> usize {
        self.transitions.first().map_or(1, Vec::len)
    }

    pub fn is_decomposable(&self) -> bool {
        self.path_costs.is_empty()
    }

    /// Declared Lipschitz constant of `Q` in the path.
    pub fn lipschitz(&self) -> Result<f64, MultistageError> {
        self.lipschitz_l.ok_or(MultistageError::MissingLipschitz)
    }

    /// Lipschitz constant of `Q(z; ·)` implied by the built-in components,
    /// with respect to `Σ_t ‖x_t − y_t‖₂`: the largest per-stage constant.
    /// `None` when a tabulated or path-dependent cost is present.
    pub fn derived_lipschitz(&self, stage_dims: &[usize]) -> Option<f64> {
        if !self.path_costs.is_empty() {
            return None;
        }
        let mut l: f64 = 0.0;
        for (t, c) in self.stage_costs.iter().enumerate() {
            if c.uses_table() {
                return None;
            }
            if t > 0 {
                l = l.max(c.lipschitz(stage_dims[t - 1])?);
            }
        }
        Some(l)
    }

    fn prepare(&self, tree: &ScenarioTree) -> Result<Prepared, MultistageError> {
        let bad = |m: String| Err(MultistageError::Invalid(m));
        let horizon = tree.horizon();
        if self.action_sets.len() != horizon + 1 {
            return bad(format!("{} action sets for horizon {horizon}; need one per stage 0..=T", self.action_sets.len()));
        }
        if self.stage_costs.len() != horizon + 1 {
            return bad(format!("{} stage costs for horizon {horizon}; need one per stage 0..=T", self.stage_costs.len()));
        }
        for (t, set) in self.action_sets.iter().enumerate() {
            if set.is_empty() {
                return bad(format!("action set of stage {t} is empty"));
            }
            if set.iter().any(|z| z.len() != set[0].len() || z.iter().any(|v| !v.is_finite())) {
                return bad(format!("actions of stage {t} must be finite vectors of one dimension"));
            }
        }
        if let Some(l) = self.lipschitz_l {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("lipschitz_L = {l} must be finite and nonnegative"));
            }
        }
        let states = self.n_states();
        if self.transitions.is_empty() {
            if self.a0 != 0 {
                return bad("a0 must be 0 without transitions".into());
            }
        } else {
            if self.transitions.len() != horizon {
                return bad(format!("{} transition tables, need {horizon}", self.transitions.len()));
            }
            if self.a0 >= states {
                return bad(format!("a0 = {} but there are {states} states", self.a0));
            }
            for (t, table) in self.transitions.iter().enumerate() {
                if table.len() != states {
                    return bad(format!("transition table {t} has {} rows, expected {states}", table.len()));
                }
                for row in table {
                    if row.len() != self.action_sets[t].len() || row.iter().any(|&a| a >= states) {
                        return bad(format!("transition table {t} needs one valid state per action"));
                    }
                }
            }
        }
        for (t, c) in self.stage_costs.iter().enumerate() {
            c.check(tree, t, &self.action_sets[t], states).map_err(MultistageError::Invalid)?;
        }
        let radix: Vec<usize> = self.action_sets.iter().map(Vec::len).collect();
        let mut path = vec![Vec::new(); tree.len()];
        if !self.path_costs.is_empty() {
            let codes: usize = radix.iter().product();
            for &leaf in tree.leaves() {
                let v = self.path_costs.get(&leaf.0).ok_or_else(|| {
                    MultistageError::Invalid(format!("path_costs has no entry for leaf {leaf}"))
                })?;
                if v.len() != codes || v.iter().any(|x| x.is_nan() || *x == f64::NEG_INFINITY) {
                    return bad(format!("path_costs of leaf {leaf} needs {codes} numeric entries"));
                }
                path[leaf.0] = v.clone();
            }
        }

        let costs = tree
            .nodes()
            .iter()
            .map(|node| {
                let t = node.stage;
                let x = (t > 0).then_some(node.value.as_slice());
                let mut row = Vec::with_capacity(radix[t] * states);
                for (zi, z) in self.action_sets[t].iter().enumerate() {
                    for a in 0..states {
                        row.push(self.stage_costs[t].eval(node.id, zi, z, a, x));
                    }
                }
                row
            })
            .collect();
        let next = if self.transitions.is_empty() {
            radix[..horizon].iter().map(|&k| vec![vec![0; k]]).collect()
        } else {
            self.transitions.clone()
        };
        Ok(Prepared { costs, next, states, a0: self.a0, radix, path })
    }
}

/// Problem data resolved against one tree.
struct Prepared {
    /// `costs[node][z * states + a]`.
    costs: Vec<Vec<f64>>,
    next: Vec<Vec<Vec<usize>>>,
    states: usize,
    a0: usize,
    radix: Vec<usize>,
    /// Path-dependent cost per leaf, empty if absent.
    path: Vec<Vec<f64>>,
}

impl Prepared {
    fn cost(&self, n: NodeId, z: usize, a: usize) -> f64 {
        self.costs[n.0][z * self.states + a]
    }

    /// Realized total cost at every leaf under `actions`, written into `out`.
    fn leaf_costs(&self, tree: &ScenarioTree, actions: &[usize], out: &mut [f64], state: &mut [usize], code: &mut [usize]) {
        state[0] = self.a0;
        out[0] = 0.0;
        code[0] = 0;
        for t in 0..=tree.horizon() {
            for &n in tree.stage_nodes(t) {
                let (a, z) = (state[n.0], actions[n.0]);
                let acc = out[n.0] + self.cost(n, z, a);
                let c = code[n.0] * self.radix[t] + z;
                if t == tree.horizon() {
                    out[n.0] = if self.path[n.0].is_empty() { acc } else { acc + self.path[n.0][c] };
                } else {
                    let a1 = self.next[t][a][z];
                    for &child in tree.children(n) {
                        out[child.0] = acc;
                        state[child.0] = a1;
                        code[child.0] = c;
                    }
                }
            }
        }
    }
}

/// One action index per node, indexed by node id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<usize>,
}

impl Policy {
    pub fn constant(tree: &ScenarioTree, action: usize) -> Self {
        Self { actions: vec![action; tree.len()] }
    }

    fn check(&self, tree: &ScenarioTree, problem: &MultistageProblem) -> Result<(), MultistageError> {
        if self.actions.len() != tree.len() {
            return Err(MultistageError::InvalidPolicy(format!(
                "{} actions for {} nodes",
                self.actions.len(),
                tree.len()
            )));
        }
        for node in tree.nodes() {
            if self.actions[node.id.0] >= problem.action_sets[node.stage].len() {
                return Err(MultistageError::InvalidPolicy(format!("undefined action at node {}", node.id)));
            }
        }
        Ok(())
    }
}

/// Value at every node, indexed by node id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueProcess {
    pub values: Vec<f64>,
}

impl ValueProcess {
    pub fn root(&self) -> f64 {
        self.values[0]
    }
}

fn check_ladder(tree: &ScenarioTree, ladder: &RiskLadder) -> Result<(), MultistageError> {
    if ladder.len() != tree.horizon() {
        return Err(RiskError::LadderLength { got: ladder.len(), expected: tree.horizon() }.into());
    }
    Ok(())
}

/// Value process of a fixed policy: realized cost at the leaves, nested
/// conditional risk above.
pub fn evaluate_policy(
    tree: &ScenarioTree,
    problem: &MultistageProblem,
    ladder: &RiskLadder,
    policy: &Policy,
) -> Result<ValueProcess, MultistageError> {
    check_ladder(tree, ladder)?;
    let prep = problem.prepare(tree)?;
    policy.check(tree, problem)?;
    Ok(ValueProcess { values: policy_values(tree, &prep, ladder, &policy.actions) })
}

fn policy_values(tree: &ScenarioTree, prep: &Prepared, ladder: &RiskLadder, actions: &[usize]) -> Vec<f64> {
    let n = tree.len();
    let (mut values, mut state, mut code) = (vec![0.0; n], vec![0; n], vec![0; n]);
    prep.leaf_costs(tree, actions, &mut values, &mut state, &mut code);
    risk::backward(tree, &mut values, ladder, 0, tree.horizon());
    values
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpSolution {
    pub v0: f64,
    pub policy: Policy,
    /// `past cost + V_t(n, a_t)` along the optimal policy.
    pub values: ValueProcess,
    /// `V_t(n, a)` for every node and state.
    pub state_values: Vec<Vec<f64>>,
    /// Auxiliary state reached at every node under the policy.
    pub states: Vec<usize>,
}

struct DpTables {
    /// `v[node][a]`.
    v: Vec<Vec<f64>>,
    /// Argmin action per node and state.
    arg: Vec<Vec<usize>>,
}

fn dp_tables(tree: &ScenarioTree, prep: &Prepared, ladder: &RiskLadder) -> DpTables {
    let n = tree.len();
    let mut v = vec![Vec::new(); n];
    let mut arg = vec![Vec::new(); n];
    for t in (0..=tree.horizon()).rev() {
        let solved: Vec<(Vec<f64>, Vec<usize>)> = tree
            .stage_nodes(t)
            .par_iter()
            .map(|&node| {
                let k = prep.radix[t];
                let mut best = vec![f64::INFINITY; prep.states];
                let mut best_z = vec![0; prep.states];
                for a in 0..prep.states {
                    for z in 0..k {
                        let mut val = prep.cost(node, z, a);
                        if t < tree.horizon() {
                            let a1 = prep.next[t][a][z];
                            let atoms: Vec<(f64, f64)> =
                                tree.children(node).iter().map(|c| (v[c.0][a1], tree.node(*c).cond_prob)).collect();
                            val += ladder.stage(t + 1).eval_atoms(&atoms);
                        }
                        if val < best[a] {
                            best[a] = val;
                            best_z[a] = z;
                        }
                    }
                }
                (best, best_z)
            })
            .collect();
        for (&node, (b, z)) in tree.stage_nodes(t).iter().zip(solved) {
            v[node.0] = b;
            arg[node.0] = z;
        }
    }
    DpTables { v, arg }
}

/// Backward induction over nodes and auxiliary states.
pub fn solve_dp(tree: &ScenarioTree, problem: &MultistageProblem, ladder: &RiskLadder) -> Result<DpSolution, MultistageError> {
    check_ladder(tree, ladder)?;
    if !problem.is_decomposable() {
        return Err(MultistageError::NonDecomposable);
    }
    let prep = problem.prepare(tree)?;
    let DpTables { v, arg } = dp_tables(tree, &prep, ladder);
    let n = tree.len();
    let mut actions = vec![0; n];
    let mut states = vec![0; n];
    let mut past = vec![0.0; n];
    states[0] = prep.a0;
    for t in 0..=tree.horizon() {
        for &node in tree.stage_nodes(t) {
            let a = states[node.0];
            let z = arg[node.0][a];
            actions[node.0] = z;
            if t < tree.horizon() {
                let paid = past[node.0] + prep.cost(node, z, a);
                for &c in tree.children(node) {
                    states[c.0] = prep.next[t][a][z];
                    past[c.0] = paid;
                }
            }
        }
    }
    let values: Vec<f64> = (0..n).map(|i| past[i] + v[i][states[i]]).collect();
    let v0 = values[0];
    if v0 == f64::INFINITY {
        return Err(MultistageError::Infeasible);
    }
    Ok(DpSolution { v0, policy: Policy { actions }, values: ValueProcess { values }, state_values: v, states })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MartingaleMode {
    /// Equality `v_t = R(v_{t+1})` is expected.
    Policy,
    /// Only `v_t ≤ R(v_{t+1})` is required.
    Dp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    /// Largest `v_t − R_{S_{t+1}}(v_{t+1})` over stage-`t` nodes, `t = 0..T`.
    pub per_stage: Vec<f64>,
    pub max_deviation: f64,
    pub max_abs_deviation: f64,
}

impl MartingaleReport {
    pub fn passes(&self, mode: MartingaleMode, tol: f64) -> bool {
        match mode {
            MartingaleMode::Policy => self.max_abs_deviation <= tol,
            MartingaleMode::Dp => self.max_deviation <= tol,
        }
    }
}

/// Computes `v_t − R_{S_{t+1}}(v_{t+1} | n)` at every non-leaf node.
pub fn check_r_martingale(values: &ValueProcess, tree: &ScenarioTree, ladder: &RiskLadder) -> MartingaleReport {
    let mut per_stage = Vec::with_capacity(tree.horizon());
    let mut max_abs: f64 = 0.0;
    for t in 0..tree.horizon() {
        let mut worst = f64::NEG_INFINITY;
        for &n in tree.stage_nodes(t) {
            let atoms: Vec<(f64, f64)> =
                tree.children(n).iter().map(|c| (values.values[c.0], tree.node(*c).cond_prob)).collect();
            let rhs = ladder.stage(t + 1).eval_atoms(&atoms);
            let lhs = values.values[n.0];
            let dev = if lhs == rhs { 0.0 } else { lhs - rhs };
            worst = worst.max(dev);
            max_abs = max_abs.max(dev.abs());
        }
        per_stage.push(worst);
    }
    let max_deviation = per_stage.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    MartingaleReport { per_stage, max_deviation, max_abs_deviation: max_abs }
}

/// Largest `|v_s − R_{S_{s+1:t}}(v_t)|` over stage-`s` nodes of a value process.
pub fn nesting_deviation(
    values: &ValueProcess,
    tree: &ScenarioTree,
    ladder: &RiskLadder,
    s: usize,
    t: usize,
) -> Result<f64, MultistageError> {
    let nested = risk::nested_between(tree, &values.values, ladder, s, t)?;
    Ok(tree.stage_nodes(s).iter().map(|n| gap(values.values[n.0], nested[n.0])).fold(0.0, f64::max))
}

fn gap(a: f64, b: f64) -> f64 {
    if a == b { 0.0 } else { (a - b).abs() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForce {
    pub value: f64,
    pub policy: Policy,
    pub policies: u64,
}

fn count_policies<'a>(sizes: impl Iterator<Item = &'a usize>, cap: u64) -> Result<u64, MultistageError> {
    let mut count: u64 = 1;
    let mut exact = 1.0_f64;
    for &k in sizes {
        exact *= k as f64;
        count = count.saturating_mul(k as u64);
    }
    if count > cap {
        return Err(MultistageError::CapExceeded { count: exact, cap });
    }
    Ok(count)
}

/// Minimum of the policy objective over every nonanticipative policy, by
/// exhaustive enumeration. Handles path-dependent costs.
pub fn brute_force(
    tree: &ScenarioTree,
    problem: &MultistageProblem,
    ladder: &RiskLadder,
    cap: u64,
) -> Result<BruteForce, MultistageError> {
    check_ladder(tree, ladder)?;
    let prep = problem.prepare(tree)?;
    let sizes: Vec<usize> = tree.nodes().iter().map(|n| prep.radix[n.stage]).collect();
    let total = count_policies(sizes.iter(), cap)?;
    let n = tree.len();
    let (value, index) = (0..total)
        .into_par_iter()
        .map_init(
            || (vec![0usize; n], vec![0.0; n], vec![0usize; n], vec![0usize; n]),
            |(actions, values, state, code), k| {
                decode(k, &sizes, actions);
                prep.leaf_costs(tree, actions, values, state, code);
                risk::backward(tree, values, ladder, 0, tree.horizon());
                (values[0], k)
            },
        )
        .reduce(|| (f64::INFINITY, u64::MAX), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    if index == u64::MAX {
        return Err(MultistageError::Infeasible);
    }
    let mut actions = vec![0; n];
    decode(index, &sizes, &mut actions);
    Ok(BruteForce { value, policy: Policy { actions }, policies: total })
}

/// Mixed-radix decoding, node 0 least significant.
fn decode(mut k: u64, sizes: &[usize], out: &mut [usize]) {
    for (slot, &s) in out.iter_mut().zip(sizes) {
        *slot = (k % s as u64) as usize;
        k /= s as u64;
    }
}

/// Compares the DP values at stage `s` with a re-nesting from stage `t`:
/// for every stage-`s` node and state, the minimum over all action
/// assignments on stages `s..t` of the subtree of
/// `R_{S_{s+1:t}}(cost paid on s..t + V_t)`. Returns the largest deviation.
pub fn multistage_recursion_check(
    tree: &ScenarioTree,
    problem: &MultistageProblem,
    ladder: &RiskLadder,
    s: usize,
    t: usize,
    cap: u64,
) -> Result<f64, MultistageError> {
    check_ladder(tree, ladder)?;
    if s >= t || t > tree.horizon() {
        return Err(RiskError::InvalidStages { s, t, horizon: tree.horizon() }.into());
    }
    if !problem.is_decomposable() {
        return Err(MultistageError::NonDecomposable);
    }
    let prep = problem.prepare(tree)?;
    let dp = dp_tables(tree, &prep, ladder);
    let mut worst: f64 = 0.0;
    for &root in tree.stage_nodes(s) {
        // subtree nodes by stage s..=t
        let mut layers = vec![vec![root]];
        for _ in s..t {
            let next: Vec<NodeId> = layers.last().unwrap().iter().flat_map(|&n| tree.children(n).iter().copied()).collect();
            layers.push(next);
        }
        let inner: Vec<NodeId> = layers[..t - s].iter().flatten().copied().collect();
        let sizes: Vec<usize> = inner.iter().map(|n| prep.radix[tree.stage(*n)]).collect();
        let total = count_policies(sizes.iter(), cap)?;
        let mut values = vec![0.0; tree.len()];
        let mut state = vec![0usize; tree.len()];
        let mut choice = vec![0usize; inner.len()];
        for a in 0..prep.states {
            let mut best = f64::INFINITY;
            for k in 0..total {
                decode(k, &sizes, &mut choice);
                let mut action = BTreeMap::new();
                for (n, z) in inner.iter().zip(&choice) {
                    action.insert(*n, *z);
                }
                values[root.0] = 0.0;
                state[root.0] = a;
                for (depth, layer) in layers[..t - s].iter().enumerate() {
                    for &n in layer {
                        let (an, z) = (state[n.0], action[&n]);
                        let paid = values[n.0] + prep.cost(n, z, an);
                        for &c in tree.children(n) {
                            values[c.0] = paid;
                            state[c.0] = prep.next[s + depth][an][z];
                        }
                    }
                }
                for &m in &layers[t - s] {
                    values[m.0] += dp.v[m.0][state[m.0]];
                }
                risk::backward(tree, &mut values, ladder, s, t);
                // backward overwrote every stage in s..t; only this subtree matters
                best = best.min(values[root.0]);
            }
            worst = worst.max(gap(dp.v[root.0][a], best));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub value_p: f64,
    pub value_q: f64,
    pub gap: f64,
    pub nested_distance: f64,
    pub norm_product: f64,
    pub lipschitz: f64,
    pub bound: f64,
    pub slack: f64,
}

impl ContinuityReport {
    fn new(value_p: f64, value_q: f64, nd: f64, norm_product: f64, lipschitz: f64, beta: f64) -> Self {
        let gap = gap(value_p, value_q);
        let bound = if nd == 0.0 { 0.0 } else { norm_product * lipschitz * nd.powf(beta) };
        Self { value_p, value_q, gap, nested_distance: nd, norm_product, lipschitz, bound, slack: bound - gap }
    }
}

/// Optimal values on two trees against `∏_t sup_{σ∈S_t} ‖σ‖_q · L · nd_r`,
/// with `q` conjugate to `r` and the default `ℓ_1` terminal cost.
pub fn continuity_experiment(
    p: &ScenarioTree,
    q: &ScenarioTree,
    problem: &MultistageProblem,
    ladder: &RiskLadder,
    r: f64,
) -> Result<ContinuityReport, MultistageError> {
    let l = problem.lipschitz()?;
    let vp = solve_dp(p, problem, ladder)?.v0;
    let vq = solve_dp(q, problem, ladder)?.v0;
    let nd = nested_distance::nested_distance(p, q, r)?;
    let norms = ladder.norm_product(holder_conjugate(r))?;
    Ok(ContinuityReport::new(vp, vq, nd, norms, l, 1.0))
}

/// Nested risk of a path function `y` on two trees against
/// `∏_t sup_{σ∈S_t} ‖σ‖_q · L · nd_r^β`, for `y` β-Hölder with constant `L`
/// in `Σ_t ‖x_t − y_t‖₂`.
pub fn nested_risk_continuity_check(
    p: &ScenarioTree,
    q: &ScenarioTree,
    y: impl Fn(&[Vec<f64>]) -> f64,
    lipschitz: f64,
    beta: f64,
    ladder: &RiskLadder,
    r: f64,
) -> Result<ContinuityReport, MultistageError> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(MultistageError::Invalid(format!("Hölder exponent {beta} must lie in (0, 1]")));
    }
    let risk_of = |tree: &ScenarioTree| -> Result<f64, MultistageError> {
        let mut leaf = vec![0.0; tree.len()];
        for &l in tree.leaves() {
            leaf[l.0] = y(&tree.history(l));
        }
        Ok(risk::nested_risk_dense(tree, &leaf, ladder)?.value)
    };
    let nd = nested_distance::cost_process(p, q, &TerminalCost::default(), r)?.distance;
    let norms = ladder.norm_product(holder_conjugate(r))?;
    Ok(ContinuityReport::new(risk_of(p)?, risk_of(q)?, nd, norms, lipschitz, beta))
}
