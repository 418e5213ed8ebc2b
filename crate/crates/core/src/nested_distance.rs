//! Nested (process) distance between scenario trees.
//!
//! The cost process is computed backwards: `c_T` is the terminal cost on leaf
//! pairs, and for every node pair at stage `t − 1` the value `c_{t−1}` is the
//! order-`r` transport distance between the two conditional kernels with cost
//! `c_t` on the child pairs. Costs live in dense matrices indexed by the stage
//! positions of the two nodes; the optimal kernel of every pair is retained so
//! that the global coupling can be composed and the martingale identity
//! `c_t^r = E_π[c_{t+1}^r | F_t ⊗ F_t]` checked afterwards.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::{self, CostMatrix, TransportError, TransportOptions, TransportPlan};
use crate::tree::{NodeId, ScenarioTree};

/// Default cap on `#leaves(P) · #leaves(Q)` for the direct linear program.
pub const DIRECT_LP_CAP: usize = 400;

#[derive(Debug, Error)]
pub enum NestedError {
    #[error("horizon mismatch: {0} vs {1}")]
    HorizonMismatch(usize, usize),
    #[error("stage {stage} dimensions differ: {p} vs {q}")]
    DimensionMismatch { stage: usize, p: usize, q: usize },
    #[error("invalid terminal cost: {0}")]
    InvalidTerminal(String),
    #[error("{pairs} leaf pairs exceed the direct LP cap of {cap}")]
    CapExceeded { pairs: usize, cap: usize },
    #[error("missing kernel plan for node pair ({0}, {1}) at stage {2}")]
    MissingKernel(NodeId, NodeId, usize),
    #[error("linear program failed: {0}")]
    Lp(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Per-stage distance between two value vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMetric {
    #[default]
    Euclidean,
    Manhattan,
    Chebyshev,
}

impl StageMetric {
    pub fn distance(self, x: &[f64], y: &[f64]) -> f64 {
        let diffs = x.iter().zip(y).map(|(a, b)| (a - b).abs());
        match self {
            StageMetric::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            StageMetric::Manhattan => diffs.sum(),
            StageMetric::Chebyshev => diffs.fold(0.0, f64::max),
        }
    }
}

/// Terminal cost `c_T` on pairs of leaves.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    /// `(Σ_t (w_t d(x_t, y_t))^p)^{1/p}` over the two paths; `p = ∞` takes the
    /// maximum. Empty `weights` means all ones.
    Path { p: f64, metric: StageMetric, weights: Vec<f64> },
    /// Explicit `(#leaves P) × (#leaves Q)` matrix in leaf order.
    Matrix(Vec<Vec<f64>>),
}

impl Default for TerminalCost {
    /// `ℓ_1` over the stages with Euclidean per-stage distance.
    fn default() -> Self {
        Self::lp(1.0)
    }
}

impl TerminalCost {
    pub fn lp(p: f64) -> Self {
        TerminalCost::Path { p, metric: StageMetric::Euclidean, weights: Vec::new() }
    }

    fn check(&self, horizon: usize, leaves_p: usize, leaves_q: usize) -> Result<(), NestedError> {
        let bad = |m: String| Err(NestedError::InvalidTerminal(m));
        match self {
            TerminalCost::Path { p, weights, .. } => {
                if !(*p >= 1.0) {
                    return bad(format!("exponent p = {p} must be >= 1"));
                }
                if !weights.is_empty() && weights.len() != horizon {
                    return bad(format!("{} stage weights for horizon {horizon}", weights.len()));
                }
                if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                    return bad("stage weights must be finite and nonnegative".into());
                }
            }
            TerminalCost::Matrix(rows) => {
                if rows.len() != leaves_p || rows.iter().any(|r| r.len() != leaves_q) {
                    return bad(format!("matrix must be {leaves_p}x{leaves_q}"));
                }
                if rows.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return bad("entries must be finite and nonnegative".into());
                }
            }
        }
        Ok(())
    }

    /// Stage-`t` contribution `w_t d(x_t, y_t)` of a path cost.
    fn stage_term(metric: StageMetric, weights: &[f64], t: usize, x: &[f64], y: &[f64]) -> f64 {
        let w = if weights.is_empty() { 1.0 } else { weights[t - 1] };
        w * metric.distance(x, y)
    }

    /// Evaluates the cost on every leaf pair.
    pub fn leaf_matrix(&self, p: &ScenarioTree, q: &ScenarioTree) -> Result<PairMatrix, NestedError> {
        check_compatible(p, q)?;
        let horizon = p.horizon();
        let (lp, lq) = (p.leaves().len(), q.leaves().len());
        self.check(horizon, lp, lq)?;
        match self {
            TerminalCost::Matrix(rows) => Ok(PairMatrix { rows: lp, cols: lq, data: rows.concat() }),
            TerminalCost::Path { p: exp, metric, weights } => {
                // accumulate Σ term^p (or the running max) stage by stage over node pairs
                let mut acc = PairMatrix::filled(1, 1, 0.0);
                for t in 1..=horizon {
                    let (sp, sq) = (p.stage_nodes(t), q.stage_nodes(t));
                    let mut next = PairMatrix::filled(sp.len(), sq.len(), 0.0);
                    for (i, &a) in sp.iter().enumerate() {
                        let pa = p.stage_index(p.node(a).parent.expect("stage >= 1"));
                        for (j, &b) in sq.iter().enumerate() {
                            let pb = q.stage_index(q.node(b).parent.expect("stage >= 1"));
                            let term = Self::stage_term(*metric, weights, t, &p.node(a).value, &q.node(b).value);
                            let prev = acc.get(pa, pb);
                            let v = if exp.is_infinite() { prev.max(term) } else { prev + term.powf(*exp) };
                            next.set(i, j, v);
                        }
                    }
                    acc = next;
                }
                if exp.is_finite() {
                    for v in &mut acc.data {
                        *v = v.powf(1.0 / exp);
                    }
                }
                Ok(acc)
            }
        }
    }

    /// Evaluates the cost between two explicit paths.
    pub fn eval_paths(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> Option<f64> {
        match self {
            TerminalCost::Matrix(_) => None,
            TerminalCost::Path { p, metric, weights } => {
                let terms = x.iter().zip(y).enumerate().map(|(k, (a, b))| Self::stage_term(*metric, weights, k + 1, a, b));
                Some(if p.is_infinite() {
                    terms.fold(0.0, f64::max)
                } else {
                    terms.map(|d| d.powf(*p)).sum::<f64>().powf(1.0 / p)
                })
            }
        }
    }
}

/// Dense matrix over node pairs of one stage, indexed by stage positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PairMatrix {
    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Optimal one-step coupling for a node pair; rows are the children of the
/// `P` node and columns the children of the `Q` node, in tree order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPlan {
    pub plan: TransportPlan,
    pub duality_gap: f64,
    pub dual_infeasibility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedResult {
    pub distance: f64,
    pub order: f64,
    /// `c_t` for `t = 0..=T`.
    pub stage_costs: Vec<PairMatrix>,
    /// `kernel_plans[t][i * n_q + j]` couples the children of the stage-`t`
    /// pair `(i, j)`, for `t = 0..T`. Every pair carries a plan.
    pub kernel_plans: Vec<Vec<KernelPlan>>,
}

impl NestedResult {
    pub fn max_duality_gap(&self) -> f64 {
        self.kernel_plans.iter().flatten().map(|k| k.duality_gap.max(k.dual_infeasibility)).fold(0.0, f64::max)
    }

    pub fn kernel(&self, t: usize, i: usize, j: usize) -> Option<&KernelPlan> {
        let cols = self.stage_costs[t].cols;
        self.kernel_plans.get(t)?.get(i * cols + j)
    }
}

fn check_compatible(p: &ScenarioTree, q: &ScenarioTree) -> Result<(), NestedError> {
    if p.horizon() != q.horizon() {
        return Err(NestedError::HorizonMismatch(p.horizon(), q.horizon()));
    }
    for (t, (a, b)) in p.stage_dims().iter().zip(q.stage_dims()).enumerate() {
        if a != b {
            return Err(NestedError::DimensionMismatch { stage: t + 1, p: *a, q: *b });
        }
    }
    Ok(())
}

fn kernel_weights(tree: &ScenarioTree, n: NodeId) -> Vec<f64> {
    tree.children(n).iter().map(|c| tree.node(*c).cond_prob).collect()
}

/// One backward sweep. `local(t, i, j, w)` turns the transport value `w` at the
/// stage-`t` pair `(i, j)` into the pair's cost.
fn sweep(
    p: &ScenarioTree,
    q: &ScenarioTree,
    terminal: PairMatrix,
    r: f64,
    local: impl Fn(usize, usize, usize, f64) -> f64 + Sync,
) -> Result<(Vec<PairMatrix>, Vec<Vec<KernelPlan>>), NestedError> {
    if !(r >= 1.0) {
        return Err(TransportError::InvalidOrder(r).into());
    }
    let horizon = p.horizon();
    let mut costs = vec![PairMatrix::filled(0, 0, 0.0); horizon + 1];
    let mut plans = vec![Vec::new(); horizon];
    costs[horizon] = terminal;
    for t in (0..horizon).rev() {
        let (sp, sq) = (p.stage_nodes(t), q.stage_nodes(t));
        let next = &costs[t + 1];
        let solved: Vec<(f64, KernelPlan)> = (0..sp.len() * sq.len())
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / sq.len(), k % sq.len());
                let (a, b) = (sp[i], sq[j]);
                let (ca, cb) = (p.children(a), q.children(b));
                let cost = CostMatrix::from_fn(ca.len(), cb.len(), |x, y| {
                    next.get(p.stage_index(ca[x]), q.stage_index(cb[y]))
                })?;
                let res = transport::solve_weights(
                    &kernel_weights(p, a),
                    &kernel_weights(q, b),
                    &cost,
                    r,
                    TransportOptions::default(),
                )?;
                Ok((
                    local(t, i, j, res.value),
                    KernelPlan {
                        plan: res.plan,
                        duality_gap: res.duality_gap,
                        dual_infeasibility: res.dual_infeasibility,
                    },
                ))
            })
            .collect::<Result<_, NestedError>>()?;
        let mut c = PairMatrix::filled(sp.len(), sq.len(), 0.0);
        let mut stage_plans = Vec::with_capacity(solved.len());
        for (k, (v, plan)) in solved.into_iter().enumerate() {
            c.data[k] = v;
            stage_plans.push(plan);
        }
        costs[t] = c;
        plans[t] = stage_plans;
    }
    Ok((costs, plans))
}

/// Backward recursion for the cost process `c_T, …, c_0`.
pub fn cost_process(p: &ScenarioTree, q: &ScenarioTree, terminal: &TerminalCost, r: f64) -> Result<NestedResult, NestedError> {
    let leaf = terminal.leaf_matrix(p, q)?;
    let (stage_costs, kernel_plans) = sweep(p, q, leaf, r, |_, _, _, w| w)?;
    Ok(NestedResult { distance: stage_costs[0].get(0, 0), order: r, stage_costs, kernel_plans })
}

/// Nested distance of order `r` under the default terminal cost
/// ([`TerminalCost::default`], independent of `r`).
pub fn nested_distance(p: &ScenarioTree, q: &ScenarioTree, r: f64) -> Result<f64, NestedError> {
    Ok(cost_process(p, q, &TerminalCost::default(), r)?.distance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveResult {
    pub distance: f64,
    pub order: f64,
    /// `c̃_t` for `t = 0..=T`.
    pub tilde_costs: Vec<PairMatrix>,
    pub kernel_plans: Vec<Vec<KernelPlan>>,
}

/// Recursion `c̃_{t−1}^r = d_{t−1}^r + w_r(kernels; c̃_t)^r`, `c̃_T = d_T`, for
/// per-stage distances `d_t = w_t · metric(x_t, y_t)` (`d_0 = 0`).
pub fn additive_cost_process(
    p: &ScenarioTree,
    q: &ScenarioTree,
    metric: StageMetric,
    weights: &[f64],
    r: f64,
) -> Result<AdditiveResult, NestedError> {
    check_compatible(p, q)?;
    let horizon = p.horizon();
    TerminalCost::Path { p: r, metric, weights: weights.to_vec() }.check(horizon, 0, 0)?;
    let stage_dist = |t: usize, i: usize, j: usize| -> f64 {
        if t == 0 {
            return 0.0;
        }
        let (a, b) = (p.stage_nodes(t)[i], q.stage_nodes(t)[j]);
        TerminalCost::stage_term(metric, weights, t, &p.node(a).value, &q.node(b).value)
    };
    let (lp, lq) = (p.leaves().len(), q.leaves().len());
    let mut leaf = PairMatrix::filled(lp, lq, 0.0);
    for i in 0..lp {
        for j in 0..lq {
            leaf.set(i, j, stage_dist(horizon, i, j));
        }
    }
    let (tilde_costs, kernel_plans) =
        sweep(p, q, leaf, r, |t, i, j, w| (stage_dist(t, i, j).powf(r) + w.powf(r)).powf(1.0 / r))?;
    Ok(AdditiveResult { distance: tilde_costs[0].get(0, 0), order: r, tilde_costs, kernel_plans })
}

/// Probability of every stage-`t` node pair under the composed coupling.
pub fn pair_masses(result: &NestedResult, p: &ScenarioTree, q: &ScenarioTree) -> Result<Vec<PairMatrix>, NestedError> {
    let horizon = p.horizon();
    let mut masses = vec![PairMatrix::filled(1, 1, 1.0)];
    for t in 0..horizon {
        let (sp, sq) = (p.stage_nodes(t), q.stage_nodes(t));
        let cur = &masses[t];
        let mut next = PairMatrix::filled(p.stage_nodes(t + 1).len(), q.stage_nodes(t + 1).len(), 0.0);
        for (i, &a) in sp.iter().enumerate() {
            for (j, &b) in sq.iter().enumerate() {
                let mass = cur.get(i, j);
                if mass <= 0.0 {
                    continue;
                }
                let kernel = result
                    .kernel_plans
                    .get(t)
                    .and_then(|ks| ks.get(i * sq.len() + j))
                    .ok_or(NestedError::MissingKernel(a, b, t))?;
                for (x, &ca) in p.children(a).iter().enumerate() {
                    for (y, &cb) in q.children(b).iter().enumerate() {
                        next.set(p.stage_index(ca), q.stage_index(cb), mass * kernel.plan.get(x, y));
                    }
                }
            }
        }
        masses.push(next);
    }
    Ok(masses)
}

/// Global coupling over leaf pairs obtained by composing the kernel plans.
pub fn assemble_plan(result: &NestedResult, p: &ScenarioTree, q: &ScenarioTree) -> Result<TransportPlan, NestedError> {
    let masses = pair_masses(result, p, q)?;
    let last = masses.pop_last();
    Ok(TransportPlan { rows: last.rows, cols: last.cols, data: last.data })
}

trait PopLast {
    fn pop_last(self) -> PairMatrix;
}

impl PopLast for Vec<PairMatrix> {
    fn pop_last(mut self) -> PairMatrix {
        self.pop().expect("at least the root pair")
    }
}

/// Largest deviation between the conditional marginals of the composed
/// coupling, given any positive-mass node pair, and the trees' conditional
/// distributions of every later stage.
pub fn check_conditional_marginals(result: &NestedResult, p: &ScenarioTree, q: &ScenarioTree) -> Result<f64, NestedError> {
    let masses = pair_masses(result, p, q)?;
    let horizon = p.horizon();
    let (prob_p, prob_q) = (p.node_probabilities(), q.node_probabilities());
    let mut dev: f64 = 0.0;
    for t in 0..horizon {
        let (sp, sq) = (p.stage_nodes(t), q.stage_nodes(t));
        let mut desc_p: Vec<Vec<NodeId>> = sp.iter().map(|&n| vec![n]).collect();
        let mut desc_q: Vec<Vec<NodeId>> = sq.iter().map(|&n| vec![n]).collect();
        for s in t + 1..=horizon {
            desc_p = desc_p.iter().map(|d| d.iter().flat_map(|&n| p.children(n).iter().copied()).collect()).collect();
            desc_q = desc_q.iter().map(|d| d.iter().flat_map(|&n| q.children(n).iter().copied()).collect()).collect();
            for (i, &a) in sp.iter().enumerate() {
                for (j, &b) in sq.iter().enumerate() {
                    let mass = masses[t].get(i, j);
                    if mass <= 0.0 {
                        continue;
                    }
                    let cell = |x: NodeId, y: NodeId| masses[s].get(p.stage_index(x), q.stage_index(y));
                    for &x in &desc_p[i] {
                        let got: f64 = desc_q[j].iter().map(|&y| cell(x, y)).sum::<f64>() / mass;
                        dev = dev.max((got - prob_p[x.0] / prob_p[a.0]).abs());
                    }
                    for &y in &desc_q[j] {
                        let got: f64 = desc_p[i].iter().map(|&x| cell(x, y)).sum::<f64>() / mass;
                        dev = dev.max((got - prob_q[y.0] / prob_q[b.0]).abs());
                    }
                }
            }
        }
    }
    Ok(dev)
}

fn leaf_positions(tree: &ScenarioTree, n: NodeId) -> Vec<usize> {
    tree.leaves_under(n).into_iter().map(|l| tree.stage_index(l)).collect()
}

/// Largest `|c_t^r − E_{π_t}[c_{t+1}^r]|` over positive-mass node pairs.
pub fn check_martingale(result: &NestedResult, p: &ScenarioTree, q: &ScenarioTree) -> Result<f64, NestedError> {
    let masses = pair_masses(result, p, q)?;
    let r = result.order;
    let mut dev: f64 = 0.0;
    for t in 0..p.horizon() {
        let (sp, sq) = (p.stage_nodes(t), q.stage_nodes(t));
        for (i, &a) in sp.iter().enumerate() {
            for (j, &b) in sq.iter().enumerate() {
                if masses[t].get(i, j) <= 0.0 {
                    continue;
                }
                let kernel = &result.kernel_plans[t][i * sq.len() + j];
                let mut expect = 0.0;
                for (x, &ca) in p.children(a).iter().enumerate() {
                    for (y, &cb) in q.children(b).iter().enumerate() {
                        let c = result.stage_costs[t + 1].get(p.stage_index(ca), q.stage_index(cb));
                        expect += kernel.plan.get(x, y) * c.powf(r);
                    }
                }
                dev = dev.max((result.stage_costs[t].get(i, j).powf(r) - expect).abs());
            }
        }
    }
    Ok(dev)
}

/// Solves the nested transport problem as one linear program over leaf-pair
/// measures subject to every conditional marginal constraint, and returns the
/// `r`-th root of the optimum.
pub fn direct_lp_distance(
    p: &ScenarioTree,
    q: &ScenarioTree,
    terminal: &TerminalCost,
    r: f64,
    cap: usize,
) -> Result<f64, NestedError> {
    let (lp, lq) = (p.leaves().len(), q.leaves().len());
    if lp * lq > cap {
        return Err(NestedError::CapExceeded { pairs: lp * lq, cap });
    }
    let cost = terminal.leaf_matrix(p, q)?;
    let mut lp_problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = cost.data.iter().map(|c| lp_problem.add_var(c.powf(r), (0.0, f64::INFINITY))).collect();
    let var = |x: usize, y: usize| vars[x * lq + y];

    let all: Vec<_> = vars.iter().map(|v| (*v, 1.0)).collect();
    lp_problem.add_constraint(all.as_slice(), ComparisonOp::Eq, 1.0);

    for t in 0..p.horizon() {
        for &a in p.stage_nodes(t) {
            let under_a = leaf_positions(p, a);
            for &b in q.stage_nodes(t) {
                let under_b = leaf_positions(q, b);
                // the last child's constraint is implied by the others
                let kids_a = p.children(a);
                for &child in &kids_a[..kids_a.len() - 1] {
                    let inside = leaf_positions(p, child);
                    let w = p.node(child).cond_prob;
                    let mut expr = Vec::with_capacity(under_a.len() * under_b.len());
                    for &x in &under_a {
                        let coef = if inside.binary_search(&x).is_ok() { 1.0 - w } else { -w };
                        for &y in &under_b {
                            expr.push((var(x, y), coef));
                        }
                    }
                    lp_problem.add_constraint(expr.as_slice(), ComparisonOp::Eq, 0.0);
                }
                let kids_b = q.children(b);
                for &child in &kids_b[..kids_b.len() - 1] {
                    let inside = leaf_positions(q, child);
                    let w = q.node(child).cond_prob;
                    let mut expr = Vec::with_capacity(under_a.len() * under_b.len());
                    for &y in &under_b {
                        let coef = if inside.binary_search(&y).is_ok() { 1.0 - w } else { -w };
                        for &x in &under_a {
                            expr.push((var(x, y), coef));
                        }
                    }
                    lp_problem.add_constraint(expr.as_slice(), ComparisonOp::Eq, 0.0);
                }
            }
        }
    }
    let solution = lp_problem
        .solve()
        .map_err(|e| NestedError::Lp(e.to_string()))?
        .into_solution()
        .map_err(|_| NestedError::Lp("solve interrupted".into()))?;
    Ok(solution.objective().max(0.0).powf(1.0 / r))
}

/// Plain order-`r` Wasserstein distance between the two path distributions
/// with the given terminal cost, ignoring the filtrations.
pub fn path_wasserstein(p: &ScenarioTree, q: &ScenarioTree, terminal: &TerminalCost, r: f64) -> Result<f64, NestedError> {
    let cost = terminal.leaf_matrix(p, q)?;
    let cm = CostMatrix::new(cost.rows, cost.cols, cost.data)?;
    let res = transport::solve_weights(
        &p.path_measure().weights(),
        &q.path_measure().weights(),
        &cm,
        r,
        TransportOptions::default(),
    )?;
    Ok(res.value)
}
