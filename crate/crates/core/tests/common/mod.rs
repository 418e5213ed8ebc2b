//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nestrisk::multistage::{MultistageProblem, StageCost};
use nestrisk::risk::{Distortion, RiskLadder};
use nestrisk::tree::{NodeId, ScenarioTree};
use rayon::prelude::*;

/// Order-`r` transport value by enumerating every basis of `n + m − 1`
/// cells and keeping the cheapest feasible basic solution.
pub fn transport_by_vertices(p: &[f64], q: &[f64], cost: &[f64], r: f64) -> f64 {
    let (n, m) = (p.len(), q.len());
    let cells = n * m;
    let size = n + m - 1;
    let c: Vec<f64> = cost.iter().map(|x| x.powf(r)).collect();
    let mut best = f64::INFINITY;
    let mut chosen: Vec<usize> = (0..size).collect();
    loop {
        if let Some(x) = basic_solution(p, q, &chosen) {
            if x.iter().all(|v| *v >= -1e-12) {
                let obj: f64 = chosen.iter().zip(&x).map(|(&k, v)| c[k] * v.max(0.0)).sum();
                best = best.min(obj);
            }
        }
        // next combination in lexicographic order
        let mut i = size;
        loop {
            if i == 0 {
                return best.powf(1.0 / r);
            }
            i -= 1;
            if chosen[i] < cells - size + i {
                break;
            }
        }
        chosen[i] += 1;
        for j in i + 1..size {
            chosen[j] = chosen[j - 1] + 1;
        }
    }
}

/// Solves the row constraints and all but the last column constraint on the
/// given cells; `None` if that system is singular.
fn basic_solution(p: &[f64], q: &[f64], cells: &[usize]) -> Option<Vec<f64>> {
    let (n, m) = (p.len(), q.len());
    let k = cells.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (col, &cell) in cells.iter().enumerate() {
        let (i, j) = (cell / m, cell % m);
        a[i][col] = 1.0;
        if j + 1 < m {
            a[n + j][col] = 1.0;
        }
    }
    for i in 0..n {
        a[i][k] = p[i];
    }
    for j in 0..m - 1 {
        a[n + j][k] = q[j];
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for row in 0..k {
            if row != col && a[row][col] != 0.0 {
                let f = a[row][col] / a[col][col];
                for c in col..=k {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..k).map(|i| a[i][k] / a[i][i]).collect())
}

/// `∫_a^b σ` from the step description.
fn sigma_integral(sigma: &Distortion, a: f64, b: f64) -> f64 {
    let (bp, lv) = (sigma.breakpoints().unwrap(), sigma.levels().unwrap());
    lv.iter()
        .zip(bp.windows(2))
        .map(|(s, w)| s * (w[1].min(b) - w[0].max(a)).max(0.0))
        .sum()
}

/// `∫ F^{-1}(u) σ(u) du` summed piece by piece over the quantile intervals.
pub fn quantile_risk(atoms: &[(f64, f64)], sigma: &Distortion) -> f64 {
    if sigma.is_supremum() {
        return atoms.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    }
    let mut sorted = atoms.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut lo = 0.0;
    let mut total = 0.0;
    for (k, &(y, w)) in sorted.iter().enumerate() {
        let hi = if k + 1 == sorted.len() { 1.0 } else { lo + w };
        total += y * sigma_integral(sigma, lo, hi);
        lo = hi;
    }
    total
}

/// Dual representation `sup { E[Yζ] : ζ ≥ 0, E ζ = 1, ζ majorized by σ }`
/// solved as a linear program, with the majorization imposed at the jump
/// points of the distribution function of `Y`.
pub fn risk_by_dual_lp(atoms: &[(f64, f64)], sigma: &Distortion) -> f64 {
    let mut values: Vec<f64> = atoms.iter().map(|a| a.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut levels = Vec::new();
    for v in &values[..values.len() - 1] {
        levels.push(atoms.iter().filter(|a| a.0 <= *v).map(|a| a.1).sum::<f64>());
    }

    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let zeta: Vec<_> = atoms.iter().map(|&(y, w)| lp.add_var(y * w, (0.0, f64::INFINITY))).collect();
    let norm: Vec<_> = zeta.iter().zip(atoms).map(|(v, a)| (*v, a.1)).collect();
    lp.add_constraint(norm.as_slice(), ComparisonOp::Eq, 1.0);
    for alpha in levels {
        if alpha >= 1.0 {
            continue;
        }
        let q = lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY));
        let mut tail = vec![(q, 1.0)];
        for (i, a) in atoms.iter().enumerate() {
            let s = lp.add_var(0.0, (0.0, f64::INFINITY));
            lp.add_constraint([(s, 1.0), (zeta[i], -1.0), (q, 1.0)].as_slice(), ComparisonOp::Ge, 0.0);
            tail.push((s, a.1 / (1.0 - alpha)));
        }
        let rhs = sigma_integral(sigma, alpha, 1.0) / (1.0 - alpha);
        lp.add_constraint(tail.as_slice(), ComparisonOp::Le, rhs);
    }
    let outcome = lp.solve().expect("dual program is feasible and bounded");
    outcome.into_solution().expect("solved to optimality").objective()
}

/// Nested risk by plain recursion with [`quantile_risk`].
pub fn nested_risk_oracle(tree: &ScenarioTree, leaf: &[f64], ladder: &RiskLadder) -> f64 {
    fn go(tree: &ScenarioTree, n: NodeId, leaf: &[f64], ladder: &RiskLadder) -> f64 {
        if tree.is_leaf(n) {
            return leaf[n.0];
        }
        let atoms: Vec<(f64, f64)> =
            tree.children(n).iter().map(|&c| (go(tree, c, leaf, ladder), tree.node(c).cond_prob)).collect();
        let coll = ladder.stage(tree.stage(n) + 1);
        coll.members().iter().map(|s| quantile_risk(&atoms, s)).fold(f64::NEG_INFINITY, f64::max)
    }
    go(tree, NodeId::ROOT, leaf, ladder)
}

fn stage_cost(cost: &StageCost, node: usize, zi: usize, z: &[f64], a: usize, x: &[f64]) -> f64 {
    let x_at = |k: usize| x.get(k).copied().unwrap_or(0.0);
    match cost {
        StageCost::Linear { c, e, constant } => {
            let mut v = *constant;
            for k in 0..z.len() {
                v += c[k] * z[k];
            }
            if !x.is_empty() {
                for k in 0..e.len() {
                    v += e[k] * x[k];
                }
            }
            v
        }
        StageCost::Tracking { scale } => z.iter().enumerate().map(|(k, zk)| scale * (zk - x_at(k)).abs()).sum(),
        StageCost::Newsvendor { h, b } => {
            z.iter().enumerate().map(|(k, zk)| h * (zk - x_at(k)).max(0.0) + b * (x_at(k) - zk).max(0.0)).sum()
        }
        StageCost::StatePenalty { penalty } => penalty[a],
        StageCost::Table { values } => values[&node][zi][a].unwrap_or(f64::INFINITY),
        StageCost::Sum { terms } => terms.iter().map(|t| stage_cost(t, node, zi, z, a, x)).sum(),
    }
}

/// Total cost along the path to `leaf` under a per-node action assignment.
pub fn path_cost(tree: &ScenarioTree, problem: &MultistageProblem, actions: &[usize], leaf: NodeId) -> f64 {
    let mut path = vec![NodeId::ROOT];
    path.extend(tree.ancestry(leaf));
    let mut state = problem.a0;
    let mut total = 0.0;
    for (t, n) in path.iter().enumerate() {
        let zi = actions[n.0];
        let z = &problem.action_sets[t][zi];
        total += stage_cost(&problem.stage_costs[t], n.0, zi, z, state, &tree.node(*n).value);
        if t < tree.horizon() && !problem.transitions.is_empty() {
            state = problem.transitions[t][state][zi];
        }
    }
    total
}

/// Minimum over every per-node action assignment of the nested risk of the
/// total cost.
pub fn best_policy_value(tree: &ScenarioTree, problem: &MultistageProblem, ladder: &RiskLadder) -> f64 {
    let sizes: Vec<u64> = tree.nodes().iter().map(|n| problem.action_sets[n.stage].len() as u64).collect();
    let total: u64 = sizes.iter().product();
    (0..total)
        .into_par_iter()
        .map(|mut k| {
            let mut actions = vec![0; sizes.len()];
            for (a, s) in actions.iter_mut().zip(&sizes) {
                *a = (k % s) as usize;
                k /= s;
            }
            let mut leaf = vec![0.0; tree.len()];
            for &l in tree.leaves() {
                leaf[l.0] = path_cost(tree, problem, &actions, l);
            }
            nested_risk_oracle(tree, &leaf, ladder)
        })
        .reduce(|| f64::INFINITY, f64::min)
}
