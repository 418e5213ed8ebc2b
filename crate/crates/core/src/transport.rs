//! Exact discrete optimal transport.
//!
//! The solver is the transportation simplex: a basis is a spanning tree of the
//! bipartite supply/demand graph, dual potentials are read off the tree, and
//! pivots push flow around the unique cycle closed by the entering cell.
//! Degeneracy is removed with Orden's perturbation, carried symbolically: every
//! flow is a pair `a + b·ε` compared lexicographically, supplies are raised by
//! `ε` and the last demand by `n·ε`. In the perturbed problem every basic
//! solution is nondegenerate, so the objective strictly decreases and the
//! method cannot cycle.
//!
//! Costs are raised to the order `r` before solving and the `r`-th root is taken
//! once at the end.

use std::cmp::Ordering;
use std::collections::VecDeque;

use thiserror::Error;

use crate::tree::DiscreteMeasure;

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("cost matrix is {rows}x{cols}, marginals have {n} and {m} atoms")]
    DimensionMismatch { rows: usize, cols: usize, n: usize, m: usize },
    #[error("marginal is not a probability vector (sum {sum})")]
    NotAProbability { sum: f64 },
    #[error("cost entry ({row}, {col}) = {value} is negative or not finite")]
    InvalidCost { row: usize, col: usize, value: f64 },
    #[error("order r = {0} must satisfy r >= 1")]
    InvalidOrder(f64),
    #[error("transportation simplex did not converge in {0} pivots")]
    NoConvergence(usize),
}

/// Dense nonnegative cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TransportError> {
        if data.len() != rows * cols {
            return Err(TransportError::DimensionMismatch { rows, cols, n: data.len(), m: 0 });
        }
        for (k, &v) in data.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TransportError::InvalidCost { row: k / cols.max(1), col: k % cols.max(1), value: v });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, TransportError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TransportError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TransportError::DimensionMismatch { rows: rows.len(), cols, n: 0, m: 0 });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Joint distribution with prescribed marginals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TransportPlan {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// The independent coupling `p ⊗ q`.
    pub fn product(p: &[f64], q: &[f64]) -> Self {
        let mut data = Vec::with_capacity(p.len() * q.len());
        for &a in p {
            for &b in q {
                data.push(a * b);
            }
        }
        Self { rows: p.len(), cols: q.len(), data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols..(i + 1) * self.cols].iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j)).sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `Σ π(i,j) c(i,j)^r`.
    pub fn objective(&self, cost: &CostMatrix, r: f64) -> f64 {
        self.data.iter().zip(&cost.data).map(|(p, c)| p * c.powf(r)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportOptions {
    pub feasibility_tol: f64,
    pub gap_tol: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self { feasibility_tol: 1e-9, gap_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    /// Order-`r` distance `(Σ π c^r)^{1/r}`.
    pub value: f64,
    /// Optimal objective `Σ π c^r`.
    pub objective: f64,
    pub plan: TransportPlan,
    pub row_potentials: Vec<f64>,
    pub col_potentials: Vec<f64>,
    /// `|primal − dual|` at the final basis.
    pub duality_gap: f64,
    /// Largest violation of `u_i + v_j ≤ c_ij^r`; zero for an exact certificate.
    pub dual_infeasibility: f64,
    pub pivots: usize,
}

impl TransportResult {
    /// Dual objective `Σ p_i u_i + Σ q_j v_j`.
    pub fn dual_objective(&self, p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(&self.row_potentials).map(|(a, u)| a * u).sum::<f64>()
            + q.iter().zip(&self.col_potentials).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Flow `value + eps·ε` in Orden's perturbation.
#[derive(Debug, Clone, Copy)]
struct Lex {
    value: f64,
    eps: f64,
}

impl Lex {
    fn sub(self, o: Lex) -> Lex {
        Lex { value: self.value - o.value, eps: self.eps - o.eps }
    }
    fn add(self, o: Lex) -> Lex {
        Lex { value: self.value + o.value, eps: self.eps + o.eps }
    }
    fn cmp(self, o: Lex, tol: f64) -> Ordering {
        let d = self.value - o.value;
        if d > tol {
            Ordering::Greater
        } else if d < -tol {
            Ordering::Less
        } else {
            self.eps.partial_cmp(&o.eps).unwrap_or(Ordering::Equal)
        }
    }
}

/// Solves `min Σ π c^r` over couplings of `p` and `q`; returns the order-`r`
/// distance with its plan and dual certificate.
pub fn solve_transport(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    cost: &CostMatrix,
    r: f64,
) -> Result<TransportResult, TransportError> {
    solve_weights(&p.weights(), &q.weights(), cost, r, TransportOptions::default())
}

/// Same as [`solve_transport`] on bare weight vectors.
pub fn solve_weights(
    p: &[f64],
    q: &[f64],
    cost: &CostMatrix,
    r: f64,
    opts: TransportOptions,
) -> Result<TransportResult, TransportError> {
    let (n, m) = (p.len(), q.len());
    if cost.rows != n || cost.cols != m || n == 0 || m == 0 {
        return Err(TransportError::DimensionMismatch { rows: cost.rows, cols: cost.cols, n, m });
    }
    if !(r >= 1.0) || r.is_nan() {
        return Err(TransportError::InvalidOrder(r));
    }
    for w in [p, q] {
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || (sum - 1.0).abs() > opts.feasibility_tol {
            return Err(TransportError::NotAProbability { sum });
        }
    }

    let c: Vec<f64> = if r == 1.0 { cost.data.clone() } else { cost.data.iter().map(|x| x.powf(r)).collect() };
    let scale = c.iter().fold(1.0_f64, |a, &b| a.max(b));
    let rc_tol = 1e-13 * scale;
    // Put both marginals on the same total so that the tree solution is exact.
    let qsum: f64 = q.iter().sum();
    let psum: f64 = p.iter().sum();
    let q: Vec<f64> = q.iter().map(|b| b * psum / qsum).collect();

    let mut basis = northwest_corner(p, &q);
    let max_pivots = 50 * (n + m) * (n + m) + 1000;
    let mut pivots = 0;
    let flow_tol = 1e-15;

    let (u, v) = loop {
        let (u, v) = potentials(n, m, &basis, &c);
        // Dantzig entering rule, lowest flat index on ties.
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -rc_tol;
        for i in 0..n {
            for j in 0..m {
                let d = c[i * m + j] - u[i] - v[j];
                if d < best {
                    best = d;
                    entering = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = entering else { break (u, v) };
        if pivots >= max_pivots {
            return Err(TransportError::NoConvergence(pivots));
        }
        pivots += 1;

        // Cells on the tree path from column ej to row ei, alternately losing
        // and gaining flow.
        let path = tree_path(n, m, &basis, ei, ej);
        let mut theta: Option<(usize, Lex)> = None;
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                let x = basis[cell].2;
                let replace = match theta {
                    None => true,
                    Some((_, t)) => x.cmp(t, flow_tol) == Ordering::Less,
                };
                if replace {
                    theta = Some((cell, x));
                }
            }
        }
        let (leaving, theta) = theta.expect("a pivot cycle always has a losing cell");
        for (k, &cell) in path.iter().enumerate() {
            let x = &mut basis[cell].2;
            *x = if k % 2 == 0 { x.sub(theta) } else { x.add(theta) };
        }
        basis[leaving] = (ei, ej, theta);
    };

    let mut plan = TransportPlan::zeros(n, m);
    for &(i, j, x) in &basis {
        plan.set(i, j, x.value.max(0.0));
    }
    let objective = plan.data.iter().zip(&c).map(|(x, c)| x * c).sum::<f64>();
    let dual = p.iter().zip(&u).map(|(a, u)| a * u).sum::<f64>() + q.iter().zip(&v).map(|(b, v)| b * v).sum::<f64>();
    let mut dual_infeasibility: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            dual_infeasibility = dual_infeasibility.max(u[i] + v[j] - c[i * m + j]);
        }
    }
    Ok(TransportResult {
        value: objective.max(0.0).powf(1.0 / r),
        objective,
        plan,
        row_potentials: u,
        col_potentials: v,
        duality_gap: (objective - dual).abs(),
        dual_infeasibility,
        pivots,
    })
}

/// Initial basis of `n + m − 1` cells on the perturbed marginals.
fn northwest_corner(p: &[f64], q: &[f64]) -> Vec<(usize, usize, Lex)> {
    let (n, m) = (p.len(), q.len());
    let mut supply: Vec<Lex> = p.iter().map(|&a| Lex { value: a, eps: 1.0 }).collect();
    let mut demand: Vec<Lex> = q.iter().map(|&b| Lex { value: b, eps: 0.0 }).collect();
    demand[m - 1].eps = n as f64;

    let mut basis = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    loop {
        if i == n - 1 && j == m - 1 {
            // Remaining supply and demand agree up to rounding.
            basis.push((i, j, supply[i]));
            break;
        }
        let down = j == m - 1 || (i < n - 1 && supply[i].cmp(demand[j], 1e-15) != Ordering::Greater);
        if down {
            let x = supply[i];
            basis.push((i, j, x));
            demand[j] = demand[j].sub(x);
            i += 1;
        } else {
            let x = demand[j];
            basis.push((i, j, x));
            supply[i] = supply[i].sub(x);
            j += 1;
        }
    }
    basis
}

/// Dual potentials with `u_0 = 0` and `u_i + v_j = c_ij` on basic cells.
fn potentials(n: usize, m: usize, basis: &[(usize, usize, Lex)], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let adj = adjacency(n, m, basis);
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    u[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        for &k in &adj[node] {
            let (i, j, _) = basis[k];
            if node < n {
                if v[j].is_nan() {
                    v[j] = c[i * m + j] - u[i];
                    queue.push_back(n + j);
                }
            } else if u[i].is_nan() {
                u[i] = c[i * m + j] - v[j];
                queue.push_back(i);
            }
        }
    }
    (u, v)
}

/// Graph nodes `0..n` are rows, `n..n+m` columns; entries are basis positions.
fn adjacency(n: usize, m: usize, basis: &[(usize, usize, Lex)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n + m];
    for (k, &(i, j, _)) in basis.iter().enumerate() {
        adj[i].push(k);
        adj[n + j].push(k);
    }
    adj
}

/// Basis positions on the tree path from column `col` to row `row`.
fn tree_path(n: usize, m: usize, basis: &[(usize, usize, Lex)], row: usize, col: usize) -> Vec<usize> {
    let adj = adjacency(n, m, basis);
    let start = n + col;
    let mut via: Vec<Option<usize>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == row {
            break;
        }
        for &k in &adj[node] {
            let (i, j, _) = basis[k];
            let other = if node < n { n + j } else { i };
            if !seen[other] {
                seen[other] = true;
                via[other] = Some(k);
                queue.push_back(other);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = row;
    while node != start {
        let k = via[node].expect("basis is a spanning tree");
        path.push(k);
        let (i, j, _) = basis[k];
        node = if node < n { n + j } else { i };
    }
    path.reverse();
    path
}

/// Largest of the marginal deviations and `|Σ π c^r − claimed^r|`.
pub fn verify_plan(plan: &TransportPlan, p: &[f64], q: &[f64], cost: &CostMatrix, r: f64, claimed: f64) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let mut dev: f64 = 0.0;
    for (a, b) in rows.iter().zip(p) {
        dev = dev.max((a - b).abs());
    }
    for (a, b) in cols.iter().zip(q) {
        dev = dev.max((a - b).abs());
    }
    if plan.data.iter().any(|x| *x < 0.0) {
        dev = dev.max(plan.data.iter().fold(0.0_f64, |a, &x| a.max(-x)));
    }
    dev.max((plan.objective(cost, r) - claimed.powf(r)).abs())
}

/// Exponent `q` with `1/r + 1/q = 1`.
pub fn holder_conjugate(r: f64) -> f64 {
    if r <= 1.0 {
        f64::INFINITY
    } else {
        r / (r - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solve(p: &[f64], q: &[f64], rows: &[Vec<f64>], r: f64) -> TransportResult {
        solve_weights(p, q, &CostMatrix::from_rows(rows).unwrap(), r, TransportOptions::default()).unwrap()
    }

    #[test]
    fn identical_marginals_zero_diagonal() {
        let p = [0.2, 0.3, 0.5];
        let cost = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]];
        let res = solve(&p, &p, &cost, 1.0);
        assert_eq!(res.value, 0.0);
        for i in 0..3 {
            assert!((res.plan.get(i, i) - p[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_cell() {
        let res = solve(&[1.0], &[1.0], &[vec![5.0]], 1.0);
        assert_eq!(res.value, 5.0);
        assert_eq!(res.plan.data, vec![1.0]);
    }

    #[test]
    fn swap_two_by_two() {
        // π11 = x ∈ [0, 0.3]: objective 1 − 2x, minimal at x = 0.3.
        let res = solve(&[0.7, 0.3], &[0.3, 0.7], &[vec![0.0, 1.0], vec![1.0, 0.0]], 1.0);
        assert!((res.value - 0.4).abs() < 1e-12);
        assert!(res.duality_gap < 1e-12 && res.dual_infeasibility < 1e-12);
    }

    #[test]
    fn degenerate_ties_terminate() {
        let p = [0.25; 4];
        let cost = vec![vec![1.0; 4]; 4];
        let res = solve(&p, &p, &cost, 2.0);
        assert!((res.value - 1.0).abs() < 1e-12);
        let cost: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| ((i + j) % 2) as f64).collect()).collect();
        let res = solve(&p, &p, &cost, 1.0);
        assert!(res.value.abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            solve_weights(&[1.0], &[1.0], &c, 1.0, TransportOptions::default()),
            Err(TransportError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            solve_weights(&[1.0], &[0.5, 0.4], &c, 1.0, TransportOptions::default()),
            Err(TransportError::NotAProbability { .. })
        ));
        assert!(matches!(
            solve_weights(&[1.0], &[0.5, 0.5], &c, 0.5, TransportOptions::default()),
            Err(TransportError::InvalidOrder(_))
        ));
        assert!(CostMatrix::from_rows(&[vec![-1.0]]).is_err());
    }

    #[test]
    fn verify_plan_reports_deviations() {
        let p = [0.7, 0.3];
        let q = [0.3, 0.7];
        let cost = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let res = solve_weights(&p, &q, &cost, 1.0, TransportOptions::default()).unwrap();
        assert!(verify_plan(&res.plan, &p, &q, &cost, 1.0, res.value) <= 1e-9);

        let mut bad = res.plan.clone();
        bad.set(0, 0, bad.get(0, 0) + 0.1);
        assert!(verify_plan(&bad, &p, &q, &cost, 1.0, res.value) >= 0.1 - 1e-12);

        let prod = TransportPlan::product(&p, &q);
        let obj = prod.objective(&cost, 1.0);
        assert!(verify_plan(&prod, &p, &q, &cost, 1.0, obj) < 1e-15);
    }

    #[test]
    fn conjugates() {
        assert_eq!(holder_conjugate(1.0), f64::INFINITY);
        assert_eq!(holder_conjugate(2.0), 2.0);
        assert!((holder_conjugate(3.0) - 1.5).abs() < 1e-15);
    }
}
