//! Randomized property ensembles behind the `verify` command.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::gen::{self, Branching, ProblemShape, TreeShape};
use crate::multistage::{self, ENUMERATION_CAP};
use crate::nested_distance::{self, StageMetric, TerminalCost};
use crate::risk::{self, DiscreteRv, RiskLadder};
use crate::tree::ScenarioTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Martingale,
    Marginals,
    Recursion,
    Continuity,
    Bounds,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Martingale, Suite::Marginals, Suite::Recursion, Suite::Continuity, Suite::Bounds];

    /// Whether the suite reports deviations (smaller is better) rather than slacks.
    pub fn is_deviation(self) -> bool {
        matches!(self, Suite::Martingale | Suite::Marginals | Suite::Recursion)
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            Suite::Martingale | Suite::Recursion => 1e-8,
            Suite::Marginals => 1e-9,
            Suite::Continuity | Suite::Bounds => 1e-7,
        }
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| format!("unknown suite '{s}' (martingale, marginals, recursion, continuity, bounds)"))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Martingale => "martingale",
            Suite::Marginals => "marginals",
            Suite::Recursion => "recursion",
            Suite::Continuity => "continuity",
            Suite::Bounds => "bounds",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub count: usize,
    /// `max_deviation` or `min_slack`.
    pub metric: &'static str,
    pub worst: f64,
    pub tolerance: f64,
    pub failures: usize,
    /// Instances that could not be built or evaluated, with the reason.
    pub errors: Vec<String>,
    pub passed: bool,
}

/// Generator for instance `i` of a run; independent of the thread schedule.
pub fn instance_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = gen::rng(seed);
    r.set_stream(i as u64);
    r
}

/// Horizon `1..=max_h`, branching `1..=max_b` per node, dimension 1 or 2.
pub fn random_shape(max_h: usize, max_b: usize, rng: &mut impl Rng) -> TreeShape {
    TreeShape {
        horizon: rng.random_range(1..=max_h),
        branching: Branching::Range(1, max_b),
        dim: rng.random_range(1..=2),
        scale: 1.0,
    }
}

/// A tree and either a perturbed copy or an independent draw of the same shape.
pub fn random_tree_pair(max_h: usize, max_b: usize, rng: &mut impl Rng) -> (ScenarioTree, ScenarioTree) {
    let shape = random_shape(max_h, max_b, rng);
    let p = gen::random_tree(&shape, rng).expect("valid shape");
    let q = if rng.random_bool(0.5) {
        let noise = rng.random_range(0.0..0.5);
        let mix = rng.random_range(0.0..0.5);
        gen::perturb_tree(&p, noise, mix, rng)
    } else {
        gen::random_tree(&shape, rng).expect("valid shape")
    };
    (p, q)
}

fn random_terminal(horizon: usize, rng: &mut impl Rng) -> TerminalCost {
    match rng.random_range(0..3) {
        0 => TerminalCost::default(),
        1 => TerminalCost::lp(2.0),
        _ => TerminalCost::Path {
            p: 1.0,
            metric: StageMetric::Manhattan,
            weights: (0..horizon).map(|_| rng.random_range(0.0..2.0)).collect(),
        },
    }
}

/// Outcome of one instance: the checked quantity and whether it is within tolerance.
struct Check {
    value: f64,
    ok: bool,
}

fn deviation(value: f64, tol: f64) -> Check {
    Check { value, ok: value <= tol }
}

fn slack(value: f64, tol: f64) -> Check {
    Check { value, ok: value >= -tol }
}

/// Nested AVaR against single-level AVaR of the path distribution at the
/// compounded level; returns `bound − nested`.
pub fn nested_avar_slack(tree: &ScenarioTree, leaf_values: &[f64], alphas: &[f64]) -> f64 {
    let ladder = RiskLadder::avar(alphas).expect("levels in [0, 1]");
    let nested = risk::nested_risk_dense(tree, leaf_values, &ladder).expect("ladder matches").value;
    let probs = tree.node_probabilities();
    let atoms: Vec<(f64, f64)> = tree.leaves().iter().map(|l| (leaf_values[l.0], probs[l.0])).collect();
    let level = 1.0 - alphas.iter().map(|a| 1.0 - a).product::<f64>();
    let rv = DiscreteRv::new(atoms).expect("path distribution");
    risk::avar(&rv, level).expect("level in [0, 1]") - nested
}

/// `(Σ_t ‖x_t‖₂)^β`, which is β-Hölder with constant 1 in `Σ_t ‖x_t − y_t‖₂`.
pub fn path_norm_power(path: &[Vec<f64>], beta: f64) -> f64 {
    path.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>().powf(beta)
}

fn run_instance(suite: Suite, rng: &mut ChaCha8Rng, tol: f64) -> Result<Check, String> {
    match suite {
        Suite::Martingale | Suite::Marginals => {
            let (p, q) = random_tree_pair(4, 3, rng);
            let r = [1.0, 2.0, 3.0][rng.random_range(0..3)];
            let terminal = random_terminal(p.horizon(), rng);
            let res = nested_distance::cost_process(&p, &q, &terminal, r).map_err(|e| e.to_string())?;
            let dev = if suite == Suite::Martingale {
                nested_distance::check_martingale(&res, &p, &q).map_err(|e| e.to_string())?.max(res.max_duality_gap())
            } else {
                nested_distance::check_conditional_marginals(&res, &p, &q).map_err(|e| e.to_string())?
            };
            Ok(deviation(dev, tol))
        }
        Suite::Recursion => {
            let tree = gen::random_tree(&random_shape(3, 2, rng), rng).map_err(|e| e.to_string())?;
            let shape = ProblemShape { max_actions: 3, states: rng.random_range(1..=2), table: rng.random_bool(0.5) };
            let problem = gen::random_problem(&tree, &shape, rng);
            let ladder = gen::random_ladder(tree.horizon(), rng);
            let t = rng.random_range(1..=tree.horizon());
            let s = rng.random_range(0..t);
            let dev = multistage::multistage_recursion_check(&tree, &problem, &ladder, s, t, ENUMERATION_CAP)
                .map_err(|e| e.to_string())?;
            let dp = multistage::solve_dp(&tree, &problem, &ladder).map_err(|e| e.to_string())?;
            let mart = multistage::check_r_martingale(&dp.values, &tree, &ladder);
            Ok(deviation(dev.max(mart.max_deviation), tol))
        }
        Suite::Continuity => {
            let (p, q) = random_tree_pair(3, 3, rng);
            let problem = gen::random_affine_problem(p.stage_dims(), 3, rng);
            let ladder = gen::random_avar_ladder(p.horizon(), 0.9, rng);
            let rep = multistage::continuity_experiment(&p, &q, &problem, &ladder, 1.0).map_err(|e| e.to_string())?;
            Ok(slack(rep.slack, tol))
        }
        Suite::Bounds => {
            let (p, q) = random_tree_pair(3, 3, rng);
            let alphas: Vec<f64> = (0..p.horizon()).map(|_| gen::random_level(0.9, rng)).collect();
            let mut leaf = vec![0.0; p.len()];
            for &l in p.leaves() {
                leaf[l.0] = rng.sample::<f64, _>(rand_distr::StandardNormal) * 3.0;
            }
            let avar_slack = nested_avar_slack(&p, &leaf, &alphas);
            let beta = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.2..1.0) };
            let ladder = RiskLadder::avar(&alphas).map_err(|e| e.to_string())?;
            let rep = multistage::nested_risk_continuity_check(&p, &q, |x| path_norm_power(x, beta), 1.0, beta, &ladder, 1.0)
                .map_err(|e| e.to_string())?;
            let nd: Vec<f64> = [1.0, 2.0, 3.0]
                .iter()
                .map(|&r| nested_distance::nested_distance(&p, &q, r))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let order = (nd[1] - nd[0]).min(nd[2] - nd[1]);
            let ok = avar_slack >= -1e-9 && order >= -1e-9 && rep.slack >= -tol;
            Ok(Check { value: avar_slack.min(order).min(rep.slack), ok })
        }
    }
}

/// Runs `count` seeded instances of a suite in parallel.
pub fn run_suite(suite: Suite, seed: u64, count: usize, tolerance: Option<f64>) -> SuiteReport {
    let tol = tolerance.unwrap_or_else(|| suite.default_tolerance());
    let outcomes: Vec<Result<Check, String>> =
        (0..count).into_par_iter().map(|i| run_instance(suite, &mut instance_rng(seed, i), tol)).collect();
    let mut errors = Vec::new();
    let mut failures = 0;
    let mut worst = if suite.is_deviation() { 0.0 } else { f64::INFINITY };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(c) => {
                failures += usize::from(!c.ok);
                worst = if suite.is_deviation() { f64::max(worst, c.value) } else { f64::min(worst, c.value) };
            }
            Err(e) => errors.push(format!("instance {i}: {e}")),
        }
    }
    SuiteReport {
        suite,
        seed,
        count,
        metric: if suite.is_deviation() { "max_deviation" } else { "min_slack" },
        worst,
        tolerance: tol,
        failures,
        passed: failures == 0 && errors.is_empty(),
        errors,
    }
}
