//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use nestrisk::gen::{self, Branching, ProblemShape, TreeShape};
use nestrisk::multistage::{self, MultistageProblem, Policy, StageCost};
use nestrisk::nested_distance::{self, StageMetric, TerminalCost, DIRECT_LP_CAP};
use nestrisk::risk::{self, DiscreteRv, RiskLadder};
use nestrisk::transport::{self, CostMatrix, TransportOptions};
use nestrisk::verify::{instance_rng, nested_avar_slack, path_norm_power, random_tree_pair};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SEED: u64 = 20_240_611;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Runs `count` seeded instances in parallel and returns the per-instance results.
fn ensemble<T: Send>(tag: u64, count: usize, f: impl Fn(&mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
    (0..count).into_par_iter().map(|i| f(&mut instance_rng(SEED ^ (tag << 32), i))).collect()
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn min_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

fn martingale_identity() -> Outcome {
    let start = Instant::now();
    let devs = ensemble(1, 1000, |rng| {
        let (p, q) = random_tree_pair(4, 3, rng);
        let r = [1.0, 2.0, 3.0][rng.random_range(0..3)];
        let res = nested_distance::cost_process(&p, &q, &TerminalCost::default(), r).unwrap();
        nested_distance::check_martingale(&res, &p, &q).unwrap()
    });
    let secs = start.elapsed().as_secs_f64();
    let worst = max_of(devs);
    outcome(worst <= 1e-8 && secs < 60.0, format!("1000 pairs, max deviation {worst:.2e}, {secs:.1}s"))
}

fn recursion_vs_lp() -> Outcome {
    let results = ensemble(2, 200, |rng| loop {
        let (p, q) = random_tree_pair(3, 3, rng);
        if p.leaves().len() * q.leaves().len() > DIRECT_LP_CAP {
            continue;
        }
        let r = [1.0, 2.0][rng.random_range(0..2)];
        let terminal = TerminalCost::lp(r);
        let rec = nested_distance::cost_process(&p, &q, &terminal, r).unwrap().distance;
        let lp = nested_distance::direct_lp_distance(&p, &q, &terminal, r, DIRECT_LP_CAP).unwrap();
        break (rec - lp).abs();
    });
    let worst = max_of(results);
    outcome(worst <= 1e-7, format!("200 pairs under the cap, max |c_0 - LP| {worst:.2e}"))
}

fn additive_equivalence() -> Outcome {
    let results = ensemble(3, 500, |rng| {
        let (p, q) = random_tree_pair(4, 3, rng);
        [1.0, 2.0]
            .iter()
            .map(|&r| {
                let add = nested_distance::additive_cost_process(&p, &q, StageMetric::Euclidean, &[], r).unwrap();
                let full = nested_distance::cost_process(&p, &q, &TerminalCost::lp(r), r).unwrap();
                (add.distance - full.distance).abs()
            })
            .fold(0.0, f64::max)
    });
    let worst = max_of(results);
    outcome(worst <= 1e-9, format!("500 pairs, l1 and l2, max |c~_0 - c_0| {worst:.2e}"))
}

fn order_monotonicity() -> Outcome {
    let results = ensemble(4, 500, |rng| {
        let (p, q) = random_tree_pair(4, 3, rng);
        let nd: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&r| nested_distance::nested_distance(&p, &q, r).unwrap()).collect();
        (nd[0] - nd[1]).max(nd[1] - nd[2])
    });
    let worst = results.into_iter().fold(f64::NEG_INFINITY, f64::max);
    outcome(worst <= 1e-9, format!("500 pairs, max violation of nd_1 <= nd_2 <= nd_3 {worst:.2e}"))
}

fn random_rv(rng: &mut impl Rng, max_atoms: usize) -> Vec<(f64, f64)> {
    let k = rng.random_range(1..=max_atoms);
    let probs = gen::dirichlet(k, rng);
    let ties = rng.random_bool(0.3);
    probs
        .into_iter()
        .map(|w| {
            let y = if ties { rng.random_range(-3..=3) as f64 } else { rng.random_range(-5.0..5.0) };
            (y, w)
        })
        .collect()
}

fn random_sigma(rng: &mut impl Rng) -> nestrisk::Distortion {
    if rng.random_bool(0.3) {
        nestrisk::Distortion::avar(gen::random_level(0.95, rng)).unwrap()
    } else {
        gen::random_distortion(5, rng)
    }
}

fn dual_equivalence() -> Outcome {
    let results = ensemble(5, 1000, |rng| {
        let atoms = random_rv(rng, 6);
        let sigma = random_sigma(rng);
        let closed = risk::distortion_risk(&DiscreteRv::new(atoms.clone()).unwrap(), &sigma);
        (closed - common::risk_by_dual_lp(&atoms, &sigma)).abs()
    });
    let worst = max_of(results);
    outcome(worst <= 1e-7, format!("1000 (Y, sigma), max |closed form - dual LP| {worst:.2e}"))
}

fn coherence_axioms() -> Outcome {
    // each instance returns the violations of A1..A5
    let results = ensemble(6, 1000, |rng| {
        let k = rng.random_range(1..=8);
        let probs = gen::dirichlet(k, rng);
        let ys: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let zs: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sigma = random_sigma(rng);
        let rv = |v: &[f64]| DiscreteRv::from_parts(v, &probs).unwrap();
        let r = |v: &[f64]| risk::distortion_risk(&rv(v), &sigma);
        let (c, lam, mix) = (rng.random_range(-4.0..4.0), rng.random_range(0.0..3.0), rng.random_range(0.0..=1.0));
        let upper: Vec<f64> = ys.iter().map(|y| y + rng.random_range(0.0..1.0)).collect();
        let shifted: Vec<f64> = ys.iter().map(|y| y + c).collect();
        let scaled: Vec<f64> = ys.iter().map(|y| lam * y).collect();
        let mixed: Vec<f64> = ys.iter().zip(&zs).map(|(y, z)| mix * y + (1.0 - mix) * z).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = DiscreteRv::from_parts(
            &perm.iter().map(|&i| ys[i]).collect::<Vec<_>>(),
            &perm.iter().map(|&i| probs[i]).collect::<Vec<_>>(),
        )
        .unwrap();
        [
            (r(&ys) - r(&upper)).max(0.0),
            (r(&shifted) - r(&ys) - c).abs(),
            (r(&scaled) - lam * r(&ys)).abs(),
            (r(&mixed) - mix * r(&ys) - (1.0 - mix) * r(&zs)).max(0.0),
            (risk::distortion_risk(&permuted, &sigma) - r(&ys)).abs(),
        ]
    });
    let worst: Vec<f64> = (0..5).map(|a| max_of(results.iter().map(|v| v[a]))).collect();
    let ok = worst.iter().all(|w| *w <= 1e-9);
    outcome(
        ok,
        format!(
            "1000 each; monotonicity {:.1e}, translation {:.1e}, homogeneity {:.1e}, convexity {:.1e}, law invariance {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn nested_avar_bound() -> Outcome {
    let results = ensemble(7, 500, |rng| {
        let shape = TreeShape { horizon: rng.random_range(1..=4), branching: Branching::Range(1, 3), dim: 1, scale: 1.0 };
        let tree = gen::random_tree(&shape, rng).unwrap();
        let alphas: Vec<f64> = (0..tree.horizon()).map(|_| gen::random_level(0.95, rng)).collect();
        let mut leaf = vec![0.0; tree.len()];
        for &l in tree.leaves() {
            leaf[l.0] = rng.random_range(-10.0..10.0);
        }
        nested_avar_slack(&tree, &leaf, &alphas)
    });
    let worst = min_of(results);
    outcome(worst >= -1e-9, format!("500 trees, min slack {worst:.2e}"))
}

fn small_tree(rng: &mut impl Rng) -> nestrisk::ScenarioTree {
    loop {
        let shape = TreeShape { horizon: rng.random_range(1..=3), branching: Branching::Range(1, 3), dim: 1, scale: 1.0 };
        let tree = gen::random_tree(&shape, rng).unwrap();
        if tree.leaves().len() <= 8 && tree.len() <= 15 {
            return tree;
        }
    }
}

fn dp_vs_brute_force() -> Outcome {
    let results = ensemble(8, 300, |rng| {
        let tree = small_tree(rng);
        let shape = ProblemShape { max_actions: 2, states: rng.random_range(1..=2), table: rng.random_bool(0.3) };
        let problem = gen::random_problem(&tree, &shape, rng);
        let ladder = gen::random_ladder(tree.horizon(), rng);
        let dp = multistage::solve_dp(&tree, &problem, &ladder).unwrap();
        (dp.v0 - common::best_policy_value(&tree, &problem, &ladder)).abs()
    });
    let worst = max_of(results);
    outcome(worst <= 1e-9, format!("300 enumerable instances, max |v_0 - enumerated min| {worst:.2e}"))
}

fn value_process_martingale() -> Outcome {
    let results = ensemble(9, 500, |rng| {
        let shape = TreeShape { horizon: rng.random_range(1..=3), branching: Branching::Range(1, 3), dim: 1, scale: 1.0 };
        let tree = gen::random_tree(&shape, rng).unwrap();
        let pshape = ProblemShape { max_actions: 3, states: rng.random_range(1..=2), table: rng.random_bool(0.3) };
        let problem = gen::random_problem(&tree, &pshape, rng);
        let ladder = gen::random_ladder(tree.horizon(), rng);
        let actions = tree.nodes().iter().map(|n| rng.random_range(0..problem.action_sets[n.stage].len())).collect();
        let values = multistage::evaluate_policy(&tree, &problem, &ladder, &Policy { actions }).unwrap();
        let policy_dev = multistage::check_r_martingale(&values, &tree, &ladder).max_abs_deviation;
        let dp = multistage::solve_dp(&tree, &problem, &ladder).unwrap();
        let dp_dev = multistage::check_r_martingale(&dp.values, &tree, &ladder).max_deviation;
        (policy_dev, dp_dev)
    });
    let policy = max_of(results.iter().map(|r| r.0));
    let dp = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        policy <= 1e-8 && dp <= 1e-8,
        format!("500 instances, policy max |dev| {policy:.2e}, dp max signed dev {dp:.2e}"),
    )
}

fn nested_risk_continuity() -> Outcome {
    let results = ensemble(10, 500, |rng| {
        let (p, q) = random_tree_pair(3, 3, rng);
        let ladder = gen::random_avar_ladder(p.horizon(), 0.9, rng);
        let beta = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.2..1.0) };
        let rep = multistage::nested_risk_continuity_check(&p, &q, |x| path_norm_power(x, beta), 1.0, beta, &ladder, 1.0)
            .unwrap();
        let nd_check = if p.leaves().len() * q.leaves().len() <= DIRECT_LP_CAP {
            let lp = nested_distance::direct_lp_distance(&p, &q, &TerminalCost::default(), 1.0, DIRECT_LP_CAP).unwrap();
            (lp - rep.nested_distance).abs()
        } else {
            0.0
        };
        (rep.slack, nd_check)
    });
    let slack = min_of(results.iter().map(|r| r.0));
    let nd = max_of(results.iter().map(|r| r.1));
    outcome(slack >= -1e-7 && nd <= 1e-7, format!("500 instances, min slack {slack:.2e}, nd re-check {nd:.2e}"))
}

fn value_continuity() -> Outcome {
    let results = ensemble(11, 500, |rng| {
        let (p, q) = random_tree_pair(3, 3, rng);
        let problem = gen::random_affine_problem(p.stage_dims(), 3, rng);
        let ladder = gen::random_avar_ladder(p.horizon(), 0.9, rng);
        multistage::continuity_experiment(&p, &q, &problem, &ladder, 1.0).unwrap().slack
    });
    let worst = min_of(results);

    // shift case: cost Σ_t |x_t|, single action, risk-neutral, r = 1
    let mut rng = instance_rng(SEED, 99);
    let shape = TreeShape { horizon: 3, branching: Branching::Range(1, 3), dim: 1, scale: 1.0 };
    let p = gen::random_tree(&shape, &mut rng).unwrap();
    let delta = 0.37;
    let q = gen::shift_tree(&p, delta);
    let horizon = p.horizon();
    let mut costs = vec![StageCost::Tracking { scale: 1.0 }; horizon + 1];
    costs[0] = StageCost::Linear { c: vec![0.0], e: vec![], constant: 0.0 };
    let problem = MultistageProblem::new(vec![vec![vec![0.0]]; horizon + 1], costs, Some(1.0));
    let rep = multistage::continuity_experiment(&p, &q, &problem, &RiskLadder::expectation(horizon), 1.0).unwrap();
    let hand = horizon as f64 * delta;
    let shift_ok = (rep.nested_distance - hand).abs() <= 1e-9 && (rep.bound - hand).abs() <= 1e-9 && rep.gap <= hand + 1e-9;
    outcome(
        worst >= -1e-7 && shift_ok,
        format!(
            "500 instances, min slack {worst:.2e}; shift case nd_1 {:.6} vs T*delta {hand:.6}, gap {:.6}",
            rep.nested_distance, rep.gap
        ),
    )
}

fn transport_exactness() -> Outcome {
    let shapes: Vec<(usize, usize)> = (1..=12).flat_map(|n| (1..=12).map(move |m| (n, m))).filter(|(n, m)| n * m <= 12).collect();
    let per_shape = 40;
    let results = ensemble(12, shapes.len() * per_shape, |rng| {
        let (n, m) = shapes[rng.random_range(0..shapes.len())];
        let p = gen::dirichlet(n, rng);
        let q = gen::dirichlet(m, rng);
        let integer = rng.random_bool(0.5);
        let cost: Vec<f64> =
            (0..n * m).map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..5.0) }).collect();
        let r = [1.0, 2.0][rng.random_range(0..2)];
        let cm = CostMatrix::new(n, m, cost.clone()).unwrap();
        let res = transport::solve_weights(&p, &q, &cm, r, TransportOptions::default()).unwrap();
        let oracle = common::transport_by_vertices(&p, &q, &cost, r);
        ((res.value - oracle).abs(), res.duality_gap.max(res.dual_infeasibility))
    });
    // duality gap on larger instances too
    let large = ensemble(13, 200, |rng| {
        let (n, m) = (rng.random_range(1..=30), rng.random_range(1..=30));
        let cost: Vec<f64> = (0..n * m).map(|_| rng.random_range(0..6) as f64).collect();
        let cm = CostMatrix::new(n, m, cost).unwrap();
        let res = transport::solve_weights(&gen::dirichlet(n, rng), &gen::dirichlet(m, rng), &cm, 1.0, TransportOptions::default())
            .unwrap();
        res.duality_gap.max(res.dual_infeasibility)
    });
    let value = max_of(results.iter().map(|r| r.0));
    let gap = max_of(results.iter().map(|r| r.1).chain(large));
    outcome(
        value <= 1e-9 && gap <= 1e-9,
        format!("{} instances over all n*m <= 12, max |value - vertex min| {value:.2e}, max gap {gap:.2e}", results.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("martingale identity of the cost process", martingale_identity),
        ("recursion equals direct linear program", recursion_vs_lp),
        ("additive cost recursion", additive_equivalence),
        ("order monotonicity", order_monotonicity),
        ("distortion risk equals dual program", dual_equivalence),
        ("coherence axioms", coherence_axioms),
        ("nested AVaR bound", nested_avar_bound),
        ("dynamic programming vs enumeration", dp_vs_brute_force),
        ("value process martingale properties", value_process_martingale),
        ("continuity of nested risk", nested_risk_continuity),
        ("continuity of the optimal value", value_continuity),
        ("transport solver exactness", transport_exactness),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.passed);
        println!("{} {:>2}. {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
