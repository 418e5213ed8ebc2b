mod common;

use nestrisk::gen::{self, Branching, ProblemShape, TreeShape};
use nestrisk::multistage::{self, MultistageProblem, Policy, StageCost, ENUMERATION_CAP};
use nestrisk::risk::RiskLadder;

fn small_instance(seed: u64) -> (nestrisk::ScenarioTree, MultistageProblem, RiskLadder) {
    let mut rng = gen::rng(seed);
    let shape = TreeShape { horizon: 1 + (seed % 3) as usize, branching: Branching::Range(1, 2), dim: 1, scale: 1.0 };
    let tree = gen::random_tree(&shape, &mut rng).unwrap();
    let pshape = ProblemShape { max_actions: 2, states: 1 + (seed % 2) as usize, table: seed % 3 == 0 };
    let problem = gen::random_problem(&tree, &pshape, &mut rng);
    let ladder = gen::random_ladder(tree.horizon(), &mut rng);
    (tree, problem, ladder)
}

#[test]
fn dp_equals_enumeration_oracle() {
    for seed in 0..60 {
        let (tree, problem, ladder) = small_instance(seed);
        let dp = multistage::solve_dp(&tree, &problem, &ladder).unwrap();
        let oracle = common::best_policy_value(&tree, &problem, &ladder);
        assert!((dp.v0 - oracle).abs() < 1e-9, "seed {seed}: {} vs {oracle}", dp.v0);
        let bf = multistage::brute_force(&tree, &problem, &ladder, ENUMERATION_CAP).unwrap();
        assert!((bf.value - oracle).abs() < 1e-9);
        let replay = multistage::evaluate_policy(&tree, &problem, &ladder, &dp.policy).unwrap();
        assert!((replay.root() - dp.v0).abs() < 1e-9);
    }
}

#[test]
fn risk_dominance_and_action_monotonicity() {
    for seed in 0..40 {
        let (tree, problem, ladder) = small_instance(1000 + seed);
        let averse = multistage::solve_dp(&tree, &problem, &ladder).unwrap().v0;
        let neutral = multistage::solve_dp(&tree, &problem, &RiskLadder::expectation(tree.horizon())).unwrap().v0;
        assert!(averse >= neutral - 1e-9);

        let mut bigger = problem.clone();
        let t = (seed as usize) % (tree.horizon() + 1);
        let extra = bigger.action_sets[t][0].iter().map(|v| v + 0.5).collect();
        bigger.action_sets[t].push(extra);
        if t < tree.horizon() {
            for row in bigger.transitions.get_mut(t).into_iter().flatten() {
                row.push(0);
            }
        }
        // tabulated components need a value for the new action
        if let StageCost::Sum { terms } = &mut bigger.stage_costs[t] {
            for term in terms {
                if let StageCost::Table { values } = term {
                    for rows in values.values_mut() {
                        let copy = rows[0].clone();
                        rows.push(copy);
                    }
                }
            }
        }
        let more = multistage::solve_dp(&tree, &bigger, &ladder).unwrap().v0;
        assert!(more <= averse + 1e-9);
    }
}

#[test]
fn policy_values_nest_and_dominate_the_optimum() {
    for seed in 0..40 {
        let (tree, problem, ladder) = small_instance(2000 + seed);
        let dp = multistage::solve_dp(&tree, &problem, &ladder).unwrap();
        let actions = (0..tree.len()).map(|i| (i + seed as usize) % problem.action_sets[tree.stage(nestrisk::NodeId(i))].len()).collect();
        let values = multistage::evaluate_policy(&tree, &problem, &ladder, &Policy { actions }).unwrap();
        assert!(values.root() >= dp.v0 - 1e-9);
        for t in 1..=tree.horizon() {
            for s in 0..t {
                assert!(multistage::nesting_deviation(&values, &tree, &ladder, s, t).unwrap() < 1e-8);
                let dev = multistage::multistage_recursion_check(&tree, &problem, &ladder, s, t, ENUMERATION_CAP).unwrap();
                assert!(dev < 1e-8, "seed {seed} s {s} t {t}: {dev}");
            }
        }
    }
}

#[test]
fn deterministic_chain_has_exact_martingale() {
    let mut rng = gen::rng(5);
    let tree = gen::random_tree(&TreeShape::new(3, 1), &mut rng).unwrap();
    let problem = gen::random_problem(&tree, &ProblemShape { max_actions: 3, states: 2, table: false }, &mut rng);
    let ladder = gen::random_ladder(3, &mut rng);
    let dp = multistage::solve_dp(&tree, &problem, &ladder).unwrap();
    let rep = multistage::check_r_martingale(&dp.values, &tree, &ladder);
    assert_eq!(rep.max_abs_deviation, 0.0);
    let leaf = tree.leaves()[0];
    let cost = common::path_cost(&tree, &problem, &dp.policy.actions, leaf);
    assert!((cost - dp.v0).abs() < 1e-12);
}

#[test]
fn continuity_bound_holds_for_affine_costs() {
    for seed in 0..60 {
        let mut rng = gen::rng(3000 + seed);
        let (p, q) = nestrisk::verify::random_tree_pair(3, 3, &mut rng);
        let problem = gen::random_affine_problem(p.stage_dims(), 3, &mut rng);
        let ladder = gen::random_avar_ladder(p.horizon(), 0.9, &mut rng);
        let rep = multistage::continuity_experiment(&p, &q, &problem, &ladder, 1.0).unwrap();
        assert!(rep.slack >= -1e-7, "{rep:?}");
        let identical = multistage::continuity_experiment(&p, &p, &problem, &ladder, 1.0).unwrap();
        assert_eq!(identical.gap, 0.0);
    }
}
