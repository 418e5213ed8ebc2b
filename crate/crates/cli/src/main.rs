//! `nestrisk` command line: nested distances, nested risk, multistage
//! solving, verification ensembles and random trees.
//!
//! Reports are JSON on stdout. Exit codes: 0 pass, 1 check failure (or an
//! infeasible problem), 2 input error.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nestrisk::gen::{self, Branching, TreeShape};
use nestrisk::multistage::{self, MultistageError, MultistageProblem, ENUMERATION_CAP};
use nestrisk::nested_distance::{self, StageMetric, TerminalCost, DIRECT_LP_CAP};
use nestrisk::risk::{self, RiskSpec};
use nestrisk::tree::ScenarioTree;
use nestrisk::verify::{self, Suite};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "nestrisk", version, about = "Nested distances and risk-averse multistage programs on scenario trees")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Nested distance between two trees.
    Nd {
        tree_a: PathBuf,
        tree_b: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        order: f64,
        /// `l1` (default), `lp:<p>`, `linf`, or `matrix:<file>` with a JSON leaf-pair matrix.
        #[arg(long, default_value = "l1")]
        terminal: String,
        /// Per-stage distance used by path terminal costs.
        #[arg(long, value_enum, default_value_t = Metric::Euclidean)]
        metric: Metric,
        /// Cross-check against the direct linear program.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Nested risk of leaf values.
    Risk {
        tree: PathBuf,
        /// JSON object `{"<leaf id>": value}`, or one of `sum`, `last`, `max`
        /// applied to the path values.
        #[arg(long)]
        values: String,
        /// JSON `{"stages": [[{"avar": a} | {"breakpoints": [...], "levels": [...]}, ...], ...]}`.
        #[arg(long)]
        riskspec: PathBuf,
    },
    /// Solve a multistage problem by dynamic programming.
    Solve {
        tree: PathBuf,
        problem: PathBuf,
        #[arg(long)]
        riskspec: PathBuf,
        /// Also enumerate every policy when the count is below `--cap`.
        #[arg(long)]
        brute_force: bool,
        #[arg(long, default_value_t = ENUMERATION_CAP)]
        cap: u64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Run a randomized verification suite.
    Verify {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Overrides the suite's default tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Print a random tree as JSON.
    Gen {
        #[arg(long)]
        stages: usize,
        #[arg(long)]
        branching: usize,
        /// Draw each node's branching uniformly from `branching..=branching_max`.
        #[arg(long)]
        branching_max: Option<usize>,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Euclidean,
    Manhattan,
    Chebyshev,
}

impl From<Metric> for StageMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Euclidean => StageMetric::Euclidean,
            Metric::Manhattan => StageMetric::Manhattan,
            Metric::Chebyshev => StageMetric::Chebyshev,
        }
    }
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

/// Result of a command: the JSON report and whether every check passed.
struct Outcome {
    report: Value,
    passed: bool,
}

fn load_tree(path: &Path) -> Result<ScenarioTree> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    ScenarioTree::load(BufReader::new(file)).with_context(|| format!("invalid tree {}", path.display()))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

fn parse_terminal(spec: &str, metric: StageMetric) -> Result<TerminalCost> {
    let path_cost = |p: f64| TerminalCost::Path { p, metric, weights: Vec::new() };
    Ok(match spec {
        "l1" => path_cost(1.0),
        "l2" => path_cost(2.0),
        "linf" => path_cost(f64::INFINITY),
        _ => {
            if let Some(p) = spec.strip_prefix("lp:") {
                path_cost(p.parse().with_context(|| format!("bad exponent in terminal spec '{spec}'"))?)
            } else if let Some(file) = spec.strip_prefix("matrix:") {
                TerminalCost::Matrix(load_json(Path::new(file))?)
            } else {
                bail!("unknown terminal cost '{spec}'");
            }
        }
    })
}

fn cmd_nd(a: &Path, b: &Path, order: f64, spec: &str, metric: Metric, oracle: bool, tol: f64) -> Result<Outcome> {
    let (p, q) = (load_tree(a)?, load_tree(b)?);
    let terminal = parse_terminal(spec, metric.into())?;
    let res = nested_distance::cost_process(&p, &q, &terminal, order)?;
    let martingale = nested_distance::check_martingale(&res, &p, &q)?;
    let marginals = nested_distance::check_conditional_marginals(&res, &p, &q)?;
    let gap = res.max_duality_gap();
    let mut passed = martingale <= tol && marginals <= tol && gap <= 1e-9;
    let mut outputs = json!({ "distance": res.distance });
    if oracle {
        outputs["oracle"] = match nested_distance::direct_lp_distance(&p, &q, &terminal, order, DIRECT_LP_CAP) {
            Ok(lp) => {
                passed &= (lp - res.distance).abs() <= 1e-7;
                json!({ "direct_lp_distance": lp, "difference": (lp - res.distance).abs() })
            }
            Err(e) => json!({ "skipped": e.to_string() }),
        };
    }
    Ok(Outcome {
        report: json!({
            "inputs": { "tree_a": a, "tree_b": b, "order": order, "terminal": spec, "metric": format!("{:?}", StageMetric::from(metric)).to_lowercase() },
            "outputs": outputs,
            "deviations": { "martingale": martingale, "conditional_marginals": marginals, "max_duality_gap": gap, "tolerance": tol },
        }),
        passed,
    })
}

fn leaf_values(tree: &ScenarioTree, spec: &str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; tree.len()];
    let from_path: Option<fn(&[Vec<f64>]) -> f64> = match spec {
        "sum" => Some(|x| x.iter().flatten().sum()),
        "last" => Some(|x| x.last().and_then(|v| v.first()).copied().unwrap_or(0.0)),
        "max" => Some(|x| x.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)),
        _ => None,
    };
    if let Some(f) = from_path {
        for &l in tree.leaves() {
            out[l.0] = f(&tree.history(l));
        }
        return Ok(out);
    }
    let map: Map<String, Value> = load_json(Path::new(spec))?;
    for &l in tree.leaves() {
        let v = map.get(&l.0.to_string()).and_then(Value::as_f64);
        out[l.0] = v.with_context(|| format!("no numeric value for leaf {l}"))?;
    }
    Ok(out)
}

fn node_map(values: &[f64]) -> Value {
    Value::Object(values.iter().enumerate().map(|(i, v)| (i.to_string(), json!(v))).collect())
}

fn cmd_risk(tree_path: &Path, values: &str, riskspec: &Path) -> Result<Outcome> {
    let tree = load_tree(tree_path)?;
    let ladder = load_json::<RiskSpec>(riskspec)?.build()?;
    let leaf = leaf_values(&tree, values)?;
    let res = risk::nested_risk_dense(&tree, &leaf, &ladder)?;
    Ok(Outcome {
        report: json!({
            "inputs": { "tree": tree_path, "values": values, "riskspec": riskspec },
            "outputs": { "value": res.value, "node_values": node_map(&res.node_values) },
        }),
        passed: true,
    })
}

fn cmd_solve(tree_path: &Path, problem_path: &Path, riskspec: &Path, brute: bool, cap: u64, tol: f64) -> Result<Outcome> {
    let tree = load_tree(tree_path)?;
    let problem = MultistageProblem::from_json_str(&std::fs::read_to_string(problem_path)?)?;
    let ladder = load_json::<RiskSpec>(riskspec)?.build()?;
    let inputs = json!({ "tree": tree_path, "problem": problem_path, "riskspec": riskspec });
    let dp = match multistage::solve_dp(&tree, &problem, &ladder) {
        Ok(dp) => dp,
        Err(MultistageError::Infeasible) => {
            return Ok(Outcome { report: json!({ "inputs": inputs, "status": "infeasible" }), passed: false });
        }
        Err(e) => return Err(e.into()),
    };
    let replay = multistage::evaluate_policy(&tree, &problem, &ladder, &dp.policy)?;
    let dp_mart = multistage::check_r_martingale(&dp.values, &tree, &ladder);
    let policy_mart = multistage::check_r_martingale(&replay, &tree, &ladder);
    let replay_gap = (replay.root() - dp.v0).abs();
    let mut passed = dp_mart.passes(multistage::MartingaleMode::Dp, tol)
        && policy_mart.passes(multistage::MartingaleMode::Policy, tol)
        && replay_gap <= 1e-9;
    let policy: Vec<Value> = tree
        .nodes()
        .iter()
        .map(|n| {
            let a = dp.policy.actions[n.id.0];
            json!({ "node": n.id.0, "stage": n.stage, "action": a, "z": problem.action_sets[n.stage][a] })
        })
        .collect();
    let mut outputs = json!({ "v0": dp.v0, "policy": policy, "values": node_map(&dp.values.values) });
    if brute {
        outputs["brute_force"] = match multistage::brute_force(&tree, &problem, &ladder, cap) {
            Ok(bf) => {
                passed &= (bf.value - dp.v0).abs() <= 1e-9;
                json!({ "value": bf.value, "policies": bf.policies, "difference": (bf.value - dp.v0).abs() })
            }
            Err(e) => json!({ "skipped": e.to_string() }),
        };
    }
    Ok(Outcome {
        report: json!({
            "inputs": inputs,
            "status": "optimal",
            "outputs": outputs,
            "deviations": {
                "dp_submartingale": dp_mart,
                "policy_martingale": policy_mart,
                "policy_replay": replay_gap,
                "tolerance": tol,
            },
        }),
        passed,
    })
}

fn cmd_verify(suite: Suite, seed: u64, count: usize, tol: Option<f64>) -> Outcome {
    let rep = verify::run_suite(suite, seed, count, tol);
    let passed = rep.passed;
    Outcome { report: json!({ "inputs": { "suite": suite, "seed": seed, "count": count }, "outputs": rep }), passed }
}

fn run(cli: Cli) -> Result<Option<Outcome>> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    Ok(Some(match cli.command {
        Command::Nd { tree_a, tree_b, order, terminal, metric, oracle, tol } => {
            cmd_nd(&tree_a, &tree_b, order, &terminal, metric, oracle, tol)?
        }
        Command::Risk { tree, values, riskspec } => cmd_risk(&tree, &values, &riskspec)?,
        Command::Solve { tree, problem, riskspec, brute_force, cap, tol } => {
            cmd_solve(&tree, &problem, &riskspec, brute_force, cap, tol)?
        }
        Command::Verify { suite, seed, count, tol } => cmd_verify(suite, seed, count, tol),
        Command::Gen { stages, branching, branching_max, dim, scale, seed } => {
            let branching = match branching_max {
                Some(hi) => Branching::Range(branching, hi),
                None => Branching::Fixed(branching),
            };
            let tree = gen::random_tree(&TreeShape { horizon: stages, branching, dim, scale }, &mut gen::rng(seed))?;
            emit(&tree.to_json());
            return Ok(None);
        }
    }))
}

/// Writes to stdout, ignoring a reader that has gone away.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Outcome { mut report, passed })) => {
            report["passed"] = json!(passed);
            report["wall_time_s"] = json!(start.elapsed().as_secs_f64());
            emit(&serde_json::to_string_pretty(&report).expect("reports serialize"));
            if passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("nestrisk: checks failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("nestrisk: {e:#}");
            ExitCode::from(2)
        }
    }
}
