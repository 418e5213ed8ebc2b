//! Seeded random instances: trees, risk ladders and multistage problems.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::multistage::{MultistageProblem, StageCost};
use crate::risk::{Distortion, RiskCollection, RiskLadder};
use crate::tree::{NodeRecord, ScenarioTree, TreeDocument};

#[derive(Debug, Error, PartialEq)]
#[error("invalid shape: {0}")]
pub struct ShapeError(String);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branching {
    Fixed(usize),
    /// Uniform in `lo..=hi`, drawn per node.
    Range(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeShape {
    pub horizon: usize,
    pub branching: Branching,
    pub dim: usize,
    /// Standard deviation of the stage values.
    pub scale: f64,
}

impl TreeShape {
    pub fn new(horizon: usize, branching: usize) -> Self {
        Self { horizon, branching: Branching::Fixed(branching), dim: 1, scale: 1.0 }
    }

    fn check(&self) -> Result<(), ShapeError> {
        let ok_branch = match self.branching {
            Branching::Fixed(k) => k >= 1,
            Branching::Range(lo, hi) => lo >= 1 && lo <= hi,
        };
        if self.horizon == 0 || self.dim == 0 || !ok_branch || !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(ShapeError(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Flat Dirichlet weights via normalized exponentials.
pub fn dirichlet(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let sum: f64 = raw.iter().sum();
    if sum > 0.0 {
        raw.into_iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Tree with per-node branching from `shape`, Dirichlet kernels and
/// normally distributed values; nodes are numbered breadth first.
pub fn random_tree(shape: &TreeShape, rng: &mut impl Rng) -> Result<ScenarioTree, ShapeError> {
    shape.check()?;
    let mut nodes = vec![NodeRecord { id: 0, parent: None, stage: 0, value: vec![], prob: 1.0 }];
    let mut frontier = vec![0];
    for t in 1..=shape.horizon {
        let mut next = Vec::new();
        for &parent in &frontier {
            let k = match shape.branching {
                Branching::Fixed(k) => k,
                Branching::Range(lo, hi) => rng.random_range(lo..=hi),
            };
            for prob in dirichlet(k, rng) {
                let id = nodes.len();
                let value = (0..shape.dim).map(|_| shape.scale * rng.sample::<f64, _>(StandardNormal)).collect();
                nodes.push(NodeRecord { id, parent: Some(parent), stage: t, value, prob });
                next.push(id);
            }
        }
        frontier = next;
    }
    let doc = TreeDocument { horizon: shape.horizon, stage_dims: vec![shape.dim; shape.horizon], nodes };
    ScenarioTree::from_document(doc).map_err(|e| ShapeError(e.to_string()))
}

/// Same structure with every stage value moved by `f(node value)`.
pub fn map_values(tree: &ScenarioTree, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> ScenarioTree {
    let mut doc = tree.to_document();
    for rec in &mut doc.nodes {
        if rec.stage > 0 {
            rec.value = f(&rec.value);
        }
    }
    ScenarioTree::from_document(doc).expect("structure unchanged")
}

/// Every coordinate of every stage value shifted by `delta`.
pub fn shift_tree(tree: &ScenarioTree, delta: f64) -> ScenarioTree {
    map_values(tree, |v| v.iter().map(|x| x + delta).collect())
}

/// Same structure with Gaussian noise of size `noise` on the values and
/// kernels mixed with fresh Dirichlet draws at weight `mix`.
pub fn perturb_tree(tree: &ScenarioTree, noise: f64, mix: f64, rng: &mut impl Rng) -> ScenarioTree {
    let mut doc = tree.to_document();
    let mut fresh = vec![0.0; doc.nodes.len()];
    for n in tree.nodes() {
        let kids = tree.children(n.id);
        for (c, w) in kids.iter().zip(dirichlet(kids.len(), rng)) {
            fresh[c.0] = w;
        }
    }
    for rec in &mut doc.nodes {
        if rec.stage > 0 {
            rec.prob = (1.0 - mix) * rec.prob + mix * fresh[rec.id];
            for v in &mut rec.value {
                *v += noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    renormalize(&mut doc, tree);
    ScenarioTree::from_document(doc).expect("perturbed tree stays valid")
}

fn renormalize(doc: &mut TreeDocument, tree: &ScenarioTree) {
    for n in tree.nodes() {
        let kids = tree.children(n.id);
        let sum: f64 = kids.iter().map(|c| doc.nodes[c.0].prob).sum();
        for c in kids {
            doc.nodes[c.0].prob /= sum;
        }
    }
}

/// Independent tree with the same shape parameters; pairs drawn this way
/// usually have different structures.
pub fn random_pair(shape: &TreeShape, rng: &mut impl Rng) -> Result<(ScenarioTree, ScenarioTree), ShapeError> {
    Ok((random_tree(shape, rng)?, random_tree(shape, rng)?))
}

/// Level in `[0, max_level]`, exactly zero with probability 1/8.
pub fn random_level(max_level: f64, rng: &mut impl Rng) -> f64 {
    if rng.random_range(0..8) == 0 { 0.0 } else { rng.random_range(0.0..=max_level) }
}

pub fn random_avar_ladder(horizon: usize, max_level: f64, rng: &mut impl Rng) -> RiskLadder {
    let alphas: Vec<f64> = (0..horizon).map(|_| random_level(max_level, rng)).collect();
    RiskLadder::avar(&alphas).expect("levels lie in [0, 1)")
}

/// Nondecreasing step distortion with up to `max_steps` pieces.
pub fn random_distortion(max_steps: usize, rng: &mut impl Rng) -> Distortion {
    let k = rng.random_range(1..=max_steps.max(1));
    let mut cuts: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.01..0.99)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut breakpoints = vec![0.0];
    breakpoints.extend(cuts);
    breakpoints.push(1.0);
    let mut raw: Vec<f64> = (0..breakpoints.len() - 1).map(|_| rng.random_range(0.0..1.0)).collect();
    raw.sort_by(f64::total_cmp);
    let mass: f64 = raw.iter().zip(breakpoints.windows(2)).map(|(s, w)| s * (w[1] - w[0])).sum();
    let levels: Vec<f64> = if mass > 1e-9 { raw.iter().map(|s| s / mass).collect() } else { vec![1.0; raw.len()] };
    Distortion::new(breakpoints, levels).expect("normalized nondecreasing steps")
}

/// Ladder mixing AVaR and step distortions, occasionally several per stage.
pub fn random_ladder(horizon: usize, rng: &mut impl Rng) -> RiskLadder {
    let stages = (0..horizon)
        .map(|_| {
            let members = (0..rng.random_range(1..=2))
                .map(|_| {
                    if rng.random_bool(0.5) {
                        Distortion::avar(random_level(0.9, rng)).expect("valid level")
                    } else {
                        random_distortion(4, rng)
                    }
                })
                .collect();
            RiskCollection::new(members).expect("nonempty")
        })
        .collect();
    RiskLadder::new(stages)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemShape {
    pub max_actions: usize,
    /// Number of auxiliary states; 1 means stateless.
    pub states: usize,
    /// Add a tabulated cost component (ties the problem to one tree).
    pub table: bool,
}

fn action_set(k: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// Stateless problem with affine stage costs `c·z + e·x_t`, valid on any tree
/// with the given stage dimensions; `lipschitz_L` is the derived constant.
pub fn random_affine_problem(stage_dims: &[usize], max_actions: usize, rng: &mut impl Rng) -> MultistageProblem {
    let horizon = stage_dims.len();
    let mut actions = Vec::with_capacity(horizon + 1);
    let mut costs = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let zdim = if t == 0 { 1 } else { stage_dims[t - 1] };
        actions.push(action_set(rng.random_range(1..=max_actions.max(1)), zdim, rng));
        let c = (0..zdim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = if t == 0 { vec![] } else { (0..stage_dims[t - 1]).map(|_| rng.random_range(-1.0..1.0)).collect() };
        costs.push(StageCost::Linear { c, e, constant: 0.0 });
    }
    let mut p = MultistageProblem::new(actions, costs, None);
    p.lipschitz_l = p.derived_lipschitz(stage_dims);
    p
}

/// Problem built for one tree, mixing every stage-cost component, with
/// optional auxiliary states and tables.
pub fn random_problem(tree: &ScenarioTree, shape: &ProblemShape, rng: &mut impl Rng) -> MultistageProblem {
    let horizon = tree.horizon();
    let states = shape.states.max(1);
    let mut actions = Vec::with_capacity(horizon + 1);
    let mut costs = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let dim = if t == 0 { 1 } else { tree.stage_dims()[t - 1] };
        let k = rng.random_range(1..=shape.max_actions.max(1));
        actions.push(action_set(k, dim, rng));
        let mut terms = vec![StageCost::Linear {
            c: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            e: if t == 0 { vec![] } else { (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect() },
            constant: 0.0,
        }];
        match rng.random_range(0..3) {
            0 => terms.push(StageCost::Tracking { scale: rng.random_range(0.0..1.0) }),
            1 => terms.push(StageCost::Newsvendor { h: rng.random_range(0.0..1.0), b: rng.random_range(0.0..2.0) }),
            _ => {}
        }
        if states > 1 {
            terms.push(StageCost::StatePenalty { penalty: (0..states).map(|_| rng.random_range(0.0..1.0)).collect() });
        }
        if shape.table {
            let values: BTreeMap<usize, Vec<Vec<Option<f64>>>> = tree
                .stage_nodes(t)
                .iter()
                .map(|n| (n.0, (0..k).map(|_| (0..states).map(|_| Some(rng.random_range(-1.0..1.0))).collect()).collect()))
                .collect();
            terms.push(StageCost::Table { values });
        }
        costs.push(StageCost::Sum { terms });
    }
    let mut p = MultistageProblem::new(actions, costs, None);
    if states > 1 {
        p.transitions = (0..horizon)
            .map(|t| (0..states).map(|_| (0..p.action_sets[t].len()).map(|_| rng.random_range(0..states)).collect()).collect())
            .collect();
    }
    p.lipschitz_l = p.derived_lipschitz(tree.stage_dims());
    p
}
