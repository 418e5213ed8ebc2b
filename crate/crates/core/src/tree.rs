//! Finite scenario trees.
//!
//! A [`ScenarioTree`] is a finite filtered probability space: every stage-`t`
//! node stands for a history `x_{1:t}`, and the edges into its children carry
//! the one-step conditional probabilities. Nodes are stored flat, addressed by
//! dense ids with the root at id 0, and children/stage lists are precomputed at
//! load time so that backward recursions can sweep stage by stage.

use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a node's children probabilities.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Index into a tree's node table. The root is always `NodeId(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub stage: usize,
    pub value: Vec<f64>,
    /// Probability of this node given its parent.
    pub cond_prob: f64,
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("malformed tree document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error reading tree: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid tree: {0}")]
    Shape(String),
    #[error("node {node}: {reason}")]
    Node { node: usize, reason: String },
    #[error("node {0} is a leaf and has no conditional kernel")]
    LeafHasNoKernel(NodeId),
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("stage {stage} out of range 1..={horizon}")]
    StageOutOfRange { stage: usize, horizon: usize },
    #[error("probabilities must be nonnegative and sum to one (sum = {sum})")]
    NotAProbability { sum: f64 },
}

fn node_err(node: usize, reason: impl Into<String>) -> TreeError {
    TreeError::Node { node, reason: reason.into() }
}

/// A finitely supported probability measure whose atoms carry a payload id
/// (node ids for kernels and stage marginals).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<(usize, f64)>,
}

impl DiscreteMeasure {
    pub fn new(atoms: Vec<(usize, f64)>) -> Result<Self, TreeError> {
        let sum: f64 = atoms.iter().map(|a| a.1).sum();
        if atoms.is_empty()
            || atoms.iter().any(|a| !(a.1 >= 0.0) || !a.1.is_finite())
            || (sum - 1.0).abs() > PROB_SUM_TOL
        {
            return Err(TreeError::NotAProbability { sum });
        }
        Ok(Self { atoms })
    }

    /// Builds a measure from bare weights; atom `i` gets payload `i`.
    pub fn from_weights(weights: &[f64]) -> Result<Self, TreeError> {
        Self::new(weights.iter().copied().enumerate().collect())
    }

    pub(crate) fn from_parts_unchecked(atoms: Vec<(usize, f64)>) -> Self {
        Self { atoms }
    }

    pub fn atoms(&self) -> &[(usize, f64)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.1).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }
}

/// Wire format of a single node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub stage: usize,
    pub value: Vec<f64>,
    pub prob: f64,
}

/// Wire format of a whole tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDocument {
    pub horizon: usize,
    pub stage_dims: Vec<usize>,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    nodes: Vec<Node>,
    horizon: usize,
    stage_dims: Vec<usize>,
    children: Vec<Vec<NodeId>>,
    stages: Vec<Vec<NodeId>>,
    /// Position of each node inside its stage list.
    stage_index: Vec<usize>,
}

impl ScenarioTree {
    /// Validates a node table and builds the adjacency structures.
    pub fn from_document(doc: TreeDocument) -> Result<Self, TreeError> {
        let TreeDocument { horizon, stage_dims, nodes: records } = doc;
        if horizon < 1 {
            return Err(TreeError::Shape("horizon must be at least 1".into()));
        }
        if stage_dims.len() != horizon {
            return Err(TreeError::Shape(format!(
                "stage_dims has {} entries, horizon is {}",
                stage_dims.len(),
                horizon
            )));
        }
        if records.is_empty() {
            return Err(TreeError::Shape("tree has no nodes".into()));
        }

        let n = records.len();
        let mut slots: Vec<Option<NodeRecord>> = vec![None; n];
        for rec in records {
            let id = rec.id;
            if id >= n {
                return Err(node_err(id, format!("id out of dense range 0..{n}")));
            }
            if slots[id].is_some() {
                return Err(node_err(id, "duplicate id"));
            }
            slots[id] = Some(rec);
        }

        let mut nodes = Vec::with_capacity(n);
        for (id, slot) in slots.into_iter().enumerate() {
            let rec = slot.ok_or_else(|| TreeError::Shape(format!("missing node id {id}")))?;
            nodes.push(Node {
                id: NodeId(id),
                parent: rec.parent.map(NodeId),
                stage: rec.stage,
                value: rec.value,
                cond_prob: rec.prob,
            });
        }

        let root = &nodes[0];
        if root.parent.is_some() {
            return Err(node_err(0, "root must not have a parent"));
        }
        if root.stage != 0 {
            return Err(node_err(0, "root must be at stage 0"));
        }
        if !root.value.is_empty() {
            return Err(node_err(0, "root carries no value"));
        }
        if (root.cond_prob - 1.0).abs() > PROB_SUM_TOL {
            return Err(node_err(0, "root probability must be 1"));
        }

        let mut children = vec![Vec::new(); n];
        for node in nodes.iter().skip(1) {
            let id = node.id.0;
            let parent = node.parent.ok_or_else(|| node_err(id, "orphan node without parent"))?;
            if parent.0 >= n {
                return Err(node_err(id, format!("parent {} does not exist", parent.0)));
            }
            if node.stage != nodes[parent.0].stage + 1 {
                return Err(node_err(
                    id,
                    format!(
                        "stage {} does not follow parent stage {}",
                        node.stage, nodes[parent.0].stage
                    ),
                ));
            }
            if node.stage > horizon {
                return Err(node_err(id, format!("stage {} exceeds horizon {horizon}", node.stage)));
            }
            if !(node.cond_prob > 0.0 && node.cond_prob <= 1.0 + PROB_SUM_TOL) {
                return Err(node_err(
                    id,
                    format!("conditional probability {} not in (0, 1]", node.cond_prob),
                ));
            }
            let dim = stage_dims[node.stage - 1];
            if node.value.len() != dim {
                return Err(node_err(
                    id,
                    format!("value has dimension {}, stage {} expects {dim}", node.value.len(), node.stage),
                ));
            }
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(node_err(id, "value contains NaN or infinity"));
            }
            children[parent.0].push(node.id);
        }

        let mut stages = vec![Vec::new(); horizon + 1];
        let mut stage_index = vec![0; n];
        for node in &nodes {
            // stage <= horizon was checked above for every non-root node
            stage_index[node.id.0] = stages[node.stage].len();
            stages[node.stage].push(node.id);
        }

        for node in &nodes {
            let kids = &children[node.id.0];
            if kids.is_empty() {
                if node.stage != horizon {
                    return Err(node_err(
                        node.id.0,
                        format!("leaf at stage {}, all leaves must be at stage {horizon}", node.stage),
                    ));
                }
                continue;
            }
            let sum: f64 = kids.iter().map(|c| nodes[c.0].cond_prob).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(node_err(
                    node.id.0,
                    format!("children probabilities sum to {sum}, expected 1"),
                ));
            }
        }

        Ok(Self { nodes, horizon, stage_dims, children, stages, stage_index })
    }

    pub fn from_json_str(s: &str) -> Result<Self, TreeError> {
        Self::from_document(serde_json::from_str(s)?)
    }

    /// Parses and validates a tree from a JSON byte stream.
    pub fn load<R: Read>(reader: R) -> Result<Self, TreeError> {
        Self::from_document(serde_json::from_reader(reader)?)
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            horizon: self.horizon,
            stage_dims: self.stage_dims.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.0,
                    parent: n.parent.map(|p| p.0),
                    stage: n.stage,
                    value: n.value.clone(),
                    prob: n.cond_prob,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("tree documents always serialize")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn stage_dims(&self) -> &[usize] {
        &self.stage_dims
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children[id.0].is_empty()
    }

    /// Nodes of stage `t` in increasing id order.
    pub fn stage_nodes(&self, t: usize) -> &[NodeId] {
        &self.stages[t]
    }

    /// Position of a node within [`Self::stage_nodes`] of its stage.
    pub fn stage_index(&self, id: NodeId) -> usize {
        self.stage_index[id.0]
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.stages[self.horizon]
    }

    pub fn stage(&self, id: NodeId) -> usize {
        self.nodes[id.0].stage
    }

    /// One-step conditional distribution over the children of `id`.
    pub fn conditional_kernel(&self, id: NodeId) -> Result<DiscreteMeasure, TreeError> {
        self.get(id)?;
        let kids = &self.children[id.0];
        if kids.is_empty() {
            return Err(TreeError::LeafHasNoKernel(id));
        }
        Ok(DiscreteMeasure::from_parts_unchecked(
            kids.iter().map(|c| (c.0, self.nodes[c.0].cond_prob)).collect(),
        ))
    }

    /// Unconditional probability of every node, indexed by node id.
    pub fn node_probabilities(&self) -> Vec<f64> {
        let mut probs = vec![0.0; self.nodes.len()];
        probs[0] = 1.0;
        for t in 1..=self.horizon {
            for &id in &self.stages[t] {
                let node = &self.nodes[id.0];
                let parent = node.parent.expect("non-root nodes have a parent");
                probs[id.0] = probs[parent.0] * node.cond_prob;
            }
        }
        probs
    }

    /// Image measure on the stage-`t` nodes.
    pub fn marginal_measure(&self, t: usize) -> Result<DiscreteMeasure, TreeError> {
        if t < 1 || t > self.horizon {
            return Err(TreeError::StageOutOfRange { stage: t, horizon: self.horizon });
        }
        let probs = self.node_probabilities();
        Ok(DiscreteMeasure::from_parts_unchecked(
            self.stages[t].iter().map(|id| (id.0, probs[id.0])).collect(),
        ))
    }

    /// Distribution of the full paths, one atom per leaf.
    pub fn path_measure(&self) -> DiscreteMeasure {
        self.marginal_measure(self.horizon).expect("horizon is a valid stage")
    }

    /// Node ids from stage 1 down to `id` (root excluded).
    pub fn ancestry(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = Vec::with_capacity(self.nodes[id.0].stage);
        let mut cur = id;
        while let Some(p) = self.nodes[cur.0].parent {
            path.push(cur);
            cur = p;
        }
        path.reverse();
        path
    }

    /// The realization `x_{1:T}` along the path ending in `leaf`.
    pub fn path_values(&self, leaf: NodeId) -> Result<Vec<Vec<f64>>, TreeError> {
        self.get(leaf)?;
        if !self.is_leaf(leaf) {
            return Err(TreeError::NotALeaf(leaf));
        }
        Ok(self.history(leaf))
    }

    /// Values `x_{1:t}` along the path to any node.
    pub fn history(&self, id: NodeId) -> Vec<Vec<f64>> {
        self.ancestry(id).into_iter().map(|n| self.nodes[n.0].value.clone()).collect()
    }

    /// Leaves of the subtree rooted at `id`, in leaf order.
    pub fn leaves_under(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let kids = &self.children[n.0];
            if kids.is_empty() {
                out.push(n);
            } else {
                stack.extend(kids.iter().rev());
            }
        }
        out.sort();
        out
    }
}
