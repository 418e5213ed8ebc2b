#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Nested distances between scenario trees, nested distortion risk functionals
//! and risk-averse multistage programs on finite trees.

pub mod gen;
pub mod multistage;
pub mod nested_distance;
pub mod risk;
pub mod transport;
pub mod tree;
pub mod verify;

pub use nested_distance::{cost_process, nested_distance, NestedError, NestedResult, TerminalCost};
pub use risk::{avar, distortion_risk, nested_risk, DiscreteRv, Distortion, RiskCollection, RiskLadder};
pub use transport::{solve_transport, CostMatrix, TransportPlan, TransportResult};
pub use tree::{DiscreteMeasure, NodeId, ScenarioTree, TreeError};
pub use multistage::{evaluate_policy, solve_dp, MultistageProblem, Policy, StageCost};
