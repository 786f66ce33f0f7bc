//! Executable checkers for the propositions, theorems and constructions
//! behind the specialization and coupling regularizers.
//!
//! Each checker returns a [`BoundReport`]. A report whose premises could not
//! be verified is marked not applicable and is never a violation.

mod construct;
mod coupling;
mod propositions;
mod routing;
pub mod suites;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use construct::{balanced_partition, construct_coupled_balanced, uniform_eta, BalancedPartition, CoupledRouting};
pub use coupling::{
    brute_force_kappa, check_backward_transfer, cluster_agreement, co_occurrence, coupling_coefficient, kmeans,
    max_weight_assignment,
};
pub use propositions::{check_prop1_gradient_alignment, check_prop2_propagation, Prop2Instance};
pub use routing::{
    check_entropy_corollary, check_thm_region_risk, check_thm_weak_spec, entropy_bound, router_entropy,
    RegionRiskInput, WeakSpecInput,
};

/// Tolerance on `lhs ≤ rhs`.
pub const HOLDS_TOL: f64 = 1e-9;

/// Tolerance used when verifying a theorem's premises.
pub const PREMISE_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`
    pub slack: f64,
    pub holds: bool,
    /// False when the premises fail or the statement is vacuous.
    pub applicable: bool,
    pub context: BTreeMap<String, Value>,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            slack: rhs - lhs,
            holds: lhs <= rhs + HOLDS_TOL,
            applicable: true,
            context: BTreeMap::new(),
        }
    }

    pub fn not_applicable(name: impl Into<String>, reason: impl Into<String>) -> Self {
        let mut r = Self::new(name, 0.0, 0.0);
        r.applicable = false;
        r.with("reason", reason.into())
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.context.insert(key.to_string(), value.into());
        self
    }

    /// Marks the report as not applicable while keeping the computed sides.
    pub fn inapplicable(mut self, reason: impl Into<String>) -> Self {
        self.applicable = false;
        self.with("reason", reason.into())
    }

    pub fn violated(&self) -> bool {
        self.applicable && !self.holds
    }
}
