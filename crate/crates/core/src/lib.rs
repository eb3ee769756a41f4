//! Cost-aware expert replica allocation for mixture-of-experts inference.
//!
//! The pipeline takes an offline expert-load trace and produces a deployable
//! replication plan:
//!
//! 1. [`benefit`] replays the trace to measure how much each layer's
//!    balancedness improves with 1, 2, 4, ..., D replicas.
//! 2. [`allocator`] picks the replication factor `R` (replicas per GPU) and
//!    splits the `R·D` replica budget across layers with an exact knapsack DP.
//! 3. [`assignment`] turns per-layer replica counts into per-GPU slot counts
//!    that keep memory uniform across devices.
//! 4. [`placement`] replicates hot experts and greedily places every copy.
//!
//! [`metrics`] replays any plan to score it, and [`sweep`] scans budgets.

pub mod allocator;
pub mod assignment;
pub mod benefit;
pub mod error;
pub mod metrics;
pub mod placement;
pub mod plan;
pub mod sweep;
pub mod trace;

pub use allocator::{auto_replication_factor, solve_allocation, AllocationVector, AutoRMethod};
pub use assignment::{assign_capacities, interleave_select, min_cutoff, CapacityMatrix};
pub use benefit::{candidate_counts, estimate_benefits, BenefitMatrix};
pub use error::{Error, Result};
pub use metrics::{balancedness, evaluate_plan, gpu_loads, BalancednessReport};
pub use placement::{greedy_place, replicate_hot, LayerPlacement};
pub use plan::{
    build_plan, compare_plans, placement_only_plan, uniform_plan, validate_plan, PlanConfig,
    ReplicationMode, ReplicationPlan,
};
pub use sweep::{sweep, SweepResult};
pub use trace::{generate_zipfian, load_trace, save_trace, LoadTrace, ZipfConfig};
