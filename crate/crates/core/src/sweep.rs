//! Replication-factor sweeps: one allocation, plan and replay per budget.

use serde::{Deserialize, Serialize};

use crate::allocator::solve_allocation;
use crate::benefit::{estimate_benefits, BenefitMatrix};
use crate::error::Result;
use crate::metrics::replay_plan;
use crate::plan::plan_from_allocation;
use crate::trace::LoadTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// Replicas reserved per GPU.
    pub replication_factor: usize,
    /// `R·D`.
    pub replica_budget: usize,
    pub replicas_used: usize,
    pub objective: f64,
    pub aggregate_balancedness: f64,
    pub layer_balancedness: Vec<f64>,
    pub allocation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub gpus: usize,
    pub nodes: usize,
    pub benefits: BenefitMatrix,
    /// Ascending in `replication_factor`, one per distinct budget.
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let layers = self.benefits.layers();
        let mut out = String::from(
            "replication_factor,replica_budget,replicas_used,objective,aggregate_balancedness",
        );
        for l in 0..layers {
            out.push_str(&format!(",layer_{l}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.replication_factor,
                r.replica_budget,
                r.replicas_used,
                r.objective,
                r.aggregate_balancedness
            ));
            for b in &r.layer_balancedness {
                out.push_str(&format!(",{b}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Plans and replays the trace at every per-GPU replication factor in
/// `factors` (sorted, duplicates dropped). Benefits are estimated once.
pub fn sweep(
    trace: &LoadTrace,
    gpus: usize,
    nodes: usize,
    factors: &[usize],
) -> Result<SweepResult> {
    let benefits = estimate_benefits(trace, gpus, nodes)?;
    sweep_with(trace, gpus, nodes, factors, benefits)
}

/// [`sweep`] with a precomputed benefit matrix.
pub fn sweep_with(
    trace: &LoadTrace,
    gpus: usize,
    nodes: usize,
    factors: &[usize],
    benefits: BenefitMatrix,
) -> Result<SweepResult> {
    let mut factors = factors.to_vec();
    factors.sort_unstable();
    factors.dedup();

    let mut records = Vec::with_capacity(factors.len());
    for r in factors {
        let budget = r * gpus;
        let alloc = solve_allocation(&benefits, budget);
        let plan = plan_from_allocation(trace, gpus, nodes, r, &alloc.x, 0)?;
        let per_layer = replay_plan(trace, &plan)?;
        let aggregate = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
        records.push(SweepRecord {
            replication_factor: r,
            replica_budget: budget,
            replicas_used: alloc.total(),
            objective: alloc.objective,
            aggregate_balancedness: aggregate,
            layer_balancedness: per_layer,
            allocation: alloc.x,
        });
    }
    Ok(SweepResult {
        gpus,
        nodes,
        benefits,
        records,
    })
}
