//! End-to-end planning: benefit estimation, replication factor, budget
//! allocation, slot assignment and greedy placement, plus the baseline plans
//! and plan validation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::allocator::{auto_replication_factor, solve_allocation, AllocationVector, AutoRMethod};
use crate::assignment::assign_capacities;
use crate::benefit::{check_cluster, estimate_benefits, BenefitMatrix};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_against, BalancednessReport};
use crate::placement::{contiguous_nodes, greedy_place, replicate_hot, LayerPlacement};
use crate::trace::LoadTrace;

pub const PLAN_FORMAT_VERSION: u32 = 1;
pub const PLANNER_VERSION: &str = concat!("craft-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub trace_digest: String,
    pub planner_version: String,
    pub seed: u64,
}

/// Deployable expert replication plan. Serializes with a fixed key order and
/// integer-only numbers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationPlan {
    pub version: u32,
    pub gpus: usize,
    pub nodes: usize,
    pub layers: usize,
    pub experts: usize,
    /// Replica slots reserved on every GPU.
    pub replication_factor: usize,
    /// Replicas per layer.
    pub allocation: Vec<usize>,
    pub layer_placements: Vec<LayerPlacement>,
    pub provenance: Provenance,
    /// Reserved replica slots (`R·D − Σ allocation`) left empty.
    #[serde(default)]
    pub unused_replica_slots: usize,
}

impl ReplicationPlan {
    pub fn total_replicas(&self) -> usize {
        self.allocation.iter().sum()
    }

    pub fn node_of(&self) -> Vec<usize> {
        contiguous_nodes(self.gpus, self.nodes)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// How the replication factor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicationMode {
    Manual(usize),
    Auto(AutoRMethod),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConfig {
    pub gpus: usize,
    pub nodes: usize,
    pub mode: ReplicationMode,
    pub seed: u64,
}

/// Everything the pipeline computed on the way to a plan.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: ReplicationPlan,
    pub benefits: BenefitMatrix,
    pub allocation: AllocationVector,
}

/// Per-layer base-expert slot counts: `E` slots per layer, spread so rows and
/// columns differ by at most one.
pub fn base_capacities(layers: usize, experts: usize, gpus: usize) -> Result<Vec<Vec<usize>>> {
    Ok(assign_capacities(&vec![experts; layers], gpus)?.rows)
}

/// Per-layer total slot counts (base experts plus replicas) for an allocation.
pub fn layer_capacities(
    experts: usize,
    gpus: usize,
    allocation: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let base = base_capacities(allocation.len(), experts, gpus)?;
    let extra = assign_capacities(allocation, gpus)?;
    Ok(base
        .iter()
        .zip(&extra.rows)
        .map(|(b, a)| b.iter().zip(a).map(|(x, y)| x + y).collect())
        .collect())
}

/// Builds the plan for a fixed allocation: slot assignment, hot-expert
/// replication and greedy placement per layer.
pub fn plan_from_allocation(
    trace: &LoadTrace,
    gpus: usize,
    nodes: usize,
    replication_factor: usize,
    allocation: &[usize],
    seed: u64,
) -> Result<ReplicationPlan> {
    check_cluster(gpus, nodes)?;
    if allocation.len() != trace.layers() {
        return Err(Error::invalid(format!(
            "allocation covers {} layers, trace has {}",
            allocation.len(),
            trace.layers()
        )));
    }
    let used: usize = allocation.iter().sum();
    let reserved = replication_factor * gpus;
    if used > reserved {
        return Err(Error::invalid(format!(
            "allocation uses {used} replicas, budget R·D is {reserved}"
        )));
    }
    let sums = trace.aggregate()?;
    let node_of = contiguous_nodes(gpus, nodes);
    let capacities = layer_capacities(trace.experts(), gpus, allocation)?;

    let place = |l: usize| -> Result<LayerPlacement> {
        let loads = sums.layer(l);
        let copies = replicate_hot(loads, allocation[l], gpus);
        greedy_place(l, loads, &copies, &capacities[l], &node_of)
    };

    #[cfg(feature = "parallel")]
    let placements: Result<Vec<LayerPlacement>> = {
        use rayon::prelude::*;
        (0..trace.layers()).into_par_iter().map(place).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let placements: Result<Vec<LayerPlacement>> = (0..trace.layers()).map(place).collect();

    Ok(ReplicationPlan {
        version: PLAN_FORMAT_VERSION,
        gpus,
        nodes,
        layers: trace.layers(),
        experts: trace.experts(),
        replication_factor,
        allocation: allocation.to_vec(),
        layer_placements: placements?,
        provenance: Provenance {
            trace_digest: trace.digest(),
            planner_version: PLANNER_VERSION.to_string(),
            seed,
        },
        unused_replica_slots: reserved - used,
    })
}

/// Runs the full pipeline and keeps the intermediate results.
pub fn build_plan_detailed(trace: &LoadTrace, cfg: &PlanConfig) -> Result<PlanOutcome> {
    check_cluster(cfg.gpus, cfg.nodes)?;
    let benefits = estimate_benefits(trace, cfg.gpus, cfg.nodes)?;
    let r = match cfg.mode {
        ReplicationMode::Manual(r) => r,
        ReplicationMode::Auto(method) => auto_replication_factor(&benefits, cfg.gpus, method),
    };
    let allocation = solve_allocation(&benefits, r * cfg.gpus);
    let plan = plan_from_allocation(trace, cfg.gpus, cfg.nodes, r, &allocation.x, cfg.seed)?;
    Ok(PlanOutcome {
        plan,
        benefits,
        allocation,
    })
}

pub fn build_plan(trace: &LoadTrace, cfg: &PlanConfig) -> Result<ReplicationPlan> {
    Ok(build_plan_detailed(trace, cfg)?.plan)
}

/// Uniform replication baseline: one replica per layer per GPU (`R = L`).
pub fn uniform_plan(trace: &LoadTrace, gpus: usize, nodes: usize) -> Result<ReplicationPlan> {
    let x = vec![gpus; trace.layers()];
    plan_from_allocation(trace, gpus, nodes, trace.layers(), &x, 0)
}

/// Uniform per-layer allocation: every layer gets `per_layer` replicas, with
/// `⌈L·per_layer / D⌉` slots reserved per GPU.
pub fn uniform_allocation_plan(
    trace: &LoadTrace,
    gpus: usize,
    nodes: usize,
    per_layer: usize,
) -> Result<ReplicationPlan> {
    check_cluster(gpus, nodes)?;
    if per_layer > gpus {
        return Err(Error::invalid(format!(
            "{per_layer} replicas per layer exceeds {gpus} GPUs"
        )));
    }
    let x = vec![per_layer; trace.layers()];
    let reserved = (trace.layers() * per_layer).div_ceil(gpus);
    plan_from_allocation(trace, gpus, nodes, reserved, &x, 0)
}

/// Placement with no replicas at all.
pub fn placement_only_plan(
    trace: &LoadTrace,
    gpus: usize,
    nodes: usize,
) -> Result<ReplicationPlan> {
    plan_from_allocation(trace, gpus, nodes, 0, &vec![0; trace.layers()], 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    ClusterShape,
    LayerCount,
    GpuCount,
    ExpertCount,
    UnknownExpert,
    MissingExpert,
    CopyCountMismatch,
    DuplicateOnGpu,
    ReplicaCountMismatch,
    CapacityMismatch,
    BudgetExceeded,
    MemoryBound,
    UnusedSlotsMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, layer: Option<usize>, detail: impl Into<String>) -> Self {
        Self {
            kind,
            layer,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{:?} in layer {l}: {}", self.kind, self.detail),
            None => write!(f, "{:?}: {}", self.kind, self.detail),
        }
    }
}

/// Checks every structural invariant of a plan. An empty list means valid.
pub fn validate_plan(plan: &ReplicationPlan) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();

    if plan.gpus == 0 || plan.nodes == 0 || !plan.gpus.is_multiple_of(plan.nodes) {
        out.push(Violation::new(
            ClusterShape,
            None,
            format!("{} GPUs over {} nodes", plan.gpus, plan.nodes),
        ));
        return out;
    }
    if plan.allocation.len() != plan.layers || plan.layer_placements.len() != plan.layers {
        out.push(Violation::new(
            LayerCount,
            None,
            format!(
                "{} layers, {} allocation entries, {} placements",
                plan.layers,
                plan.allocation.len(),
                plan.layer_placements.len()
            ),
        ));
        return out;
    }

    let budget = plan.replication_factor * plan.gpus;
    let used = plan.total_replicas();
    if used > budget {
        out.push(Violation::new(
            BudgetExceeded,
            None,
            format!("{used} replicas allocated, R·D = {budget}"),
        ));
    } else if plan.unused_replica_slots != budget - used {
        out.push(Violation::new(
            UnusedSlotsMismatch,
            None,
            format!(
                "recorded {}, expected {}",
                plan.unused_replica_slots,
                budget - used
            ),
        ));
    }

    let expected_caps = layer_capacities(plan.experts, plan.gpus, &plan.allocation).ok();
    let mut per_gpu = vec![0usize; plan.gpus];

    for (l, p) in plan.layer_placements.iter().enumerate() {
        let layer = Some(l);
        if p.slots.len() != plan.gpus {
            out.push(Violation::new(
                GpuCount,
                layer,
                format!("{} slot lists", p.slots.len()),
            ));
            continue;
        }
        if p.copy_counts.len() != plan.experts {
            out.push(Violation::new(
                ExpertCount,
                layer,
                format!("{} copy counts", p.copy_counts.len()),
            ));
            continue;
        }
        for (g, s) in p.slots.iter().enumerate() {
            per_gpu[g] += s.len();
        }

        let expected_total = plan.experts + plan.allocation[l];
        if p.total_copies() != expected_total {
            out.push(Violation::new(
                ReplicaCountMismatch,
                layer,
                format!(
                    "{} copies, expected E + x = {expected_total}",
                    p.total_copies()
                ),
            ));
        }

        let mut seen = vec![0usize; plan.experts];
        for (g, s) in p.slots.iter().enumerate() {
            let mut on_gpu = BTreeSet::new();
            for &e in s {
                if e >= plan.experts {
                    out.push(Violation::new(
                        UnknownExpert,
                        layer,
                        format!("GPU {g} hosts expert {e}"),
                    ));
                    continue;
                }
                seen[e] += 1;
                if !on_gpu.insert(e) && !p.duplicate_fallback {
                    out.push(Violation::new(
                        DuplicateOnGpu,
                        layer,
                        format!("GPU {g} hosts expert {e} twice"),
                    ));
                }
            }
        }
        for (e, (&n, &want)) in seen.iter().zip(&p.copy_counts).enumerate() {
            if n == 0 {
                out.push(Violation::new(
                    MissingExpert,
                    layer,
                    format!("missing logical expert {e}"),
                ));
            } else if n != want {
                out.push(Violation::new(
                    CopyCountMismatch,
                    layer,
                    format!("expert {e} placed {n} times, copy count {want}"),
                ));
            }
        }

        if let Some(caps) = &expected_caps {
            if p.capacities() != caps[l] {
                out.push(Violation::new(
                    CapacityMismatch,
                    layer,
                    format!("slots {:?}, expected {:?}", p.capacities(), caps[l]),
                ));
            }
        }
    }

    let bound = plan.layers * plan.experts.div_ceil(plan.gpus) + plan.replication_factor;
    for (g, &n) in per_gpu.iter().enumerate() {
        if n > bound {
            out.push(Violation::new(
                MemoryBound,
                None,
                format!("GPU {g} holds {n} slots, bound {bound}"),
            ));
        }
    }
    out
}

/// One side of a [`PlanComparison`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub replication_factor: usize,
    pub replicas: usize,
    pub report: BalancednessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanComparison {
    pub a: PlanSummary,
    pub b: PlanSummary,
    /// Per-layer `plan_a − plan_b` balancedness.
    pub layer_delta: Vec<f64>,
    pub aggregate_delta: f64,
    /// Replica slots of `a` over those of `b`; `None` when only `b` has none.
    pub memory_ratio: Option<f64>,
}

impl PlanComparison {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `layer,a,b,delta` rows, then `aggregate` and `memory_ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,a,b,delta\n");
        for (l, ((ra, rb), d)) in self
            .a
            .report
            .per_layer
            .iter()
            .zip(&self.b.report.per_layer)
            .zip(&self.layer_delta)
            .enumerate()
        {
            out.push_str(&format!("{l},{},{},{d}\n", ra.plan, rb.plan));
        }
        out.push_str(&format!(
            "aggregate,{},{},{}\n",
            self.a.report.aggregate.plan, self.b.report.aggregate.plan, self.aggregate_delta
        ));
        let ratio = self
            .memory_ratio
            .map_or_else(String::new, |r| r.to_string());
        out.push_str(&format!(
            "memory_ratio,{},{},{ratio}\n",
            self.a.replicas, self.b.replicas
        ));
        out
    }
}

/// Replays two plans over the same trace against a shared placement-only
/// baseline.
pub fn compare_plans(
    trace: &LoadTrace,
    a: &ReplicationPlan,
    b: &ReplicationPlan,
) -> Result<PlanComparison> {
    if (a.gpus, a.nodes) != (b.gpus, b.nodes) {
        return Err(Error::invalid(format!(
            "plans target different clusters: {}x{} vs {}x{}",
            a.gpus, a.nodes, b.gpus, b.nodes
        )));
    }
    let baseline = placement_only_plan(trace, a.gpus, a.nodes)?;
    let ra = evaluate_against(trace, a, &baseline)?;
    let rb = evaluate_against(trace, b, &baseline)?;
    let layer_delta = ra
        .per_layer
        .iter()
        .zip(&rb.per_layer)
        .map(|(x, y)| x.plan - y.plan)
        .collect();
    let aggregate_delta = ra.aggregate.plan - rb.aggregate.plan;
    let (na, nb) = (a.total_replicas(), b.total_replicas());
    let memory_ratio = match (na, nb) {
        (0, 0) => Some(1.0),
        (_, 0) => None,
        _ => Some(na as f64 / nb as f64),
    };
    Ok(PlanComparison {
        a: PlanSummary {
            replication_factor: a.replication_factor,
            replicas: na,
            report: ra,
        },
        b: PlanSummary {
            replication_factor: b.replication_factor,
            replicas: nb,
            report: rb,
        },
        layer_delta,
        aggregate_delta,
        memory_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_plan;
    use crate::trace::{generate_zipfian, ZipfConfig};

    fn zipf(layers: usize, experts: usize, s: f64, seed: u64) -> LoadTrace {
        generate_zipfian(&ZipfConfig {
            layers,
            experts,
            batches: 16,
            exponent: s,
            tokens_per_batch: 1024,
            topk: 4,
            seed,
        })
        .unwrap()
    }

    fn cfg(gpus: usize, nodes: usize, mode: ReplicationMode) -> PlanConfig {
        PlanConfig {
            gpus,
            nodes,
            mode,
            seed: 0,
        }
    }

    #[test]
    fn built_plans_validate() {
        let t = zipf(6, 32, 1.2, 3);
        for mode in [
            ReplicationMode::Manual(0),
            ReplicationMode::Manual(1),
            ReplicationMode::Manual(3),
            ReplicationMode::Auto(AutoRMethod::DpObjective),
            ReplicationMode::Auto(AutoRMethod::UniformCurve),
        ] {
            let p = build_plan(&t, &cfg(8, 2, mode)).unwrap();
            assert_eq!(validate_plan(&p), vec![], "{mode:?}");
            assert!(p.total_replicas() <= p.replication_factor * 8);
        }
        for p in [
            uniform_plan(&t, 8, 2).unwrap(),
            placement_only_plan(&t, 8, 2).unwrap(),
        ] {
            assert_eq!(validate_plan(&p), vec![]);
        }
    }

    #[test]
    fn uses_uneven_expert_counts() {
        let t = zipf(3, 10, 1.0, 8);
        let p = build_plan(&t, &cfg(4, 2, ReplicationMode::Manual(1))).unwrap();
        assert_eq!(validate_plan(&p), vec![]);
        // 30 base slots over 4 GPUs -> 7 or 8 each
        let per_gpu: Vec<usize> = (0..4)
            .map(|g| p.layer_placements.iter().map(|lp| lp.slots[g].len()).sum())
            .collect();
        let a = assign_capacities(&p.allocation, 4).unwrap();
        for (used, reserved) in per_gpu.iter().zip(&a.column_totals) {
            assert!((7..=8).contains(&(used - reserved)));
        }
    }

    #[test]
    fn uniform_plan_reserves_one_replica_per_layer_per_gpu() {
        let t = zipf(1, 4, 1.0, 1);
        let p = uniform_plan(&t, 2, 1).unwrap();
        assert_eq!(p.allocation, vec![2]);
        assert_eq!(p.replication_factor, 1);
        let extra: Vec<usize> = p.layer_placements[0]
            .slots
            .iter()
            .map(|s| s.len() - 2)
            .collect();
        assert_eq!(extra, vec![1, 1]);
    }

    #[test]
    fn placement_only_uniform_trace_is_balanced() {
        let t = LoadTrace::from_nested(&vec![vec![vec![5u64; 8]; 2]; 3]).unwrap();
        let p = placement_only_plan(&t, 4, 2).unwrap();
        assert_eq!(p.total_replicas(), 0);
        let r = evaluate_plan(&t, &p).unwrap();
        assert!(r.per_layer.iter().all(|x| x.plan == 1.0 && x.gain == 0.0));
    }

    #[test]
    fn very_hot_expert_leaves_placement_only_unbalanced() {
        let mut loads = vec![1u64; 64];
        loads[5] = 100;
        let mean = loads.iter().sum::<u64>() as f64 / 64.0;
        assert!(loads[5] as f64 > 27.0 * mean);
        let t = LoadTrace::from_nested(&[vec![loads]]).unwrap();
        let r = evaluate_plan(&t, &placement_only_plan(&t, 8, 2).unwrap()).unwrap();
        assert!(r.per_layer[0].plan < 0.5);
    }

    #[test]
    fn hot_expert_takes_the_replicas() {
        let mut slices = Vec::new();
        for _ in 0..4 {
            slices.push(vec![
                vec![80, 2, 2, 2, 2, 2, 2, 2],
                vec![2, 2, 2, 2, 2, 2, 2, 80],
            ]);
        }
        let t = LoadTrace::from_nested(&slices).unwrap();
        let p = build_plan(&t, &cfg(4, 2, ReplicationMode::Manual(1))).unwrap();
        assert_eq!(p.total_replicas(), 4);
        for (l, hot) in [(0usize, 0usize), (1, 7)] {
            let lp = &p.layer_placements[l];
            // the hot expert is capped at one copy per GPU
            assert_eq!(lp.copy_counts[hot], (1 + p.allocation[l]).min(4));
            assert_eq!(lp.total_copies(), 8 + p.allocation[l]);
        }
        let base = placement_only_plan(&t, 4, 2).unwrap();
        let r = evaluate_against(&t, &p, &base).unwrap();
        assert!(r.aggregate.gain > 0.0);
    }

    #[test]
    fn validate_flags_missing_expert_and_budget() {
        let t = zipf(2, 8, 1.0, 4);
        let p = build_plan(&t, &cfg(4, 2, ReplicationMode::Manual(1))).unwrap();

        let mut missing = p.clone();
        let slot = &mut missing.layer_placements[0].slots[0];
        let removed = slot.remove(0);
        missing.layer_placements[0].copy_counts[removed] = 1;
        let v = validate_plan(&missing);
        assert!(v.iter().any(|x| x.kind == ViolationKind::MissingExpert
            || x.kind == ViolationKind::CopyCountMismatch));

        let mut only = p.clone();
        let lp = &mut only.layer_placements[1];
        lp.copy_counts = vec![1; 8];
        lp.slots = LayerPlacement::round_robin(8, 4).slots;
        lp.slots[0].retain(|&e| e != 0);
        let v = validate_plan(&only);
        assert!(v.iter().any(|x| x.kind == ViolationKind::MissingExpert
            && x.detail.contains("missing logical expert 0")));

        let mut over = p.clone();
        over.allocation[0] += 100;
        let v = validate_plan(&over);
        assert!(v.iter().any(|x| x.kind == ViolationKind::BudgetExceeded));
    }

    #[test]
    fn plan_json_key_order_is_fixed() {
        let t = zipf(2, 8, 1.0, 2);
        let p = build_plan(&t, &cfg(4, 2, ReplicationMode::Manual(1))).unwrap();
        let json = p.to_json().unwrap();
        let keys = [
            "\"version\"",
            "\"gpus\"",
            "\"nodes\"",
            "\"layers\"",
            "\"experts\"",
            "\"replication_factor\"",
            "\"allocation\"",
            "\"layer_placements\"",
            "\"provenance\"",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        fn integers_only(v: &serde_json::Value) -> bool {
            match v {
                serde_json::Value::Number(n) => n.is_u64(),
                serde_json::Value::Array(a) => a.iter().all(integers_only),
                serde_json::Value::Object(o) => o.values().all(integers_only),
                _ => true,
            }
        }
        assert!(integers_only(&serde_json::from_str(&json).unwrap()));
        assert_eq!(ReplicationPlan::from_json(&json).unwrap(), p);
    }

    #[test]
    fn comparison_with_itself_is_neutral() {
        let t = zipf(3, 16, 1.2, 6);
        let p = build_plan(&t, &cfg(4, 2, ReplicationMode::Manual(2))).unwrap();
        let c = compare_plans(&t, &p, &p).unwrap();
        assert_eq!(c.memory_ratio, Some(1.0));
        assert!(c.layer_delta.iter().all(|&d| d == 0.0));
        assert_eq!(c.aggregate_delta, 0.0);
    }

    #[test]
    fn rejects_overspent_allocation() {
        let t = zipf(2, 8, 1.0, 2);
        assert!(plan_from_allocation(&t, 4, 2, 1, &[4, 4], 0).is_err());
        assert!(plan_from_allocation(&t, 4, 2, 1, &[4], 0).is_err());
    }
}
