//! Per-GPU load replay and the balancedness metric (mean load / max load).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::placement::LayerPlacement;
use crate::plan::{placement_only_plan, ReplicationPlan};
use crate::trace::LoadTrace;

/// Per-GPU token load of one slice. An expert's load is split evenly across
/// its copies (real-valued, no flooring) and each share lands on the host GPU.
pub fn gpu_loads(slice: &[u64], placement: &LayerPlacement) -> Result<Vec<f64>> {
    if slice.len() != placement.num_experts() {
        return Err(Error::invalid(format!(
            "slice has {} experts, placement has {}",
            slice.len(),
            placement.num_experts()
        )));
    }
    if let Some(e) = placement.copy_counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidPlan(format!("expert {e} has zero copies")));
    }
    let mut loads = vec![0.0; placement.num_gpus()];
    for (g, hosted) in placement.slots.iter().enumerate() {
        for &e in hosted {
            let copies = *placement
                .copy_counts
                .get(e)
                .ok_or_else(|| Error::InvalidPlan(format!("GPU {g} hosts unknown expert {e}")))?;
            loads[g] += slice[e] as f64 / copies as f64;
        }
    }
    Ok(loads)
}

/// `mean / max` of the loads. An all-zero (or empty) vector counts as
/// perfectly balanced.
pub fn balancedness(loads: &[f64]) -> f64 {
    let max = loads.iter().copied().fold(0.0f64, f64::max);
    if loads.is_empty() || max <= 0.0 {
        return 1.0;
    }
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    mean / max
}

/// Average over batches of the per-batch balancedness of `layer`.
pub fn replay_layer(trace: &LoadTrace, layer: usize, placement: &LayerPlacement) -> Result<f64> {
    let mut acc = 0.0;
    for b in 0..trace.batches() {
        acc += balancedness(&gpu_loads(trace.slice(b, layer), placement)?);
    }
    Ok(acc / trace.batches() as f64)
}

/// Replayed balancedness of every layer of `plan`.
pub fn replay_plan(trace: &LoadTrace, plan: &ReplicationPlan) -> Result<Vec<f64>> {
    check_dims(trace, plan)?;
    plan.layer_placements
        .iter()
        .enumerate()
        .map(|(l, p)| replay_layer(trace, l, p))
        .collect()
}

fn check_dims(trace: &LoadTrace, plan: &ReplicationPlan) -> Result<()> {
    if trace.layers() != plan.layers || trace.experts() != plan.experts {
        return Err(Error::invalid(format!(
            "plan is {} layers x {} experts, trace is {} x {}",
            plan.layers,
            plan.experts,
            trace.layers(),
            trace.experts()
        )));
    }
    if plan.layer_placements.len() != plan.layers {
        return Err(Error::InvalidPlan(format!(
            "{} layer placements for {} layers",
            plan.layer_placements.len(),
            plan.layers
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBalance {
    pub layer: usize,
    pub baseline: f64,
    pub plan: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBalance {
    pub baseline: f64,
    pub plan: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancednessReport {
    pub per_layer: Vec<LayerBalance>,
    pub aggregate: AggregateBalance,
}

impl BalancednessReport {
    fn from_columns(baseline: &[f64], plan: &[f64]) -> Self {
        let per_layer: Vec<LayerBalance> = baseline
            .iter()
            .zip(plan)
            .enumerate()
            .map(|(layer, (&b, &p))| LayerBalance {
                layer,
                baseline: b,
                plan: p,
                gain: p - b,
            })
            .collect();
        let n = per_layer.len().max(1) as f64;
        let b = baseline.iter().sum::<f64>() / n;
        let p = plan.iter().sum::<f64>() / n;
        Self {
            per_layer,
            aggregate: AggregateBalance {
                baseline: b,
                plan: p,
                gain: p - b,
            },
        }
    }

    pub fn plan_column(&self) -> Vec<f64> {
        self.per_layer.iter().map(|r| r.plan).collect()
    }

    /// `layer,baseline,plan,gain` rows plus a trailing `aggregate` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,baseline,plan,gain\n");
        for r in &self.per_layer {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.layer, r.baseline, r.plan, r.gain
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!("aggregate,{},{},{}\n", a.baseline, a.plan, a.gain));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Replays `plan` and a placement-only baseline built for the same trace and
/// cluster shape.
pub fn evaluate_plan(trace: &LoadTrace, plan: &ReplicationPlan) -> Result<BalancednessReport> {
    check_dims(trace, plan)?;
    let baseline = placement_only_plan(trace, plan.gpus, plan.nodes)?;
    evaluate_against(trace, plan, &baseline)
}

/// Replays `plan` against an explicit `baseline` plan.
pub fn evaluate_against(
    trace: &LoadTrace,
    plan: &ReplicationPlan,
    baseline: &ReplicationPlan,
) -> Result<BalancednessReport> {
    let base = replay_plan(trace, baseline)?;
    let planned = replay_plan(trace, plan)?;
    Ok(BalancednessReport::from_columns(&base, &planned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn placement(copy_counts: Vec<usize>, slots: Vec<Vec<usize>>) -> LayerPlacement {
        LayerPlacement {
            copy_counts,
            slots,
            duplicate_fallback: false,
        }
    }

    #[test]
    fn splits_replicated_load_evenly() {
        let p = placement(vec![2, 1], vec![vec![0], vec![0, 1]]);
        assert_eq!(gpu_loads(&[8, 4], &p).unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn identity_mapping_passes_loads_through() {
        let p = LayerPlacement::round_robin(4, 4);
        assert_eq!(
            gpu_loads(&[3, 1, 4, 1], &p).unwrap(),
            vec![3.0, 1.0, 4.0, 1.0]
        );
    }

    #[test]
    fn full_replication_is_symmetric() {
        let d = 3;
        let p = placement(vec![d; 2], vec![vec![0, 1]; d]);
        let loads = gpu_loads(&[5, 7], &p).unwrap();
        assert!(loads.iter().all(|&x| (x - 4.0).abs() < 1e-12));
    }

    #[test]
    fn zero_copies_is_an_invalid_plan() {
        let p = placement(vec![1, 0], vec![vec![0], vec![]]);
        assert!(matches!(gpu_loads(&[1, 1], &p), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn balancedness_examples() {
        assert_eq!(balancedness(&[4.0, 4.0, 4.0, 4.0]), 1.0);
        assert_eq!(balancedness(&[8.0, 4.0, 2.0, 2.0]), 0.5);
        assert_eq!(balancedness(&[1.0, 0.0, 0.0, 0.0]), 0.25);
        assert_eq!(balancedness(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn batch_average_is_not_balancedness_of_mean() {
        let trace = LoadTrace::from_nested(&[vec![vec![4, 0]], vec![vec![0, 4]]]).unwrap();
        let p = LayerPlacement::round_robin(2, 2);
        // each batch: [4,0] -> 0.5; mean loads [2,2] would give 1.0
        assert_eq!(replay_layer(&trace, 0, &p).unwrap(), 0.5);
    }

    #[test]
    fn identical_batches_replay_to_single_slice_value() {
        let slice = vec![5, 1, 3, 3];
        let trace = LoadTrace::from_nested(&vec![vec![slice.clone()]; 7]).unwrap();
        let p = LayerPlacement::round_robin(4, 2);
        let single = balancedness(&gpu_loads(&slice, &p).unwrap());
        assert!((replay_layer(&trace, 0, &p).unwrap() - single).abs() < 1e-15);
    }

    #[test]
    fn copying_max_expert_can_overload_the_receiver() {
        // GPU 1 is the least loaded but close behind; half of expert 0 lifts
        // it past the old peak.
        let slice = [10, 9, 1];
        let p = placement(vec![1, 1, 1], vec![vec![0], vec![1, 2]]);
        let before = balancedness(&gpu_loads(&slice, &p).unwrap());
        let q = placement(vec![2, 1, 1], vec![vec![0], vec![1, 2, 0]]);
        let after = balancedness(&gpu_loads(&slice, &q).unwrap());
        assert!(after < before);
    }

    #[test]
    fn csv_has_fixed_header_and_aggregate_row() {
        let r = BalancednessReport::from_columns(&[0.5, 1.0], &[0.75, 1.0]);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,baseline,plan,gain");
        assert_eq!(lines[1], "0,0.5,0.75,0.25");
        assert_eq!(lines[3], "aggregate,0.75,0.875,0.125");
    }

    proptest! {
        #[test]
        fn loads_are_conserved(slice in prop::collection::vec(0u64..1000, 1..12), d in 1usize..5) {
            let e = slice.len();
            let copies: Vec<usize> = (0..e).map(|i| 1 + i % d).collect();
            let slots: Vec<Vec<usize>> = (0..d)
                .map(|g| (0..e).filter(|&i| g < copies[i]).collect())
                .collect();
            let p = placement(copies, slots);
            let loads = gpu_loads(&slice, &p).unwrap();
            let total: u64 = slice.iter().sum();
            let sum: f64 = loads.iter().sum();
            prop_assert!((sum - total as f64).abs() <= 1e-9 * (total as f64).max(1.0));
            let b = balancedness(&loads);
            prop_assert!(b > 0.0 && b <= 1.0);
        }

        #[test]
        fn balancedness_is_scale_invariant(
            loads in prop::collection::vec(0u32..1000, 1..16),
            k in 1u32..50,
        ) {
            let a: Vec<f64> = loads.iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = loads.iter().map(|&x| (x * k) as f64).collect();
            prop_assert!((balancedness(&a) - balancedness(&b)).abs() < 1e-12);
        }

        #[test]
        fn copying_max_expert_to_min_gpu_never_hurts_below_max(
            raw in prop::collection::vec(1u64..100, 4..10),
            d in 2usize..5,
        ) {
            let e = raw.len();
            let p = LayerPlacement::round_robin(e, d);
            let before = gpu_loads(&raw, &p).unwrap();
            // unique max expert / unique min GPU, as the property requires
            let max_e = (0..e).max_by_key(|&i| raw[i]).unwrap();
            prop_assume!(raw.iter().filter(|&&x| x == raw[max_e]).count() == 1);
            let min_g = (0..d).min_by(|&a, &b| before[a].total_cmp(&before[b])).unwrap();
            prop_assume!(before.iter().filter(|&&x| x == before[min_g]).count() == 1);
            prop_assume!(!p.slots[min_g].contains(&max_e));
            // receiving half the hot load must not make min_g the new peak
            let peak = before.iter().copied().fold(0.0, f64::max);
            prop_assume!(before[min_g] + raw[max_e] as f64 / 2.0 <= peak);

            let mut q = p.clone();
            q.copy_counts[max_e] += 1;
            q.slots[min_g].push(max_e);
            let after = gpu_loads(&raw, &q).unwrap();
            prop_assert!(balancedness(&after) + 1e-12 >= balancedness(&before));
        }
    }
}
