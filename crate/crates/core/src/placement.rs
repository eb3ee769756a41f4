//! Per-layer hot-expert replication and capacity-aware greedy placement.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expert-to-GPU mapping of a single MoE layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlacement {
    /// Copies per logical expert, base copy included.
    pub copy_counts: Vec<usize>,
    /// Logical expert ids hosted by each GPU, in placement order.
    pub slots: Vec<Vec<usize>>,
    /// Set when the distinct-expert constraint had to be relaxed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub duplicate_fallback: bool,
}

impl LayerPlacement {
    pub fn num_experts(&self) -> usize {
        self.copy_counts.len()
    }

    pub fn num_gpus(&self) -> usize {
        self.slots.len()
    }

    pub fn total_copies(&self) -> usize {
        self.copy_counts.iter().sum()
    }

    pub fn capacities(&self) -> Vec<usize> {
        self.slots.iter().map(Vec::len).collect()
    }

    /// GPUs hosting a copy of each expert, one entry per copy.
    pub fn hosts(&self) -> Vec<Vec<usize>> {
        let mut hosts = vec![Vec::new(); self.copy_counts.len()];
        for (g, slot) in self.slots.iter().enumerate() {
            for &e in slot {
                if let Some(h) = hosts.get_mut(e) {
                    h.push(g);
                }
            }
        }
        hosts
    }

    /// Placement with one copy per expert, experts dealt round-robin over
    /// `gpus` devices. Used for tests and as a trivially valid layout.
    pub fn round_robin(experts: usize, gpus: usize) -> Self {
        let mut slots = vec![Vec::new(); gpus];
        for e in 0..experts {
            slots[e % gpus].push(e);
        }
        Self {
            copy_counts: vec![1; experts],
            slots,
            duplicate_fallback: false,
        }
    }
}

/// Compares per-copy loads `a_load / a_copies` and `b_load / b_copies` exactly.
fn cmp_ratio(a_load: u64, a_copies: usize, b_load: u64, b_copies: usize) -> Ordering {
    (a_load as u128 * b_copies as u128).cmp(&(b_load as u128 * a_copies as u128))
}

/// Hands out `replicas` extra copies one at a time, each to the expert with
/// the highest current per-copy load (ties to the lower id).
///
/// Experts already holding `max_copies` copies are skipped while any other
/// expert is eligible; pass the GPU count so a hot expert never needs two
/// copies on one device.
pub fn replicate_hot(layer_loads: &[u64], replicas: usize, max_copies: usize) -> Vec<usize> {
    let mut copies = vec![1usize; layer_loads.len()];
    if layer_loads.is_empty() {
        return copies;
    }
    for _ in 0..replicas {
        let capped = copies.iter().all(|&c| c >= max_copies);
        let mut best: Option<usize> = None;
        for e in 0..layer_loads.len() {
            if !capped && copies[e] >= max_copies {
                continue;
            }
            best = match best {
                None => Some(e),
                Some(b) => {
                    if cmp_ratio(layer_loads[e], copies[e], layer_loads[b], copies[b])
                        == Ordering::Greater
                    {
                        Some(e)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        if let Some(b) = best {
            copies[b] += 1;
        }
    }
    copies
}

/// `node_of[g]` for GPUs laid out contiguously by node.
pub fn contiguous_nodes(gpus: usize, nodes: usize) -> Vec<usize> {
    let nodes = nodes.max(1);
    (0..gpus).map(|g| g * nodes / gpus.max(1)).collect()
}

struct Copy {
    expert: usize,
    index: usize,
    load: f64,
}

/// Greedy placement that refuses to co-locate two copies of one expert.
///
/// Copies are taken in descending per-copy load (ties: lower expert id, then
/// lower copy index) and each goes to the least-loaded GPU that still has a
/// free slot and does not host the same expert. Ties between GPUs go to the
/// least-loaded node, then the lowest GPU id.
pub fn greedy_place_strict(
    layer: usize,
    layer_loads: &[u64],
    copy_counts: &[usize],
    capacities: &[usize],
    node_of: &[usize],
) -> Result<LayerPlacement> {
    place(layer, layer_loads, copy_counts, capacities, node_of, false)
}

/// [`greedy_place_strict`], retrying with same-GPU duplicates allowed if the
/// strict pass is infeasible. The fallback is flagged on the result.
pub fn greedy_place(
    layer: usize,
    layer_loads: &[u64],
    copy_counts: &[usize],
    capacities: &[usize],
    node_of: &[usize],
) -> Result<LayerPlacement> {
    match place(layer, layer_loads, copy_counts, capacities, node_of, false) {
        Err(Error::PlacementInfeasible { .. }) => {
            let mut p = place(layer, layer_loads, copy_counts, capacities, node_of, true)?;
            p.duplicate_fallback = true;
            Ok(p)
        }
        other => other,
    }
}

fn place(
    layer: usize,
    layer_loads: &[u64],
    copy_counts: &[usize],
    capacities: &[usize],
    node_of: &[usize],
    allow_duplicates: bool,
) -> Result<LayerPlacement> {
    let experts = layer_loads.len();
    let gpus = capacities.len();
    if copy_counts.len() != experts {
        return Err(Error::invalid(format!(
            "layer {layer}: {} copy counts for {experts} experts",
            copy_counts.len()
        )));
    }
    if node_of.len() != gpus {
        return Err(Error::invalid(format!(
            "layer {layer}: node map covers {} GPUs, expected {gpus}",
            node_of.len()
        )));
    }
    if let Some(e) = copy_counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidPlan(format!(
            "layer {layer}: expert {e} has zero copies"
        )));
    }
    let total: usize = copy_counts.iter().sum();
    let slots_total: usize = capacities.iter().sum();
    if total != slots_total {
        return Err(Error::invalid(format!(
            "layer {layer}: {total} copies do not fill {slots_total} slots"
        )));
    }

    let mut copies: Vec<Copy> = Vec::with_capacity(total);
    for (e, (&load, &n)) in layer_loads.iter().zip(copy_counts).enumerate() {
        let share = load as f64 / n as f64;
        copies.extend((0..n).map(|index| Copy {
            expert: e,
            index,
            load: share,
        }));
    }
    copies.sort_by(|a, b| {
        b.load
            .total_cmp(&a.load)
            .then(a.expert.cmp(&b.expert))
            .then(a.index.cmp(&b.index))
    });

    let num_nodes = node_of.iter().copied().max().map_or(0, |n| n + 1);
    let mut gpu_load = vec![0.0f64; gpus];
    let mut node_load = vec![0.0f64; num_nodes];
    let mut slots: Vec<Vec<usize>> = capacities.iter().map(|&c| Vec::with_capacity(c)).collect();

    for copy in &copies {
        let target = (0..gpus)
            .filter(|&g| slots[g].len() < capacities[g])
            .filter(|&g| allow_duplicates || !slots[g].contains(&copy.expert))
            .min_by(|&a, &b| {
                gpu_load[a]
                    .total_cmp(&gpu_load[b])
                    .then(node_load[node_of[a]].total_cmp(&node_load[node_of[b]]))
                    .then(a.cmp(&b))
            })
            .ok_or(Error::PlacementInfeasible {
                layer,
                expert: copy.expert,
            })?;
        slots[target].push(copy.expert);
        gpu_load[target] += copy.load;
        node_load[node_of[target]] += copy.load;
    }

    Ok(LayerPlacement {
        copy_counts: copy_counts.to_vec(),
        slots,
        duplicate_fallback: false,
    })
}
