//! Per-layer replication benefit estimation by trace replay.
//!
//! For each candidate replica count `r` (and `r = 0`), every layer is placed
//! from its batch-summed loads with `E + r` slots spread over the GPUs, then
//! every batch is replayed through that placement. The gain of `r` is the
//! batch-averaged balancedness minus the placement-only (`r = 0`) value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::replay_layer;
use crate::placement::{contiguous_nodes, greedy_place, replicate_hot, LayerPlacement};
use crate::trace::LoadTrace;

/// Gains of each candidate replica count, per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitMatrix {
    /// Strictly increasing positive replica counts.
    pub candidates: Vec<usize>,
    /// Placement-only balancedness per layer.
    pub baseline: Vec<f64>,
    /// `gains[l][k]`: balancedness gain of `candidates[k]` replicas in layer `l`.
    pub gains: Vec<Vec<f64>>,
}

impl BenefitMatrix {
    pub fn new(candidates: Vec<usize>, baseline: Vec<f64>, gains: Vec<Vec<f64>>) -> Result<Self> {
        if candidates.is_empty() || candidates[0] == 0 {
            return Err(Error::invalid("candidates must be non-empty and positive"));
        }
        if candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("candidates must be strictly increasing"));
        }
        if gains.len() != baseline.len() {
            return Err(Error::invalid("gains and baseline disagree on layer count"));
        }
        if gains.iter().any(|row| row.len() != candidates.len()) {
            return Err(Error::invalid(
                "every gains row needs one entry per candidate",
            ));
        }
        Ok(Self {
            candidates,
            baseline,
            gains,
        })
    }

    /// Matrix with a zero baseline; handy for allocator-only work.
    pub fn from_gains(candidates: Vec<usize>, gains: Vec<Vec<f64>>) -> Result<Self> {
        let baseline = vec![0.0; gains.len()];
        Self::new(candidates, baseline, gains)
    }

    pub fn layers(&self) -> usize {
        self.gains.len()
    }

    /// Gain of `replicas` in `layer`; `0` replicas gain nothing.
    pub fn gain(&self, layer: usize, replicas: usize) -> Option<f64> {
        if replicas == 0 {
            return Some(0.0);
        }
        let k = self.candidates.iter().position(|&c| c == replicas)?;
        Some(self.gains[layer][k])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `layer,baseline,gain_r1,gain_r2,...` with one row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,baseline");
        for r in &self.candidates {
            out.push_str(&format!(",gain_r{r}"));
        }
        out.push('\n');
        for (l, (b, row)) in self.baseline.iter().zip(&self.gains).enumerate() {
            out.push_str(&format!("{l},{b}"));
            for g in row {
                out.push_str(&format!(",{g}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Powers of two below `gpus`, followed by `gpus` itself.
pub fn candidate_counts(gpus: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 1usize;
    while p < gpus {
        out.push(p);
        p *= 2;
    }
    if gpus > 0 {
        out.push(gpus);
    }
    out
}

/// `slots` spread over `gpus` devices, remainder on the lowest ids.
pub fn even_capacities(slots: usize, gpus: usize) -> Vec<usize> {
    (0..gpus)
        .map(|g| slots / gpus + usize::from(g < slots % gpus))
        .collect()
}

/// Placement of one layer with `replicas` extra copies and estimation-time
/// capacities.
pub fn estimation_placement(
    layer: usize,
    layer_loads: &[u64],
    replicas: usize,
    gpus: usize,
    node_of: &[usize],
) -> Result<LayerPlacement> {
    let copies = replicate_hot(layer_loads, replicas, gpus);
    let capacities = even_capacities(layer_loads.len() + replicas, gpus);
    greedy_place(layer, layer_loads, &copies, &capacities, node_of)
}

pub(crate) fn check_cluster(gpus: usize, nodes: usize) -> Result<()> {
    if gpus == 0 || nodes == 0 {
        return Err(Error::invalid("GPU and node counts must be positive"));
    }
    if !gpus.is_multiple_of(nodes) {
        return Err(Error::invalid(format!(
            "{gpus} GPUs cannot be split evenly over {nodes} nodes"
        )));
    }
    Ok(())
}

/// Replayed balancedness of one layer for `0` and every candidate count.
fn layer_row(
    trace: &LoadTrace,
    layer: usize,
    loads: &[u64],
    candidates: &[usize],
    gpus: usize,
    node_of: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let base_placement = estimation_placement(layer, loads, 0, gpus, node_of)?;
    let base = replay_layer(trace, layer, &base_placement)?;
    let gains = candidates
        .iter()
        .map(|&r| {
            let p = estimation_placement(layer, loads, r, gpus, node_of)?;
            Ok(replay_layer(trace, layer, &p)? - base)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((base, gains))
}

pub fn estimate_benefits(trace: &LoadTrace, gpus: usize, nodes: usize) -> Result<BenefitMatrix> {
    check_cluster(gpus, nodes)?;
    let sums = trace.aggregate()?;
    let candidates = candidate_counts(gpus);
    let node_of = contiguous_nodes(gpus, nodes);

    let row = |l: usize| layer_row(trace, l, sums.layer(l), &candidates, gpus, &node_of);

    #[cfg(feature = "parallel")]
    let rows: Vec<Result<(f64, Vec<f64>)>> = {
        use rayon::prelude::*;
        (0..trace.layers()).into_par_iter().map(row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<(f64, Vec<f64>)>> = (0..trace.layers()).map(row).collect();

    let mut baseline = Vec::with_capacity(rows.len());
    let mut gains = Vec::with_capacity(rows.len());
    for r in rows {
        let (b, g) = r?;
        baseline.push(b);
        gains.push(g);
    }
    BenefitMatrix::new(candidates, baseline, gains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_zipfian, ZipfConfig};

    #[test]
    fn candidate_progression() {
        assert_eq!(candidate_counts(4), vec![1, 2, 4]);
        assert_eq!(candidate_counts(1), vec![1]);
        assert_eq!(candidate_counts(6), vec![1, 2, 4, 6]);
        assert_eq!(candidate_counts(64), vec![1, 2, 4, 8, 16, 32, 64]);
        for d in [2usize, 8, 16, 32, 128] {
            assert_eq!(candidate_counts(d).len(), d.trailing_zeros() as usize + 1);
        }
    }

    #[test]
    fn even_capacities_front_load_remainder() {
        assert_eq!(even_capacities(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(even_capacities(8, 4), vec![2; 4]);
    }

    #[test]
    fn uniform_layers_gain_nothing() {
        // 16 experts per GPU keeps the one-slot capacity skew of odd
        // candidates under 1/(2*16+1) of the peak.
        let trace = generate_zipfian(&ZipfConfig {
            layers: 4,
            experts: 64,
            batches: 32,
            exponent: 0.0,
            tokens_per_batch: 8192,
            topk: 8,
            seed: 5,
        })
        .unwrap();
        let t = estimate_benefits(&trace, 4, 2).unwrap();
        for row in &t.gains {
            assert!(row.iter().all(|g| g.abs() < 0.05), "{row:?}");
        }
    }

    #[test]
    fn capacity_skew_costs_a_half_copy() {
        // Exactly uniform loads, E=16, D=4. r=1 gives capacities [5,4,4,4]:
        // GPU 0 ends up with 4 full experts plus half the replicated one, so
        // balancedness is 4/4.5. At r=2 ([5,5,4,4]) an even split exists
        // (3 full + 2 halves on GPUs 0 and 1) but the greedy places full
        // copies first and lands on 4.5/4.5/3.5/3.5. r=4 is even.
        let trace = LoadTrace::from_nested(&vec![vec![vec![10u64; 16]]; 2]).unwrap();
        let t = estimate_benefits(&trace, 4, 2).unwrap();
        assert_eq!(t.baseline, vec![1.0]);
        let g = &t.gains[0];
        assert!((g[0] - (4.0 / 4.5 - 1.0)).abs() < 1e-12, "{g:?}");
        assert!((g[1] - g[0]).abs() < 1e-12, "{g:?}");
        assert!(g[2].abs() < 1e-12, "{g:?}");
    }

    #[test]
    fn single_hot_expert_curve_rises_then_flattens() {
        let trace = LoadTrace::from_nested(&[vec![vec![60, 1, 1, 1, 1, 1, 1, 1]]]).unwrap();
        let t = estimate_benefits(&trace, 4, 2).unwrap();
        assert_eq!(t.candidates, vec![1, 2, 4]);
        let g = &t.gains[0];
        assert!(g[1] > g[0], "{g:?}");
        assert!(g[1] - g[0] > g[2] - g[1], "{g:?}");
    }

    #[test]
    fn rejects_uneven_node_split() {
        let trace = LoadTrace::from_nested(&[vec![vec![1, 1, 1, 1]]]).unwrap();
        assert!(estimate_benefits(&trace, 4, 3).is_err());
    }

    #[test]
    fn gain_lookup() {
        let t = BenefitMatrix::from_gains(vec![1, 2], vec![vec![0.1, 0.3]]).unwrap();
        assert_eq!(t.gain(0, 0), Some(0.0));
        assert_eq!(t.gain(0, 2), Some(0.3));
        assert_eq!(t.gain(0, 3), None);
        assert_eq!(t.to_csv(), "layer,baseline,gain_r1,gain_r2\n0,0,0.1,0.3\n");
        assert!(BenefitMatrix::from_gains(vec![2, 1], vec![vec![0.0, 0.0]]).is_err());
    }
}
