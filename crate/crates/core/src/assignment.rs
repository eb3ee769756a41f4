//! Balanced intra-layer interleaved replica assignment: turns per-layer
//! replica counts into per-layer, per-GPU slot counts.
//!
//! Every layer first gets `x[l] / D` slots on each GPU. The `x[l] mod D`
//! leftover slots go to the GPUs with the fewest slots so far (across all
//! layers processed), and ties at the cutoff are broken by spreading the
//! picks evenly over the tied GPU ids. Row and column spreads both stay
//! within one slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityMatrix {
    /// `rows[l][g]`: slots for layer `l` on GPU `g`.
    pub rows: Vec<Vec<usize>>,
    /// Per-GPU totals over all layers.
    pub column_totals: Vec<usize>,
}

impl CapacityMatrix {
    pub fn layers(&self) -> usize {
        self.rows.len()
    }

    pub fn gpus(&self) -> usize {
        self.column_totals.len()
    }
}

/// The `rank`-th smallest value of `values`, 1-based, duplicates counted.
pub fn min_cutoff(values: &[usize], rank: usize) -> Result<usize> {
    if rank == 0 || rank > values.len() {
        return Err(Error::invalid(format!(
            "rank {rank} outside 1..={}",
            values.len()
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Ok(sorted[rank - 1])
}

/// Picks `k` entries of `indices` spread as evenly as possible, keeping both
/// endpoints when `k > 1`. Position `i` is `round(i·(n−1)/(k−1))`, rounding
/// halves up; a collision advances to the next unused position.
pub fn interleave_select(indices: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = indices.len();
    if k > n {
        return Err(Error::invalid(format!("cannot select {k} of {n} indices")));
    }
    match k {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![indices[0]]),
        _ => {}
    }
    let mut used = vec![false; n];
    let mut picked = Vec::with_capacity(k);
    for i in 0..k {
        // round-half-up of i(n-1)/(k-1) in integers
        let mut pos = (2 * i * (n - 1) + (k - 1)) / (2 * (k - 1));
        while used[pos] {
            pos = (pos + 1) % n;
        }
        used[pos] = true;
        picked.push(indices[pos]);
    }
    Ok(picked)
}

/// Assigns `replicas[l]` slots of every layer across `gpus` devices.
pub fn assign_capacities(replicas: &[usize], gpus: usize) -> Result<CapacityMatrix> {
    if gpus == 0 {
        return Err(Error::invalid("GPU count must be positive"));
    }
    let mut rows: Vec<Vec<usize>> = replicas.iter().map(|&x| vec![x / gpus; gpus]).collect();
    let mut totals = vec![replicas.iter().map(|&x| x / gpus).sum::<usize>(); gpus];

    for (row, &x) in rows.iter_mut().zip(replicas) {
        let rem = x % gpus;
        if rem == 0 {
            continue;
        }
        let cutoff = min_cutoff(&totals, rem)?;
        let mut selected: Vec<usize> = (0..gpus).filter(|&g| totals[g] < cutoff).collect();
        let missing = rem - selected.len();
        if missing > 0 {
            let tied: Vec<usize> = (0..gpus).filter(|&g| totals[g] == cutoff).collect();
            selected.extend(interleave_select(&tied, missing)?);
        }
        for g in selected {
            row[g] += 1;
            totals[g] += 1;
        }
    }

    Ok(CapacityMatrix {
        rows,
        column_totals: totals,
    })
}
