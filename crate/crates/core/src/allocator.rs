//! Replica budget allocation across layers (a multiple-choice knapsack) and
//! automatic selection of the per-GPU replication factor.

use serde::{Deserialize, Serialize};

use crate::benefit::{candidate_counts, BenefitMatrix};

/// Per-layer replica counts chosen under a replica budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationVector {
    /// Replicas per layer, each `0` or one of the candidates.
    pub x: Vec<usize>,
    /// Replica budget the allocation was solved for.
    pub budget: usize,
    /// `Σ x[l] · gain(l, x[l])`, accumulated in layer order.
    pub objective: f64,
}

impl AllocationVector {
    pub fn total(&self) -> usize {
        self.x.iter().sum()
    }
}

/// Exact dynamic program over `(layer, replicas used)`.
///
/// Each layer either skips replication or takes one candidate count `r`,
/// worth `r · gain`. States only overwrite on strict improvement, so among
/// equal-valued options the earlier one (skip, then ascending `r`) is kept.
/// The answer is the best state over every total `≤ budget`, taking the
/// smallest total on ties. Runs in `O(L · budget · K)` time and space
/// `O(L · budget)`.
pub fn solve_allocation(benefits: &BenefitMatrix, budget: usize) -> AllocationVector {
    let layers = benefits.layers();
    let width = budget + 1;
    let mut dp = vec![f64::NEG_INFINITY; (layers + 1) * width];
    // 0 = skip; candidate counts are always positive
    let mut choice = vec![0usize; (layers + 1) * width];
    dp[0] = 0.0;

    for l in 1..=layers {
        let gains = &benefits.gains[l - 1];
        let (prev, cur) = dp.split_at_mut(l * width);
        let prev = &prev[(l - 1) * width..];
        let cur = &mut cur[..width];
        let pick = &mut choice[l * width..(l + 1) * width];
        for c in 0..width {
            cur[c] = prev[c];
            pick[c] = 0;
            for (&r, &g) in benefits.candidates.iter().zip(gains) {
                if c >= r && prev[c - r] > f64::NEG_INFINITY {
                    let cand = prev[c - r] + r as f64 * g;
                    if cand > cur[c] {
                        cur[c] = cand;
                        pick[c] = r;
                    }
                }
            }
        }
    }

    let last = &dp[layers * width..];
    let mut best_c = 0;
    for c in 1..width {
        if last[c] > last[best_c] {
            best_c = c;
        }
    }
    let objective = last[best_c];

    let mut x = vec![0usize; layers];
    let mut c = best_c;
    for l in (1..=layers).rev() {
        let r = choice[l * width + c];
        if r != 0 {
            x[l - 1] = r;
            c -= r;
        }
    }

    AllocationVector {
        x,
        budget,
        objective,
    }
}

/// How the automatic replication factor scores each candidate `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoRMethod {
    /// Allocation objective at budget `R·D`, divided by `R·D`.
    #[default]
    DpObjective,
    /// Mean layer gain of giving every layer `R` replicas, divided by `R`.
    UniformCurve,
}

/// Scores of every candidate `R`, in ascending `R`.
pub fn replication_factor_scores(
    benefits: &BenefitMatrix,
    gpus: usize,
    method: AutoRMethod,
) -> Vec<(usize, f64)> {
    match method {
        AutoRMethod::DpObjective => candidate_counts(gpus)
            .into_iter()
            .map(|r| {
                let budget = r * gpus;
                (
                    r,
                    solve_allocation(benefits, budget).objective / budget as f64,
                )
            })
            .collect(),
        AutoRMethod::UniformCurve => benefits
            .candidates
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                let layers = benefits.layers().max(1) as f64;
                let mean = benefits.gains.iter().map(|row| row[k]).sum::<f64>() / layers;
                (r, mean / r as f64)
            })
            .collect(),
    }
}

/// Scores closer than this count as tied.
const SCORE_TIE: f64 = 1e-12;

/// The candidate `R` with the highest per-replica gain; ties go to the
/// smaller `R`.
pub fn auto_replication_factor(
    benefits: &BenefitMatrix,
    gpus: usize,
    method: AutoRMethod,
) -> usize {
    let scores = replication_factor_scores(benefits, gpus, method);
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 + SCORE_TIE {
            best = s;
        }
    }
    best.0
}
