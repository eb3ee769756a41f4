//! Browser demo: generate a Zipfian trace, look at per-layer gain curves,
//! sweep the replication factor and inspect the placement of one plan.
//!
//! Every export returns a JSON string; `www/index.html` does the drawing.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use craft_core::metrics::{gpu_loads, replay_plan};
use craft_core::plan::{build_plan_detailed, uniform_allocation_plan};
use craft_core::{
    estimate_benefits, generate_zipfian, placement_only_plan, sweep, BenefitMatrix, LoadTrace,
    PlanConfig, ReplicationMode, ReplicationPlan, ZipfConfig,
};

#[derive(Debug, Clone, Deserialize)]
pub struct DemoConfig {
    pub layers: usize,
    pub experts: usize,
    pub batches: usize,
    pub zipf: f64,
    pub topk: usize,
    pub tokens: u64,
    pub seed: u64,
    pub gpus: usize,
    pub nodes: usize,
}

#[derive(Serialize)]
struct SweepRow {
    replication_factor: usize,
    replicas_used: usize,
    objective: f64,
    craft: f64,
    /// Same budget split evenly over layers, capped at one copy per GPU.
    uniform: f64,
    placement_only: f64,
}

#[derive(Serialize)]
struct LayerView {
    balancedness: f64,
    replicas: usize,
    /// Batch-summed token load per GPU.
    gpu_loads: Vec<f64>,
    slots: Vec<Vec<usize>>,
    copy_counts: Vec<usize>,
}

#[derive(Serialize)]
struct PlanView {
    replication_factor: usize,
    allocation: Vec<usize>,
    aggregate: f64,
    baseline: f64,
    layers: Vec<LayerView>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn aggregate(trace: &LoadTrace, plan: &ReplicationPlan) -> Result<f64, String> {
    replay_plan(trace, plan)
        .map(|v| mean(&v))
        .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    trace: LoadTrace,
    gpus: usize,
    nodes: usize,
    benefits: BenefitMatrix,
}

impl Demo {
    pub fn create(cfg: &DemoConfig) -> Result<Demo, String> {
        let trace = generate_zipfian(&ZipfConfig {
            layers: cfg.layers,
            experts: cfg.experts,
            batches: cfg.batches,
            exponent: cfg.zipf,
            tokens_per_batch: cfg.tokens,
            topk: cfg.topk,
            seed: cfg.seed,
        })
        .map_err(|e| e.to_string())?;
        let benefits = estimate_benefits(&trace, cfg.gpus, cfg.nodes).map_err(|e| e.to_string())?;
        Ok(Demo {
            trace,
            gpus: cfg.gpus,
            nodes: cfg.nodes,
            benefits,
        })
    }

    pub fn from_json(config: &str) -> Result<Demo, String> {
        let cfg: DemoConfig = serde_json::from_str(config).map_err(|e| e.to_string())?;
        Self::create(&cfg)
    }

    pub fn gains_json(&self) -> String {
        serde_json::to_string(&self.benefits).expect("benefit matrix serializes")
    }

    pub fn sweep_json(&self, factors: &[usize]) -> Result<String, String> {
        let (d, l) = (self.gpus, self.trace.layers());
        let s = sweep(&self.trace, d, self.nodes, factors).map_err(|e| e.to_string())?;
        let base = placement_only_plan(&self.trace, d, self.nodes).map_err(|e| e.to_string())?;
        let base = aggregate(&self.trace, &base)?;
        let mut rows = Vec::with_capacity(s.records.len());
        for rec in &s.records {
            let per_layer = (rec.replica_budget / l).min(d);
            let uni = uniform_allocation_plan(&self.trace, d, self.nodes, per_layer)
                .map_err(|e| e.to_string())?;
            rows.push(SweepRow {
                replication_factor: rec.replication_factor,
                replicas_used: rec.replicas_used,
                objective: rec.objective,
                craft: rec.aggregate_balancedness,
                uniform: aggregate(&self.trace, &uni)?,
                placement_only: base,
            });
        }
        serde_json::to_string(&rows).map_err(|e| e.to_string())
    }

    pub fn plan_json(&self, replication_factor: usize) -> Result<String, String> {
        let cfg = PlanConfig {
            gpus: self.gpus,
            nodes: self.nodes,
            mode: ReplicationMode::Manual(replication_factor),
            seed: 0,
        };
        let plan = build_plan_detailed(&self.trace, &cfg)
            .map_err(|e| e.to_string())?
            .plan;
        let per_layer = replay_plan(&self.trace, &plan).map_err(|e| e.to_string())?;
        let sums = self.trace.aggregate().map_err(|e| e.to_string())?;
        let layers = plan
            .layer_placements
            .iter()
            .enumerate()
            .map(|(l, p)| {
                Ok(LayerView {
                    balancedness: per_layer[l],
                    replicas: plan.allocation[l],
                    gpu_loads: gpu_loads(sums.layer(l), p).map_err(|e| e.to_string())?,
                    slots: p.slots.clone(),
                    copy_counts: p.copy_counts.clone(),
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let view = PlanView {
            replication_factor,
            allocation: plan.allocation.clone(),
            aggregate: mean(&per_layer),
            baseline: mean(&self.benefits.baseline),
            layers,
        };
        serde_json::to_string(&view).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl Demo {
    /// `config` is a JSON object with the fields of [`DemoConfig`].
    #[wasm_bindgen(constructor)]
    pub fn new(config: &str) -> Result<Demo, JsError> {
        Self::from_json(config).map_err(|e| JsError::new(&e))
    }

    /// Candidate replica counts, per-layer baseline and gain rows.
    pub fn gains(&self) -> String {
        self.gains_json()
    }

    /// One row per replication factor in `factors` (comma separated).
    pub fn sweep(&self, factors: &str) -> Result<String, JsError> {
        let parsed = factors
            .split(',')
            .map(|f| f.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| JsError::new(&format!("bad factor list: {e}")))?;
        self.sweep_json(&parsed).map_err(|e| JsError::new(&e))
    }

    /// Placement of every layer for the plan at `replication_factor`.
    pub fn plan(&self, replication_factor: usize) -> Result<String, JsError> {
        self.plan_json(replication_factor)
            .map_err(|e| JsError::new(&e))
    }
}
