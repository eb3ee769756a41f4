use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use craft_core::plan::{build_plan_detailed, placement_only_plan, uniform_plan};
use craft_core::{
    compare_plans, estimate_benefits, evaluate_plan, generate_zipfian, load_trace, save_trace,
    sweep, validate_plan, AutoRMethod, LoadTrace, PlanConfig, ReplicationMode, ReplicationPlan,
    ZipfConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "craft",
    version,
    about = "Cost-aware expert replica planner for MoE serving"
)]
struct Cli {
    /// Worker threads for benefit estimation and placement (0 = one per core).
    #[arg(long, env = "CRAFT_THREADS", default_value_t = 0, global = true)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded Zipfian load trace (.crft binary or .json)
    GenTrace(GenTraceArgs),
    /// Estimate per-layer balancedness gains for each candidate replica count
    Estimate(EstimateArgs),
    /// Build a replication plan
    Plan(PlanArgs),
    /// Replay a plan against a trace
    Evaluate(EvaluateArgs),
    /// Replay two plans against a trace and compare them
    Compare(CompareArgs),
    /// Plan and replay at several replication factors
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct Cluster {
    /// Number of GPUs
    #[arg(long)]
    gpus: usize,
    /// Number of nodes; GPUs are split evenly and numbered node by node
    #[arg(long, default_value_t = 1)]
    nodes: usize,
}

#[derive(Args, Debug)]
struct Output {
    /// Output file (stdout if omitted)
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    experts: usize,
    #[arg(long)]
    batches: usize,
    /// Zipf exponent; 0 gives a uniform trace
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    /// Experts activated per token
    #[arg(long, default_value_t = 8)]
    topk: usize,
    /// Tokens per batch
    #[arg(long, default_value_t = 4096)]
    tokens: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file; the extension (.crft or .json) picks the format
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    trace: PathBuf,
    #[command(flatten)]
    cluster: Cluster,
    #[command(flatten)]
    out: Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    /// Benefit-driven allocation under an R·D replica budget
    Craft,
    /// One replica per layer per GPU (R = L)
    Uniform,
    /// No replicas, greedy placement only
    PlacementOnly,
}

#[derive(Args, Debug)]
struct PlanArgs {
    trace: PathBuf,
    #[command(flatten)]
    cluster: Cluster,
    #[arg(long, value_enum, default_value_t = Strategy::Craft)]
    strategy: Strategy,
    /// Replicas reserved per GPU
    #[arg(long, short = 'r', conflicts_with = "auto_r")]
    replication_factor: Option<usize>,
    /// Pick the replication factor with the best per-replica gain
    #[arg(long)]
    auto_r: bool,
    #[arg(long, value_enum, default_value_t = AutoMethod::Dp)]
    auto_r_method: AutoMethod,
    /// Recorded in the plan's provenance
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plan file (stdout if omitted)
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AutoMethod {
    /// Allocation objective per replica at each budget
    Dp,
    /// Mean gain per replica when every layer gets the same count
    Uniform,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    trace: PathBuf,
    plan: PathBuf,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct CompareArgs {
    trace: PathBuf,
    plan_a: PathBuf,
    plan_b: PathBuf,
    #[command(flatten)]
    out: Output,
}

#[derive(Args, Debug)]
struct SweepArgs {
    trace: PathBuf,
    #[command(flatten)]
    cluster: Cluster,
    /// Replicas per GPU to try, e.g. 0,1,2,4,8
    #[arg(long, value_delimiter = ',', required = true)]
    budgets: Vec<usize>,
    #[command(flatten)]
    out: Output,
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_trace(path: &Path) -> Result<LoadTrace> {
    load_trace(path).with_context(|| format!("reading trace {}", path.display()))
}

fn read_plan(path: &Path) -> Result<ReplicationPlan> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    let plan = ReplicationPlan::from_json(&text)
        .with_context(|| format!("parsing plan {}", path.display()))?;
    let problems = validate_plan(&plan);
    if let Some(v) = problems.first() {
        bail!(
            "plan {} is invalid ({} problems), first: {}",
            path.display(),
            problems.len(),
            v
        );
    }
    Ok(plan)
}

fn gen_trace(a: GenTraceArgs) -> Result<()> {
    let trace = generate_zipfian(&ZipfConfig {
        layers: a.layers,
        experts: a.experts,
        batches: a.batches,
        exponent: a.zipf,
        tokens_per_batch: a.tokens,
        topk: a.topk,
        seed: a.seed,
    })?;
    save_trace(&trace, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    eprintln!(
        "wrote {} ({} batches x {} layers x {} experts)",
        a.output.display(),
        a.batches,
        a.layers,
        a.experts
    );
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let t = estimate_benefits(&trace, a.cluster.gpus, a.cluster.nodes)?;
    let text = match a.out.format {
        Format::Csv => t.to_csv(),
        Format::Json => t.to_json()? + "\n",
    };
    emit(&text, a.out.output.as_deref())
}

fn plan(a: PlanArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let (gpus, nodes) = (a.cluster.gpus, a.cluster.nodes);
    let plan = match a.strategy {
        Strategy::Craft => {
            let mode = match (a.replication_factor, a.auto_r) {
                (Some(r), false) => ReplicationMode::Manual(r),
                (None, true) => ReplicationMode::Auto(match a.auto_r_method {
                    AutoMethod::Dp => AutoRMethod::DpObjective,
                    AutoMethod::Uniform => AutoRMethod::UniformCurve,
                }),
                _ => bail!("pass either --replication-factor R or --auto-r"),
            };
            let out = build_plan_detailed(
                &trace,
                &PlanConfig {
                    gpus,
                    nodes,
                    mode,
                    seed: a.seed,
                },
            )?;
            eprintln!(
                "R={} allocation={:?} replicas={}/{} objective={:.6}",
                out.plan.replication_factor,
                out.allocation.x,
                out.allocation.total(),
                out.plan.replication_factor * gpus,
                out.allocation.objective
            );
            out.plan
        }
        Strategy::Uniform => uniform_plan(&trace, gpus, nodes)?,
        Strategy::PlacementOnly => placement_only_plan(&trace, gpus, nodes)?,
    };
    emit(&plan.to_json()?, a.output.as_deref())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let plan = read_plan(&a.plan)?;
    let report = evaluate_plan(&trace, &plan)?;
    let text = match a.out.format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json()? + "\n",
    };
    emit(&text, a.out.output.as_deref())
}

fn compare(a: CompareArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let pa = read_plan(&a.plan_a)?;
    let pb = read_plan(&a.plan_b)?;
    let cmp = compare_plans(&trace, &pa, &pb)?;
    let text = match a.out.format {
        Format::Csv => cmp.to_csv(),
        Format::Json => cmp.to_json()? + "\n",
    };
    emit(&text, a.out.output.as_deref())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let s = sweep(&trace, a.cluster.gpus, a.cluster.nodes, &a.budgets)?;
    let text = match a.out.format {
        Format::Csv => s.to_csv(),
        Format::Json => s.to_json()? + "\n",
    };
    emit(&text, a.out.output.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Estimate(a) => estimate(a),
        Command::Plan(a) => plan(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("craft: {err:#}");
        std::process::exit(1);
    }
}
