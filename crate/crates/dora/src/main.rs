//! Command-line pipeline driver: compile a workload into an instruction
//! stream, simulate it, and run scheduling experiments.

use clap::{Args, Parser, Subcommand, ValueEnum};
use dora::arch::ArchConfig;
use dora::isa::lower::{DataLayout, lower_schedule};
use dora::isa::{InstructionStream, disassemble};
use dora::perfmodel::{CandidateTable, build_candidate_table, export_table};
use dora::sched::exact::{Budget, export_lp, solve_exact};
use dora::sched::ga::{GaConfig, solve_ga};
use dora::sched::partition::solve_partitioned;
use dora::sched::{Schedule, SchedError, verify_schedule};
use dora::sim;
use dora::workload::{GeneratorSpec, WorkloadDag, generate_synthetic, load_workload, save_workload};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "dora", version, about = "Compile, schedule, and simulate DNN workloads on a configurable accelerator overlay")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the candidate table, schedule the DAG, and emit instructions.
    Compile(CompileArgs),
    /// Execute a compiled instruction stream.
    Simulate(SimulateArgs),
    /// Print a compiled instruction stream as text.
    Disasm(DisasmArgs),
    /// Check a schedule against its workload and candidate table.
    Verify(VerifyArgs),
    /// Generate a synthetic workload DAG.
    GenWorkload(GenArgs),
    /// Run a grid of (instance, engine) scheduling experiments to CSV.
    BenchDse(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engine {
    Exact,
    Ga,
}

#[derive(Args)]
struct CompileArgs {
    /// Workload DAG (JSON).
    #[arg(long)]
    workload: PathBuf,
    /// Architecture config (JSON); omitted = the 14 LMU / 6 MMU / 3 SFU default.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exact")]
    engine: Engine,
    /// Partition the DAG into this many barrier-separated segments.
    #[arg(long, default_value = "1")]
    segments: usize,
    /// Node budget for the exact solver (unlimited if absent).
    #[arg(long)]
    budget_nodes: Option<u64>,
    /// Wall-clock budget in milliseconds for the exact solver.
    #[arg(long)]
    budget_ms: Option<u64>,
    #[arg(long, default_value = "64")]
    ga_population: usize,
    #[arg(long, default_value = "200")]
    ga_generations: usize,
    /// Single seed for every random stage (the GA uses it directly).
    #[arg(long, default_value = "0")]
    seed: u64,
    /// Also write the scheduling problem in CPLEX LP format.
    #[arg(long)]
    emit_lp: bool,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Compiled instruction stream (binary).
    #[arg(long)]
    instrs: PathBuf,
    #[arg(long)]
    arch: Option<PathBuf>,
    /// DRAM layout (JSON) from `compile`; required for a functional run.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Skip functional execution and only measure cycles.
    #[arg(long)]
    timing_only: bool,
    /// Seed for the generated input tensors.
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DisasmArgs {
    #[arg(long)]
    instrs: PathBuf,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Candidate table JSON from `compile`.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long, default_value = "0.8")]
    chain_density: f64,
    #[arg(long, default_value = "0.2")]
    extra_edge_density: f64,
    #[arg(long, default_value = "32")]
    dim_min: u64,
    #[arg(long, default_value = "256")]
    dim_max: u64,
    #[arg(long, default_value = "32")]
    dim_multiple: u64,
    #[arg(long, default_value = "0.3")]
    fused_prob: f64,
    /// Force single-input layers with matching shapes so the result can be
    /// executed functionally end to end.
    #[arg(long)]
    shape_consistent: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment suite manifest (JSON).
    #[arg(long)]
    suite: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Error plumbing: exit 1 validation, 2 solver, 3 simulation.
// ---------------------------------------------------------------------------

enum CliError {
    Validation(String),
    Solver(String),
    Simulation(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Simulation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Solver(m) | CliError::Simulation(m) => m,
        }
    }
}

type CliResult = Result<(), CliError>;

fn validation<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Validation(format!("{stage}: {e}"))
}

fn solver<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Solver(format!("{stage}: {e}"))
}

fn simulation<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Simulation(format!("{stage}: {e}"))
}

fn load_arch(path: &Option<PathBuf>) -> Result<ArchConfig, CliError> {
    match path {
        Some(p) => ArchConfig::load(p).map_err(validation("arch")),
        None => Ok(ArchConfig::default_vck190()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>, stage: &str) -> CliResult {
    std::fs::write(path, bytes).map_err(validation(stage))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Utilization {
    lmu: f64,
    mmu: f64,
    sfu: f64,
}

#[derive(Serialize)]
struct CompileSummary {
    format_version: u32,
    makespan: u64,
    status: dora::sched::SolveStatus,
    wall_time_ms: f64,
    nodes_explored: u64,
    num_layers: usize,
    num_instructions: usize,
    utilization: Utilization,
}

fn class_utilization(schedule: &Schedule, cap: u32, pick: impl Fn(&dora::perfmodel::ResourceReq) -> u32) -> f64 {
    if schedule.makespan == 0 || cap == 0 {
        return 0.0;
    }
    let busy: u64 = schedule.entries.iter().map(|e| pick(&e.req) as u64 * (e.end - e.start)).sum();
    busy as f64 / (schedule.makespan as f64 * cap as f64)
}

fn solve(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    engine: Engine,
    segments: usize,
    budget: Budget,
    ga: &GaConfig,
) -> Result<Schedule, SchedError> {
    let single = |dag: &WorkloadDag, table: &CandidateTable, cfg: &ArchConfig| match engine {
        Engine::Exact => solve_exact(dag, table, cfg, budget),
        Engine::Ga => solve_ga(dag, table, cfg, ga).map(|r| r.schedule),
    };
    if segments > 1 {
        solve_partitioned(dag, table, cfg, segments, single)
    } else {
        single(dag, table, cfg)
    }
}

fn cmd_compile(args: &CompileArgs) -> CliResult {
    let dag = load_workload(&args.workload).map_err(validation("workload"))?;
    let cfg = load_arch(&args.arch)?;
    std::fs::create_dir_all(&args.out).map_err(validation("output dir"))?;

    let table = build_candidate_table(&dag, &cfg).map_err(solver("perfmodel"))?;
    write(&args.out.join("candidates.json"), export_table(&table), "candidates")?;

    let mut budget = Budget::default();
    if let Some(n) = args.budget_nodes {
        budget.max_nodes = n;
    }
    if let Some(ms) = args.budget_ms {
        budget.max_time = Some(Duration::from_millis(ms));
    }
    let ga = GaConfig {
        population: args.ga_population,
        generations: args.ga_generations,
        seed: args.seed,
        ..Default::default()
    };
    let schedule =
        solve(&dag, &table, &cfg, args.engine, args.segments, budget, &ga).map_err(solver("sched"))?;
    let violations = verify_schedule(&dag, &table, &cfg, &schedule);
    if !violations.is_empty() {
        return Err(CliError::Solver(format!(
            "sched: produced an invalid schedule: {}",
            violations[0]
        )));
    }
    schedule.save(args.out.join("schedule.json")).map_err(validation("schedule"))?;

    if args.emit_lp {
        let lp = export_lp(&dag, &table, &cfg).map_err(solver("sched"))?;
        write(&args.out.join("problem.lp"), lp, "lp export")?;
    }

    let (stream, layout) =
        lower_schedule(&dag, &table, &cfg, &schedule).map_err(solver("lowering"))?;
    stream.save(args.out.join("instrs.bin")).map_err(validation("instrs"))?;
    layout.save(args.out.join("layout.json")).map_err(validation("layout"))?;
    write(&args.out.join("disasm.txt"), disassemble(&stream), "disasm")?;

    let summary = CompileSummary {
        format_version: 1,
        makespan: schedule.makespan,
        status: schedule.meta.status,
        wall_time_ms: schedule.meta.wall_time_ms,
        nodes_explored: schedule.meta.nodes_explored,
        num_layers: dag.len(),
        num_instructions: stream.instructions.len(),
        utilization: Utilization {
            lmu: class_utilization(&schedule, cfg.num_lmu, |r| r.lmu),
            mmu: class_utilization(&schedule, cfg.num_mmu, |r| r.mmu),
            sfu: class_utilization(&schedule, cfg.num_sfu, |r| r.sfu),
        },
    };
    write(
        &args.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
        "summary",
    )?;
    println!(
        "compiled {} layers: makespan {} cycles ({:?}), {} instructions",
        dag.len(),
        schedule.makespan,
        schedule.meta.status,
        stream.instructions.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SimSummary {
    format_version: u32,
    cycles: u64,
    stall_cycles: u64,
    layer_spans: Vec<sim::LayerSpan>,
    /// FNV-1a checksums of every produced output region.
    checksums: std::collections::BTreeMap<String, String>,
}

fn cmd_simulate(args: &SimulateArgs) -> CliResult {
    let cfg = load_arch(&args.arch)?;
    let stream = InstructionStream::load(&args.instrs).map_err(simulation("decode"))?;
    std::fs::create_dir_all(&args.out).map_err(validation("output dir"))?;

    let result = if args.timing_only || args.layout.is_none() {
        sim::measure_latency(&stream, &cfg).map_err(simulation("sim"))?
    } else {
        let layout_path = args.layout.as_ref().unwrap();
        let text = std::fs::read_to_string(layout_path).map_err(validation("layout"))?;
        let layout: DataLayout = serde_json::from_str(&text).map_err(validation("layout"))?;
        let inputs = sim::seed_inputs(&layout, args.seed);
        sim::run(&stream, &cfg, &layout, &inputs).map_err(simulation("sim"))?
    };

    let summary = SimSummary {
        format_version: 1,
        cycles: result.cycles,
        stall_cycles: result.stall_cycles,
        layer_spans: result.layer_spans.clone(),
        checksums: result
            .outputs
            .iter()
            .map(|(name, m)| (name.clone(), format!("{:#018x}", m.checksum())))
            .collect(),
    };
    write(
        &args.out.join("sim_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
        "summary",
    )?;
    sim::write_trace_csv(&result, args.out.join("trace.csv")).map_err(validation("trace"))?;
    println!("simulated {} cycles ({} layers)", result.cycles, result.layer_spans.len());
    Ok(())
}

fn cmd_disasm(args: &DisasmArgs) -> CliResult {
    let stream = InstructionStream::load(&args.instrs).map_err(simulation("decode"))?;
    let text = disassemble(&stream);
    match &args.out {
        Some(p) => write(p, text, "disasm")?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CliResult {
    let dag = load_workload(&args.workload).map_err(validation("workload"))?;
    let cfg = load_arch(&args.arch)?;
    let text = std::fs::read_to_string(&args.candidates).map_err(validation("candidates"))?;
    let table: CandidateTable = serde_json::from_str(&text).map_err(validation("candidates"))?;
    let schedule = Schedule::load(&args.schedule).map_err(validation("schedule"))?;
    let violations = verify_schedule(&dag, &table, &cfg, &schedule);
    if violations.is_empty() {
        println!("schedule valid: {} entries, makespan {}", schedule.entries.len(), schedule.makespan);
        Ok(())
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        Err(CliError::Validation(format!("verify: {} violations", violations.len())))
    }
}

fn cmd_gen_workload(args: &GenArgs) -> CliResult {
    let spec = GeneratorSpec {
        num_layers: args.layers,
        chain_density: args.chain_density,
        extra_edge_density: args.extra_edge_density,
        seed: args.seed,
        dim_range: (args.dim_min, args.dim_max),
        dim_multiple: args.dim_multiple,
        fused_prob: args.fused_prob,
        shape_consistent: args.shape_consistent,
        ..Default::default()
    };
    let dag = generate_synthetic(&spec).map_err(validation("generator"))?;
    save_workload(&dag, &args.out).map_err(validation("generator"))?;
    println!("wrote {} layers, {} edges", dag.len(), dag.edges.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-dse
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct Suite {
    format_version: u32,
    #[serde(default)]
    arch: Option<PathBuf>,
    #[serde(default)]
    instances: Vec<SuiteInstance>,
    #[serde(default)]
    engines: Vec<SuiteEngine>,
}

#[derive(Deserialize)]
struct SuiteInstance {
    name: String,
    #[serde(default)]
    workload: Option<PathBuf>,
    #[serde(default)]
    generator: Option<GeneratorSpec>,
}

#[derive(Deserialize)]
struct SuiteEngine {
    name: String,
    engine: String,
    #[serde(default)]
    budget_nodes: Option<u64>,
    #[serde(default)]
    budget_ms: Option<u64>,
    #[serde(default)]
    segments: Option<usize>,
    #[serde(default)]
    ga: Option<GaConfig>,
}

fn cmd_bench_dse(args: &BenchArgs) -> CliResult {
    use rayon::prelude::*;
    let text = std::fs::read_to_string(&args.suite).map_err(validation("suite"))?;
    let suite: Suite = serde_json::from_str(&text).map_err(validation("suite"))?;
    if suite.format_version != 1 {
        return Err(CliError::Validation(format!(
            "suite: unsupported format_version {}",
            suite.format_version
        )));
    }
    let cfg = load_arch(&suite.arch)?;

    struct Prepared {
        name: String,
        dag: WorkloadDag,
        table: CandidateTable,
    }
    let mut prepared = Vec::new();
    for inst in &suite.instances {
        let dag = match (&inst.workload, &inst.generator) {
            (Some(p), None) => load_workload(p).map_err(validation("suite workload"))?,
            (None, Some(spec)) => generate_synthetic(spec).map_err(validation("suite generator"))?,
            _ => {
                return Err(CliError::Validation(format!(
                    "suite: instance `{}` needs exactly one of workload/generator",
                    inst.name
                )))
            }
        };
        let table = build_candidate_table(&dag, &cfg).map_err(solver("perfmodel"))?;
        prepared.push(Prepared { name: inst.name.clone(), dag, table });
    }

    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|i| (0..suite.engines.len()).map(move |e| (i, e)))
        .collect();
    let results: Vec<(usize, usize, Result<Schedule, String>)> = cells
        .par_iter()
        .map(|&(i, e)| {
            let p = &prepared[i];
            let eng = &suite.engines[e];
            let mut budget = Budget::default();
            if let Some(n) = eng.budget_nodes {
                budget.max_nodes = n;
            }
            if let Some(ms) = eng.budget_ms {
                budget.max_time = Some(Duration::from_millis(ms));
            }
            let engine = match eng.engine.as_str() {
                "exact" => Engine::Exact,
                "ga" => Engine::Ga,
                other => return (i, e, Err(format!("unknown engine `{other}`"))),
            };
            let ga = eng.ga.clone().unwrap_or_default();
            let r = solve(&p.dag, &p.table, &cfg, engine, eng.segments.unwrap_or(1), budget, &ga)
                .map_err(|err| err.to_string());
            (i, e, r)
        })
        .collect();

    // Reference optimum per instance, where some exact engine proved it.
    let mut optimum: Vec<Option<u64>> = vec![None; prepared.len()];
    for (i, _, r) in &results {
        if let Ok(s) = r {
            if s.meta.status == dora::sched::SolveStatus::Optimal {
                optimum[*i] = Some(optimum[*i].map_or(s.makespan, |o: u64| o.min(s.makespan)));
            }
        }
    }

    let mut w = csv::Writer::from_path(&args.out).map_err(validation("csv"))?;
    w.write_record(["instance", "engine", "segments", "budget", "makespan", "status", "wall_time_ms", "optimality_gap", "error"])
        .map_err(validation("csv"))?;
    for (i, e, r) in &results {
        let eng = &suite.engines[*e];
        let budget = eng
            .budget_nodes
            .map(|n| format!("{n}n"))
            .or(eng.budget_ms.map(|ms| format!("{ms}ms")))
            .unwrap_or_else(|| "none".into());
        let record = match r {
            Ok(s) => {
                let gap = optimum[*i]
                    .map(|o| format!("{:.4}", s.makespan as f64 / o as f64))
                    .unwrap_or_default();
                [
                    prepared[*i].name.clone(),
                    eng.name.clone(),
                    eng.segments.unwrap_or(1).to_string(),
                    budget,
                    s.makespan.to_string(),
                    format!("{:?}", s.meta.status).to_lowercase(),
                    format!("{:.1}", s.meta.wall_time_ms),
                    gap,
                    String::new(),
                ]
            }
            Err(msg) => [
                prepared[*i].name.clone(),
                eng.name.clone(),
                eng.segments.unwrap_or(1).to_string(),
                budget,
                String::new(),
                "error".into(),
                String::new(),
                String::new(),
                msg.clone(),
            ],
        };
        w.write_record(&record).map_err(validation("csv"))?;
    }
    w.flush().map_err(validation("csv"))?;
    println!("wrote {} result rows", results.len());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Compile(a) => cmd_compile(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Disasm(a) => cmd_disasm(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::GenWorkload(a) => cmd_gen_workload(a),
        Cmd::BenchDse(a) => cmd_bench_dse(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message());
        std::process::exit(e.code());
    }
}
