//! `rldf`: cost tables, simulated iterations, reshard plans, scaling sweeps
//! and the acceptance suite.
//!
//! Exit codes: 0 success, 1 a tolerance or criterion failed, 2 bad
//! configuration or usage, 3 out of device or host memory, 4 deadlock,
//! 5 I/O failure, 6 any other simulation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rldf_core::config::{ReshardChoice, ScenarioConfig};
use rldf_core::costmodel::cost_rows;
use rldf_core::dock::DockMode;
use rldf_core::pipeline::{run_iteration, run_linearity, FailureKind, IterationOptions, IterationReport, PipelineError};
use rldf_core::presets::{
    display_agrees, is_thousands, preset, preset_names, ScenarioPreset, LINEARITY_NODES,
    LINEARITY_PROMPTS_PER_NODE, PUBLISHED_COST_TEXT,
};
use rldf_core::reshard::{compare_executors, plan_reshard, ExecOptions, Executor};
use rldf_core::units::GIB_F;
use rldf_core::verify::{run_suite, VerifyOptions};
use serde::Serialize;

const EXIT_TOLERANCE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_OOM: u8 = 3;
const EXIT_DEADLOCK: u8 = 4;
const EXIT_IO: u8 = 5;
const EXIT_OTHER: u8 = 6;

#[derive(Debug, Parser)]
#[command(name = "rldf", version, about = "Dataflow simulator for RL post-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ScenarioArgs {
    /// Scenario or preset JSON file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (see `rldf presets`).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form sample-flow volume and dispatch time for the six table rows.
    CostTable {
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Require thousands-rounded cells to match exactly.
        #[arg(long)]
        strict: bool,
    },
    /// Run one iteration and write its report, memory timeline and ledger.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<DockMode>,
        #[arg(long, value_parser = parse_reshard)]
        reshard: Option<ReshardChoice>,
        /// Overridden by RLDF_SEED.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep update weights on host after generation.
        #[arg(long)]
        no_restore: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the resharding step graph, optionally both executors' peaks.
    ReshardPlan {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "allgather-swap")]
        executor: Executor,
        /// Also run naive and allgather-swap and report memory deltas.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fixed per-node load over growing node counts, both dock modes.
    Linearity {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_values_t = LINEARITY_NODES)]
        nodes: Vec<u32>,
        #[arg(long, default_value_t = LINEARITY_PROMPTS_PER_NODE)]
        per_node_prompts: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the acceptance suite and print one line per criterion.
    Verify {
        /// Group (cost, dock, reshard, pipeline, determinism), id or name fragment.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Results as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, hide = true)]
        perturb_ledger: bool,
    },
    /// List presets, or print one as JSON.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e.kind() {
            FailureKind::Config => EXIT_CONFIG,
            FailureKind::OutOfMemory => EXIT_OOM,
            FailureKind::Deadlock => EXIT_DEADLOCK,
            FailureKind::Other => EXIT_OTHER,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn parse_mode(s: &str) -> Result<DockMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown mode {s:?}; use centralized or transferdock"))
}

fn parse_reshard(s: &str) -> Result<ReshardChoice, String> {
    s.parse()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

fn output_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn seed_override(seed: u64) -> Result<u64, Failure> {
    match std::env::var("RLDF_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Failure::new(EXIT_CONFIG, format!("RLDF_SEED={v:?} is not an integer"))),
        Err(_) => Ok(seed),
    }
}

/// Loads a scenario file (bare scenario or full preset) or a built-in preset.
fn load(args: &ScenarioArgs, fallback: Option<&str>) -> Result<ScenarioPreset, Failure> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        if let Ok(p) = serde_json::from_str::<ScenarioPreset>(&text) {
            return Ok(p);
        }
        let scenario = ScenarioConfig::from_json(&text)
            .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
        return Ok(ScenarioPreset {
            name: path.display().to_string(),
            description: String::new(),
            scenario,
            expected: vec![],
        });
    }
    let name = args.preset.as_deref().or(fallback).ok_or_else(|| Failure::new(EXIT_CONFIG, "give --config or --preset"))?;
    preset(name).ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown preset {name:?}; known: {}", preset_names().join(", "))))
}

fn cost_table(output: Option<PathBuf>, strict: bool) -> Outcome {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["row", "G", "N", "PL", "n", "SL", "M", "tcv_gib", "t100_s", "t1k_s", "printed_tcv", "printed_t100", "printed_t1k", "within"];
    w.write_record(header).expect("in-memory csv");
    let mut bad = Vec::new();
    for (i, row) in cost_rows().iter().enumerate() {
        let p = preset(&format!("cost_row{}_centralized", i + 1)).expect("table presets exist");
        let mut ok = true;
        for (j, (metric, got)) in
            [("tcv_gib", row.report.tcv_gb), ("t100_s", row.report.t100_s), ("t1k_s", row.report.t1k_s)].into_iter().enumerate()
        {
            let text = PUBLISHED_COST_TEXT[i][j];
            let e = p.expectation(metric).expect("table expectations exist");
            let cell_ok = if strict && is_thousands(text) {
                e.strict().holds(got)
            } else {
                e.holds(got) || display_agrees(text, got)
            };
            if !cell_ok {
                ok = false;
                bad.push(format!("row {} {metric} = {got:.3} vs printed {text}", i + 1));
            }
        }
        let rl = &row.rl;
        let mut rec: Vec<String> = [rl.global_batch, rl.responses_per_prompt, rl.prompt_len, rl.response_like_items, rl.response_len, rl.scalar_items]
            .iter()
            .map(u64::to_string)
            .collect();
        rec.insert(0, (i + 1).to_string());
        rec.extend([format!("{:.4}", row.report.tcv_gb), format!("{:.4}", row.report.t100_s), format!("{:.4}", row.report.t1k_s)]);
        rec.extend(PUBLISHED_COST_TEXT[i].iter().map(|s| s.to_string()));
        rec.push(ok.to_string());
        w.write_record(&rec).expect("in-memory csv");
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8");
    match &output {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_TOLERANCE, format!("outside tolerance: {}", bad.join("; "))))
    }
}

fn report_metric(r: &IterationReport, metric: &str) -> Option<f64> {
    Some(match metric {
        "ete_s" => r.ete_s,
        "dispatch_time_s" => r.dispatch_time_s,
        "throughput_tps" => r.throughput_tps,
        "max_warehouse_gib" => r.per_warehouse_bytes.iter().copied().max()? as f64 / GIB_F,
        "max_generation_bytes" => r.peaks.max_generation_bytes as f64,
        _ => return None,
    })
}

/// Checks a preset's expectations that one report can answer.
fn check_report(p: &ScenarioPreset, r: &IterationReport) -> Outcome {
    let mut bad = Vec::new();
    for e in &p.expected {
        if let Some(got) = report_metric(r, e.metric()) {
            let ok = e.holds(got);
            eprintln!("{}: {} -> {got}", if ok { "ok" } else { "FAIL" }, e.describe());
            if !ok {
                bad.push(e.describe());
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_TOLERANCE, format!("{}: {}", p.name, bad.join("; "))))
    }
}

fn simulate(
    args: ScenarioArgs,
    mode: Option<DockMode>,
    reshard: Option<ReshardChoice>,
    seed: u64,
    no_restore: bool,
    output: Option<PathBuf>,
) -> Outcome {
    let mut p = load(&args, None)?;
    let changed = mode.is_some_and(|m| m != p.scenario.dock.mode) || reshard.is_some_and(|r| r != p.scenario.reshard);
    if let Some(m) = mode {
        p.scenario.dock = p.scenario.dock.with_mode(m, p.scenario.cluster.num_nodes);
    }
    if let Some(r) = reshard {
        p.scenario.reshard = r;
    }
    let mut opts = IterationOptions::new(seed_override(seed)?);
    opts.restore = !no_restore;
    let (report, sim) = run_iteration(&p.scenario, &opts)?;
    match &output {
        Some(dir) => {
            output_dir(dir)?;
            write_file(&dir.join("report.json"), &to_json(&report))?;
            for (name, which) in [("timeline.csv", 0), ("ledger.csv", 1)] {
                let path = dir.join(name);
                let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
                let res = if which == 0 { sim.write_timeline_csv(f) } else { sim.write_ledger_csv(f) };
                res.map_err(|e| io_err(&path, e))?;
            }
        }
        None => print!("{}", to_json(&report)),
    }
    eprintln!(
        "ete {:.6}s, dispatch {:.6}s ({:.1}%), {:.1} tokens/s/device, generation-stage peak {:.3} GiB",
        report.ete_s,
        report.dispatch_time_s,
        100.0 * report.dispatch_fraction,
        report.throughput_tps,
        report.peaks.max_generation_bytes as f64 / GIB_F
    );
    if changed {
        Ok(())
    } else {
        check_report(&p, &report)
    }
}

fn reshard_plan(args: ScenarioArgs, executor: Executor, compare: bool, output: Option<PathBuf>) -> Outcome {
    let p = load(&args, None)?;
    let s = &p.scenario;
    s.validate().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let world = s.cluster.world_size() as u64;
    let plan = plan_reshard(&s.model, &s.layout_update, &s.layout_generation, world, s.cluster.devices_per_node, executor)
        .map_err(PipelineError::from)?;
    let text = if compare {
        let cmp = compare_executors(&s.model, &s.layout_update, &s.layout_generation, &s.cluster, &ExecOptions::default())
            .map_err(PipelineError::from)?;
        eprintln!(
            "naive minus allgather-swap, generation stage: {} B total, closed form {} B",
            cmp.total_delta_bytes, cmp.predicted_total_bytes
        );
        to_json(&serde_json::json!({ "plan": plan, "comparison": cmp }))
    } else {
        to_json(&plan)
    };
    eprintln!("{} steps, {} groups, {} pieces", plan.steps.len(), plan.groups.len(), plan.pieces.len());
    match &output {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn linearity(args: ScenarioArgs, nodes: Vec<u32>, per_node_prompts: u64, seed: u64, output: Option<PathBuf>) -> Outcome {
    let p = load(&args, Some("linearity_sweep"))?;
    let lin = run_linearity(&p.scenario, &nodes, per_node_prompts, seed_override(seed)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "nodes", "global_batch", "dispatch_time_s", "ete_s", "throughput_tps", "linearity", "max_warehouse_bytes", "dispatch_bytes"])
        .expect("in-memory csv");
    for r in &lin.rows {
        w.write_record([
            r.mode.to_string(),
            r.nodes.to_string(),
            r.global_batch.to_string(),
            format!("{:.9}", r.dispatch_time_s),
            format!("{:.9}", r.ete_s),
            format!("{:.3}", r.throughput_tps),
            format!("{:.6}", r.linearity),
            r.per_warehouse_bytes.iter().max().copied().unwrap_or(0).to_string(),
            r.dispatch_bytes.to_string(),
        ])
        .expect("in-memory csv");
    }
    let csv_text = String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8");
    match &output {
        Some(dir) => {
            output_dir(dir)?;
            write_file(&dir.join("linearity.json"), &to_json(&lin))?;
            write_file(&dir.join("linearity.csv"), &csv_text)?;
        }
        None => print!("{csv_text}"),
    }
    let growth = |m: DockMode| {
        let rows: Vec<_> = lin.rows_for(m).collect();
        rows.last().map(|l| l.dispatch_time_s / rows[0].dispatch_time_s)
    };
    let mut bad = Vec::new();
    for (metric, m) in [("transfer_dock_dispatch_growth", DockMode::TransferDock), ("centralized_dispatch_growth", DockMode::Centralized)] {
        if let (Some(e), Some(g)) = (p.expectation(metric), growth(m)) {
            eprintln!("{metric}: {g:.3} ({})", e.describe());
            if nodes.first() == Some(&1) && nodes.last() == Some(&8) && !e.holds(g) {
                bad.push(e.describe());
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_TOLERANCE, bad.join("; ")))
    }
}

fn verify(filter: Option<String>, seed: u64, output: Option<PathBuf>, perturb_ledger: bool) -> Outcome {
    let opts = VerifyOptions { filter, perturb_ledger, seed: seed_override(seed)? };
    let results = run_suite(&opts);
    if results.is_empty() {
        return Err(Failure::new(EXIT_CONFIG, "filter matches no criterion"));
    }
    for r in &results {
        println!("{}", r.line());
    }
    if let Some(path) = &output {
        write_file(path, &to_json(&results))?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("criterion {} ({})", r.id, r.name)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_TOLERANCE, format!("failed: {}", failed.join(", "))))
    }
}

fn presets(show: Option<String>) -> Outcome {
    match show {
        Some(name) => {
            let p = preset(&name).ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown preset {name:?}")))?;
            print!("{}", to_json(&p));
        }
        None => {
            for name in preset_names() {
                let p = preset(&name).expect("listed");
                println!("{name}\t{}", p.description);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CostTable { output, strict } => cost_table(output, strict),
        Command::Simulate { scenario, mode, reshard, seed, no_restore, output } => {
            simulate(scenario, mode, reshard, seed, no_restore, output)
        }
        Command::ReshardPlan { scenario, executor, compare, output } => reshard_plan(scenario, executor, compare, output),
        Command::Linearity { scenario, nodes, per_node_prompts, seed, output } => {
            linearity(scenario, nodes, per_node_prompts, seed, output)
        }
        Command::Verify { filter, seed, output, perturb_ledger } => verify(filter, seed, output, perturb_ledger),
        Command::Presets { show } => presets(show),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rldf: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
