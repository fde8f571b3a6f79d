//! One GRPO-shaped iteration: resharding, then generation, the three
//! inference passes and the update, all moving samples through a dock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ReshardChoice, ScenarioConfig};
use crate::costmodel::{throughput, CostError};
use crate::dock::{
    grpo_script, DockConfig, DockError, DockMode, EpochHook, EpochOptions, EpochRunner, Gate, TransferDock,
};
use crate::domain::{CoreError, ParallelLayout, RLConfig, WorkerStateId};
use crate::reshard::{execute, plan_reshard, ExecOptions, ReshardError, ReshardOutcome, ReshardReport};
use crate::simnet::{Location, Sim, SimError, Tag};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Dock(#[from] DockError),
    #[error(transparent)]
    Reshard(#[from] ReshardError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Coarse failure class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    OutOfMemory,
    Deadlock,
    Other,
}

fn sim_kind(e: &SimError) -> FailureKind {
    match e {
        SimError::OutOfMemory { .. } => FailureKind::OutOfMemory,
        _ => FailureKind::Other,
    }
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::Core(_) | PipelineError::Cost(_) => FailureKind::Config,
            PipelineError::Sim(e) => sim_kind(e),
            PipelineError::Dock(e) => match e {
                DockError::Deadlock { .. } => FailureKind::Deadlock,
                DockError::Sim(s) => sim_kind(s),
                DockError::Config(_) | DockError::Core(_) => FailureKind::Config,
                _ => FailureKind::Other,
            },
            PipelineError::Reshard(e) => match e {
                ReshardError::Sim(s) => sim_kind(s),
                _ => FailureKind::Config,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOptions {
    pub seed: u64,
    /// Bring update weights back from host memory once generation ends.
    pub restore: bool,
    /// Move real bytes through the reshard so checksums can be compared.
    pub content_seed: Option<u64>,
    pub randomize: bool,
}

impl IterationOptions {
    pub fn new(seed: u64) -> Self {
        IterationOptions { seed, restore: true, content_seed: None, randomize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpan {
    pub stage: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl StageSpan {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub per_device_peak_bytes: Vec<u64>,
    /// Occupancy while generation runs.
    pub per_device_generation_bytes: Vec<u64>,
    pub max_peak_bytes: u64,
    pub max_generation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: DockMode,
    pub reshard: ReshardChoice,
    pub rl: RLConfig,
    pub num_devices: u64,
    pub ete_s: f64,
    pub throughput_tps: f64,
    pub dispatch_time_s: f64,
    pub dispatch_fraction: f64,
    pub stages: Vec<StageSpan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restore: Option<StageSpan>,
    pub per_tag_bytes: BTreeMap<String, u64>,
    pub per_link_bytes: BTreeMap<String, u64>,
    pub max_link_bytes: u64,
    pub per_warehouse_bytes: Vec<u64>,
    pub per_warehouse_metadata_bytes: Vec<u64>,
    pub inter_node_messages: u64,
    pub peaks: PeakReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reshard_report: Option<ReshardReport>,
}

impl IterationReport {
    pub fn stage(&self, name: &str) -> Option<&StageSpan> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Reshard, generation, the longest inference pass and the update.
    pub fn critical_path_s(&self) -> f64 {
        let d = |n: &str| self.stage(n).map_or(0.0, StageSpan::duration);
        let inference = [WorkerStateId::ActorOldLogprob, WorkerStateId::ReferenceLogprob, WorkerStateId::RewardScore]
            .iter()
            .map(|s| d(&s.name()))
            .fold(0.0, f64::max);
        d("reshard") + d(&WorkerStateId::ActorGeneration.name()) + inference + d(&WorkerStateId::ActorUpdate.name())
    }
}

struct RestoreHook<'a> {
    outcome: Option<&'a mut ReshardOutcome>,
    enabled: bool,
    after_phase: usize,
    gate_phase: usize,
    started: Option<f64>,
    error: Option<ReshardError>,
}

impl EpochHook for RestoreHook<'_> {
    fn phase_finished(&mut self, phase: usize, sim: &mut Sim) -> Result<Option<Gate>, DockError> {
        if phase != self.after_phase || !self.enabled {
            return Ok(None);
        }
        let Some(out) = self.outcome.as_deref_mut() else { return Ok(None) };
        self.started = Some(sim.now());
        match out.start_restore(sim) {
            Ok(ids) => Ok(Some(Gate { before_phase: self.gate_phase, transfers: ids })),
            Err(e) => {
                let msg = e.to_string();
                self.error = Some(e);
                Err(DockError::Hook(msg))
            }
        }
    }
}

/// Runs one iteration of `scenario` on a fresh simulator.
pub fn run_iteration(scenario: &ScenarioConfig, opts: &IterationOptions) -> Result<(IterationReport, Sim), PipelineError> {
    scenario.validate()?;
    let cluster = &scenario.cluster;
    let world = cluster.world_size();
    let mut sim = Sim::new(cluster.clone());

    let mut stages = Vec::new();
    let mut outcome = match scenario.reshard.executor() {
        None => None,
        Some(ex) => {
            let plan = plan_reshard(
                &scenario.model,
                &scenario.layout_update,
                &scenario.layout_generation,
                world as u64,
                cluster.devices_per_node,
                ex,
            )?;
            let out = execute(&plan, &mut sim, &ExecOptions { content_seed: opts.content_seed, corrupt: None })?;
            stages.push(StageSpan { stage: "reshard".into(), start_s: out.report.start_s, end_s: out.report.end_s });
            Some(out)
        }
    };

    let mut script = grpo_script(&scenario.rl, false);
    for s in script.states() {
        script.set_compute(s, scenario.stages.get(s));
    }
    let phase_of = |s: WorkerStateId| script.phases.iter().position(|p| p.contains(&s)).expect("grpo phases");
    let (after_phase, gate_phase) = (phase_of(WorkerStateId::ActorGeneration), phase_of(WorkerStateId::ActorUpdate));
    let dock = TransferDock::build(&scenario.dock, cluster, &scenario.rl, &script.specs())?;
    let mut eopts = EpochOptions::new(&scenario.dock, cluster, &scenario.rl);
    eopts.seed = opts.seed;
    eopts.randomize = opts.randomize;
    let mut runner = EpochRunner::new(dock, script, eopts)?;
    let mut hook = RestoreHook {
        outcome: outcome.as_mut(),
        enabled: opts.restore,
        after_phase,
        gate_phase,
        started: None,
        error: None,
    };
    let epoch = match runner.run(&mut sim, &mut hook) {
        Ok(r) => r,
        Err(e) => return Err(hook.error.take().map_or(PipelineError::Dock(e), PipelineError::Reshard)),
    };
    let restore_start = hook.started;
    sim.run_until_idle()?;
    if let Some(out) = outcome.as_mut() {
        out.finish_restore(&mut sim)?;
    }
    stages.extend(epoch.stages.iter().map(|s| StageSpan { stage: s.state.name(), start_s: s.start_s, end_s: s.end_s }));

    let restore = restore_start.map(|start_s| {
        let end_s = sim
            .ledger()
            .log
            .iter()
            .filter(|r| r.tag == Tag::SwapH2d)
            .map(|r| r.completed_s)
            .fold(start_s, f64::max);
        StageSpan { stage: "restore".into(), start_s, end_s }
    });

    let ete = sim.now();
    let num_devices = world as u64;
    let tps = if ete > 0.0 { throughput(&scenario.rl, num_devices, ete)? } else { 0.0 };
    let dispatch = epoch.dispatch_time_s;
    let per_device_peak_bytes: Vec<u64> = (0..world).map(|d| sim.peak(Location::Device(d))).collect();
    let per_device_generation_bytes = outcome
        .as_ref()
        .map_or_else(|| vec![0; world as usize], |o| o.report.per_device_generation_bytes.clone());
    let report = IterationReport {
        schema_version: SCHEMA_VERSION,
        seed: opts.seed,
        mode: scenario.dock.mode,
        reshard: scenario.reshard,
        rl: scenario.rl,
        num_devices,
        ete_s: ete,
        throughput_tps: tps,
        dispatch_time_s: dispatch,
        dispatch_fraction: if ete > 0.0 { (dispatch / ete).clamp(0.0, 1.0) } else { 0.0 },
        stages,
        restore,
        per_tag_bytes: epoch.per_tag_bytes.clone(),
        per_link_bytes: sim.ledger().per_link.iter().map(|(l, b)| (l.to_string(), *b)).collect(),
        max_link_bytes: sim.ledger().max_link_bytes(),
        per_warehouse_bytes: epoch.per_warehouse_bytes.clone(),
        per_warehouse_metadata_bytes: epoch.per_warehouse_metadata_bytes.clone(),
        inter_node_messages: epoch.inter_node_messages,
        peaks: PeakReport {
            max_peak_bytes: per_device_peak_bytes.iter().copied().max().unwrap_or(0),
            max_generation_bytes: per_device_generation_bytes.iter().copied().max().unwrap_or(0),
            per_device_peak_bytes,
            per_device_generation_bytes,
        },
        reshard_report: outcome.map(|o| o.report),
    };
    Ok((report, sim))
}

/// The dock config a sweep uses at `nodes` nodes.
fn sweep_dock(base: &DockConfig, mode: DockMode, nodes: u32) -> DockConfig {
    let mut d = base.clone();
    d.mode = mode;
    d.warehouse_placement = None;
    d.controller_placement = None;
    d.worker_nodes = None;
    d.central_node = 0;
    d.num_warehouses = if mode == DockMode::TransferDock { nodes } else { 1 };
    d
}

/// `base` rescaled to `nodes` nodes with `per_node_prompts` prompts each and
/// no resharding.
pub fn scaled_scenario(base: &ScenarioConfig, mode: DockMode, nodes: u32, per_node_prompts: u64) -> ScenarioConfig {
    let mut s = base.clone();
    s.cluster.num_nodes = nodes;
    let world = s.cluster.world_size();
    s.layout_update = ParallelLayout::data_parallel(world);
    s.layout_generation = ParallelLayout::data_parallel(world);
    s.reshard = ReshardChoice::None;
    s.rl.global_batch = per_node_prompts * nodes as u64;
    s.dock = sweep_dock(&base.dock, mode, nodes);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityRow {
    pub mode: DockMode,
    pub nodes: u32,
    pub global_batch: u64,
    pub dispatch_time_s: f64,
    pub ete_s: f64,
    /// Per device.
    pub throughput_tps: f64,
    /// Aggregate throughput at this size over `nodes` times the one-node
    /// aggregate.
    pub linearity: f64,
    pub per_warehouse_bytes: Vec<u64>,
    /// Sample-flow plus metadata bytes.
    pub dispatch_bytes: u64,
    pub max_link_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub schema_version: u32,
    pub per_node_prompts: u64,
    pub rows: Vec<LinearityRow>,
}

impl LinearityReport {
    pub fn rows_for(&self, mode: DockMode) -> impl Iterator<Item = &LinearityRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }
}

/// Fixed per-node load over growing clusters, for both dock modes. Each point
/// runs as its own simulation on its own thread.
pub fn run_linearity(
    base: &ScenarioConfig,
    node_counts: &[u32],
    per_node_prompts: u64,
    seed: u64,
) -> Result<LinearityReport, PipelineError> {
    if node_counts.is_empty() || node_counts.windows(2).any(|w| w[0] >= w[1]) || node_counts[0] == 0 {
        return Err(CoreError::Invalid { what: "node counts", reason: format!("{node_counts:?} must be ascending and >= 1") }.into());
    }
    let mut counts = node_counts.to_vec();
    if counts[0] != 1 {
        counts.insert(0, 1);
    }
    let points: Vec<(DockMode, u32)> = [DockMode::Centralized, DockMode::TransferDock]
        .into_iter()
        .flat_map(|m| counts.iter().map(move |n| (m, *n)))
        .collect();
    let results: Vec<Result<IterationReport, PipelineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .iter()
            .map(|&(mode, nodes)| {
                let s = scaled_scenario(base, mode, nodes, per_node_prompts);
                scope.spawn(move || run_iteration(&s, &IterationOptions::new(seed)).map(|(r, _)| r))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
    });
    let mut rows = Vec::new();
    let mut single: BTreeMap<DockMode, f64> = BTreeMap::new();
    for (&(mode, nodes), r) in points.iter().zip(results) {
        let r = r?;
        let aggregate = r.throughput_tps * r.num_devices as f64;
        if nodes == 1 {
            single.insert(mode, aggregate);
        }
        if !node_counts.contains(&nodes) {
            continue;
        }
        let one = single[&mode];
        rows.push(LinearityRow {
            mode,
            nodes,
            global_batch: r.rl.global_batch,
            dispatch_time_s: r.dispatch_time_s,
            ete_s: r.ete_s,
            throughput_tps: r.throughput_tps,
            linearity: if one > 0.0 { aggregate / (nodes as f64 * one) } else { 0.0 },
            per_warehouse_bytes: r.per_warehouse_bytes.clone(),
            dispatch_bytes: r.per_tag_bytes.get(Tag::SampleFlow.name()).copied().unwrap_or(0)
                + r.per_tag_bytes.get(Tag::Metadata.name()).copied().unwrap_or(0),
            max_link_bytes: r.max_link_bytes,
        });
    }
    Ok(LinearityReport { schema_version: SCHEMA_VERSION, per_node_prompts, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEntry {
    pub mode: DockMode,
    pub reshard: ReshardChoice,
    pub dispatch_time_s: f64,
    pub ete_s: f64,
    pub throughput_tps: f64,
    pub max_link_bytes: u64,
    pub max_peak_bytes: u64,
    pub max_generation_bytes: u64,
    /// Sample-flow linearity of this dock mode at the scenario's node count;
    /// absent when prompts do not split evenly over nodes.
    pub linearity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub schema_version: u32,
    pub entries: Vec<ModeEntry>,
}

impl ModeComparison {
    pub fn entry(&self, mode: DockMode, reshard: ReshardChoice) -> Option<&ModeEntry> {
        self.entries.iter().find(|e| e.mode == mode && e.reshard == reshard)
    }
}

/// The scenario under both dock modes and both reshard executors.
pub fn compare_modes(scenario: &ScenarioConfig, seed: u64) -> Result<ModeComparison, PipelineError> {
    let nodes = scenario.cluster.num_nodes;
    let g = scenario.rl.global_batch;
    let linearity = if g.is_multiple_of(nodes as u64) {
        let counts: Vec<u32> = if nodes == 1 { vec![1] } else { vec![1, nodes] };
        let lin = run_linearity(scenario, &counts, g / nodes as u64, seed)?;
        let at = |m: DockMode| lin.rows_for(m).find(|r| r.nodes == nodes).map(|r| r.linearity);
        BTreeMap::from([(DockMode::Centralized, at(DockMode::Centralized)), (DockMode::TransferDock, at(DockMode::TransferDock))])
    } else {
        BTreeMap::new()
    };
    let mut entries = Vec::new();
    for mode in [DockMode::Centralized, DockMode::TransferDock] {
        for reshard in [ReshardChoice::Naive, ReshardChoice::AllgatherSwap] {
            let mut s = scenario.clone();
            s.dock = sweep_dock(&scenario.dock, mode, nodes);
            s.reshard = reshard;
            let (r, _) = run_iteration(&s, &IterationOptions::new(seed))?;
            entries.push(ModeEntry {
                mode,
                reshard,
                dispatch_time_s: r.dispatch_time_s,
                ete_s: r.ete_s,
                throughput_tps: r.throughput_tps,
                max_link_bytes: r.max_link_bytes,
                max_peak_bytes: r.peaks.max_peak_bytes,
                max_generation_bytes: r.peaks.max_generation_bytes,
                linearity: linearity.get(&mode).copied().flatten(),
            });
        }
    }
    Ok(ModeComparison { schema_version: SCHEMA_VERSION, entries })
}
