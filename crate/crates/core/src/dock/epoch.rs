use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DockConfig, DockError, DockMode, OpId, Payload, StateSpec, TransferDock};
use crate::domain::{make_sample, ClusterSpec, RLConfig, WorkerStateId};
use crate::simnet::{Event, Sim, Tag, TransferId};

/// Synthetic compute time of one batch: `fixed_s + per_token_s * tokens / world`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComputeModel {
    #[serde(default)]
    pub fixed_s: f64,
    #[serde(default)]
    pub per_token_s: f64,
}

impl ComputeModel {
    pub fn duration(&self, tokens: u64, world: u32) -> f64 {
        self.fixed_s + self.per_token_s * tokens as f64 / world.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutPayload {
    /// Bytes per record; zero sends only the descriptor.
    Virtual(u64),
    /// Deterministic full sample records.
    Records,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchPayload {
    Virtual(u64),
    /// Whatever the producers stored.
    Stored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageScript {
    pub state: WorkerStateId,
    pub prerequisites: Vec<WorkerStateId>,
    pub fetch: FetchPayload,
    pub put: Option<PutPayload>,
    pub compute: ComputeModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochScript {
    pub stages: Vec<StageScript>,
    /// Groups of states that run together; later groups wait for earlier ones
    /// when barriers are on.
    pub phases: Vec<Vec<WorkerStateId>>,
}

impl EpochScript {
    pub fn specs(&self) -> Vec<StateSpec> {
        self.stages
            .iter()
            .map(|s| StateSpec { state: s.state, prerequisites: s.prerequisites.clone(), produces: s.put.is_some() })
            .collect()
    }

    pub fn states(&self) -> Vec<WorkerStateId> {
        self.stages.iter().map(|s| s.state).collect()
    }

    pub fn set_compute(&mut self, state: WorkerStateId, model: ComputeModel) {
        for s in self.stages.iter_mut().filter(|s| s.state == state) {
            s.compute = model;
        }
    }

    pub fn without(mut self, state: WorkerStateId) -> Self {
        self.stages.retain(|s| s.state != state);
        for p in &mut self.phases {
            p.retain(|s| *s != state);
        }
        self.phases.retain(|p| !p.is_empty());
        self
    }
}

/// The GRPO sample flow. Generation stores the prompt plus `n` response-like
/// items; the three inference states each fetch their share of the items and
/// put a descriptor; the update fetches everything.
pub fn grpo_script(rl: &RLConfig, real_records: bool) -> EpochScript {
    use WorkerStateId::*;
    let b = rl.dtype_bytes;
    let n = rl.response_like_items;
    let flow = b * (rl.prompt_len + n * rl.response_len);
    let share = |k: u64| b * rl.response_len * ((n + 2 - k) / 3);
    let inference = [ActorOldLogprob, ReferenceLogprob, RewardScore];
    let mut stages = vec![StageScript {
        state: ActorGeneration,
        prerequisites: vec![],
        fetch: FetchPayload::Virtual(0),
        put: Some(if real_records { PutPayload::Records } else { PutPayload::Virtual(flow) }),
        compute: ComputeModel::default(),
    }];
    for (k, s) in inference.iter().enumerate() {
        stages.push(StageScript {
            state: *s,
            prerequisites: vec![ActorGeneration],
            fetch: FetchPayload::Virtual(share(k as u64)),
            put: Some(PutPayload::Virtual(0)),
            compute: ComputeModel::default(),
        });
    }
    stages.push(StageScript {
        state: ActorUpdate,
        prerequisites: vec![ActorGeneration, ActorOldLogprob, ReferenceLogprob, RewardScore],
        fetch: if real_records { FetchPayload::Stored } else { FetchPayload::Virtual(flow) },
        put: None,
        compute: ComputeModel::default(),
    });
    EpochScript { stages, phases: vec![vec![ActorGeneration], inference.to_vec(), vec![ActorUpdate]] }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOptions {
    pub seed: u64,
    /// Shuffle driver order and batch sizes.
    pub randomize: bool,
    /// Upper bound of the random delay added to dock transfers.
    pub jitter_s: f64,
    pub batch_size: usize,
    /// Devices the compute model divides tokens over.
    pub world: u32,
    pub replicas_per_state: u32,
    pub barriers: bool,
}

impl EpochOptions {
    pub fn new(dock: &DockConfig, cluster: &ClusterSpec, rl: &RLConfig) -> Self {
        let records = rl.global_batch.saturating_mul(rl.responses_per_prompt);
        let batch = match dock.batch_fetch_size {
            Some(b) => b as usize,
            None => records.div_ceil(cluster.world_size().max(1) as u64) as usize,
        };
        EpochOptions {
            seed: 0,
            randomize: false,
            jitter_s: 0.0,
            batch_size: batch.max(1),
            world: cluster.world_size(),
            replicas_per_state: dock.replicas_per_state.max(1),
            barriers: dock.barriers,
        }
    }
}

/// Transfers that must complete before a later phase may open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    pub before_phase: usize,
    pub transfers: Vec<TransferId>,
}

/// Lets a caller act between phases.
pub trait EpochHook {
    /// Called once phase `phase` has finished.
    fn phase_finished(&mut self, _phase: usize, _sim: &mut Sim) -> Result<Option<Gate>, DockError> {
        Ok(None)
    }
}

pub struct NoHook;

impl EpochHook for NoHook {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub state: WorkerStateId,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub mode: DockMode,
    #[serde(rename = "S")]
    pub num_warehouses: usize,
    #[serde(rename = "C")]
    pub num_controllers: usize,
    pub records: u64,
    pub dispatch_time_s: f64,
    pub end_time_s: f64,
    pub per_tag_bytes: BTreeMap<String, u64>,
    pub per_warehouse_bytes: Vec<u64>,
    pub per_warehouse_metadata_bytes: Vec<u64>,
    /// Inter-node metadata request messages.
    pub inter_node_messages: u64,
    pub request_messages: u64,
    pub claim_messages: u64,
    pub inter_node_claim_messages: u64,
    pub broadcast_messages: u64,
    pub stages: Vec<StageTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Idle,
    Fetching,
    Computing,
    Putting,
    Committing,
    Done,
}

struct Driver {
    stage: usize,
    node: u32,
    step: Step,
    batch: Vec<u64>,
    pending: BTreeSet<OpId>,
}

/// Drives one epoch of a script over a dock. Drivers are interleaved by a
/// seeded scheduler; each driver loops request -> fetch -> compute -> put ->
/// commit until its state has nothing left to claim.
pub struct EpochRunner {
    dock: TransferDock,
    script: EpochScript,
    opts: EpochOptions,
    rng: ChaCha8Rng,
    drivers: Vec<Driver>,
    phase_of: Vec<usize>,
    open: Vec<bool>,
    finished_phase: Vec<bool>,
    gates: BTreeMap<usize, BTreeSet<TransferId>>,
    cursor: Vec<u64>,
    op_owner: HashMap<OpId, usize>,
    stage_start: Vec<Option<f64>>,
    stage_end: Vec<Option<f64>>,
}

impl EpochRunner {
    pub fn new(dock: TransferDock, script: EpochScript, opts: EpochOptions) -> Result<Self, DockError> {
        let mut phase_of = Vec::with_capacity(script.stages.len());
        for st in &script.stages {
            let p = script
                .phases
                .iter()
                .position(|p| p.contains(&st.state))
                .ok_or_else(|| DockError::Config(format!("state {} is in no phase", st.state)))?;
            phase_of.push(p);
        }
        let mut drivers = Vec::new();
        for (i, st) in script.stages.iter().enumerate() {
            for r in 0..opts.replicas_per_state.max(1) {
                drivers.push(Driver {
                    stage: i,
                    node: dock.driver_node(st.state, r)?,
                    step: Step::Idle,
                    batch: vec![],
                    pending: BTreeSet::new(),
                });
            }
        }
        let phases = script.phases.len();
        let stages = script.stages.len();
        Ok(EpochRunner {
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            cursor: vec![0; stages],
            stage_start: vec![None; stages],
            stage_end: vec![None; stages],
            open: vec![false; phases],
            finished_phase: vec![false; phases],
            gates: BTreeMap::new(),
            op_owner: HashMap::new(),
            dock,
            script,
            opts,
            drivers,
            phase_of,
        })
    }

    pub fn dock(&self) -> &TransferDock {
        &self.dock
    }

    pub fn into_dock(self) -> TransferDock {
        self.dock
    }

    fn open_phase(&mut self, p: usize, now: f64) {
        self.open[p] = true;
        for (i, ph) in self.phase_of.iter().enumerate() {
            if *ph == p && self.stage_start[i].is_none() {
                self.stage_start[i] = Some(now);
            }
        }
    }

    fn batch_len(&mut self) -> usize {
        if self.opts.randomize {
            self.rng.random_range(1..=self.opts.batch_size)
        } else {
            self.opts.batch_size
        }
    }

    fn track(&mut self, d: usize, op: Option<OpId>) {
        if let Some(op) = op {
            self.drivers[d].pending.insert(op);
            self.op_owner.insert(op, d);
        }
    }

    fn by_executor(&self, batch: &[u64]) -> BTreeMap<u32, Vec<u64>> {
        let mut g: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for &i in batch {
            g.entry(self.dock.executor_node(i)).or_default().push(i);
        }
        g
    }

    fn begin_compute(&mut self, sim: &mut Sim, d: usize) -> Result<(), DockError> {
        let st = &self.script.stages[self.drivers[d].stage];
        let tokens = self.drivers[d].batch.len() as u64 * self.dock.rl.tokens_per_record();
        let delay = st.compute.duration(tokens, self.opts.world);
        sim.schedule_timer(delay, d as u64)?;
        self.drivers[d].step = Step::Computing;
        Ok(())
    }

    /// Tries to start a new batch on an idle driver. Returns true if the
    /// driver changed step.
    fn try_start(&mut self, sim: &mut Sim, d: usize) -> Result<bool, DockError> {
        let stage = self.drivers[d].stage;
        let st = self.script.stages[stage].clone();
        let k = self.batch_len();
        if st.prerequisites.is_empty() {
            let start = self.cursor[stage];
            let end = (start + k as u64).min(self.dock.records());
            if start == end {
                self.drivers[d].step = Step::Done;
                return Ok(true);
            }
            self.cursor[stage] = end;
            self.drivers[d].batch = (start..end).collect();
            self.begin_compute(sim, d)?;
            return Ok(true);
        }
        let granted = self.dock.request_metadata(st.state, k, self.drivers[d].node)?;
        if granted.is_empty() {
            if self.dock.unclaimed(st.state)? == 0 {
                self.drivers[d].step = Step::Done;
                return Ok(true);
            }
            return Ok(false);
        }
        let batch: Vec<u64> = granted.iter().map(|m| m.index).collect();
        self.drivers[d].batch = batch.clone();
        let bytes = match st.fetch {
            FetchPayload::Virtual(b) => Some(b),
            FetchPayload::Stored => None,
        };
        let dock = &self.dock;
        let exec: Vec<(u64, u32)> = batch.iter().map(|i| (*i, dock.executor_node(*i))).collect();
        let dest = move |i: u64| exec.iter().find(|(j, _)| *j == i).map_or(0, |(_, n)| *n);
        let op = if bytes == Some(0) { None } else { self.dock.fetch(sim, st.state, &batch, &dest, bytes)? };
        match op {
            Some(_) => {
                self.track(d, op);
                self.drivers[d].step = Step::Fetching;
            }
            None => self.begin_compute(sim, d)?,
        }
        Ok(true)
    }

    fn after_compute(&mut self, sim: &mut Sim, d: usize) -> Result<(), DockError> {
        let st = self.script.stages[self.drivers[d].stage].clone();
        let batch = self.drivers[d].batch.clone();
        match st.put {
            Some(kind) => {
                for (node, idx) in self.by_executor(&batch) {
                    let items = idx
                        .into_iter()
                        .map(|i| {
                            let p = match kind {
                                PutPayload::Virtual(b) => Payload::Virtual(b),
                                PutPayload::Records => Payload::Record(Arc::new(make_sample(self.opts.seed, i, &self.dock.rl)?)),
                            };
                            Ok((i, p))
                        })
                        .collect::<Result<Vec<_>, DockError>>()?;
                    let op = self.dock.put(sim, st.state, node, items)?;
                    self.track(d, op);
                }
                self.drivers[d].step = Step::Putting;
            }
            None => {
                self.commit(sim, d)?;
                return Ok(());
            }
        }
        if self.drivers[d].pending.is_empty() {
            self.after_put(sim, d)?;
        }
        Ok(())
    }

    fn commit(&mut self, sim: &mut Sim, d: usize) -> Result<(), DockError> {
        let state = self.script.stages[self.drivers[d].stage].state;
        let batch = self.drivers[d].batch.clone();
        for (node, idx) in self.by_executor(&batch) {
            let op = self.dock.commit(sim, state, node, &idx)?;
            self.track(d, op);
        }
        self.drivers[d].step = Step::Committing;
        if self.drivers[d].pending.is_empty() {
            self.drivers[d].step = Step::Idle;
        }
        Ok(())
    }

    fn after_put(&mut self, sim: &mut Sim, d: usize) -> Result<(), DockError> {
        if self.script.stages[self.drivers[d].stage].prerequisites.is_empty() {
            self.drivers[d].step = Step::Idle;
            Ok(())
        } else {
            self.commit(sim, d)
        }
    }

    fn op_done(&mut self, sim: &mut Sim, op: OpId) -> Result<(), DockError> {
        let Some(d) = self.op_owner.remove(&op) else { return Ok(()) };
        self.drivers[d].pending.remove(&op);
        if !self.drivers[d].pending.is_empty() {
            return Ok(());
        }
        match self.drivers[d].step {
            Step::Fetching => self.begin_compute(sim, d),
            Step::Putting => self.after_put(sim, d),
            Step::Committing => {
                self.drivers[d].step = Step::Idle;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Starts idle drivers and opens phases until nothing changes.
    fn pump(&mut self, sim: &mut Sim, hook: &mut dyn EpochHook) -> Result<(), DockError> {
        loop {
            let mut order: Vec<usize> = (0..self.drivers.len())
                .filter(|d| self.drivers[*d].step == Step::Idle && self.open[self.phase_of[self.drivers[*d].stage]])
                .collect();
            if self.opts.randomize {
                order.shuffle(&mut self.rng);
            }
            let mut changed = false;
            for d in order {
                changed |= self.try_start(sim, d)?;
            }
            changed |= self.advance_phases(sim, hook)?;
            if !changed {
                return Ok(());
            }
        }
    }

    fn advance_phases(&mut self, sim: &mut Sim, hook: &mut dyn EpochHook) -> Result<bool, DockError> {
        let now = sim.now();
        let mut changed = false;
        for (i, end) in self.stage_end.iter_mut().enumerate() {
            if end.is_none() && self.drivers.iter().filter(|d| d.stage == i).all(|d| d.step == Step::Done) {
                *end = Some(now);
            }
        }
        for p in 0..self.open.len() {
            if self.open[p] && !self.finished_phase[p] {
                let done = self.phase_of.iter().enumerate().filter(|(_, ph)| **ph == p).all(|(i, _)| self.stage_end[i].is_some());
                if done {
                    self.finished_phase[p] = true;
                    if let Some(gate) = hook.phase_finished(p, sim)? {
                        if self.opts.barriers {
                            self.gates.entry(gate.before_phase).or_default().extend(gate.transfers);
                        }
                    }
                    changed = true;
                }
            }
        }
        if self.opts.barriers {
            if let Some(p) = self.open.iter().position(|o| !o) {
                let gated = self.gates.get(&p).is_some_and(|g| !g.is_empty());
                if (p == 0 || self.finished_phase[p - 1]) && !gated {
                    self.open_phase(p, now);
                    changed = true;
                }
            }
        }
        Ok(changed)
    }

    /// Runs the epoch to completion.
    pub fn run(&mut self, sim: &mut Sim, hook: &mut dyn EpochHook) -> Result<EpochReport, DockError> {
        if self.opts.jitter_s > 0.0 {
            self.dock.set_jitter(self.opts.seed ^ 0x9e37_79b9_7f4a_7c15, self.opts.jitter_s);
        }
        let now = sim.now();
        if self.opts.barriers {
            if !self.open.is_empty() {
                self.open_phase(0, now);
            }
        } else {
            for p in 0..self.open.len() {
                self.open_phase(p, now);
            }
        }
        self.pump(sim, hook)?;
        while let Some(ev) = sim.next_event()? {
            match &ev {
                Event::TransferDone { id, .. } => {
                    for g in self.gates.values_mut() {
                        g.remove(id);
                    }
                    let progress = self.dock.on_transfer_complete(sim, &ev)?;
                    for op in progress.completed {
                        self.op_done(sim, op)?;
                    }
                }
                Event::Timer { token, .. } => {
                    let d = *token as usize;
                    if self.drivers.get(d).is_some_and(|x| x.step == Step::Computing) {
                        self.after_compute(sim, d)?;
                    }
                }
            }
            self.pump(sim, hook)?;
        }
        let states = self.script.states();
        if self.drivers.iter().any(|d| d.step != Step::Done) || self.finished_phase.iter().any(|f| !f) {
            return Err(DockError::Deadlock { stuck: self.dock.unfinished(&states) });
        }
        self.dock.audit(&states)?;
        Ok(self.report(sim))
    }

    fn report(&self, sim: &Sim) -> EpochReport {
        let c = self.dock.counters();
        EpochReport {
            mode: self.dock.mode(),
            num_warehouses: self.dock.num_warehouses(),
            num_controllers: self.dock.num_controllers(),
            records: self.dock.records(),
            dispatch_time_s: sim.ledger().busy_time(&[Tag::SampleFlow, Tag::Metadata]),
            end_time_s: sim.now(),
            per_tag_bytes: sim.ledger().tag_map(),
            per_warehouse_bytes: c.per_warehouse_bytes,
            per_warehouse_metadata_bytes: c.per_warehouse_metadata_bytes,
            inter_node_messages: c.inter_node_request_messages,
            request_messages: c.request_messages,
            claim_messages: c.claim_messages,
            inter_node_claim_messages: c.inter_node_claim_messages,
            broadcast_messages: c.broadcast_messages,
            stages: self
                .script
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| StageTime {
                    state: s.state,
                    start_s: self.stage_start[i].unwrap_or(0.0),
                    end_s: self.stage_end[i].unwrap_or(0.0),
                })
                .collect(),
        }
    }
}

/// Builds a dock for `script` on a fresh sim and runs one epoch.
pub fn run_epoch(
    cfg: &DockConfig,
    cluster: &ClusterSpec,
    rl: &RLConfig,
    script: EpochScript,
    opts: EpochOptions,
) -> Result<(EpochReport, Sim, TransferDock), DockError> {
    let dock = TransferDock::build(cfg, cluster, rl, &script.specs())?;
    let mut sim = Sim::new(cluster.clone());
    let mut runner = EpochRunner::new(dock, script, opts)?;
    let report = runner.run(&mut sim, &mut NoHook)?;
    Ok((report, sim, runner.into_dock()))
}
