//! Sample-flow layer: the transfer dock (per-state controllers plus per-node
//! warehouses) and the centralized replay-buffer baseline.
//!
//! Warehouses are the single source of truth for sample status. Controllers
//! keep views fed by asynchronous broadcasts and grant claims only after the
//! owning warehouse has applied them. Every status-changing event (a put or a
//! commit) costs one descriptor message to the warehouse plus one per
//! controller.

mod epoch;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use epoch::{
    grpo_script, run_epoch, ComputeModel, EpochHook, EpochOptions, EpochReport, EpochRunner, EpochScript,
    FetchPayload, Gate, NoHook, PutPayload, StageScript, StageTime,
};

use crate::domain::{ClusterSpec, CoreError, RLConfig, SampleMetadata, SampleRecord, SampleStatus, WorkerStateId, MAX_STATES};
use crate::simnet::{Event, Location, Sim, SimError, Tag, TransferId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DockError {
    #[error("invalid dock config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("state {0} is not registered")]
    UnknownState(WorkerStateId),
    #[error("state {0} is not a producer")]
    NotProducer(WorkerStateId),
    #[error("state {0} is not a consumer")]
    NotConsumer(WorkerStateId),
    #[error("index {index} out of range [0, {limit})")]
    IndexOutOfRange { index: u64, limit: u64 },
    #[error("duplicate put of index {index} by {state}")]
    DuplicatePut { state: WorkerStateId, index: u64 },
    #[error("index {index} is not claimed by {state} (status {status:?})")]
    NotClaimed { state: WorkerStateId, index: u64, status: SampleStatus },
    #[error("deadlock: {} (state, index) pairs never completed, first {:?}", .stuck.len(), .stuck.iter().take(4).collect::<Vec<_>>())]
    Deadlock { stuck: Vec<(WorkerStateId, u64)> },
    #[error("{0}")]
    Hook(String),
    #[error("exactly-once violated: {0}")]
    Audit(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DockMode {
    Centralized,
    #[serde(alias = "transferdock")]
    TransferDock,
}

impl fmt::Display for DockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DockMode::Centralized => "centralized",
            DockMode::TransferDock => "transfer_dock",
        })
    }
}

fn default_one() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

fn is_default_one(v: &u32) -> bool {
    *v == 1
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DockConfig {
    pub mode: DockMode,
    /// C: number of controllers, one per worker state.
    pub num_controllers: u32,
    /// S: number of warehouses.
    pub num_warehouses: u32,
    /// warehouse id -> node; default `w mod nodes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warehouse_placement: Option<Vec<u32>>,
    /// controller (roster position) -> node; default `c mod nodes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_placement: Option<Vec<u32>>,
    /// Records per metadata request; default one DP micro-batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_fetch_size: Option<u32>,
    /// Nodes that run workers in centralized mode; default all nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_nodes: Option<Vec<u32>>,
    /// Node of the centralized buffer.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub central_node: u32,
    /// Concurrent consumers per worker state.
    #[serde(default = "default_one", skip_serializing_if = "is_default_one")]
    pub replicas_per_state: u32,
    /// Run the GRPO phases one after another.
    #[serde(default = "default_true")]
    pub barriers: bool,
}

impl DockConfig {
    pub fn centralized() -> Self {
        DockConfig {
            mode: DockMode::Centralized,
            num_controllers: 5,
            num_warehouses: 1,
            warehouse_placement: None,
            controller_placement: None,
            batch_fetch_size: None,
            worker_nodes: None,
            central_node: 0,
            replicas_per_state: 1,
            barriers: true,
        }
    }

    pub fn transfer_dock(controllers: u32, warehouses: u32) -> Self {
        DockConfig {
            mode: DockMode::TransferDock,
            num_controllers: controllers,
            num_warehouses: warehouses,
            ..DockConfig::centralized()
        }
    }

    pub fn with_mode(&self, mode: DockMode, nodes: u32) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        if mode == DockMode::TransferDock && c.warehouse_placement.is_none() {
            c.num_warehouses = c.num_warehouses.max(nodes);
        }
        c
    }
}

/// What a worker state does with the dock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpec {
    pub state: WorkerStateId,
    /// States whose outputs must be present before this one may claim. Empty
    /// means the state never consumes.
    pub prerequisites: Vec<WorkerStateId>,
    pub produces: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct StateRole {
    /// Roster positions whose outputs must be present.
    prerequisites: u16,
    produces: bool,
}

impl StateRole {
    pub fn consumes(&self) -> bool {
        self.prerequisites != 0
    }
}

/// Opaque handle of an in-flight put, fetch or commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpId(pub u64);

/// What a put carries per record.
#[derive(Debug, Clone)]
pub enum Payload {
    Virtual(u64),
    Record(Arc<SampleRecord>),
}

impl Payload {
    fn bytes(&self) -> u64 {
        match self {
            Payload::Virtual(b) => *b,
            Payload::Record(r) => r.total_bytes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Snapshot {
    outputs: u16,
    status: [SampleStatus; MAX_STATES],
}

impl Snapshot {
    fn merge(&mut self, other: &Snapshot) {
        self.outputs |= other.outputs;
        for (a, b) in self.status.iter_mut().zip(other.status.iter()) {
            *a = (*a).max(*b);
        }
    }
}

#[derive(Debug, Clone, Default)]
struct RecordMeta {
    snap: Snapshot,
    put_issued: u16,
    commit_issued: u16,
    puts: [u8; MAX_STATES],
    claims: [u8; MAX_STATES],
    consumes: [u8; MAX_STATES],
}

#[derive(Debug)]
struct Warehouse {
    node: u32,
    /// Authoritative metadata of the owned indices, by `index / S`.
    meta: Vec<RecordMeta>,
    payloads: HashMap<(u64, usize), Payload>,
    /// Not-yet-claimed ready indices per state; used when there is no
    /// controller layer.
    ready: Vec<BTreeSet<u64>>,
}

#[derive(Debug)]
struct ControllerView {
    node: u32,
    state: usize,
    known: HashMap<u64, Snapshot>,
    ready: BTreeSet<u64>,
    stale_broadcasts: u64,
}

impl ControllerView {
    fn merge(&mut self, index: u64, snap: &Snapshot) {
        let entry = self.known.entry(index).or_default();
        let before = entry.status[self.state];
        if snap.status[self.state] < before {
            self.stale_broadcasts += 1;
        }
        entry.merge(snap);
        let now = entry.status[self.state];
        if now == SampleStatus::Produced {
            self.ready.insert(index);
        } else if now > SampleStatus::Produced {
            self.ready.remove(&index);
        }
    }
}

#[derive(Debug)]
enum OpKind {
    Put { state: usize, items: Vec<(u64, Payload)> },
    Fetch,
    Commit { state: usize, indices: Vec<u64> },
}

#[derive(Debug)]
struct Op {
    kind: OpKind,
    remaining: usize,
}

#[derive(Debug)]
struct InFlight {
    op: Option<u64>,
    warehouse: usize,
    metadata: bool,
    broadcast: Option<(usize, Vec<(u64, Snapshot)>)>,
}

/// Message and byte counters beyond the sim ledger.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DockCounters {
    pub per_warehouse_bytes: Vec<u64>,
    pub per_warehouse_metadata_bytes: Vec<u64>,
    pub request_messages: u64,
    pub inter_node_request_messages: u64,
    pub claim_messages: u64,
    pub inter_node_claim_messages: u64,
    pub broadcast_messages: u64,
    pub stale_broadcasts: u64,
}

/// Result of feeding one completed transfer to the dock.
#[derive(Debug, Default)]
pub struct Progress {
    pub completed: Vec<OpId>,
    pub changed: bool,
}

pub struct TransferDock {
    mode: DockMode,
    rl: RLConfig,
    records: u64,
    roster: Vec<WorkerStateId>,
    roles: Vec<StateRole>,
    warehouses: Vec<Warehouse>,
    controllers: Vec<ControllerView>,
    worker_nodes: Vec<u32>,
    unclaimed: Vec<u64>,
    finished: Vec<u64>,
    ops: BTreeMap<u64, Op>,
    next_op: u64,
    inflight: HashMap<TransferId, InFlight>,
    counters: DockCounters,
    jitter: Option<(ChaCha8Rng, f64)>,
}

fn node_list(field: &str, list: &[u32], nodes: u32) -> Result<(), DockError> {
    match list.iter().find(|n| **n >= nodes) {
        Some(n) => Err(DockError::Config(format!("{field} references node {n} of a {nodes}-node cluster"))),
        None => Ok(()),
    }
}

impl TransferDock {
    /// Builds an empty dock. `specs` lists the roster states that take part in
    /// the workload; the rest of the roster only receives broadcasts.
    pub fn build(
        cfg: &DockConfig,
        cluster: &ClusterSpec,
        rl: &RLConfig,
        specs: &[StateSpec],
    ) -> Result<TransferDock, DockError> {
        cluster.validate()?;
        if rl.global_batch > 0 {
            rl.validate()?;
        }
        let nodes = cluster.num_nodes;
        let roster = WorkerStateId::roster(cfg.num_controllers as usize)?;
        let mut role_of = vec![StateRole::default(); roster.len()];
        let find = |state: &WorkerStateId| {
            roster
                .iter()
                .position(|s| s == state)
                .ok_or_else(|| DockError::Config(format!("state {state} needs a controller; C = {}", roster.len())))
        };
        for spec in specs {
            let mut prerequisites = 0u16;
            for p in &spec.prerequisites {
                prerequisites |= 1 << find(p)?;
            }
            role_of[find(&spec.state)?] = StateRole { prerequisites, produces: spec.produces };
        }
        let worker_nodes = cfg.worker_nodes.clone().unwrap_or_else(|| (0..nodes).collect());
        if worker_nodes.is_empty() {
            return Err(DockError::Config("worker_nodes is empty".into()));
        }
        node_list("worker_nodes", &worker_nodes, nodes)?;
        let (wh_nodes, ctrl_nodes) = match cfg.mode {
            DockMode::Centralized => {
                node_list("central_node", &[cfg.central_node], nodes)?;
                (vec![cfg.central_node], vec![])
            }
            DockMode::TransferDock => {
                if cfg.num_warehouses == 0 {
                    return Err(DockError::Config("num_warehouses must be >= 1".into()));
                }
                let wh = cfg
                    .warehouse_placement
                    .clone()
                    .unwrap_or_else(|| (0..cfg.num_warehouses).map(|w| w % nodes).collect());
                if wh.len() != cfg.num_warehouses as usize {
                    return Err(DockError::Config("warehouse_placement length differs from num_warehouses".into()));
                }
                node_list("warehouse_placement", &wh, nodes)?;
                let ctrl = cfg
                    .controller_placement
                    .clone()
                    .unwrap_or_else(|| (0..roster.len() as u32).map(|c| c % nodes).collect());
                if ctrl.len() != roster.len() {
                    return Err(DockError::Config("controller_placement length differs from num_controllers".into()));
                }
                node_list("controller_placement", &ctrl, nodes)?;
                (wh, ctrl)
            }
        };
        let records = rl.num_records()?;
        let s = wh_nodes.len() as u64;
        let warehouses = wh_nodes
            .iter()
            .enumerate()
            .map(|(w, node)| Warehouse {
                node: *node,
                meta: vec![RecordMeta::default(); records.saturating_sub(w as u64).div_ceil(s) as usize],
                payloads: HashMap::new(),
                ready: vec![BTreeSet::new(); roster.len()],
            })
            .collect();
        let controllers = ctrl_nodes
            .iter()
            .enumerate()
            .map(|(c, node)| ControllerView {
                node: *node,
                state: c,
                known: HashMap::new(),
                ready: BTreeSet::new(),
                stale_broadcasts: 0,
            })
            .collect();
        let s = s as usize;
        Ok(TransferDock {
            mode: cfg.mode,
            rl: *rl,
            records,
            unclaimed: vec![records; roster.len()],
            finished: vec![0; roster.len()],
            roster,
            roles: role_of,
            warehouses,
            controllers,
            worker_nodes,
            ops: BTreeMap::new(),
            next_op: 0,
            inflight: HashMap::new(),
            counters: DockCounters {
                per_warehouse_bytes: vec![0; s],
                per_warehouse_metadata_bytes: vec![0; s],
                ..DockCounters::default()
            },
            jitter: None,
        })
    }

    /// Adds a random delay in [0, max) to every dock transfer.
    pub fn set_jitter(&mut self, seed: u64, max: f64) {
        self.jitter = (max > 0.0).then(|| (ChaCha8Rng::seed_from_u64(seed), max));
    }

    pub fn mode(&self) -> DockMode {
        self.mode
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn roster(&self) -> &[WorkerStateId] {
        &self.roster
    }

    pub fn num_warehouses(&self) -> usize {
        self.warehouses.len()
    }

    pub fn num_controllers(&self) -> usize {
        self.roster.len()
    }

    pub fn counters(&self) -> DockCounters {
        let mut c = self.counters.clone();
        c.stale_broadcasts = self.controllers.iter().map(|v| v.stale_broadcasts).sum();
        c
    }

    pub fn warehouse_of(&self, index: u64) -> usize {
        (index % self.warehouses.len() as u64) as usize
    }

    pub fn warehouse_node(&self, w: usize) -> u32 {
        self.warehouses[w].node
    }

    /// Node that processes `index`: the owning warehouse's node in
    /// transfer-dock mode, round-robin over worker nodes otherwise.
    pub fn executor_node(&self, index: u64) -> u32 {
        match self.mode {
            DockMode::TransferDock => self.warehouses[self.warehouse_of(index)].node,
            DockMode::Centralized => self.worker_nodes[(index % self.worker_nodes.len() as u64) as usize],
        }
    }

    /// Node a state's driver issues requests from: its controller's node, or
    /// round-robin over worker nodes when there is no controller layer.
    pub fn driver_node(&self, state: WorkerStateId, replica: u32) -> Result<u32, DockError> {
        let s = self.pos(state)?;
        Ok(match self.mode {
            DockMode::TransferDock => self.controllers[s].node,
            DockMode::Centralized => self.worker_nodes[(s + replica as usize) % self.worker_nodes.len()],
        })
    }

    /// Node a state's requests go to.
    pub fn control_node(&self, state: WorkerStateId) -> Result<u32, DockError> {
        let s = self.pos(state)?;
        Ok(match self.mode {
            DockMode::TransferDock => self.controllers[s].node,
            DockMode::Centralized => self.warehouses[0].node,
        })
    }

    fn pos(&self, state: WorkerStateId) -> Result<usize, DockError> {
        self.roster.iter().position(|s| *s == state).ok_or(DockError::UnknownState(state))
    }

    fn meta(&self, index: u64) -> &RecordMeta {
        let s = self.warehouses.len() as u64;
        &self.warehouses[(index % s) as usize].meta[(index / s) as usize]
    }

    fn meta_mut(&mut self, index: u64) -> &mut RecordMeta {
        let s = self.warehouses.len() as u64;
        &mut self.warehouses[(index % s) as usize].meta[(index / s) as usize]
    }

    fn check_index(&self, index: u64) -> Result<(), DockError> {
        if index >= self.records {
            return Err(DockError::IndexOutOfRange { index, limit: self.records });
        }
        Ok(())
    }

    /// Authoritative metadata of one index.
    pub fn metadata(&self, index: u64) -> Result<SampleMetadata, DockError> {
        self.check_index(index)?;
        let m = self.meta(index);
        Ok(SampleMetadata {
            index,
            warehouse_id: self.warehouse_of(index) as u32,
            status: self.roster.iter().enumerate().map(|(i, s)| (*s, m.snap.status[i])).collect(),
        })
    }

    /// A controller's current view of one index.
    pub fn controller_status(&self, controller: WorkerStateId, index: u64) -> Result<SampleStatus, DockError> {
        let c = self.pos(controller)?;
        let view = self.controllers.get(c).ok_or(DockError::UnknownState(controller))?;
        Ok(view.known.get(&index).map_or(SampleStatus::Absent, |s| s.status[c]))
    }

    /// Indices of `state` not yet claimed by anyone.
    pub fn unclaimed(&self, state: WorkerStateId) -> Result<u64, DockError> {
        Ok(self.unclaimed[self.pos(state)?])
    }

    /// Indices that finished `state`: consumed for consumers, put for pure
    /// producers.
    pub fn finished(&self, state: WorkerStateId) -> Result<u64, DockError> {
        Ok(self.finished[self.pos(state)?])
    }

    pub fn op_pending(&self, op: OpId) -> bool {
        self.ops.contains_key(&op.0)
    }

    fn delay(&mut self) -> f64 {
        match &mut self.jitter {
            Some((rng, max)) => rng.random_range(0.0..*max),
            None => 0.0,
        }
    }

    fn submit(
        &mut self,
        sim: &mut Sim,
        src: u32,
        dst: u32,
        bytes: u64,
        tag: Tag,
        flight: InFlight,
    ) -> Result<(), DockError> {
        let extra = self.delay();
        let id = sim.submit_transfer_delayed(Location::Node(src), Location::Node(dst), bytes, tag, extra)?;
        self.inflight.insert(id, flight);
        Ok(())
    }

    fn new_op(&mut self, kind: OpKind) -> u64 {
        let id = self.next_op;
        self.next_op += 1;
        self.ops.insert(id, Op { kind, remaining: 0 });
        id
    }

    fn group_by_warehouse<T>(&self, items: impl IntoIterator<Item = (u64, T)>) -> BTreeMap<usize, Vec<(u64, T)>> {
        let mut g: BTreeMap<usize, Vec<(u64, T)>> = BTreeMap::new();
        for (i, t) in items {
            g.entry(self.warehouse_of(i)).or_default().push((i, t));
        }
        g
    }

    /// Stores produced outputs at their owning warehouses. Payload bytes and
    /// one descriptor per record travel from `from_node`.
    pub fn put(
        &mut self,
        sim: &mut Sim,
        state: WorkerStateId,
        from_node: u32,
        items: Vec<(u64, Payload)>,
    ) -> Result<Option<OpId>, DockError> {
        let s = self.pos(state)?;
        if !self.roles[s].produces {
            return Err(DockError::NotProducer(state));
        }
        let mut seen = BTreeSet::new();
        for (i, _) in &items {
            self.check_index(*i)?;
            let m = self.meta(*i);
            if m.put_issued & (1 << s) != 0 || !seen.insert(*i) {
                return Err(DockError::DuplicatePut { state, index: *i });
            }
            if self.roles[s].consumes() && m.snap.status[s] != SampleStatus::Claimed {
                return Err(DockError::NotClaimed { state, index: *i, status: m.snap.status[s] });
            }
        }
        for (i, _) in &items {
            self.meta_mut(*i).put_issued |= 1 << s;
        }
        let desc = self.rl.descriptor_bytes();
        let groups: Vec<(usize, u64, u64)> = self
            .group_by_warehouse(items.iter().map(|(i, p)| (*i, p.bytes())))
            .into_iter()
            .map(|(w, v)| (w, v.iter().map(|(_, b)| *b).sum(), v.len() as u64))
            .collect();
        let op = self.new_op(OpKind::Put { state: s, items });
        let mut n = 0;
        for (w, payload, count) in groups {
            let node = self.warehouses[w].node;
            if payload > 0 {
                self.submit(sim, from_node, node, payload, Tag::SampleFlow, InFlight { op: Some(op), warehouse: w, metadata: false, broadcast: None })?;
                n += 1;
            }
            self.submit(sim, from_node, node, count * desc, Tag::Metadata, InFlight { op: Some(op), warehouse: w, metadata: true, broadcast: None })?;
            n += 1;
        }
        self.finish_submit(sim, op, n)
    }

    /// `None` means the op had nothing to transfer and is already applied.
    fn finish_submit(&mut self, sim: &mut Sim, op: u64, n: usize) -> Result<Option<OpId>, DockError> {
        if n == 0 {
            let o = self.ops.remove(&op).expect("op exists");
            self.apply(sim, o)?;
            return Ok(None);
        }
        self.ops.get_mut(&op).expect("op exists").remaining = n;
        Ok(Some(OpId(op)))
    }

    /// Claims up to `k` ready indices for `state`. Claims are applied at the
    /// owning warehouse before they are returned. An empty batch means nothing
    /// is ready right now.
    pub fn request_metadata(
        &mut self,
        state: WorkerStateId,
        k: usize,
        from_node: u32,
    ) -> Result<Vec<SampleMetadata>, DockError> {
        let s = self.pos(state)?;
        if !self.roles[s].consumes() {
            return Err(DockError::NotConsumer(state));
        }
        let target = self.control_node(state)?;
        self.counters.request_messages += 1;
        if target != from_node {
            self.counters.inter_node_request_messages += 1;
        }
        let mut granted = Vec::new();
        let mut touched = BTreeSet::new();
        while granted.len() < k {
            let candidate = match self.mode {
                DockMode::TransferDock => self.controllers[s].ready.pop_first(),
                DockMode::Centralized => self.warehouses[0].ready[s].pop_first(),
            };
            let Some(i) = candidate else { break };
            let w = self.warehouse_of(i);
            if self.mode == DockMode::TransferDock && touched.insert(w) {
                self.counters.claim_messages += 1;
                if self.warehouses[w].node != target {
                    self.counters.inter_node_claim_messages += 1;
                }
            }
            let m = self.meta_mut(i);
            let won = m.snap.status[s] == SampleStatus::Produced;
            if won {
                m.snap.status[s] = SampleStatus::Claimed;
                m.claims[s] = m.claims[s].saturating_add(1);
            }
            // A lost race still teaches the controller the newer status.
            let snap = m.snap;
            if let Some(view) = self.controllers.get_mut(s) {
                view.merge(i, &snap);
            }
            if won {
                self.warehouses[w].ready[s].remove(&i);
                self.unclaimed[s] -= 1;
                granted.push(i);
            }
        }
        granted.into_iter().map(|i| self.metadata(i)).collect()
    }

    fn check_claimed(&self, s: usize, indices: &[u64]) -> Result<(), DockError> {
        for i in indices {
            self.check_index(*i)?;
            let st = self.meta(*i).snap.status[s];
            if st != SampleStatus::Claimed {
                return Err(DockError::NotClaimed { state: self.roster[s], index: *i, status: st });
            }
        }
        Ok(())
    }

    /// Moves claimed records from their warehouses to the executing nodes.
    /// `bytes_per_record` of `None` moves every stored payload of the index.
    pub fn fetch(
        &mut self,
        sim: &mut Sim,
        state: WorkerStateId,
        indices: &[u64],
        dest: &dyn Fn(u64) -> u32,
        bytes_per_record: Option<u64>,
    ) -> Result<Option<OpId>, DockError> {
        let s = self.pos(state)?;
        self.check_claimed(s, indices)?;
        let mut groups: BTreeMap<(usize, u32), u64> = BTreeMap::new();
        for &i in indices {
            let w = self.warehouse_of(i);
            let bytes = match bytes_per_record {
                Some(b) => b,
                None => self.warehouses[w]
                    .payloads
                    .iter()
                    .filter(|((idx, _), _)| *idx == i)
                    .map(|(_, p)| p.bytes())
                    .sum(),
            };
            *groups.entry((w, dest(i))).or_default() += bytes;
        }
        let op = self.new_op(OpKind::Fetch);
        let mut n = 0;
        for ((w, node), bytes) in groups {
            if bytes == 0 {
                continue;
            }
            let src = self.warehouses[w].node;
            self.submit(sim, src, node, bytes, Tag::SampleFlow, InFlight { op: Some(op), warehouse: w, metadata: false, broadcast: None })?;
            n += 1;
        }
        self.finish_submit(sim, op, n)
    }

    /// Real records stored for `index` by the given producer.
    pub fn stored_record(&self, producer: WorkerStateId, index: u64) -> Result<Option<Arc<SampleRecord>>, DockError> {
        let s = self.pos(producer)?;
        self.check_index(index)?;
        let w = self.warehouse_of(index);
        Ok(match self.warehouses[w].payloads.get(&(index, s)) {
            Some(Payload::Record(r)) => Some(r.clone()),
            _ => None,
        })
    }

    /// Marks claimed indices consumed; the warehouse applies the change when
    /// the descriptor arrives and then broadcasts it.
    pub fn commit(&mut self, sim: &mut Sim, state: WorkerStateId, from_node: u32, indices: &[u64]) -> Result<Option<OpId>, DockError> {
        let s = self.pos(state)?;
        self.check_claimed(s, indices)?;
        let mut seen = BTreeSet::new();
        for &i in indices {
            if self.meta(i).commit_issued & (1 << s) != 0 || !seen.insert(i) {
                return Err(DockError::NotClaimed { state, index: i, status: SampleStatus::Consumed });
            }
        }
        for &i in indices {
            self.meta_mut(i).commit_issued |= 1 << s;
        }
        let desc = self.rl.descriptor_bytes();
        let groups: Vec<(usize, u64)> = self
            .group_by_warehouse(indices.iter().map(|i| (*i, ())))
            .into_iter()
            .map(|(w, v)| (w, v.len() as u64))
            .collect();
        let op = self.new_op(OpKind::Commit { state: s, indices: indices.to_vec() });
        let mut n = 0;
        for (w, count) in groups {
            let node = self.warehouses[w].node;
            self.submit(sim, from_node, node, count * desc, Tag::Metadata, InFlight { op: Some(op), warehouse: w, metadata: true, broadcast: None })?;
            n += 1;
        }
        self.finish_submit(sim, op, n)
    }

    fn broadcast(&mut self, sim: &mut Sim, indices: &[u64]) -> Result<(), DockError> {
        if self.controllers.is_empty() {
            return Ok(());
        }
        let desc = self.rl.descriptor_bytes();
        let groups = self.group_by_warehouse(indices.iter().map(|i| (*i, ())));
        for (w, items) in groups {
            let snaps: Vec<(u64, Snapshot)> = items.iter().map(|(i, _)| (*i, self.meta(*i).snap)).collect();
            let src = self.warehouses[w].node;
            for c in 0..self.controllers.len() {
                let dst = self.controllers[c].node;
                self.counters.broadcast_messages += 1;
                let bytes = snaps.len() as u64 * desc;
                self.submit(
                    sim,
                    src,
                    dst,
                    bytes,
                    Tag::Metadata,
                    InFlight { op: None, warehouse: w, metadata: true, broadcast: Some((c, snaps.clone())) },
                )?;
            }
        }
        Ok(())
    }

    fn mark_ready(&mut self, i: u64) {
        let w = self.warehouse_of(i);
        let roles = self.roles.clone();
        let m = self.meta_mut(i);
        let mut newly = Vec::new();
        for (c, role) in roles.iter().enumerate() {
            if role.consumes() && m.snap.outputs & role.prerequisites == role.prerequisites && m.snap.status[c] == SampleStatus::Absent {
                m.snap.status[c] = SampleStatus::Produced;
                newly.push(c);
            }
        }
        for c in newly {
            self.warehouses[w].ready[c].insert(i);
        }
    }

    fn apply(&mut self, sim: &mut Sim, op: Op) -> Result<(), DockError> {
        match op.kind {
            OpKind::Put { state, items } => {
                let indices: Vec<u64> = items.iter().map(|(i, _)| *i).collect();
                for (i, payload) in items {
                    let w = self.warehouse_of(i);
                    let m = self.meta_mut(i);
                    m.snap.outputs |= 1 << state;
                    m.puts[state] = m.puts[state].saturating_add(1);
                    self.warehouses[w].payloads.insert((i, state), payload);
                    if !self.roles[state].consumes() {
                        self.finished[state] += 1;
                    }
                    self.mark_ready(i);
                }
                self.broadcast(sim, &indices)
            }
            OpKind::Commit { state, indices } => {
                for &i in &indices {
                    let m = self.meta_mut(i);
                    m.snap.status[state] = SampleStatus::Consumed;
                    m.consumes[state] = m.consumes[state].saturating_add(1);
                    self.finished[state] += 1;
                }
                self.broadcast(sim, &indices)
            }
            OpKind::Fetch => Ok(()),
        }
    }

    /// Feeds a completed transfer to the dock. Transfers the dock did not
    /// submit are ignored.
    pub fn on_transfer_complete(&mut self, sim: &mut Sim, ev: &Event) -> Result<Progress, DockError> {
        let mut progress = Progress::default();
        let Event::TransferDone { id, bytes, .. } = ev else {
            return Ok(progress);
        };
        let Some(flight) = self.inflight.remove(id) else {
            return Ok(progress);
        };
        self.counters.per_warehouse_bytes[flight.warehouse] += bytes;
        if flight.metadata {
            self.counters.per_warehouse_metadata_bytes[flight.warehouse] += bytes;
        }
        if let Some((c, snaps)) = flight.broadcast {
            for (i, snap) in snaps {
                self.controllers[c].merge(i, &snap);
            }
            progress.changed = true;
        }
        if let Some(op) = flight.op {
            let done = {
                let o = self.ops.get_mut(&op).expect("op tracked");
                o.remaining -= 1;
                o.remaining == 0
            };
            if done {
                let o = self.ops.remove(&op).expect("op tracked");
                self.apply(sim, o)?;
                progress.completed.push(OpId(op));
                progress.changed = true;
            }
        }
        Ok(progress)
    }

    /// Runs the sim until it is idle, applying every dock transfer.
    pub fn settle(&mut self, sim: &mut Sim) -> Result<(), DockError> {
        while let Some(ev) = sim.next_event()? {
            self.on_transfer_complete(sim, &ev)?;
        }
        Ok(())
    }

    /// Checks exactly-once production and consumption for the given states.
    pub fn audit(&self, states: &[WorkerStateId]) -> Result<(), DockError> {
        for state in states {
            let s = self.pos(*state)?;
            let role = self.roles[s];
            for i in 0..self.records {
                let m = self.meta(i);
                if role.produces && m.puts[s] != 1 {
                    return Err(DockError::Audit(format!("index {i} put {} times by {state}", m.puts[s])));
                }
                if role.consumes() && (m.claims[s] != 1 || m.consumes[s] != 1) {
                    return Err(DockError::Audit(format!(
                        "index {i} claimed {} / consumed {} times by {state}",
                        m.claims[s], m.consumes[s]
                    )));
                }
            }
        }
        Ok(())
    }

    /// (state, index) pairs of `states` that have not finished.
    pub fn unfinished(&self, states: &[WorkerStateId]) -> Vec<(WorkerStateId, u64)> {
        let mut out = Vec::new();
        for state in states {
            let Ok(s) = self.pos(*state) else { continue };
            let role = self.roles[s];
            for i in 0..self.records {
                let m = self.meta(i);
                let done = if role.consumes() {
                    m.snap.status[s] == SampleStatus::Consumed
                } else {
                    m.snap.outputs & (1 << s) != 0
                };
                if !done {
                    out.push((*state, i));
                }
            }
        }
        out
    }

    /// True when every controller view agrees with the warehouses.
    pub fn views_converged(&self) -> bool {
        self.controllers.iter().all(|v| {
            (0..self.records).all(|i| {
                let auth = self.meta(i).snap;
                v.known.get(&i).copied().unwrap_or_default() == auth
            })
        })
    }
}

#[cfg(test)]
mod tests;
