//! Shared domain types: cluster, parallel layouts, weight manifests, RL
//! hyperparameters, sample payloads and their metadata descriptors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::units::{Bandwidth, ByteSize, GIB};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("byte count overflows u64 ({0})")]
    Overflow(&'static str),
    #[error("sample index {index} out of range [0, {limit})")]
    IndexOutOfRange { index: u64, limit: u64 },
}

fn invalid(what: &'static str, reason: impl Into<String>) -> CoreError {
    CoreError::Invalid { what, reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub num_nodes: u32,
    pub devices_per_node: u32,
    pub device_memory: ByteSize,
    pub host_memory: ByteSize,
    pub inter_node_bw: Bandwidth,
    pub intra_node_bw: Bandwidth,
    pub h2d_bw: Bandwidth,
    pub d2h_bw: Bandwidth,
    #[serde(default)]
    pub per_message_latency: f64,
}

impl ClusterSpec {
    /// A cluster with the given inter-node bandwidth. Intra-node links run at
    /// ten times that and host links at 50 GiB/s.
    pub fn with_inter_bw(num_nodes: u32, devices_per_node: u32, inter: Bandwidth) -> Self {
        ClusterSpec {
            num_nodes,
            devices_per_node,
            device_memory: ByteSize::gib(64),
            host_memory: ByteSize::gib(1024),
            inter_node_bw: inter,
            intra_node_bw: Bandwidth::new(inter.bytes_per_sec().saturating_mul(10)).unwrap_or(inter),
            h2d_bw: Bandwidth::gib_per_s(50),
            d2h_bw: Bandwidth::gib_per_s(50),
            per_message_latency: 0.0,
        }
    }

    pub fn world_size(&self) -> u32 {
        self.num_nodes * self.devices_per_node
    }

    pub fn node_of_device(&self, device: u32) -> u32 {
        device / self.devices_per_node
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.num_nodes == 0 || self.devices_per_node == 0 {
            return Err(invalid("cluster", "num_nodes and devices_per_node must be >= 1"));
        }
        if self.num_nodes.checked_mul(self.devices_per_node).is_none() {
            return Err(CoreError::Overflow("world size"));
        }
        if !(self.per_message_latency.is_finite() && self.per_message_latency >= 0.0) {
            return Err(invalid("cluster", "per_message_latency must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelLayout {
    pub tp: u32,
    #[serde(default = "one")]
    pub pp: u32,
    pub dp: u32,
    #[serde(default = "one")]
    pub ep: u32,
    #[serde(default = "one")]
    pub cp: u32,
}

fn one() -> u32 {
    1
}

impl ParallelLayout {
    pub const fn new(tp: u32, pp: u32, dp: u32, ep: u32, cp: u32) -> Self {
        ParallelLayout { tp, pp, dp, ep, cp }
    }

    /// Plain data parallelism over `world` devices.
    pub const fn data_parallel(world: u32) -> Self {
        ParallelLayout::new(1, 1, world, 1, 1)
    }

    pub fn world(&self) -> u64 {
        self.tp as u64 * self.pp as u64 * self.dp as u64 * self.cp as u64
    }
}

impl fmt::Display for ParallelLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TP{}", self.tp)?;
        if self.pp > 1 {
            write!(f, "PP{}", self.pp)?;
        }
        if self.ep > 1 {
            write!(f, "EP{}", self.ep)?;
        }
        if self.cp > 1 {
            write!(f, "CP{}", self.cp)?;
        }
        write!(f, "DP{}", self.dp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayoutViolation {
    ZeroDegree(&'static str),
    WorldMismatch { product: u64, world: u64 },
    EpNotDividing { ep: u32, dp_times_tp: u64 },
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::ZeroDegree(axis) => write!(f, "{axis} must be >= 1"),
            LayoutViolation::WorldMismatch { product, world } => {
                write!(f, "tp*pp*dp*cp = {product} but world size is {world}")
            }
            LayoutViolation::EpNotDividing { ep, dp_times_tp } => {
                write!(f, "ep = {ep} does not divide dp*tp = {dp_times_tp}")
            }
        }
    }
}

/// Checks a layout against a world size and names every violated constraint.
pub fn validate_layout(layout: &ParallelLayout, world: u64) -> Result<(), Vec<LayoutViolation>> {
    let mut out = Vec::new();
    for (axis, v) in [
        ("tp", layout.tp),
        ("pp", layout.pp),
        ("dp", layout.dp),
        ("ep", layout.ep),
        ("cp", layout.cp),
    ] {
        if v == 0 {
            out.push(LayoutViolation::ZeroDegree(axis));
        }
    }
    let product = layout.world();
    if product != world {
        out.push(LayoutViolation::WorldMismatch { product, world });
    }
    let dp_tp = layout.dp as u64 * layout.tp as u64;
    if layout.ep != 0 && !dp_tp.is_multiple_of(layout.ep as u64) {
        out.push(LayoutViolation::EpNotDividing { ep: layout.ep, dp_times_tp: dp_tp });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Replicated within a TP group.
    pub common_bytes: ByteSize,
    /// Total size of tensor-parallel-partitioned weights.
    pub tp_sharded_bytes: ByteSize,
    /// Total size of all expert weights.
    #[serde(default)]
    pub expert_bytes: ByteSize,
    #[serde(default = "one")]
    pub num_experts: u32,
    #[serde(default = "one")]
    pub num_layers: u32,
}

impl ModelSpec {
    pub fn dense(common: ByteSize, tp_sharded: ByteSize) -> Self {
        ModelSpec {
            common_bytes: common,
            tp_sharded_bytes: tp_sharded,
            expert_bytes: ByteSize(0),
            num_experts: 1,
            num_layers: 1,
        }
    }

    pub fn empty() -> Self {
        ModelSpec::dense(ByteSize(0), ByteSize(0))
    }

    pub fn is_moe(&self) -> bool {
        self.expert_bytes.0 > 0
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.num_layers == 0 {
            return Err(invalid("model", "num_layers must be >= 1"));
        }
        if self.is_moe() && self.num_experts == 0 {
            return Err(invalid("model", "num_experts must be >= 1 when expert_bytes > 0"));
        }
        if self.num_experts > 0 && !self.expert_bytes.0.is_multiple_of(self.num_experts as u64) {
            return Err(invalid("model", "expert_bytes must divide evenly among experts"));
        }
        Ok(())
    }

    /// Model-dependent layout checks: dense models use ep = 1, and MoE models
    /// need the expert count to split evenly over EP ranks.
    pub fn check_layout(&self, layout: &ParallelLayout) -> Result<(), CoreError> {
        if !self.is_moe() && layout.ep != 1 {
            return Err(invalid("layout", format!("{layout}: dense models require ep = 1")));
        }
        if self.is_moe() && !self.num_experts.is_multiple_of(layout.ep.max(1)) {
            return Err(invalid(
                "layout",
                format!("{layout}: {} experts do not split over ep = {}", self.num_experts, layout.ep),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RLConfig {
    pub global_batch: u64,
    pub responses_per_prompt: u64,
    pub dtype_bytes: u64,
    pub prompt_len: u64,
    pub response_len: u64,
    pub response_like_items: u64,
    pub scalar_items: u64,
}

impl RLConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, v) in [
            ("global_batch", self.global_batch),
            ("responses_per_prompt", self.responses_per_prompt),
            ("dtype_bytes", self.dtype_bytes),
            ("prompt_len", self.prompt_len),
            ("response_len", self.response_len),
        ] {
            if v == 0 {
                return Err(invalid("rl config", format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Number of sample records per iteration, G x N.
    pub fn num_records(&self) -> Result<u64, CoreError> {
        self.global_batch
            .checked_mul(self.responses_per_prompt)
            .ok_or(CoreError::Overflow("G*N"))
    }

    /// Bytes of one metadata descriptor (M scalars of B bytes).
    pub fn descriptor_bytes(&self) -> u64 {
        self.scalar_items.saturating_mul(self.dtype_bytes)
    }

    pub fn tokens_per_record(&self) -> u64 {
        self.prompt_len + self.response_len
    }
}

fn mul(a: u64, b: u64) -> Result<u64, CoreError> {
    a.checked_mul(b).ok_or(CoreError::Overflow("record size"))
}

fn add(a: u64, b: u64) -> Result<u64, CoreError> {
    a.checked_add(b).ok_or(CoreError::Overflow("record size"))
}

/// Byte size of one full sample record: B x (PL + (n+1) x SL + M).
pub fn record_bytes(cfg: &RLConfig) -> Result<u64, CoreError> {
    cfg.validate()?;
    let items = add(cfg.response_like_items, 1)?;
    let tokens = add(add(cfg.prompt_len, mul(items, cfg.response_len)?)?, cfg.scalar_items)?;
    mul(cfg.dtype_bytes, tokens)
}

/// One RL worker state. The first five are the GRPO roles; `Aux` states only
/// exist to scale the controller count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorkerStateId {
    ActorGeneration,
    ActorOldLogprob,
    ReferenceLogprob,
    RewardScore,
    ActorUpdate,
    Aux(u8),
}

pub const MAX_STATES: usize = 16;

impl WorkerStateId {
    pub const GRPO: [WorkerStateId; 5] = [
        WorkerStateId::ActorGeneration,
        WorkerStateId::ActorOldLogprob,
        WorkerStateId::ReferenceLogprob,
        WorkerStateId::RewardScore,
        WorkerStateId::ActorUpdate,
    ];

    /// The first `c` states: the GRPO five, then auxiliary ones.
    pub fn roster(c: usize) -> Result<Vec<WorkerStateId>, CoreError> {
        if !(1..=MAX_STATES).contains(&c) {
            return Err(invalid("controller count", format!("{c} not in [1, {MAX_STATES}]")));
        }
        Ok((0..c)
            .map(|i| match Self::GRPO.get(i) {
                Some(s) => *s,
                None => WorkerStateId::Aux((i - Self::GRPO.len()) as u8),
            })
            .collect())
    }

    pub fn name(&self) -> String {
        match self {
            WorkerStateId::ActorGeneration => "actor_generation".into(),
            WorkerStateId::ActorOldLogprob => "actor_old_logprob".into(),
            WorkerStateId::ReferenceLogprob => "reference_logprob".into(),
            WorkerStateId::RewardScore => "reward_score".into(),
            WorkerStateId::ActorUpdate => "actor_update".into(),
            WorkerStateId::Aux(k) => format!("aux_{k}"),
        }
    }
}

impl fmt::Display for WorkerStateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for WorkerStateId {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(s) = Self::GRPO.iter().find(|st| st.name() == s) {
            return Ok(*s);
        }
        s.strip_prefix("aux_")
            .and_then(|k| k.parse::<u8>().ok())
            .map(WorkerStateId::Aux)
            .ok_or_else(|| invalid("worker state", s.to_string()))
    }
}

impl Serialize for WorkerStateId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for WorkerStateId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Per-state lifecycle of one sample. Ordered so that `a < b` means `b` is later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    #[default]
    Absent,
    Produced,
    Claimed,
    Consumed,
}

impl SampleStatus {
    pub fn next(self) -> Option<SampleStatus> {
        match self {
            SampleStatus::Absent => Some(SampleStatus::Produced),
            SampleStatus::Produced => Some(SampleStatus::Claimed),
            SampleStatus::Claimed => Some(SampleStatus::Consumed),
            SampleStatus::Consumed => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub index: u64,
    pub warehouse_id: u32,
    pub status: BTreeMap<WorkerStateId, SampleStatus>,
}

impl SampleMetadata {
    /// Moves `state` one step forward; skipping or reversing is an error.
    pub fn advance(&mut self, state: WorkerStateId, to: SampleStatus) -> Result<(), CoreError> {
        let cur = self.status.get(&state).copied().unwrap_or_default();
        if cur.next() != Some(to) {
            return Err(invalid(
                "status transition",
                format!("index {} state {state}: {cur:?} -> {to:?}", self.index),
            ));
        }
        self.status.insert(state, to);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub index: u64,
    pub prompt: Vec<u8>,
    pub response: Vec<u8>,
    pub items: Vec<Vec<u8>>,
    pub scalars: Vec<Vec<u8>>,
}

impl SampleRecord {
    pub fn total_bytes(&self) -> u64 {
        let items: usize = self.items.iter().map(Vec::len).sum();
        let scalars: usize = self.scalars.iter().map(Vec::len).sum();
        (self.prompt.len() + self.response.len() + items + scalars) as u64
    }

    /// SHA-256 over all blobs in field order, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.index.to_le_bytes());
        for blob in [&self.prompt, &self.response]
            .into_iter()
            .chain(self.items.iter())
            .chain(self.scalars.iter())
        {
            h.update((blob.len() as u64).to_le_bytes());
            h.update(blob);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic RNG keyed by a seed, a domain label and an id.
pub(crate) fn keyed_rng(seed: u64, domain: &str, id: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update(id.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn blob(rng: &mut ChaCha8Rng, len: u64) -> Vec<u8> {
    let mut v = vec![0u8; len as usize];
    rng.fill_bytes(&mut v);
    v
}

/// Synthesizes record `index`. The N records of one prompt share prompt bytes.
pub fn make_sample(seed: u64, index: u64, cfg: &RLConfig) -> Result<SampleRecord, CoreError> {
    let limit = cfg.num_records()?;
    if index >= limit {
        return Err(CoreError::IndexOutOfRange { index, limit });
    }
    let total = record_bytes(cfg)?;
    if total > 4 * GIB {
        return Err(invalid("sample", "record too large to materialize"));
    }
    let b = cfg.dtype_bytes;
    let mut prompt_rng = keyed_rng(seed, "prompt", index / cfg.responses_per_prompt);
    let mut rng = keyed_rng(seed, "record", index);
    Ok(SampleRecord {
        index,
        prompt: blob(&mut prompt_rng, b * cfg.prompt_len),
        response: blob(&mut rng, b * cfg.response_len),
        items: (0..cfg.response_like_items).map(|_| blob(&mut rng, b * cfg.response_len)).collect(),
        scalars: (0..cfg.scalar_items).map(|_| blob(&mut rng, b)).collect(),
    })
}
