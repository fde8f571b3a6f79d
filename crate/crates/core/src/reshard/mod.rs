//! Weight resharding from the update layout to the generation layout.
//!
//! Weights are cut into blobs: one common blob per pipeline stage, the
//! TP-sharded weights of a stage in `lcm(update tp, generation tp)` equal
//! pieces, and one blob per (stage, expert). Plans are step DAGs over those
//! blobs; both executors run a plan inside the simulator.

mod exec;
mod plan;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exec::{compare_executors, execute, ExecOptions, Mismatch, ReshardComparison, ReshardOutcome, ReshardReport, Verdict};
pub use plan::{plan_reshard, Executor, Move, Piece, PieceKind, PlanStep, ReshardPlan, StepKind};

use crate::domain::{validate_layout, CoreError, LayoutViolation, ModelSpec, ParallelLayout};
use crate::simnet::SimError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReshardError {
    #[error("invalid layout {layout}: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Layout { layout: ParallelLayout, violations: Vec<LayoutViolation> },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("unsupported reshard: {0}")]
    Unsupported(String),
    #[error("weights do not split into whole blobs: {0}")]
    Granularity(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// What one device holds under a layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub device: u32,
    pub stage: u32,
    pub dp_rank: u32,
    pub cp_rank: u32,
    pub tp_rank: u32,
    /// Which copy of its stage's common weights this device holds.
    pub common_replica: u32,
    pub ep_rank: u32,
    pub experts: Vec<u32>,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardMap {
    pub layout: ParallelLayout,
    pub devices: Vec<DeviceShard>,
}

/// Rank decomposition: rank = ((pp * dp + dp_i) * cp + cp_i) * tp + tp_i.
pub(crate) fn coords(layout: &ParallelLayout, rank: u32) -> (u32, u32, u32, u32) {
    let tp_i = rank % layout.tp;
    let rest = rank / layout.tp;
    let cp_i = rest % layout.cp;
    let rest = rest / layout.cp;
    let dp_i = rest % layout.dp;
    let pp_i = rest / layout.dp;
    (pp_i, dp_i, cp_i, tp_i)
}

pub(crate) fn ep_rank(layout: &ParallelLayout, dp_i: u32, tp_i: u32) -> u32 {
    let span = layout.dp * layout.tp / layout.ep;
    (dp_i * layout.tp + tp_i) / span
}

pub(crate) fn check_inputs(model: &ModelSpec, layout: &ParallelLayout, world: u64) -> Result<(), ReshardError> {
    model.validate()?;
    validate_layout(layout, world).map_err(|violations| ReshardError::Layout { layout: *layout, violations })?;
    model.check_layout(layout)?;
    Ok(())
}

/// Per-device holdings of `model` under `layout`.
pub fn shard_map(model: &ModelSpec, layout: &ParallelLayout, world: u64) -> Result<ShardMap, ReshardError> {
    check_inputs(model, layout, world)?;
    let per_ep = model.num_experts / layout.ep;
    let pp = layout.pp as u64;
    let devices = (0..world as u32)
        .map(|r| {
            let (stage, dp_i, cp_i, tp_i) = coords(layout, r);
            let er = ep_rank(layout, dp_i, tp_i);
            let experts: Vec<u32> = if model.is_moe() { (er * per_ep..(er + 1) * per_ep).collect() } else { vec![] };
            let expert_bytes = if model.is_moe() {
                model.expert_bytes.0 * experts.len() as u64 / model.num_experts as u64
            } else {
                0
            };
            DeviceShard {
                device: r,
                stage,
                dp_rank: dp_i,
                cp_rank: cp_i,
                tp_rank: tp_i,
                common_replica: (dp_i * layout.cp + cp_i) * layout.tp + tp_i,
                ep_rank: er,
                bytes: (model.common_bytes.0 + model.tp_sharded_bytes.0 / layout.tp as u64 + expert_bytes) / pp,
                experts,
            }
        })
        .collect();
    Ok(ShardMap { layout: *layout, devices })
}

impl ShardMap {
    /// Checks that every TP group covers its slices once and every EP group
    /// covers all experts once.
    pub fn check_coverage(&self, num_experts: u32) -> Result<(), String> {
        let l = &self.layout;
        let mut tp_groups: std::collections::BTreeMap<(u32, u32, u32), Vec<u32>> = Default::default();
        for d in &self.devices {
            tp_groups.entry((d.stage, d.dp_rank, d.cp_rank)).or_default().push(d.tp_rank);
        }
        for (k, mut ranks) in tp_groups {
            ranks.sort_unstable();
            if ranks != (0..l.tp).collect::<Vec<_>>() {
                return Err(format!("TP group {k:?} covers {ranks:?}"));
            }
        }
        if self.devices.iter().any(|d| !d.experts.is_empty()) {
            // an EP group: same stage/cp and same offset inside the EP block
            let span = l.dp * l.tp / l.ep;
            let mut groups: std::collections::BTreeMap<(u32, u32, u32), Vec<u32>> = Default::default();
            for d in &self.devices {
                let slot = (d.dp_rank * l.tp + d.tp_rank) % span;
                groups.entry((d.stage, d.cp_rank, slot)).or_default().extend(&d.experts);
            }
            for (k, mut e) in groups {
                e.sort_unstable();
                if e != (0..num_experts).collect::<Vec<_>>() {
                    return Err(format!("EP group {k:?} covers experts {e:?}"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
