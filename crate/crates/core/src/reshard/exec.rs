use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{Executor, ReshardPlan, StepKind};
use super::{plan_reshard, ReshardError};
use crate::costmodel::redundant_memory_bytes;
use crate::domain::{hex, keyed_rng, ClusterSpec, ModelSpec, ParallelLayout};
use crate::simnet::{Event, Location, Sim, Tag, TransferId};

const UPDATE: &str = "update";
const TEMP: &str = "temp";
const GENERATION: &str = "generation";
const HOST_SWAP: &str = "update_swap";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Move real bytes generated from this seed.
    pub content_seed: Option<u64>,
    /// Test hook: flip the byte at this offset of a device's generation buffer
    /// while copying.
    pub corrupt: Option<(u32, u64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub device: u32,
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Mismatch(Mismatch),
    NotChecked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReshardReport {
    pub executor: Executor,
    pub update: String,
    pub generation: String,
    pub start_s: f64,
    pub end_s: f64,
    pub wall_time_s: f64,
    pub per_device_peak_bytes: Vec<u64>,
    /// Occupancy once resharding has finished, i.e. what generation runs with.
    pub per_device_generation_bytes: Vec<u64>,
    pub allgather_bytes: u64,
    pub d2h_bytes: u64,
    pub checksum: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h2d_restore_time_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restore_matches: Option<bool>,
}

type Buffers = Vec<BTreeMap<usize, Vec<u8>>>;

#[derive(Debug, Default)]
struct Content {
    seed: u64,
    update: Buffers,
    temp: Buffers,
    generation: Buffers,
    host: Buffers,
    pre_swap: Vec<String>,
}

pub struct ReshardOutcome {
    pub report: ReshardReport,
    pub plan: ReshardPlan,
    /// Memory mark taken when resharding finished.
    pub mark: BTreeMap<Location, usize>,
    content: Option<Content>,
    restoring: bool,
}

fn canonical(seed: u64, plan: &ReshardPlan, piece: usize) -> Vec<u8> {
    let mut rng = keyed_rng(seed, "weight", piece as u64);
    let mut v = vec![0u8; plan.pieces[piece].bytes as usize];
    rng.fill_bytes(&mut v);
    v
}

fn digest<'a>(parts: impl Iterator<Item = &'a Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex(&h.finalize())
}

struct Run<'a> {
    plan: &'a ReshardPlan,
    opts: &'a ExecOptions,
    content: Option<Content>,
    nodes: Vec<u32>,
}

impl Run<'_> {
    fn dev(&self, d: u32) -> Location {
        Location::Device(d)
    }

    fn host(&self, d: u32) -> Location {
        Location::Host(self.nodes[d as usize])
    }

    /// Starts step `id`. Returns the transfers it waits on.
    fn start(&mut self, sim: &mut Sim, id: usize) -> Result<Vec<TransferId>, ReshardError> {
        let step = &self.plan.steps[id];
        let d = step.device;
        let di = d as usize;
        let mut out = Vec::new();
        match &step.kind {
            StepKind::AllocTemp { bytes } => sim.alloc(self.dev(d), *bytes, TEMP)?,
            StepKind::AllocGeneration { bytes } => sim.alloc(self.dev(d), *bytes, GENERATION)?,
            StepKind::Allgather { moves, into_generation, .. } => {
                for m in moves {
                    out.push(sim.submit_transfer(self.dev(m.from), self.dev(d), m.bytes, Tag::ReshardAllgather)?);
                    if let Some(c) = &mut self.content {
                        let data = c.update[m.from as usize][&m.piece].clone();
                        if *into_generation {
                            c.generation[di].insert(m.piece, data);
                        } else {
                            c.temp[di].insert(m.piece, data);
                        }
                    }
                }
            }
            StepKind::SelectCopy { aliased, local, gathered, alias_bytes } => {
                if self.plan.executor == Executor::AllgatherSwap && *alias_bytes > 0 {
                    sim.release(self.dev(d), UPDATE, *alias_bytes)?;
                    sim.alloc(self.dev(d), *alias_bytes, GENERATION)?;
                }
                if let Some(c) = &mut self.content {
                    for p in aliased.iter().chain(local) {
                        let data = c.update[di][p].clone();
                        c.generation[di].insert(*p, data);
                    }
                    for p in gathered {
                        if let Some(data) = c.temp[di].get(p).cloned() {
                            c.generation[di].insert(*p, data);
                        }
                    }
                    if let Some((cd, offset)) = self.opts.corrupt {
                        if cd == d {
                            let mut at = offset;
                            for p in &self.plan.generation_holdings[di] {
                                let buf = c.generation[di].get_mut(p).expect("filled above");
                                if at < buf.len() as u64 {
                                    buf[at as usize] ^= 0xff;
                                    break;
                                }
                                at -= buf.len() as u64;
                            }
                        }
                    }
                }
            }
            StepKind::SwapD2h { bytes } => {
                sim.alloc(self.host(d), *bytes, HOST_SWAP)?;
                out.push(sim.submit_transfer(self.dev(d), self.host(d), *bytes, Tag::SwapD2h)?);
                if let Some(c) = &mut self.content {
                    c.host[di] = c.update[di].clone();
                    c.pre_swap[di] = digest(c.update[di].values());
                }
            }
            StepKind::FreeUpdate => {
                let rest = sim.timeline(self.dev(d)).map_or(0, |t| t.tag_bytes(UPDATE));
                if rest > 0 {
                    sim.free(self.dev(d), UPDATE)?;
                }
                if let Some(c) = &mut self.content {
                    c.update[di].clear();
                }
            }
            StepKind::FreeTemp => {
                sim.free(self.dev(d), TEMP)?;
                if let Some(c) = &mut self.content {
                    c.temp[di].clear();
                }
            }
            StepKind::SwapH2d { .. } => {}
        }
        Ok(out)
    }
}

/// Runs `plan` on `sim`, starting from freshly allocated update-stage
/// buffers. Returns once every non-deferred step has finished.
pub fn execute(plan: &ReshardPlan, sim: &mut Sim, opts: &ExecOptions) -> Result<ReshardOutcome, ReshardError> {
    let cluster = sim.cluster().clone();
    if cluster.world_size() != plan.world {
        return Err(ReshardError::Unsupported(format!(
            "plan is for {} devices, cluster has {}",
            plan.world,
            cluster.world_size()
        )));
    }
    let world = plan.world as usize;
    let start_s = sim.now();
    for d in 0..plan.world {
        sim.alloc(Location::Device(d), plan.update_bytes(d), UPDATE)?;
    }
    let content = opts.content_seed.map(|seed| Content {
        seed,
        update: plan
            .update_holdings
            .iter()
            .map(|h| h.iter().map(|p| (*p, canonical(seed, plan, *p))).collect())
            .collect(),
        temp: vec![BTreeMap::new(); world],
        generation: vec![BTreeMap::new(); world],
        host: vec![BTreeMap::new(); world],
        pre_swap: vec![String::new(); world],
    });
    let mut run = Run {
        plan,
        opts,
        content,
        nodes: (0..plan.world).map(|d| cluster.node_of_device(d)).collect(),
    };

    let runnable = |k: &StepKind| !matches!(k, StepKind::SwapH2d { .. });
    let total = plan.steps.iter().filter(|s| runnable(&s.kind)).count();
    let mut done = vec![false; plan.steps.len()];
    let mut started = vec![false; plan.steps.len()];
    let mut waiting: HashMap<TransferId, usize> = HashMap::new();
    let mut outstanding = vec![0usize; plan.steps.len()];
    let mut finished = 0;
    loop {
        let mut progressed = true;
        while progressed {
            progressed = false;
            for s in &plan.steps {
                if started[s.id] || !runnable(&s.kind) || !s.deps.iter().all(|x| done[*x]) {
                    continue;
                }
                started[s.id] = true;
                progressed = true;
                let ids = run.start(sim, s.id)?;
                if ids.is_empty() {
                    done[s.id] = true;
                    finished += 1;
                } else {
                    outstanding[s.id] = ids.len();
                    for t in ids {
                        waiting.insert(t, s.id);
                    }
                }
            }
        }
        if finished == total {
            break;
        }
        match sim.next_event()? {
            Some(Event::TransferDone { id, .. }) => {
                if let Some(s) = waiting.remove(&id) {
                    outstanding[s] -= 1;
                    if outstanding[s] == 0 {
                        done[s] = true;
                        finished += 1;
                    }
                }
            }
            Some(_) => {}
            None => return Err(ReshardError::Unsupported("plan stalled with steps left".into())),
        }
    }
    if plan.executor == Executor::Naive {
        for d in 0..plan.world {
            if plan.update_bytes(d) > 0 {
                sim.mark_persistent(Location::Device(d), UPDATE)?;
            }
        }
    }
    let end_s = sim.now();
    let moved = |f: &dyn Fn(&StepKind) -> u64| plan.steps.iter().map(|s| f(&s.kind)).sum::<u64>();
    let mut outcome = ReshardOutcome {
        report: ReshardReport {
            executor: plan.executor,
            update: plan.update.to_string(),
            generation: plan.generation.to_string(),
            start_s,
            end_s,
            wall_time_s: end_s - start_s,
            per_device_peak_bytes: (0..plan.world).map(|d| sim.peak(Location::Device(d))).collect(),
            per_device_generation_bytes: (0..plan.world).map(|d| sim.occupancy(Location::Device(d))).collect(),
            allgather_bytes: moved(&|k| if let StepKind::Allgather { bytes, .. } = k { *bytes } else { 0 }),
            d2h_bytes: moved(&|k| if let StepKind::SwapD2h { bytes } = k { *bytes } else { 0 }),
            checksum: Verdict::NotChecked,
            h2d_restore_time_s: None,
            restore_matches: None,
        },
        plan: plan.clone(),
        mark: sim.memory_mark(),
        content: run.content,
        restoring: false,
    };
    outcome.report.checksum = outcome.verify();
    Ok(outcome)
}

impl ReshardOutcome {
    /// Compares every device's generation buffer with the canonical bytes of
    /// its generation assignment.
    pub fn verify(&self) -> Verdict {
        let Some(c) = &self.content else { return Verdict::NotChecked };
        for (d, need) in self.plan.generation_holdings.iter().enumerate() {
            let mut offset = 0u64;
            for p in need {
                let want = canonical(c.seed, &self.plan, *p);
                let got = c.generation[d].get(p);
                let first = match got {
                    None => Some(0),
                    Some(g) => want.iter().zip(g.iter()).position(|(a, b)| a != b).or((g.len() != want.len()).then_some(0)),
                };
                if let Some(i) = first {
                    return Verdict::Mismatch(Mismatch { device: d as u32, offset: offset + i as u64 });
                }
                offset += want.len() as u64;
            }
        }
        Verdict::Pass
    }

    /// SHA-256 of the full canonical weights.
    pub fn source_checksum(&self) -> Option<String> {
        let c = self.content.as_ref()?;
        let all: Vec<Vec<u8>> = (0..self.plan.pieces.len()).map(|p| canonical(c.seed, &self.plan, p)).collect();
        Some(digest(all.iter()))
    }

    /// SHA-256 of the full weights reassembled from generation buffers, taking
    /// each blob from the lowest-ranked device that holds it.
    pub fn reconstructed_checksum(&self) -> Option<String> {
        let c = self.content.as_ref()?;
        let mut parts = Vec::new();
        for p in 0..self.plan.pieces.len() {
            let d = self.plan.generation_holdings.iter().position(|h| h.contains(&p))?;
            parts.push(c.generation[d].get(&p)?.clone());
        }
        Some(digest(parts.iter()))
    }

    /// Ends the generation stage: frees generation buffers and brings the
    /// update weights back from host memory. The returned transfers must
    /// finish before the update stage runs.
    pub fn start_restore(&mut self, sim: &mut Sim) -> Result<Vec<TransferId>, ReshardError> {
        let mut ids = Vec::new();
        for d in 0..self.plan.world {
            let loc = Location::Device(d);
            if sim.timeline(loc).is_some_and(|t| t.tag_bytes(GENERATION) > 0) {
                sim.free(loc, GENERATION)?;
            }
            if self.plan.executor == Executor::Naive {
                continue;
            }
            let bytes = self.plan.update_bytes(d);
            sim.alloc(loc, bytes, UPDATE)?;
            let host = Location::Host(sim.cluster().node_of_device(d));
            ids.push(sim.submit_transfer(host, loc, bytes, Tag::SwapH2d)?);
            if let Some(c) = &mut self.content {
                c.update[d as usize] = c.host[d as usize].clone();
                c.generation[d as usize].clear();
            }
        }
        self.restoring = true;
        Ok(ids)
    }

    /// Call once the restore transfers have completed.
    pub fn finish_restore(&mut self, sim: &mut Sim) -> Result<(), ReshardError> {
        if !self.restoring {
            return Ok(());
        }
        self.restoring = false;
        let nodes: std::collections::BTreeSet<u32> =
            (0..self.plan.world).map(|d| sim.cluster().node_of_device(d)).collect();
        for n in nodes {
            let host = Location::Host(n);
            if sim.timeline(host).is_some_and(|t| t.tag_bytes(HOST_SWAP) > 0) {
                sim.free(host, HOST_SWAP)?;
            }
        }
        if self.plan.executor == Executor::AllgatherSwap {
            self.report.h2d_restore_time_s = Some(sim.ledger().busy_time(&[Tag::SwapH2d]));
        }
        if let Some(c) = &mut self.content {
            c.host.iter_mut().for_each(BTreeMap::clear);
            let ok = c.update.iter().zip(&c.pre_swap).all(|(u, pre)| pre.is_empty() || digest(u.values()) == *pre);
            self.report.restore_matches = Some(ok);
        }
        Ok(())
    }
}

/// Naive and allgather-swap side by side on fresh simulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReshardComparison {
    pub naive: ReshardReport,
    pub swap: ReshardReport,
    /// Naive minus swap generation-stage occupancy, per device.
    pub per_device_delta_bytes: Vec<i64>,
    pub total_delta_bytes: i64,
    /// Cluster-total redundancy from the closed form.
    pub predicted_total_bytes: f64,
    /// Closed form divided by generation DP.
    pub predicted_per_replica_bytes: f64,
}

pub fn compare_executors(
    model: &ModelSpec,
    update: &ParallelLayout,
    generation: &ParallelLayout,
    cluster: &ClusterSpec,
    opts: &ExecOptions,
) -> Result<ReshardComparison, ReshardError> {
    let world = cluster.world_size() as u64;
    let mut reports = Vec::new();
    let mut window = Vec::new();
    for ex in [Executor::Naive, Executor::AllgatherSwap] {
        let plan = plan_reshard(model, update, generation, world, cluster.devices_per_node, ex)?;
        let mut sim = Sim::new(cluster.clone());
        let out = execute(&plan, &mut sim, opts)?;
        window.push((0..plan.world).map(|d| sim.window_peak(Location::Device(d), &out.mark)).collect::<Vec<u64>>());
        reports.push(out.report);
    }
    let swap = reports.pop().expect("two runs");
    let naive = reports.pop().expect("two runs");
    let per_device: Vec<i64> = window[0].iter().zip(&window[1]).map(|(a, b)| *a as i64 - *b as i64).collect();
    let predicted = redundant_memory_bytes(model, update, generation).map_err(|e| ReshardError::Unsupported(e.to_string()))?;
    Ok(ReshardComparison {
        total_delta_bytes: per_device.iter().sum(),
        per_device_delta_bytes: per_device,
        predicted_total_bytes: predicted,
        predicted_per_replica_bytes: predicted / generation.dp.max(1) as f64,
        naive,
        swap,
    })
}
