use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_inputs, coords, ep_rank, ReshardError};
use crate::domain::{ModelSpec, ParallelLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Executor {
    Naive,
    AllgatherSwap,
}

impl fmt::Display for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Executor::Naive => "naive",
            Executor::AllgatherSwap => "allgather-swap",
        })
    }
}

impl FromStr for Executor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "naive" => Ok(Executor::Naive),
            "allgather-swap" | "allgather_swap" | "swap" => Ok(Executor::AllgatherSwap),
            _ => Err(format!("unknown executor {s:?} (naive, allgather-swap)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PieceKind {
    Common,
    Tp { index: u32 },
    Expert { expert: u32 },
}

/// One weight blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub stage: u32,
    #[serde(flatten)]
    pub kind: PieceKind,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub piece: usize,
    pub from: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepKind {
    AllocTemp { bytes: u64 },
    /// Receives `moves` from the other members of `group`, into the temp
    /// buffer or (naive) straight into the generation buffer.
    Allgather { group: usize, bytes: u64, moves: Vec<Move>, into_generation: bool },
    AllocGeneration { bytes: u64 },
    /// Fills the generation buffer. Aliased pieces change owner in place.
    SelectCopy { aliased: Vec<usize>, local: Vec<usize>, gathered: Vec<usize>, alias_bytes: u64 },
    SwapD2h { bytes: u64 },
    FreeUpdate,
    FreeTemp,
    /// Deferred: run by the caller before the next update stage.
    SwapH2d { bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub id: usize,
    pub device: u32,
    #[serde(flatten)]
    pub kind: StepKind,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReshardPlan {
    pub executor: Executor,
    pub update: ParallelLayout,
    pub generation: ParallelLayout,
    pub world: u32,
    pub pieces: Vec<Piece>,
    pub update_holdings: Vec<Vec<usize>>,
    pub generation_holdings: Vec<Vec<usize>>,
    /// Devices that exchange blobs, by allgather group.
    pub groups: Vec<Vec<u32>>,
    pub steps: Vec<PlanStep>,
    pub predicted_peak_bytes: Vec<u64>,
    pub predicted_generation_bytes: Vec<u64>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn exact(total: u64, parts: u64, what: &str) -> Result<u64, ReshardError> {
    if !total.is_multiple_of(parts) {
        return Err(ReshardError::Granularity(format!("{what}: {total} bytes over {parts} blobs")));
    }
    Ok(total / parts)
}

struct Blobs {
    pieces: Vec<Piece>,
    granularity: u32,
    per_stage: usize,
    experts: u32,
}

impl Blobs {
    fn new(model: &ModelSpec, pp: u32, granularity: u32) -> Result<Self, ReshardError> {
        let common = exact(model.common_bytes.0, pp as u64, "common weights")?;
        let tp = exact(model.tp_sharded_bytes.0, pp as u64 * granularity as u64, "TP-sharded weights")?;
        let experts = if model.is_moe() { model.num_experts } else { 0 };
        let expert = if experts > 0 {
            exact(model.expert_bytes.0, pp as u64 * experts as u64, "expert weights")?
        } else {
            0
        };
        let mut pieces = Vec::new();
        for stage in 0..pp {
            pieces.push(Piece { stage, kind: PieceKind::Common, bytes: common });
            for index in 0..granularity {
                pieces.push(Piece { stage, kind: PieceKind::Tp { index }, bytes: tp });
            }
            for e in 0..experts {
                pieces.push(Piece { stage, kind: PieceKind::Expert { expert: e }, bytes: expert });
            }
        }
        Ok(Blobs { pieces, granularity, per_stage: 1 + granularity as usize + experts as usize, experts })
    }

    fn holdings(&self, model: &ModelSpec, layout: &ParallelLayout, world: u32) -> Vec<Vec<usize>> {
        let per_tp = self.granularity / layout.tp;
        let per_ep = if self.experts > 0 { model.num_experts / layout.ep } else { 0 };
        (0..world)
            .map(|r| {
                let (stage, dp_i, _, tp_i) = coords(layout, r);
                let base = stage as usize * self.per_stage;
                let mut v = vec![base];
                v.extend((tp_i * per_tp..(tp_i + 1) * per_tp).map(|j| base + 1 + j as usize));
                let er = ep_rank(layout, dp_i, tp_i);
                v.extend((er * per_ep..(er + 1) * per_ep).map(|e| base + 1 + self.granularity as usize + e as usize));
                v
            })
            .collect()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let p = self.0[x];
        if p == x {
            return x;
        }
        let root = self.find(p);
        self.0[x] = root;
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

struct Builder {
    steps: Vec<PlanStep>,
}

impl Builder {
    fn push(&mut self, device: u32, kind: StepKind, deps: Vec<Option<usize>>) -> usize {
        let id = self.steps.len();
        let mut deps: Vec<usize> = deps.into_iter().flatten().collect();
        deps.sort_unstable();
        deps.dedup();
        self.steps.push(PlanStep { id, device, kind, deps });
        id
    }
}

/// Builds the step DAG that turns update-layout holdings into
/// generation-layout holdings. `devices_per_node` only steers source choice
/// towards same-node copies.
pub fn plan_reshard(
    model: &ModelSpec,
    update: &ParallelLayout,
    generation: &ParallelLayout,
    world: u64,
    devices_per_node: u32,
    executor: Executor,
) -> Result<ReshardPlan, ReshardError> {
    check_inputs(model, update, world)?;
    check_inputs(model, generation, world)?;
    if update.pp != generation.pp || update.cp != generation.cp {
        return Err(ReshardError::Unsupported(format!(
            "pp and cp must match across stages ({update} -> {generation})"
        )));
    }
    let world = world as u32;
    let g = update.tp as u64 * generation.tp as u64 / gcd(update.tp as u64, generation.tp as u64);
    let blobs = Blobs::new(model, update.pp, g as u32)?;
    let held = blobs.holdings(model, update, world);
    let need = blobs.holdings(model, generation, world);
    let pieces = blobs.pieces.clone();
    let bytes = |ids: &[usize]| ids.iter().map(|p| pieces[*p].bytes).sum::<u64>();

    let mut holders: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (d, h) in held.iter().enumerate() {
        for p in h {
            holders.entry(*p).or_default().push(d as u32);
        }
    }
    let node = |d: u32| d / devices_per_node.max(1);
    let tp_group = |d: u32| d / update.tp;
    let mut uf = UnionFind((0..world as usize).collect());
    let mut remote: Vec<Vec<Move>> = vec![vec![]; world as usize];
    for d in 0..world {
        let mine: BTreeSet<usize> = held[d as usize].iter().copied().collect();
        for &p in &need[d as usize] {
            if mine.contains(&p) {
                continue;
            }
            let from = *holders[&p]
                .iter()
                .min_by_key(|s| (tp_group(**s) != tp_group(d), node(**s) != node(d), **s))
                .expect("every blob has a holder");
            uf.union(d as usize, from as usize);
            remote[d as usize].push(Move { piece: p, from, bytes: pieces[p].bytes });
        }
    }
    let mut group_of = vec![0usize; world as usize];
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut root_to_group: BTreeMap<usize, usize> = BTreeMap::new();
    for (d, slot) in group_of.iter_mut().enumerate() {
        let root = uf.find(d);
        let next = root_to_group.len();
        let gid = *root_to_group.entry(root).or_insert(next);
        if gid == groups.len() {
            groups.push(vec![]);
        }
        groups[gid].push(d as u32);
        *slot = gid;
    }

    let mut b = Builder { steps: vec![] };
    let mut allgather_step = vec![None; world as usize];
    let mut select_step = vec![0; world as usize];
    let mut alias_bytes = vec![0u64; world as usize];
    let mut temp_bytes = vec![0u64; world as usize];
    for d in 0..world {
        let di = d as usize;
        let mine: BTreeSet<usize> = held[di].iter().copied().collect();
        let gathered: Vec<usize> = remote[di].iter().map(|m| m.piece).collect();
        let gathered_bytes = bytes(&gathered);
        let (aliased, local): (Vec<usize>, Vec<usize>) = need[di]
            .iter()
            .copied()
            .filter(|p| mine.contains(p))
            .partition(|p| executor == Executor::AllgatherSwap || !matches!(pieces[*p].kind, PieceKind::Tp { .. }));
        alias_bytes[di] = bytes(&aliased);
        let gen_alloc = bytes(&need[di]) - alias_bytes[di];
        match executor {
            Executor::AllgatherSwap => {
                let temp = (gathered_bytes > 0).then(|| b.push(d, StepKind::AllocTemp { bytes: gathered_bytes }, vec![]));
                temp_bytes[di] = gathered_bytes;
                allgather_step[di] = (!gathered.is_empty()).then(|| {
                    b.push(
                        d,
                        StepKind::Allgather { group: group_of[di], bytes: gathered_bytes, moves: remote[di].clone(), into_generation: false },
                        vec![temp],
                    )
                });
                let alloc = (gen_alloc > 0).then(|| b.push(d, StepKind::AllocGeneration { bytes: gen_alloc }, vec![allgather_step[di]]));
                select_step[di] = b.push(
                    d,
                    StepKind::SelectCopy { aliased, local, gathered, alias_bytes: alias_bytes[di] },
                    vec![alloc, allgather_step[di]],
                );
            }
            Executor::Naive => {
                let alloc = (gen_alloc > 0).then(|| b.push(d, StepKind::AllocGeneration { bytes: gen_alloc }, vec![]));
                allgather_step[di] = (!gathered.is_empty()).then(|| {
                    b.push(
                        d,
                        StepKind::Allgather { group: group_of[di], bytes: gathered_bytes, moves: remote[di].clone(), into_generation: true },
                        vec![alloc],
                    )
                });
                select_step[di] = b.push(
                    d,
                    StepKind::SelectCopy { aliased, local, gathered, alias_bytes: alias_bytes[di] },
                    vec![alloc, allgather_step[di]],
                );
            }
        }
    }
    if executor == Executor::AllgatherSwap {
        for d in 0..world {
            let di = d as usize;
            let mut deps: Vec<Option<usize>> = groups[group_of[di]].iter().map(|m| allgather_step[*m as usize]).collect();
            deps.push(Some(select_step[di]));
            let full = bytes(&held[di]);
            let d2h = b.push(d, StepKind::SwapD2h { bytes: full }, deps);
            b.push(d, StepKind::FreeUpdate, vec![Some(d2h)]);
            if temp_bytes[di] > 0 {
                b.push(d, StepKind::FreeTemp, vec![Some(d2h)]);
            }
            b.push(d, StepKind::SwapH2d { bytes: full }, vec![Some(d2h)]);
        }
    }

    let mut predicted_peak = Vec::with_capacity(world as usize);
    let mut predicted_gen = Vec::with_capacity(world as usize);
    for d in 0..world {
        let di = d as usize;
        let update_bytes = bytes(&held[di]);
        let mut occ = update_bytes;
        let mut peak = occ;
        for s in b.steps.iter().filter(|s| s.device == d) {
            match &s.kind {
                StepKind::AllocTemp { bytes } | StepKind::AllocGeneration { bytes } => occ += bytes,
                StepKind::FreeUpdate => occ -= update_bytes - alias_bytes[di],
                StepKind::FreeTemp => occ -= temp_bytes[di],
                _ => {}
            }
            peak = peak.max(occ);
        }
        predicted_peak.push(peak);
        predicted_gen.push(occ);
    }

    Ok(ReshardPlan {
        executor,
        update: *update,
        generation: *generation,
        world,
        pieces,
        update_holdings: held,
        generation_holdings: need,
        groups,
        steps: b.steps,
        predicted_peak_bytes: predicted_peak,
        predicted_generation_bytes: predicted_gen,
    })
}

impl ReshardPlan {
    pub fn piece_bytes(&self, ids: &[usize]) -> u64 {
        ids.iter().map(|p| self.pieces[*p].bytes).sum()
    }

    pub fn update_bytes(&self, device: u32) -> u64 {
        self.piece_bytes(&self.update_holdings[device as usize])
    }

    pub fn generation_bytes(&self, device: u32) -> u64 {
        self.piece_bytes(&self.generation_holdings[device as usize])
    }

    /// Steps of one device, in plan order.
    pub fn device_steps(&self, device: u32) -> impl Iterator<Item = &PlanStep> {
        self.steps.iter().filter(move |s| s.device == device)
    }

    /// True if `to` is reachable from `from` along dependency edges.
    pub fn depends_on(&self, to: usize, from: usize) -> bool {
        let mut stack = vec![to];
        let mut seen = BTreeSet::new();
        while let Some(s) = stack.pop() {
            if s == from {
                return true;
            }
            if seen.insert(s) {
                stack.extend(&self.steps[s].deps);
            }
        }
        false
    }
}
