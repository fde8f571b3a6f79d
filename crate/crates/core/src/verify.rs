//! The acceptance suite: each criterion runs a scenario, compares it with its
//! oracle and reports pass or fail with a short detail line.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ReshardChoice, ScenarioConfig, StagePlan};
use crate::costmodel::{metadata_bytes, cost_rows, tcv_centralized_bytes, tcv_per_warehouse};
use crate::dock::{grpo_script, run_epoch, ComputeModel, DockConfig, DockMode, EpochOptions, EpochReport};
use crate::domain::{ClusterSpec, ModelSpec, ParallelLayout, RLConfig, WorkerStateId};
use crate::pipeline::{compare_modes, run_iteration, run_linearity, IterationOptions, IterationReport, LinearityReport};
use crate::presets::{preset, Expectation, ScenarioPreset, LINEARITY_NODES, LINEARITY_PROMPTS_PER_NODE};
use crate::reshard::{
    compare_executors, execute, plan_reshard, shard_map, ExecOptions, Executor, ReshardReport, Verdict,
};
use crate::simnet::{Sim, Tag};
use crate::units::{Bandwidth, ByteSize, GIB_F};

/// Criterion ids, groups and names, in suite order.
pub const CRITERIA: [(u8, &str, &str); 9] = [
    (1, "cost", "table reproduction"),
    (2, "dock", "simulated centralized dispatch matches closed form"),
    (3, "dock", "per-warehouse volume"),
    (4, "dock", "exactly-once under random interleavings"),
    (5, "reshard", "allgather-swap reconstruction and restore"),
    (6, "reshard", "redundant memory released"),
    (7, "pipeline", "fixed per-node load scaling"),
    (8, "pipeline", "restore overlaps inference"),
    (9, "determinism", "equal seeds give identical reports"),
];

/// Sizes of the randomized criteria.
pub const INTERLEAVINGS: usize = 1000;
pub const RESHARD_TRIPLES: usize = 200;
/// Relative slack for float time comparisons that are exact in closed form.
pub const TIME_EPS: f64 = 1e-9;
/// Relative slack for "equal" dispatch times of the simulated and printed
/// table cells.
pub const DISPATCH_REL_TOL: f64 = 0.02;
/// Per-warehouse bytes against the closed form.
pub const WAREHOUSE_REL_TOL: f64 = 0.01;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Group name, criterion id or name fragment.
    pub filter: Option<String>,
    /// Test hook: add a stray byte to the sample-flow ledger before it is
    /// compared.
    pub perturb_ledger: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub group: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    #[serde(skip)]
    pub elapsed_s: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {}: {} ({:.2}s) {}",
            self.id,
            self.group,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed_s,
            self.detail
        )
    }
}

pub fn selected(filter: Option<&str>) -> Vec<u8> {
    CRITERIA
        .iter()
        .filter(|(id, group, name)| match filter {
            None => true,
            Some(f) => {
                let f = f.trim().to_lowercase();
                f == *group || f == id.to_string() || name.contains(f.as_str())
            }
        })
        .map(|c| c.0)
        .collect()
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CriterionResult> {
    selected(opts.filter.as_deref())
        .into_iter()
        .map(|id| {
            let (_, group, name) = CRITERIA[id as usize - 1];
            let t = Instant::now();
            let outcome = run_criterion(id, opts);
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CriterionResult { id, group: group.into(), name: name.into(), passed, detail, elapsed_s: t.elapsed().as_secs_f64() }
        })
        .collect()
}

type Check = Result<String, String>;

fn run_criterion(id: u8, opts: &VerifyOptions) -> Check {
    match id {
        1 => table_reproduction(),
        2 => centralized_concordance(opts.perturb_ledger),
        3 => per_warehouse_volume(),
        4 => exactly_once(opts.seed),
        5 => reshard_reconstruction(opts.seed),
        6 => redundant_memory(),
        7 => linearity(opts.seed).map(|(d, _)| d),
        8 => restore_overlap(),
        9 => determinism(opts.seed),
        _ => Err(format!("no criterion {id}")),
    }
}

fn need(name: &str) -> Result<ScenarioPreset, String> {
    preset(name).ok_or_else(|| format!("missing preset {name}"))
}

fn expect(p: &ScenarioPreset, metric: &str) -> Result<Expectation, String> {
    p.expectation(metric).cloned().ok_or_else(|| format!("{} has no {metric} expectation", p.name))
}

fn table_reproduction() -> Check {
    let mut misses = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, row) in cost_rows().iter().enumerate() {
        let p = need(&format!("cost_row{}_centralized", i + 1))?;
        for (metric, got) in [("tcv_gib", row.report.tcv_gb), ("t100_s", row.report.t100_s), ("t1k_s", row.report.t1k_s)] {
            let e = expect(&p, metric)?;
            if let Expectation::Near { value, .. } = e {
                worst = worst.max((got - value).abs() / value);
            }
            if !e.holds(got) {
                misses.push(format!("row {} {metric}: computed {got:.4} vs {}", i + 1, e.describe()));
            }
        }
    }
    if misses.is_empty() {
        Ok(format!("18 cells, max relative error {:.4}", worst))
    } else {
        Err(misses.join("; "))
    }
}

fn epoch_for(p: &ScenarioPreset, seed: u64) -> Result<(EpochReport, Sim), String> {
    let s = &p.scenario;
    let mut opts = EpochOptions::new(&s.dock, &s.cluster, &s.rl);
    opts.seed = seed;
    let (r, sim, _) = run_epoch(&s.dock, &s.cluster, &s.rl, grpo_script(&s.rl, false), opts).map_err(|e| e.to_string())?;
    Ok((r, sim))
}

fn centralized_concordance(perturb: bool) -> Check {
    let mut out = Vec::new();
    for row in 1..=3 {
        let p = need(&format!("cost_row{row}_centralized"))?;
        let (report, mut sim) = epoch_for(&p, 0)?;
        if perturb {
            sim.perturb_ledger(Tag::SampleFlow, 1);
        }
        let ledger = sim.ledger().tag_bytes(Tag::SampleFlow) + sim.ledger().tag_bytes(Tag::Metadata);
        let want = tcv_centralized_bytes(&p.scenario.rl).map_err(|e| e.to_string())?;
        if ledger != want {
            return Err(format!("row {row}: ledger {ledger} B vs closed form {want} B"));
        }
        let printed = match expect(&p, "t100_s")? {
            Expectation::Near { value, .. } => value,
            _ => return Err("t100_s must be a point value".into()),
        };
        let rel = (report.dispatch_time_s - printed).abs() / printed;
        if rel > DISPATCH_REL_TOL {
            return Err(format!("row {row}: dispatch {:.3}s vs {printed}s", report.dispatch_time_s));
        }
        out.push(format!("row {row} {:.3}s", report.dispatch_time_s));
    }
    Ok(out.join(", "))
}

fn per_warehouse_volume() -> Check {
    let rl = crate::costmodel::cost_row_config(0).ok_or("row 1")?;
    let mut worst: f64 = 0.0;
    for s in [2u32, 4, 8, 16] {
        for c in [5u64, 10] {
            let cluster = ClusterSpec::with_inter_bw(s, 1, crate::costmodel::T100_BW);
            let cfg = DockConfig::transfer_dock(c as u32, s);
            let opts = EpochOptions::new(&cfg, &cluster, &rl);
            let (r, _, _) = run_epoch(&cfg, &cluster, &rl, grpo_script(&rl, false), opts).map_err(|e| e.to_string())?;
            let want = tcv_per_warehouse(&rl, c, s as u64).map_err(|e| e.to_string())?;
            let meta = metadata_bytes(&rl, c).map_err(|e| e.to_string())? / s as u64;
            for (w, (b, m)) in r.per_warehouse_bytes.iter().zip(&r.per_warehouse_metadata_bytes).enumerate() {
                let got = *b as f64 / GIB_F;
                let rel = (got - want).abs() / want;
                worst = worst.max(rel);
                if rel > WAREHOUSE_REL_TOL {
                    return Err(format!("S={s} C={c} warehouse {w}: {got:.6} GiB vs {want:.6}"));
                }
                if *m != meta {
                    return Err(format!("S={s} C={c} warehouse {w}: metadata {m} B vs {meta} B"));
                }
            }
        }
    }
    Ok(format!("8 configurations, max relative error {worst:.2e}, metadata exact"))
}

/// One randomized desk-scale epoch with two racing consumers per state.
pub fn random_epoch(seed: u64) -> Result<EpochReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, n) = loop {
        let g = rng.random_range(1..=32u64);
        let n = rng.random_range(1..=16u64);
        if g * n <= 256 {
            break (g, n);
        }
    };
    let nodes = rng.random_range(1..=4u32);
    let rl = RLConfig {
        global_batch: g,
        responses_per_prompt: n,
        dtype_bytes: 4,
        prompt_len: rng.random_range(1..=64),
        response_len: rng.random_range(1..=64),
        response_like_items: rng.random_range(0..=4),
        scalar_items: rng.random_range(0..=3),
    };
    let cluster = ClusterSpec::with_inter_bw(nodes, rng.random_range(1..=2), Bandwidth::mib_per_s(100));
    let mut cfg = if rng.random_bool(0.5) {
        DockConfig::transfer_dock(5, rng.random_range(1..=4))
    } else {
        DockConfig::centralized()
    };
    cfg.replicas_per_state = 2;
    cfg.batch_fetch_size = Some(rng.random_range(1..=8));
    cfg.barriers = rng.random_bool(0.5);
    let mut opts = EpochOptions::new(&cfg, &cluster, &rl);
    opts.seed = seed;
    opts.randomize = true;
    opts.jitter_s = rng.random_range(0.0..1e-3);
    let (report, _, dock) =
        run_epoch(&cfg, &cluster, &rl, grpo_script(&rl, false), opts).map_err(|e| format!("seed {seed}: {e}"))?;
    let left = dock.unfinished(&WorkerStateId::GRPO);
    if !left.is_empty() {
        return Err(format!("seed {seed}: {} (state, index) pairs left", left.len()));
    }
    Ok(report)
}

fn exactly_once(seed: u64) -> Check {
    let mut records = 0;
    for k in 0..INTERLEAVINGS as u64 {
        records += random_epoch(seed.wrapping_add(k))?.records;
    }
    Ok(format!("{INTERLEAVINGS} interleavings, {records} records, each consumed once per state"))
}

/// A random small (model, update, generation, devices per node) case with
/// blobs of at most 64 KiB.
pub fn random_reshard_case(rng: &mut ChaCha8Rng) -> (ModelSpec, ParallelLayout, ParallelLayout, u32, u32) {
    let pow2 = |rng: &mut ChaCha8Rng, max: u32| 1u32 << rng.random_range(0..=max);
    loop {
        let world = pow2(rng, 3);
        let pp = pow2(rng, 1);
        let (ut, gt) = (pow2(rng, 3), pow2(rng, 3));
        if world % pp != 0 {
            continue;
        }
        let per = world / pp;
        if per % ut != 0 || per % gt != 0 {
            continue;
        }
        let moe = rng.random_bool(0.5);
        let ep_seed = pow2(rng, 3);
        let (udp, gdp) = (per / ut, per / gt);
        let ep = |tp: u32, dp: u32| if moe { ep_seed.min(tp * dp) } else { 1 };
        let up = ParallelLayout::new(ut, pp, udp, ep(ut, udp), 1);
        let gen = ParallelLayout::new(gt, pp, gdp, ep(gt, gdp), 1);
        let p = pp as u64;
        // blob sizes are 16 * k bytes
        let mut k = || rng.random_range(1..=64u64) * 16;
        let model = ModelSpec {
            common_bytes: ByteSize(p * k()),
            tp_sharded_bytes: ByteSize(p * 8 * k()),
            expert_bytes: ByteSize(if moe { p * 8 * k() } else { 0 }),
            num_experts: if moe { 8 } else { 1 },
            num_layers: 1,
        };
        let per_node = if world >= 4 { world / 2 } else { world };
        return (model, up, gen, world, per_node);
    }
}

fn reshard_once(seed: u64, rng: &mut ChaCha8Rng) -> Result<ReshardReport, String> {
    let (model, up, gen, world, per_node) = random_reshard_case(rng);
    let label = format!("{up} -> {gen}");
    let mut cluster = ClusterSpec::with_inter_bw(world / per_node, per_node, Bandwidth::gib_per_s(25));
    cluster.device_memory = ByteSize::mib(64);
    let plan = plan_reshard(&model, &up, &gen, world as u64, per_node, Executor::AllgatherSwap)
        .map_err(|e| format!("{label}: {e}"))?;
    let mut sim = Sim::new(cluster);
    let mut out = execute(&plan, &mut sim, &ExecOptions { content_seed: Some(seed), corrupt: None })
        .map_err(|e| format!("{label}: {e}"))?;
    if out.report.checksum != Verdict::Pass {
        return Err(format!("{label}: {:?}", out.report.checksum));
    }
    if out.reconstructed_checksum() != out.source_checksum() {
        return Err(format!("{label}: reassembled weights differ from the source"));
    }
    out.start_restore(&mut sim).map_err(|e| e.to_string())?;
    sim.run_until_idle().map_err(|e| e.to_string())?;
    out.finish_restore(&mut sim).map_err(|e| e.to_string())?;
    if out.report.restore_matches != Some(true) {
        return Err(format!("{label}: restored update weights differ from the swapped-out copy"));
    }
    Ok(out.report)
}

fn reshard_reconstruction(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut bytes = 0;
    for k in 0..RESHARD_TRIPLES as u64 {
        bytes += reshard_once(seed.wrapping_add(k), &mut rng)?.allgather_bytes;
    }
    Ok(format!("{RESHARD_TRIPLES} triples byte-exact, {bytes} B gathered"))
}

fn redundant_memory() -> Check {
    let p = need("dense_profile")?;
    let s = &p.scenario;
    let cmp = compare_executors(&s.model, &s.layout_update, &s.layout_generation, &s.cluster, &ExecOptions::default())
        .map_err(|e| e.to_string())?;
    let e = expect(&p, "redundant_bytes_per_device")?;
    for (d, delta) in cmp.per_device_delta_bytes.iter().enumerate() {
        if !e.holds(*delta as f64) {
            return Err(format!("device {d}: delta {delta} B, expected {}", e.describe()));
        }
    }
    let dense = cmp.per_device_delta_bytes.first().copied().unwrap_or(0);

    let p = need("moe_reshard")?;
    let s = &p.scenario;
    let cmp = compare_executors(&s.model, &s.layout_update, &s.layout_generation, &s.cluster, &ExecOptions::default())
        .map_err(|e| e.to_string())?;
    let e = expect(&p, "redundant_bytes_total")?;
    if !e.holds(cmp.total_delta_bytes as f64) || cmp.total_delta_bytes as f64 != cmp.predicted_total_bytes {
        return Err(format!(
            "MoE total delta {} B vs predicted {} B",
            cmp.total_delta_bytes, cmp.predicted_total_bytes
        ));
    }
    Ok(format!("dense {:.2} GiB per device, MoE total {} B", dense as f64 / GIB_F, cmp.total_delta_bytes))
}

pub fn linearity_report(seed: u64) -> Result<LinearityReport, String> {
    let p = need("linearity_sweep")?;
    run_linearity(&p.scenario, &LINEARITY_NODES, LINEARITY_PROMPTS_PER_NODE, seed).map_err(|e| e.to_string())
}

fn linearity(seed: u64) -> Result<(String, LinearityReport), String> {
    let p = need("linearity_sweep")?;
    let lin = linearity_report(seed)?;
    let td: Vec<_> = lin.rows_for(DockMode::TransferDock).collect();
    let central: Vec<_> = lin.rows_for(DockMode::Centralized).collect();
    let (Some(td1), Some(c1)) = (td.first(), central.first()) else { return Err("empty sweep".into()) };
    let w = td1.per_warehouse_bytes.first().copied().unwrap_or(0);
    for r in &td {
        if r.per_warehouse_bytes.iter().any(|b| *b != w) {
            return Err(format!("{} nodes: per-warehouse bytes {:?} vs {w}", r.nodes, r.per_warehouse_bytes));
        }
    }
    for r in &central {
        if r.dispatch_bytes != c1.dispatch_bytes * r.nodes as u64 {
            return Err(format!("{} nodes: centralized bytes {} not {} x {}", r.nodes, r.dispatch_bytes, r.nodes, c1.dispatch_bytes));
        }
    }
    let growth = |rows: &[&crate::pipeline::LinearityRow]| rows.last().map_or(0.0, |l| l.dispatch_time_s / rows[0].dispatch_time_s);
    let (tg, cg) = (growth(&td), growth(&central));
    let te = expect(&p, "transfer_dock_dispatch_growth")?;
    let ce = expect(&p, "centralized_dispatch_growth")?;
    if !te.holds(tg) || !ce.holds(cg) {
        return Err(format!("growth 1->8 nodes: transfer dock {tg:.3} ({}), centralized {cg:.2} ({})", te.describe(), ce.describe()));
    }
    let lin8 = td.last().map_or(0.0, |r| r.linearity);
    Ok((format!("growth 1->8 nodes: transfer dock {tg:.3}, centralized {cg:.2}; transfer dock linearity {lin8:.3}"), lin))
}

/// Dense TP2 DP2 to TP1 DP4 on two nodes, no response items or descriptors,
/// so everything between generation and update is instantaneous except the
/// configured inference compute.
pub fn overlap_scenario(inference_s: f64) -> ScenarioConfig {
    let cluster = ClusterSpec::with_inter_bw(2, 2, Bandwidth::mib_per_s(100));
    let mut stages = StagePlan::default();
    for st in [WorkerStateId::ActorOldLogprob, WorkerStateId::ReferenceLogprob, WorkerStateId::RewardScore] {
        stages = stages.with(st, ComputeModel { fixed_s: inference_s, per_token_s: 0.0 });
    }
    ScenarioConfig {
        dock: DockConfig::transfer_dock(5, 2),
        cluster,
        layout_update: ParallelLayout::new(2, 1, 2, 1, 1),
        layout_generation: ParallelLayout::new(1, 1, 4, 1, 1),
        model: ModelSpec::dense(ByteSize::mib(4), ByteSize::mib(64)),
        rl: RLConfig {
            global_batch: 4,
            responses_per_prompt: 2,
            dtype_bytes: 4,
            prompt_len: 64,
            response_len: 64,
            response_like_items: 0,
            scalar_items: 0,
        },
        stages,
        reshard: ReshardChoice::AllgatherSwap,
    }
}

fn update_start(s: &ScenarioConfig, restore: bool) -> Result<IterationReport, String> {
    let mut opts = IterationOptions::new(0);
    opts.restore = restore;
    run_iteration(s, &opts).map(|(r, _)| r).map_err(|e| e.to_string())
}

/// Host-to-device time of the busiest node: its devices' update shards over
/// one host link.
fn restore_oracle(s: &ScenarioConfig) -> Result<f64, String> {
    let map = shard_map(&s.model, &s.layout_update, s.cluster.world_size() as u64).map_err(|e| e.to_string())?;
    let mut per_node = vec![0u64; s.cluster.num_nodes as usize];
    for d in &map.devices {
        per_node[s.cluster.node_of_device(d.device) as usize] += d.bytes;
    }
    let busiest = per_node.into_iter().max().unwrap_or(0);
    Ok(busiest as f64 / s.cluster.h2d_bw.bytes_per_sec() as f64)
}

fn start_of_update(r: &IterationReport) -> Result<f64, String> {
    r.stage(&WorkerStateId::ActorUpdate.name()).map(|s| s.start_s).ok_or_else(|| "no update stage".into())
}

fn restore_overlap() -> Check {
    let long = overlap_scenario(1.0);
    let oracle = restore_oracle(&long)?;
    if oracle > 1.0 {
        return Err(format!("restore {oracle}s does not fit the 1s inference window"));
    }
    let (with, base) = (update_start(&long, true)?, update_start(&long, false)?);
    let (a, b) = (start_of_update(&with)?, start_of_update(&base)?);
    if a != b {
        return Err(format!("hidden restore moved the update from {b}s to {a}s"));
    }
    let short = overlap_scenario(0.0);
    let (with, base) = (update_start(&short, true)?, update_start(&short, false)?);
    let delay = start_of_update(&with)? - start_of_update(&base)?;
    if ((delay - oracle) / oracle).abs() > TIME_EPS {
        return Err(format!("exposed delay {delay}s vs restore {oracle}s"));
    }
    Ok(format!("hidden: update at {a:.6}s in both runs; exposed delay {delay:.6e}s = restore {oracle:.6e}s"))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

/// Serialized reports of every criterion that produces one.
pub fn report_files(seed: u64) -> Result<Vec<(String, String)>, String> {
    let mut files = Vec::new();
    let (epoch, _) = epoch_for(&need("cost_row1_centralized")?, seed)?;
    files.push(("cost_row1_epoch.json".into(), json(&epoch)));
    files.push(("random_epoch.json".into(), json(&random_epoch(seed)?)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    files.push(("reshard.json".into(), json(&reshard_once(seed, &mut rng)?)));
    let moe = need("moe_reshard")?;
    files.push(("moe_modes.json".into(), json(&compare_modes(&moe.scenario, seed).map_err(|e| e.to_string())?)));
    let mut opts = IterationOptions::new(seed);
    opts.randomize = true;
    let (it, sim) = run_iteration(&need("dense_profile")?.scenario, &opts).map_err(|e| e.to_string())?;
    files.push(("dense_iteration.json".into(), json(&it)));
    let mut csv = Vec::new();
    sim.write_ledger_csv(&mut csv).map_err(|e| e.to_string())?;
    sim.write_timeline_csv(&mut csv).map_err(|e| e.to_string())?;
    files.push(("dense_ledger_timeline.csv".into(), String::from_utf8_lossy(&csv).into_owned()));
    files.push(("linearity.json".into(), json(&linearity_report(seed)?)));
    Ok(files)
}

fn determinism(seed: u64) -> Check {
    let a = report_files(seed)?;
    let b = report_files(seed)?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    let bytes: usize = a.iter().map(|(_, t)| t.len()).sum();
    Ok(format!("{} report files, {bytes} B, identical across two runs", a.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_select_groups_and_ids() {
        assert_eq!(selected(Some("reshard")), vec![5, 6]);
        assert_eq!(selected(Some("dock")), vec![2, 3, 4]);
        assert_eq!(selected(Some("7")), vec![7]);
        assert_eq!(selected(None).len(), 9);
        assert!(selected(Some("nothing")).is_empty());
    }

    #[test]
    fn ledger_perturbation_fails_concordance() {
        let r = run_suite(&VerifyOptions { filter: Some("2".into()), perturb_ledger: true, seed: 0 });
        assert_eq!(r.len(), 1);
        assert!(!r[0].passed);
        assert!(r[0].detail.contains("ledger"), "{}", r[0].detail);
    }

    #[test]
    fn random_epochs_finish() {
        for s in 0..40 {
            random_epoch(s).unwrap();
        }
    }

    #[test]
    fn random_reshards_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..20 {
            reshard_once(s, &mut rng).unwrap();
        }
    }

    #[test]
    fn overlap_criterion_holds() {
        restore_overlap().unwrap();
    }
}
