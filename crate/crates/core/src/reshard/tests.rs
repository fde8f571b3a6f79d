use super::*;
use crate::domain::ClusterSpec;
use crate::simnet::{Location, Sim};
use crate::units::{Bandwidth, ByteSize, GIB};
use proptest::prelude::*;

fn layout(tp: u32, ep: u32, dp: u32) -> ParallelLayout {
    ParallelLayout::new(tp, 1, dp, ep, 1)
}

/// Fig. 3 model: four experts, unit-sized blobs.
fn moe(unit: u64) -> ModelSpec {
    ModelSpec {
        common_bytes: ByteSize(unit),
        tp_sharded_bytes: ByteSize(2 * unit),
        expert_bytes: ByteSize(4 * unit),
        num_experts: 4,
        num_layers: 1,
    }
}

fn cluster(nodes: u32, per_node: u32, device_gib: u64) -> ClusterSpec {
    let mut c = ClusterSpec::with_inter_bw(nodes, per_node, Bandwidth::gib_per_s(25));
    c.device_memory = ByteSize::gib(device_gib);
    c
}

fn dense_ablation() -> (ModelSpec, ParallelLayout, ParallelLayout, ClusterSpec) {
    (
        ModelSpec::dense(ByteSize::gib(4), ByteSize::gib(64)),
        layout(8, 1, 2),
        layout(4, 1, 4),
        cluster(2, 8, 128),
    )
}

#[test]
fn shard_maps_for_moe_layouts() {
    let m = moe(1024);
    let up = shard_map(&m, &layout(2, 2, 2), 4).unwrap();
    for d in &up.devices {
        assert_eq!(d.experts.len(), 2);
        assert_eq!(d.bytes, 1024 + 1024 + 2048);
    }
    assert_eq!(up.devices[0].experts, vec![0, 1]);
    assert_eq!(up.devices[1].experts, vec![0, 1]);
    assert_eq!(up.devices[2].experts, vec![2, 3]);
    up.check_coverage(4).unwrap();

    let gen = shard_map(&m, &layout(1, 4, 4), 4).unwrap();
    for (i, d) in gen.devices.iter().enumerate() {
        assert_eq!(d.experts, vec![i as u32]);
        assert_eq!(d.bytes, 1024 + 2048 + 1024);
    }
    gen.check_coverage(4).unwrap();

    let dense = ModelSpec::dense(ByteSize(100), ByteSize(800));
    let tp = shard_map(&dense, &layout(8, 1, 1), 8).unwrap();
    assert!(tp.devices.iter().all(|d| d.bytes == 100 + 100));
    tp.check_coverage(1).unwrap();
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = moe(1024);
    assert!(matches!(shard_map(&m, &layout(2, 2, 3), 4), Err(ReshardError::Layout { .. })));
    assert!(matches!(shard_map(&m, &layout(1, 3, 3), 3), Err(ReshardError::Core(_))));
    let pp = ParallelLayout::new(1, 2, 2, 1, 1);
    let dense = ModelSpec::dense(ByteSize(64), ByteSize(64));
    let err = plan_reshard(&dense, &pp, &layout(1, 1, 4), 4, 4, Executor::AllgatherSwap);
    assert!(matches!(err, Err(ReshardError::Unsupported(_))));
    let odd = ModelSpec::dense(ByteSize(64), ByteSize(63));
    let err = plan_reshard(&odd, &layout(2, 1, 2), &layout(4, 1, 1), 4, 4, Executor::AllgatherSwap);
    assert!(matches!(err, Err(ReshardError::Granularity(_))));
}

#[test]
fn identity_plan_is_swap_only() {
    let m = ModelSpec::dense(ByteSize::kib(4), ByteSize::kib(16));
    let l = layout(2, 1, 2);
    let plan = plan_reshard(&m, &l, &l, 4, 4, Executor::AllgatherSwap).unwrap();
    for s in &plan.steps {
        assert!(
            matches!(
                s.kind,
                StepKind::SelectCopy { .. } | StepKind::SwapD2h { .. } | StepKind::FreeUpdate | StepKind::SwapH2d { .. }
            ),
            "{s:?}"
        );
        if let StepKind::SelectCopy { local, gathered, .. } = &s.kind {
            assert!(local.is_empty() && gathered.is_empty());
        }
    }
    let mut sim = Sim::new(cluster(1, 4, 1));
    let out = execute(&plan, &mut sim, &ExecOptions { content_seed: Some(3), corrupt: None }).unwrap();
    assert_eq!(out.report.checksum, Verdict::Pass);
    assert_eq!(out.report.allgather_bytes, 0);
    assert_eq!(out.report.per_device_peak_bytes, vec![plan.update_bytes(0); 4]);
}

#[test]
fn moe_plan_groups_and_expert_regroup() {
    let m = moe(1024);
    let (up, gen) = (layout(2, 2, 2), layout(1, 4, 4));
    let plan = plan_reshard(&m, &up, &gen, 4, 4, Executor::AllgatherSwap).unwrap();
    assert_eq!(plan.groups, vec![vec![0, 1], vec![2, 3]]);
    let u = shard_map(&m, &up, 4).unwrap();
    let g = shard_map(&m, &gen, 4).unwrap();
    for d in 0..4 {
        assert_eq!(u.devices[d].experts.len(), 2);
        assert_eq!(g.devices[d].experts.len(), 1);
        assert!(u.devices[d].experts.contains(&g.devices[d].experts[0]));
    }
    let gathered: u64 = plan
        .steps
        .iter()
        .filter_map(|s| match &s.kind {
            StepKind::Allgather { bytes, .. } => Some(*bytes),
            _ => None,
        })
        .sum();
    // every device receives the other TP half
    assert_eq!(gathered, 4 * 1024);
}

#[test]
fn dense_ablation_plan_shape() {
    let (m, up, gen, c) = dense_ablation();
    let plan = plan_reshard(&m, &up, &gen, 16, c.devices_per_node, Executor::AllgatherSwap).unwrap();
    // TP blobs are eighths; a generation device needs two of them
    for d in 0..16u32 {
        let tp: Vec<_> = plan.generation_holdings[d as usize]
            .iter()
            .filter(|p| matches!(plan.pieces[**p].kind, PieceKind::Tp { .. }))
            .collect();
        assert_eq!(tp.len(), 2);
    }
    for s in &plan.steps {
        if let StepKind::Allgather { moves, .. } = &s.kind {
            for mv in moves {
                // sources stay inside the update TP group
                assert_eq!(mv.from / 8, s.device / 8);
            }
        }
    }
}

#[test]
fn dense_ablation_releases_one_update_shard() {
    let (m, up, gen, c) = dense_ablation();
    let cmp = compare_executors(&m, &up, &gen, &c, &ExecOptions::default()).unwrap();
    for (d, delta) in cmp.per_device_delta_bytes.iter().enumerate() {
        assert_eq!(*delta, 8 * GIB as i64, "device {d}");
    }
    assert_eq!(cmp.predicted_per_replica_bytes, 8.0 * GIB as f64);
    // swap keeps no update weights on device during generation
    assert!(cmp.swap.per_device_generation_bytes.iter().all(|b| *b == 4 * GIB + 16 * GIB));
}

#[test]
fn moe_redundancy_matches_closed_form() {
    let c = cluster(1, 4, 1);
    let cmp = compare_executors(&moe(4096), &layout(2, 2, 2), &layout(1, 4, 4), &c, &ExecOptions::default()).unwrap();
    assert_eq!(cmp.total_delta_bytes as f64, cmp.predicted_total_bytes);
    assert!(cmp.per_device_delta_bytes.iter().all(|d| *d == 4096 + 4096));
}

#[test]
fn nothing_to_reshard_means_no_redundancy() {
    let m = ModelSpec::dense(ByteSize::kib(8), ByteSize(0));
    let cmp = compare_executors(&m, &layout(2, 1, 2), &layout(1, 1, 4), &cluster(1, 4, 1), &ExecOptions::default()).unwrap();
    assert!(cmp.per_device_delta_bytes.iter().all(|d| *d == 0));
}

#[test]
fn d2h_of_64_gib_per_node_takes_1_28_s() {
    let m = ModelSpec::dense(ByteSize(0), ByteSize::gib(64));
    let l = layout(8, 1, 1);
    let plan = plan_reshard(&m, &l, &l, 8, 8, Executor::AllgatherSwap).unwrap();
    let mut sim = Sim::new(cluster(1, 8, 64));
    let out = execute(&plan, &mut sim, &ExecOptions::default()).unwrap();
    assert_eq!(out.report.d2h_bytes, 64 * GIB);
    assert!((out.report.wall_time_s - 1.28).abs() < 1e-9, "{}", out.report.wall_time_s);
}

#[test]
fn reconstruction_and_negative_control() {
    let m = moe(2048);
    let (up, gen) = (layout(2, 2, 2), layout(1, 4, 4));
    let plan = plan_reshard(&m, &up, &gen, 4, 2, Executor::AllgatherSwap).unwrap();
    let c = cluster(2, 2, 1);
    let mut sim = Sim::new(c.clone());
    let mut out = execute(&plan, &mut sim, &ExecOptions { content_seed: Some(9), corrupt: None }).unwrap();
    assert_eq!(out.report.checksum, Verdict::Pass);
    assert_eq!(out.source_checksum(), out.reconstructed_checksum());
    for d in 0..4 {
        assert_eq!(sim.timeline(Location::Device(d)).unwrap().tag_bytes("update"), 0);
    }
    let ids = out.start_restore(&mut sim).unwrap();
    assert_eq!(ids.len(), 4);
    sim.run_until_idle().unwrap();
    out.finish_restore(&mut sim).unwrap();
    assert_eq!(out.report.restore_matches, Some(true));
    assert!(out.report.h2d_restore_time_s.unwrap() > 0.0);

    let mut sim = Sim::new(c);
    let bad = execute(&plan, &mut sim, &ExecOptions { content_seed: Some(9), corrupt: Some((2, 6149)) }).unwrap();
    assert_eq!(bad.report.checksum, Verdict::Mismatch(Mismatch { device: 2, offset: 6149 }));
    assert_ne!(bad.source_checksum(), bad.reconstructed_checksum());
}

#[test]
fn plan_json_round_trip() {
    let plan = plan_reshard(&moe(1024), &layout(2, 2, 2), &layout(1, 4, 4), 4, 4, Executor::Naive).unwrap();
    let text = serde_json::to_string(&plan).unwrap();
    assert!(text.contains("\"op\":\"allgather\""));
    let back: ReshardPlan = serde_json::from_str(&text).unwrap();
    assert_eq!(back, plan);
}

fn arb_case() -> impl Strategy<Value = (ModelSpec, ParallelLayout, ParallelLayout, u32, u32)> {
    let pow2 = |max: u32| (0..=max).prop_map(|e| 1u32 << e);
    (pow2(3), pow2(3), pow2(3), pow2(3), pow2(1), any::<bool>(), 1u64..32, 1u64..64, 1u64..32)
        .prop_filter_map("layout must fit", |(world, ut, gt, ep_seed, pp, moe, c, t, e)| {
            if ut > world || gt > world || world % pp != 0 {
                return None;
            }
            let per = world / pp;
            if per % ut != 0 || per % gt != 0 {
                return None;
            }
            let (udp, gdp) = (per / ut, per / gt);
            let ep = |tp: u32, dp: u32| if moe { (ep_seed).min(tp * dp) } else { 1 };
            let up = ParallelLayout::new(ut, pp, udp, ep(ut, udp), 1);
            let gen = ParallelLayout::new(gt, pp, gdp, ep(gt, gdp).max(1), 1);
            let pp = pp as u64;
            let model = ModelSpec {
                common_bytes: ByteSize(pp * c * 16),
                tp_sharded_bytes: ByteSize(pp * 8 * t * 16),
                expert_bytes: ByteSize(if moe { pp * 8 * e * 16 } else { 0 }),
                num_experts: if moe { 8 } else { 1 },
                num_layers: 1,
            };
            Some((model, up, gen, world, 1 + (world / 2).max(1)))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn swap_reconstructs_exactly((model, up, gen, world, dpn) in arb_case(), seed in any::<u64>()) {
        let nodes = world.div_ceil(dpn.min(world));
        let per_node = world / nodes;
        prop_assume!(per_node * nodes == world);
        let c = cluster(nodes, per_node, 1);
        for ex in [Executor::AllgatherSwap, Executor::Naive] {
            let plan = plan_reshard(&model, &up, &gen, world as u64, per_node, ex).unwrap();
            let mut sim = Sim::new(c.clone());
            let out = execute(&plan, &mut sim, &ExecOptions { content_seed: Some(seed), corrupt: None }).unwrap();
            prop_assert_eq!(out.report.checksum, Verdict::Pass);
            prop_assert_eq!(&out.report.per_device_peak_bytes, &plan.predicted_peak_bytes);
            prop_assert_eq!(&out.report.per_device_generation_bytes, &plan.predicted_generation_bytes);
            if ex == Executor::AllgatherSwap {
                for d in 0..world {
                    prop_assert_eq!(sim.timeline(Location::Device(d)).unwrap().tag_bytes("update"), 0);
                    prop_assert_eq!(out.report.per_device_generation_bytes[d as usize], plan.generation_bytes(d));
                }
            }
        }
    }

    #[test]
    fn plan_graph_is_well_formed((model, up, gen, world, _dpn) in arb_case()) {
        for ex in [Executor::AllgatherSwap, Executor::Naive] {
            let plan = plan_reshard(&model, &up, &gen, world as u64, 4, ex).unwrap();
            for s in &plan.steps {
                prop_assert!(s.deps.iter().all(|d| *d < s.id), "acyclic by construction");
                match &s.kind {
                    StepKind::AllocTemp { .. } => {
                        let frees = plan.device_steps(s.device).filter(|t| matches!(t.kind, StepKind::FreeTemp)).count();
                        prop_assert_eq!(frees, 1);
                    }
                    StepKind::SwapH2d { .. } => {
                        let d2h = plan.device_steps(s.device).find(|t| matches!(t.kind, StepKind::SwapD2h { .. })).unwrap();
                        prop_assert!(plan.depends_on(s.id, d2h.id));
                    }
                    StepKind::SelectCopy { gathered, .. } if !gathered.is_empty() => {
                        let ag = plan.device_steps(s.device).find(|t| matches!(t.kind, StepKind::Allgather { .. })).unwrap();
                        prop_assert!(plan.depends_on(s.id, ag.id));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn naive_excess_matches_unaliased_holdings((model, up, gen, world, _dpn) in arb_case()) {
        prop_assume!(world >= 1);
        let c = cluster(1, world, 1);
        let cmp = compare_executors(&model, &up, &gen, &c, &ExecOptions::default()).unwrap();
        prop_assert!(cmp.per_device_delta_bytes.iter().all(|d| *d >= 0));
        if up.pp == 1 && !model.is_moe() {
            let per = model.tp_sharded_bytes.0 as i64 / up.tp as i64;
            prop_assert!(cmp.per_device_delta_bytes.iter().all(|d| *d == per));
        }
    }
}
