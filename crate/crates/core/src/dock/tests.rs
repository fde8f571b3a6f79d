use super::*;
use crate::costmodel::{metadata_bytes, cost_row_config, tcv_centralized_bytes, tcv_per_warehouse, T100_BW};
use crate::domain::{make_sample, record_bytes};
use crate::simnet::LinkKind;
use crate::units::{Bandwidth, GIB_F};
use proptest::prelude::*;

fn rl(g: u64, n: u64) -> RLConfig {
    RLConfig {
        global_batch: g,
        responses_per_prompt: n,
        dtype_bytes: 4,
        prompt_len: 16,
        response_len: 32,
        response_like_items: 5,
        scalar_items: 3,
    }
}

fn cluster(nodes: u32) -> ClusterSpec {
    ClusterSpec::with_inter_bw(nodes, 2, Bandwidth::mib_per_s(100))
}

fn grpo_specs() -> Vec<StateSpec> {
    grpo_script(&rl(1, 1), false).specs()
}

fn dock(cfg: &DockConfig, nodes: u32, rl: &RLConfig) -> (TransferDock, Sim) {
    let c = cluster(nodes);
    (TransferDock::build(cfg, &c, rl, &grpo_specs()).unwrap(), Sim::new(c))
}

fn nic_bytes(sim: &Sim) -> u64 {
    sim.ledger().per_link.iter().filter(|(l, _)| l.kind == LinkKind::Nic).map(|(_, b)| *b).sum()
}

/// Puts generation outputs for `indices` from each index's own warehouse node.
fn produce(d: &mut TransferDock, sim: &mut Sim, indices: &[u64]) {
    for &i in indices {
        let node = d.executor_node(i);
        d.put(sim, WorkerStateId::ActorGeneration, node, vec![(i, Payload::Virtual(10))]).unwrap();
    }
    d.settle(sim).unwrap();
}

#[test]
fn build_partitions_by_index_mod_s() {
    let (d, _) = dock(&DockConfig::transfer_dock(5, 4), 4, &rl(8, 2));
    let owned: Vec<u64> = (0..16).filter(|i| d.warehouse_of(*i) == 0).collect();
    assert_eq!(owned, vec![0, 4, 8, 12]);
    let (d, _) = dock(&DockConfig::transfer_dock(5, 1), 4, &rl(8, 2));
    assert!((0..16).all(|i| d.warehouse_of(i) == 0));
}

#[test]
fn build_rejects_bad_placement() {
    let mut cfg = DockConfig::transfer_dock(5, 4);
    cfg.warehouse_placement = Some(vec![0, 1, 2, 99]);
    let err = TransferDock::build(&cfg, &cluster(4), &rl(1, 1), &grpo_specs()).err().unwrap();
    assert!(matches!(err, DockError::Config(_)));
    let mut cfg = DockConfig::centralized();
    cfg.central_node = 4;
    assert!(TransferDock::build(&cfg, &cluster(4), &rl(1, 1), &grpo_specs()).is_err());
    // GRPO needs five controllers
    assert!(TransferDock::build(&DockConfig::transfer_dock(4, 4), &cluster(4), &rl(1, 1), &grpo_specs()).is_err());
}

#[test]
fn put_locality_and_remote_bytes() {
    let cfg = rl(1, 1);
    let rec = Arc::new(make_sample(1, 0, &cfg).unwrap());
    let (mut d, mut sim) = dock(&DockConfig::transfer_dock(5, 2), 2, &cfg);
    let home = d.warehouse_node(0);
    d.put(&mut sim, WorkerStateId::ActorGeneration, home, vec![(0, Payload::Record(rec.clone()))]).unwrap();
    d.settle(&mut sim).unwrap();
    let sample_nic: u64 = sim
        .ledger()
        .log
        .iter()
        .filter(|r| r.tag == Tag::SampleFlow && r.src != r.dst)
        .map(|r| r.bytes)
        .sum();
    assert_eq!(sample_nic, 0);

    let (mut d, mut sim) = dock(&DockConfig::transfer_dock(5, 2), 2, &cfg);
    d.put(&mut sim, WorkerStateId::ActorGeneration, 1 - home, vec![(0, Payload::Record(rec))]).unwrap();
    d.settle(&mut sim).unwrap();
    assert_eq!(sim.ledger().tag_bytes(Tag::SampleFlow), record_bytes(&cfg).unwrap());
}

#[test]
fn duplicate_put_is_rejected() {
    let (mut d, mut sim) = dock(&DockConfig::transfer_dock(5, 1), 1, &rl(1, 2));
    d.put(&mut sim, WorkerStateId::ActorGeneration, 0, vec![(0, Payload::Virtual(1))]).unwrap();
    let again = d.put(&mut sim, WorkerStateId::ActorGeneration, 0, vec![(0, Payload::Virtual(1))]);
    assert!(matches!(again, Err(DockError::DuplicatePut { index: 0, .. })));
    let twice = d.put(&mut sim, WorkerStateId::ActorGeneration, 0, vec![(1, Payload::Virtual(1)), (1, Payload::Virtual(1))]);
    assert!(twice.is_err());
    // consumers must claim before producing
    let early = d.put(&mut sim, WorkerStateId::RewardScore, 0, vec![(0, Payload::Virtual(0))]);
    assert!(matches!(early, Err(DockError::NotClaimed { .. })));
}

#[test]
fn request_batches_and_readiness() {
    let (mut d, mut sim) = dock(&DockConfig::transfer_dock(5, 2), 2, &rl(8, 2));
    assert!(d.request_metadata(WorkerStateId::RewardScore, 5, 0).unwrap().is_empty());
    assert!(matches!(
        d.request_metadata(WorkerStateId::ActorGeneration, 1, 0),
        Err(DockError::NotConsumer(_))
    ));
    produce(&mut d, &mut sim, &(0..16).collect::<Vec<_>>());
    let got = d.request_metadata(WorkerStateId::RewardScore, 5, 0).unwrap();
    assert_eq!(got.len(), 5);
    assert_eq!(d.unclaimed(WorkerStateId::RewardScore).unwrap(), 11);
    for m in &got {
        assert_eq!(m.status[&WorkerStateId::RewardScore], SampleStatus::Claimed);
    }
    // update still waits for the inference outputs
    assert!(d.request_metadata(WorkerStateId::ActorUpdate, 16, 0).unwrap().is_empty());
}

#[test]
fn racing_consumers_get_one_grant() {
    for mode in [DockMode::TransferDock, DockMode::Centralized] {
        for order in [[0u32, 1], [1, 0]] {
            let cfg = DockConfig::transfer_dock(5, 2).with_mode(mode, 2);
            let (mut d, mut sim) = dock(&cfg, 2, &rl(1, 1));
            produce(&mut d, &mut sim, &[0]);
            let grants: usize = order
                .iter()
                .map(|node| d.request_metadata(WorkerStateId::ActorOldLogprob, 1, *node).unwrap().len())
                .sum();
            assert_eq!(grants, 1, "{mode} {order:?}");
        }
    }
}

#[test]
fn fetch_requires_claim_and_moves_payload() {
    let cfg = rl(2, 2);
    let (mut d, mut sim) = dock(&DockConfig::transfer_dock(5, 2), 2, &cfg);
    let originals: Vec<Arc<SampleRecord>> = (0..4).map(|i| Arc::new(make_sample(3, i, &cfg).unwrap())).collect();
    for (i, r) in originals.iter().enumerate() {
        d.put(&mut sim, WorkerStateId::ActorGeneration, 0, vec![(i as u64, Payload::Record(r.clone()))]).unwrap();
    }
    d.settle(&mut sim).unwrap();
    let dest = |_i: u64| 0u32;
    let unclaimed = d.fetch(&mut sim, WorkerStateId::ActorOldLogprob, &[0], &dest, None);
    assert!(matches!(unclaimed, Err(DockError::NotClaimed { .. })));

    let batch: Vec<u64> = d
        .request_metadata(WorkerStateId::ActorOldLogprob, 4, 0)
        .unwrap()
        .iter()
        .map(|m| m.index)
        .collect();
    assert_eq!(batch.len(), 4);
    let before = sim.ledger().tag_bytes(Tag::SampleFlow);
    let remote: Vec<u64> = batch.iter().copied().filter(|i| d.warehouse_node(d.warehouse_of(*i)) != 0).collect();
    let nic_before = nic_bytes(&sim);
    d.fetch(&mut sim, WorkerStateId::ActorOldLogprob, &remote, &dest, None).unwrap();
    d.settle(&mut sim).unwrap();
    let k = remote.len() as u64;
    assert_eq!(sim.ledger().tag_bytes(Tag::SampleFlow) - before, k * record_bytes(&cfg).unwrap());
    // both endpoint NICs carry the batch
    assert_eq!(nic_bytes(&sim) - nic_before, 2 * k * record_bytes(&cfg).unwrap());
    for i in batch {
        let stored = d.stored_record(WorkerStateId::ActorGeneration, i).unwrap().unwrap();
        assert_eq!(stored.checksum(), originals[i as usize].checksum());
    }
}

#[test]
fn commit_accounting_and_propagation() {
    let cfg = RLConfig { scalar_items: 3, dtype_bytes: 4, ..rl(1, 1) };
    let (report, sim, d) = run_epoch(
        &DockConfig::transfer_dock(5, 1),
        &cluster(1),
        &cfg,
        grpo_script(&cfg, false),
        EpochOptions::new(&DockConfig::transfer_dock(5, 1), &cluster(1), &cfg),
    )
    .unwrap();
    // controller broadcasts over one record's epoch: 5 x 8 x 3 x 4
    assert_eq!(d.counters().broadcast_messages, 8 * 5);
    let broadcast: u64 = report.per_warehouse_metadata_bytes[0] - 8 * cfg.descriptor_bytes();
    assert_eq!(broadcast, 480);
    assert_eq!(sim.ledger().tag_bytes(Tag::Metadata), metadata_bytes(&cfg, 5).unwrap());

    // a single commit: warehouse descriptor plus C broadcasts
    let (mut d, mut sim) = dock(&DockConfig::transfer_dock(5, 1), 1, &cfg);
    produce(&mut d, &mut sim, &[0]);
    d.request_metadata(WorkerStateId::ActorOldLogprob, 1, 0).unwrap();
    d.put(&mut sim, WorkerStateId::ActorOldLogprob, 0, vec![(0, Payload::Virtual(0))]).unwrap();
    d.settle(&mut sim).unwrap();
    let before = sim.ledger().tag_bytes(Tag::Metadata);
    d.commit(&mut sim, WorkerStateId::ActorOldLogprob, 0, &[0]).unwrap();
    assert!(d.commit(&mut sim, WorkerStateId::ActorOldLogprob, 0, &[0]).is_err());
    assert_eq!(d.metadata(0).unwrap().status[&WorkerStateId::ActorOldLogprob], SampleStatus::Claimed);
    d.settle(&mut sim).unwrap();
    assert_eq!(sim.ledger().tag_bytes(Tag::Metadata) - before, 6 * 3 * 4);
    assert_eq!(d.metadata(0).unwrap().status[&WorkerStateId::ActorOldLogprob], SampleStatus::Consumed);
    for c in d.roster().to_vec() {
        assert_eq!(d.controller_status(c, 0).unwrap(), d.metadata(0).unwrap().status[&c]);
    }
    assert!(d.views_converged());
    assert!(d.commit(&mut sim, WorkerStateId::ActorOldLogprob, 0, &[0]).is_err());
    assert!(d.commit(&mut sim, WorkerStateId::RewardScore, 0, &[0]).is_err());
}

fn table_scenario() -> (ClusterSpec, DockConfig) {
    let c = ClusterSpec::with_inter_bw(2, 1, T100_BW);
    let mut cfg = DockConfig::centralized();
    cfg.worker_nodes = Some(vec![1]);
    (c, cfg)
}

#[test]
fn centralized_epoch_matches_closed_forms() {
    let cfg = cost_row_config(0).unwrap();
    let (cluster, dc) = table_scenario();
    let opts = EpochOptions { batch_size: 256, ..EpochOptions::new(&dc, &cluster, &cfg) };
    let (report, sim, _) = run_epoch(&dc, &cluster, &cfg, grpo_script(&cfg, false), opts).unwrap();
    let ledger = sim.ledger().tag_bytes(Tag::SampleFlow) + sim.ledger().tag_bytes(Tag::Metadata);
    assert_eq!(ledger, tcv_centralized_bytes(&cfg).unwrap());
    assert_eq!(report.per_warehouse_bytes, vec![ledger]);
    let expected = ledger as f64 / T100_BW.as_f64();
    assert!((report.dispatch_time_s - expected).abs() / expected < 1e-9, "{}", report.dispatch_time_s);
    assert!((report.dispatch_time_s - 9.92).abs() / 9.92 < 0.02);
}

#[test]
fn transfer_dock_per_warehouse_volume() {
    let cfg = RLConfig { global_batch: 16, ..cost_row_config(0).unwrap() };
    let nodes = 4;
    let c = ClusterSpec::with_inter_bw(nodes, 1, T100_BW);
    let dc = DockConfig::transfer_dock(5, nodes);
    let opts = EpochOptions { batch_size: 8, ..EpochOptions::new(&dc, &c, &cfg) };
    let (report, _, _) = run_epoch(&dc, &c, &cfg, grpo_script(&cfg, false), opts).unwrap();
    let expected = tcv_per_warehouse(&cfg, 5, nodes as u64).unwrap();
    for (w, b) in report.per_warehouse_bytes.iter().enumerate() {
        let got = *b as f64 / GIB_F;
        assert!((got - expected).abs() / expected < 0.01, "warehouse {w}: {got} vs {expected}");
        assert_eq!(report.per_warehouse_metadata_bytes[w] * nodes as u64, metadata_bytes(&cfg, 5).unwrap());
    }
}

#[test]
fn empty_epoch() {
    let cfg = RLConfig { global_batch: 0, ..rl(1, 1) };
    let dc = DockConfig::transfer_dock(5, 2);
    let (report, sim, _) = run_epoch(&dc, &cluster(2), &cfg, grpo_script(&cfg, false), EpochOptions::new(&dc, &cluster(2), &cfg)).unwrap();
    assert_eq!(report.dispatch_time_s, 0.0);
    assert_eq!(sim.now(), 0.0);
    assert_eq!(sim.ledger().total_bytes(), 0);
}

#[test]
fn missing_producer_deadlocks() {
    let cfg = rl(2, 2);
    let dc = DockConfig::transfer_dock(5, 2);
    let c = cluster(2);
    let full = grpo_script(&cfg, false);
    let dock = TransferDock::build(&dc, &c, &cfg, &full.specs()).unwrap();
    let script = full.without(WorkerStateId::ActorGeneration);
    let mut sim = Sim::new(c.clone());
    let mut runner = EpochRunner::new(dock, script, EpochOptions::new(&dc, &c, &cfg)).unwrap();
    match runner.run(&mut sim, &mut NoHook) {
        Err(DockError::Deadlock { stuck }) => {
            assert_eq!(stuck.len(), 4 * 4);
            assert!(stuck.contains(&(WorkerStateId::ActorUpdate, 3)));
        }
        other => panic!("expected deadlock, got {other:?}"),
    }
}

#[test]
fn real_records_survive_an_epoch() {
    let cfg = rl(2, 2);
    let dc = DockConfig::transfer_dock(5, 2);
    let c = cluster(2);
    let opts = EpochOptions { seed: 11, ..EpochOptions::new(&dc, &c, &cfg) };
    let (report, sim, d) = run_epoch(&dc, &c, &cfg, grpo_script(&cfg, true), opts).unwrap();
    for i in 0..4 {
        let stored = d.stored_record(WorkerStateId::ActorGeneration, i).unwrap().unwrap();
        assert_eq!(stored.checksum(), make_sample(11, i, &cfg).unwrap().checksum());
    }
    // generation put plus the update's fetch of the stored record
    let rb = record_bytes(&cfg).unwrap();
    let inference: u64 = 4 * cfg.dtype_bytes * cfg.response_len * cfg.response_like_items;
    assert_eq!(sim.ledger().tag_bytes(Tag::SampleFlow), 4 * 2 * rb + inference);
    assert!(report.end_time_s > 0.0);
}

#[test]
fn locality_reduces_inter_node_requests() {
    let cfg = rl(8, 2);
    for s in [2u32, 4] {
        let c = cluster(s);
        let td = DockConfig::transfer_dock(5, s);
        let cen = DockConfig::centralized();
        let opts = EpochOptions { batch_size: 2, ..EpochOptions::new(&td, &c, &cfg) };
        let (a, _, _) = run_epoch(&td, &c, &cfg, grpo_script(&cfg, false), opts.clone()).unwrap();
        let (b, _, _) = run_epoch(&cen, &c, &cfg, grpo_script(&cfg, false), opts).unwrap();
        assert!(a.inter_node_messages < b.inter_node_messages, "S={s}: {} vs {}", a.inter_node_messages, b.inter_node_messages);
    }
}

#[test]
fn report_json_keys() {
    let cfg = rl(1, 2);
    let dc = DockConfig::transfer_dock(5, 2);
    let (report, _, _) = run_epoch(&dc, &cluster(2), &cfg, grpo_script(&cfg, false), EpochOptions::new(&dc, &cluster(2), &cfg)).unwrap();
    let v = serde_json::to_value(&report).unwrap();
    for key in ["mode", "S", "C", "dispatch_time_s", "per_tag_bytes", "per_warehouse_bytes", "inter_node_messages"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(v["mode"], "transfer_dock");
}

#[test]
fn config_serde_defaults() {
    let cfg: DockConfig = serde_json::from_str(r#"{"mode":"transferdock","num_controllers":5,"num_warehouses":4}"#).unwrap();
    assert_eq!(cfg, DockConfig::transfer_dock(5, 4));
    assert!(serde_json::from_str::<DockConfig>(r#"{"mode":"x","num_controllers":5,"num_warehouses":4}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exactly_once_under_random_interleavings(
        seed in any::<u64>(),
        nodes in 1u32..4,
        replicas in 1u32..4,
        batch in 1usize..5,
        g in 0u64..6,
        centralized in any::<bool>(),
        barriers in any::<bool>(),
    ) {
        let cfg = rl(g, 2);
        let c = cluster(nodes);
        let mut dc = if centralized { DockConfig::centralized() } else { DockConfig::transfer_dock(5, nodes) };
        dc.replicas_per_state = replicas;
        dc.barriers = barriers;
        let opts = EpochOptions {
            seed,
            randomize: true,
            jitter_s: 1e-6,
            batch_size: batch,
            ..EpochOptions::new(&dc, &c, &cfg)
        };
        let (report, sim, d) = run_epoch(&dc, &c, &cfg, grpo_script(&cfg, false), opts).unwrap();
        // run_epoch audits exactly-once; check no loss and convergence on top
        prop_assert!(d.unfinished(&WorkerStateId::GRPO).is_empty());
        prop_assert!(d.views_converged());
        let sum: u64 = report.per_warehouse_bytes.iter().sum();
        prop_assert_eq!(sum, sim.ledger().tag_bytes(Tag::SampleFlow) + sim.ledger().tag_bytes(Tag::Metadata));
        if centralized && g > 0 {
            prop_assert_eq!(sum, tcv_centralized_bytes(&cfg).unwrap());
        }
    }

    #[test]
    fn same_seed_same_report(seed in any::<u64>()) {
        let cfg = rl(3, 2);
        let c = cluster(3);
        let dc = DockConfig::transfer_dock(5, 3);
        let opts = EpochOptions { seed, randomize: true, jitter_s: 1e-3, batch_size: 3, ..EpochOptions::new(&dc, &c, &cfg) };
        let a = run_epoch(&dc, &c, &cfg, grpo_script(&cfg, false), opts.clone()).unwrap().0;
        let b = run_epoch(&dc, &c, &cfg, grpo_script(&cfg, false), opts).unwrap().0;
        prop_assert_eq!(a, b);
    }
}
