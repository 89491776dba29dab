use ejfat_core::protocol::DiscardReason;
use ejfat_core::sim::{
    read_trace, run_scenario, run_scenario_to_dir, run_scenario_with, CnWeight, ControlTiming,
    DelayDist, Direction, EpochSpec, Impairment, RunOptions, ScenarioConfig, SimError, SizeDist,
};

fn single_path() -> ScenarioConfig {
    ScenarioConfig {
        name: "single".into(),
        daq_count: 1,
        cn_count: 1,
        event_count: 500,
        impairment: Impairment::none(),
        epochs: vec![EpochSpec {
            start_event: 0,
            members: vec![CnWeight { cn: 0, weight: 1.0 }],
        }],
        ..ScenarioConfig::three_epoch_reference(1)
    }
}

fn assert_clean(r: &ejfat_core::sim::ScenarioReport) {
    assert_eq!(r.split_events, 0, "splits");
    assert_eq!(r.misdirected_packets, 0, "misdirected");
    assert_eq!(r.late_activations, 0, "late");
    assert!(r.hitless(), "{:?}", r.counters);
    assert_eq!(r.bundles_completed, r.bundles);
    assert_eq!(r.bundles_lost, 0);
    assert_eq!(r.bundles_corrupt, 0);
    assert_eq!(r.bundles_split_across_ports, 0);
}

#[test]
fn one_source_one_node_delivers_everything() {
    let r = run_scenario(&single_path()).unwrap();
    assert_clean(&r);
    assert_eq!(r.counters.packets_in, r.data_packets);
    assert_eq!(r.counters.packets_out, r.data_packets);
    assert_eq!(r.max_displacement, 0);
    assert_eq!(r.epochs[0].events_per_cn[&0], 500);
}

#[test]
fn three_epoch_reference_run() {
    let r = run_scenario(&ScenarioConfig::three_epoch_reference(7)).unwrap();
    assert_clean(&r);
    assert!(r.counters.packets_in >= 100_000, "{}", r.counters.packets_in);
    assert!(r.max_displacement > 1000);

    let e: Vec<_> = r.epochs.iter().map(|e| e.events_per_cn.clone()).collect();
    assert_eq!(e[0].keys().copied().collect::<Vec<_>>(), vec![0]);
    assert_eq!(e[1].keys().copied().collect::<Vec<_>>(), vec![4, 5, 6]);
    assert_eq!(e[2].len(), 10);
    assert_eq!(e[0][&0], 2500);
    assert_eq!(e[1].values().sum::<u64>(), 2500);
    assert_eq!(e[2].values().sum::<u64>(), 2000);
    let top = e[2].iter().max_by_key(|(_, n)| **n).unwrap();
    assert_eq!(*top.0, 5);
    assert!(e[2].iter().filter(|(cn, _)| **cn != 5).all(|(_, n)| n < top.1));

    // every epoch but the last was retired after its successor took over
    for k in 0..2 {
        let (now, next) = (&r.epochs[k], &r.epochs[k + 1]);
        assert!(next.activated_at_ns.unwrap() < next.first_arrival_ns.unwrap());
        assert!(now.cleaned_up_at_ns.unwrap() > next.first_arrival_ns.unwrap());
    }
    assert!(r.epochs[2].cleaned_up_at_ns.is_none());
}

#[test]
fn deterministic_for_a_seed() {
    let mut cfg = ScenarioConfig::three_epoch_reference(3);
    cfg.event_count = 3000;
    cfg.epochs[1].start_event = 1000;
    cfg.epochs[2].start_event = 2000;
    let a = run_scenario(&cfg).unwrap();
    assert_eq!(a, run_scenario(&cfg).unwrap());
    cfg.seed = 4;
    assert_ne!(a, run_scenario(&cfg).unwrap());
}

#[test]
fn assignment_independent_of_reordering() {
    let mut cfg = ScenarioConfig::three_epoch_reference(11);
    cfg.event_count = 4000;
    cfg.epochs[1].start_event = 1500;
    cfg.epochs[2].start_event = 3000;
    cfg.impairment.reorder_window = 0;
    let calm = run_scenario_with(&cfg, RunOptions::default()).unwrap();
    cfg.impairment.reorder_window = 1000;
    let rough = run_scenario_with(&cfg, RunOptions::default()).unwrap();
    assert_clean(&calm.report);
    assert_clean(&rough.report);
    assert_eq!(calm.assignments, rough.assignments);
    assert_eq!(calm.report.assignment_digest, rough.report.assignment_digest);
    for (a, b) in calm.report.epochs.iter().zip(&rough.report.epochs) {
        assert_eq!(a.events_per_cn, b.events_per_cn);
    }
}

#[test]
fn workers_do_not_change_the_outcome() {
    let mut cfg = ScenarioConfig::three_epoch_reference(5);
    cfg.event_count = 4000;
    cfg.epochs[1].start_event = 1500;
    cfg.epochs[2].start_event = 3000;
    let one = run_scenario(&cfg).unwrap();
    cfg.workers = 4;
    assert_eq!(run_scenario(&cfg).unwrap(), one);
}

#[test]
fn slot_share_is_exact_over_full_cycles() {
    let mut cfg = single_path();
    cfg.cn_count = 3;
    cfg.event_count = 512 * 6;
    cfg.epochs[0].members = vec![
        CnWeight { cn: 0, weight: 1.0 },
        CnWeight { cn: 1, weight: 1.0 },
        CnWeight { cn: 2, weight: 2.0 },
    ];
    let r = run_scenario(&cfg).unwrap();
    assert_clean(&r);
    let got: Vec<u64> = r.epochs[0].events_per_cn.values().copied().collect();
    assert_eq!(got, vec![128 * 6, 128 * 6, 256 * 6]);
}

#[test]
fn injected_noise_is_the_only_thing_discarded() {
    let mut cfg = ScenarioConfig::three_epoch_reference(21);
    cfg.event_count = 3000;
    cfg.epochs[1].start_event = 1000;
    cfg.epochs[2].start_event = 2000;
    cfg.noise_rate = 0.02;
    let r = run_scenario(&cfg).unwrap();
    assert_clean(&r);
    assert!(r.noise_packets > 500);
    assert_eq!(r.deliberate_discards, r.noise_packets);
    assert_eq!(r.counters.packets_in, r.data_packets + r.noise_packets);
    for reason in [
        DiscardReason::L2Reject,
        DiscardReason::L3Reject,
        DiscardReason::NotLbPort,
        DiscardReason::BadMagic,
        DiscardReason::BadVersion,
        DiscardReason::Truncated,
    ] {
        assert!(r.counters.discarded(reason) > 0, "{reason}");
    }
}

#[test]
fn loss_shows_up_as_lost_bundles_not_splits() {
    let mut cfg = ScenarioConfig::three_epoch_reference(9);
    cfg.event_count = 3000;
    cfg.epochs[1].start_event = 1000;
    cfg.epochs[2].start_event = 2000;
    cfg.impairment.loss_rate = 0.01;
    let r = run_scenario(&cfg).unwrap();
    assert!(r.impairment_dropped > 0);
    assert!(r.bundles_lost > 0);
    assert_eq!(r.split_events, 0);
    assert_eq!(r.misdirected_packets, 0);
    assert!(r.hitless());
    assert_eq!(r.counters.packets_in + r.impairment_dropped, r.data_packets);
}

#[test]
fn early_cleanup_splits_events() {
    // Retiring the old epoch while its packets are still in flight sends
    // stragglers to the new calendar.
    let mut cfg = ScenarioConfig::three_epoch_reference(13);
    cfg.event_count = 3000;
    cfg.epochs[1].start_event = 1000;
    cfg.epochs[2].start_event = 2000;
    cfg.control.quiesce_packets = Some(0);
    let r = run_scenario(&cfg).unwrap();
    assert!(r.split_events > 0);
    assert!(r.misdirected_packets > 0);
}

#[test]
fn late_activation_is_detected() {
    let mut cfg = ScenarioConfig::three_epoch_reference(17);
    cfg.event_count = 3000;
    cfg.epochs[1].start_event = 1000;
    cfg.epochs[2].start_event = 2000;
    cfg.control = ControlTiming {
        activation_lead_events: Some(0),
        ..Default::default()
    };
    let r = run_scenario(&cfg).unwrap();
    assert!(r.late_activations > 0);
    assert!(r.split_events > 0);
}

#[test]
fn toml_round_trip_and_validation() {
    let cfg = ScenarioConfig::three_epoch_reference(99);
    let text = cfg.to_toml_string();
    assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);

    let minimal = r#"
        seed = 1
        daq_count = 2
        cn_count = 2
        event_count = 100
        bundle_size = { kind = "fixed", bytes = 3000 }
        impairment = { reorder_window = 50, delay = { kind = "exponential", mean = 10.0 } }

        [[epochs]]
        start_event = 0
        members = [{ cn = 0 }, { cn = 1, weight = 3 }]
    "#;
    let cfg = ScenarioConfig::from_toml_str(minimal).unwrap();
    assert_eq!(cfg.impairment.delay, DelayDist::Exponential { mean: 10.0 });
    assert_eq!(cfg.bundle_size, SizeDist::Fixed { bytes: 3000 });
    assert_clean(&run_scenario(&cfg).unwrap());

    let bad = |edit: &dyn Fn(&mut ScenarioConfig)| {
        let mut c = ScenarioConfig::three_epoch_reference(1);
        edit(&mut c);
        matches!(run_scenario(&c), Err(SimError::ConfigInvalid(_)))
    };
    assert!(bad(&|c| c.epochs[2].start_event = c.epochs[1].start_event));
    assert!(bad(&|c| c.epochs[0].start_event = 5));
    assert!(bad(&|c| c.epochs[1].members.push(CnWeight { cn: 10, weight: 1.0 })));
    assert!(bad(&|c| c.epochs[1].members[0].weight = 0.0));
    assert!(bad(&|c| c.epochs.clear()));
    assert!(bad(&|c| c.mtu_payload = 9000));
    assert!(bad(&|c| c.daq_count = 0));
    assert!(ScenarioConfig::from_toml_str("seed = 1\nbogus = 2").is_err());
}

#[test]
fn traces_written_and_consistent() {
    let mut cfg = ScenarioConfig::three_epoch_reference(2);
    cfg.event_count = 600;
    cfg.epochs[1].start_event = 200;
    cfg.epochs[2].start_event = 400;
    cfg.impairment.reorder_window = 100;
    cfg.noise_rate = 0.01;
    let dir = tempfile::tempdir().unwrap();
    let r = run_scenario_to_dir(&cfg, dir.path()).unwrap();
    assert_clean(&r);

    let tin = read_trace(&dir.path().join("trace_in.csv")).unwrap();
    let tout = read_trace(&dir.path().join("trace_out.csv")).unwrap();
    assert_eq!(tin.len() as u64, r.counters.packets_in);
    assert_eq!(tout.len() as u64, r.counters.packets_out);
    assert!(tin.iter().all(|t| t.direction == Direction::In));
    assert!(tout.iter().all(|t| t.direction == Direction::Out));
    assert!(tin.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));
    assert!(tout.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["split_events"], 0);
    let timeline = std::fs::read_to_string(dir.path().join("timeline.csv")).unwrap();
    assert!(timeline.starts_with("bucket_start_ns,daq,cn,epoch,packets"));
    let total: u64 = timeline
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, r.counters.packets_out);
}

#[test]
fn shipped_scenario_is_the_reference() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/three_epoch.toml");
    assert_eq!(ScenarioConfig::load(&path).unwrap(), ScenarioConfig::three_epoch_reference(1));
}
