mod common;

use std::collections::BTreeMap;

use detnet5g::admission::RejectReason;
use detnet5g::nwtt::MatchMode;
use detnet5g::scenario::{
    canonical_scenario, load_topology, Scenario, ScenarioFlow, SourceModel, UeScheduleEntry,
};
use detnet5g::sim::{parse_us, run, RunOptions, SimError, SimOutput};
use detnet5g::topology::TopologyFile;

fn opts(dejitter: bool, background: bool) -> RunOptions {
    RunOptions {
        seed: None,
        dejitter,
        background,
    }
}

fn short(mut sc: Scenario, ms: u64) -> Scenario {
    sc.sim.duration_ms = ms;
    sc
}

fn assert_clean(out: &SimOutput) {
    let r = &out.report;
    assert!(r.conservation_ok, "conservation broken");
    for f in r.flows.iter().filter(|f| f.critical) {
        assert_eq!(f.violations.total(), 0, "{}: {:?}", f.flow_id, f.violations);
        assert_eq!(f.dropped, 0, "{} lost packets", f.flow_id);
        let (lat, bound) = (f.latency.unwrap(), f.bound_us.unwrap());
        assert!(
            lat.max_us <= bound as f64,
            "{} max {} > {bound}",
            f.flow_id,
            lat.max_us
        );
    }
    assert_eq!(r.total_violations, 0);
}

#[test]
fn canonical_runs_clean_in_every_mode() {
    let sc = short(canonical_scenario(), 5000);
    for dj in [false, true] {
        for bg in [false, true] {
            let out = run(&sc, &opts(dj, bg)).unwrap();
            assert_clean(&out);
            let r = &out.report;
            assert_eq!((r.dejitter, r.background), (dj, bg));
            assert_eq!(r.flow("background").is_some(), bg);
            let crit = r.flow("ue1-critical").unwrap();
            // 8 ms period over 5 s
            assert_eq!(crit.emitted, 625);
            assert_eq!(crit.received, 625);
            assert!(crit.transit_latency.is_some());
        }
    }
}

#[test]
fn dejittered_flow_sees_constant_latency() {
    let sc = short(canonical_scenario(), 5000);
    let off = run(&sc, &opts(false, false)).unwrap();
    let on = run(&sc, &opts(true, false)).unwrap();
    let a = off.report.flow("ue1-critical").unwrap();
    let b = on.report.flow("ue1-critical").unwrap();
    assert!(a.latency.unwrap().jitter_us > 0.0);
    assert_eq!(b.latency.unwrap().jitter_us, 0.0);
    assert!(
        b.bound_us > a.bound_us,
        "the regulator bound is charged only when on"
    );
}

#[test]
fn background_mostly_hurts_best_effort() {
    let sc = short(canonical_scenario(), 5000);
    let quiet = run(&sc, &opts(true, false)).unwrap();
    let loud = run(&sc, &opts(true, true)).unwrap();
    let be = |o: &SimOutput| {
        o.report
            .flow("ue2-best-effort")
            .unwrap()
            .latency
            .unwrap()
            .max_us
    };
    assert!(be(&loud) > 2.0 * be(&quiet));
    let crit = |o: &SimOutput| o.report.flow("ue1-critical").unwrap().latency.unwrap();
    // constant until the regulator, then blocked by best-effort frames
    assert_eq!(crit(&quiet).jitter_us, 0.0);
    assert!(crit(&loud).max_us > crit(&quiet).max_us);
    assert_clean(&loud);
}

#[test]
fn runs_are_deterministic_and_seed_dependent() {
    let g = common::admitted_scenarios(50, 3);
    for gen in &g {
        let sc = &gen.scenario;
        let a = run(sc, &opts(true, true)).unwrap();
        let b = run(sc, &opts(true, true)).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.trace, b.trace);
    }
    // greedy sources draw their pauses from the seed
    let sc = common::admitted_scenarios(50, 20)
        .into_iter()
        .find(|g| {
            g.scenario
                .flows
                .iter()
                .any(|f| matches!(f.source, SourceModel::GreedyTokenBucket { pause_permille, .. } if pause_permille > 0))
        })
        .expect("a scenario with a pausing greedy source")
        .scenario;
    let a = run(
        &sc,
        &RunOptions {
            seed: Some(1),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let b = run(
        &sc,
        &RunOptions {
            seed: Some(2),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_ne!(a.trace, b.trace);
    assert_eq!((a.report.seed, b.report.seed), (1, 2));
}

#[test]
fn critical_flows_are_delivered_in_order() {
    for gen in common::admitted_scenarios(200, 8) {
        let out = run(&gen.scenario, &RunOptions::default()).unwrap();
        let mut last: BTreeMap<&str, u64> = BTreeMap::new();
        let critical: Vec<&str> = out
            .report
            .flows
            .iter()
            .filter(|f| f.critical)
            .map(|f| f.flow_id.as_str())
            .collect();
        let mut rows: Vec<_> = out
            .trace
            .iter()
            .filter(|r| critical.contains(&r.flow_id.as_str()) && !r.dropped)
            .collect();
        rows.sort_by_key(|r| (r.flow_id.clone(), r.seq));
        for r in rows {
            let recv = parse_us(&r.t_recv_us).unwrap();
            if let Some(prev) = last.insert(&r.flow_id, recv) {
                assert!(
                    recv >= prev,
                    "{} #{} overtook its predecessor",
                    r.flow_id,
                    r.seq
                );
            }
        }
    }
}

#[test]
fn trace_matches_report() {
    let out = run(&short(canonical_scenario(), 3000), &RunOptions::default()).unwrap();
    for f in &out.report.flows {
        let rows: Vec<_> = out
            .trace
            .iter()
            .filter(|r| r.flow_id == f.flow_id)
            .collect();
        assert_eq!(rows.len() as u64, f.emitted);
        assert_eq!(rows.iter().filter(|r| r.dropped).count() as u64, f.dropped);
        assert_eq!(f.emitted, f.received + f.dropped);
        for r in rows {
            assert_eq!(r.dropped, r.t_recv_us.is_empty());
        }
    }
}

#[test]
fn downlink_flow_meets_its_bound() {
    let mut sc = short(canonical_scenario(), 4000);
    sc.flows.push(ScenarioFlow {
        flow_id: "d-to-ue2".into(),
        src: "D".into(),
        dst: "UE2".into(),
        rate_bps: 20_000,
        burst_bytes: 2000,
        max_pkt_bytes: 1000,
        deadline_us: 200_000,
        dejitter: false,
        critical: true,
        source: SourceModel::BurstPeriodic {
            period_us: 100_000,
            burst_pkts: 2,
            pkt_bytes: 1000,
            offset_us: Some(123),
        },
    });
    let out = run(&sc, &RunOptions::default()).unwrap();
    assert_clean(&out);
    let f = out.report.flow("d-to-ue2").unwrap();
    assert_eq!(f.received, 80);
    assert!(f.transit_latency.unwrap().min_us > 0.0);
}

#[test]
fn removed_ue_stops_its_traffic() {
    let mut sc = short(canonical_scenario(), 6000);
    sc.topology.as_mut().unwrap().fiveg_poll_interval_s = Some(1);
    sc.sim.ue_schedule = vec![UeScheduleEntry {
        at_ms: 2000,
        ues: vec!["UE2".into()],
    }];
    let out = run(&sc, &opts(true, false)).unwrap();
    let r = &out.report;
    assert!(r.conservation_ok);
    let ev = r
        .ue_events
        .iter()
        .find(|e| !e.removed.is_empty())
        .expect("a removal event");
    assert_eq!(ev.removed, vec!["UE1".into()]);
    assert_eq!(ev.orphaned, vec!["ue1-critical".to_owned()]);
    let crit = r.flow("ue1-critical").unwrap();
    assert_eq!(ev.at_ms, 2000);
    assert_eq!(crit.emitted, 250, "UE1 sends until the report at 2 s");
    assert!(r.flow("ue2-best-effort").unwrap().emitted > 1000);
}

#[test]
fn per_class_regulator_is_clean() {
    let mut sc = short(canonical_scenario(), 4000);
    sc.nwtt.dejitter.as_mut().unwrap().mode = MatchMode::PerClass;
    assert_clean(&run(&sc, &RunOptions::default()).unwrap());
}

#[test]
fn line_topology_without_5g() {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../scenarios/line_topology.json"
    );
    let topo = load_topology(std::path::Path::new(path)).unwrap();
    let mut sc = short(canonical_scenario(), 3000);
    sc.topology = Some(TopologyFile::from(&topo));
    sc.nwtt.dejitter = None;
    sc.sim.background.clear();
    sc.flows = vec![ScenarioFlow {
        flow_id: "a-b".into(),
        src: "A".into(),
        dst: "B".into(),
        rate_bps: 10_000,
        burst_bytes: 1000,
        max_pkt_bytes: 500,
        deadline_us: 100_000,
        dejitter: false,
        critical: true,
        source: SourceModel::GreedyTokenBucket {
            pkt_bytes: 500,
            pause_permille: 100,
            max_pause_us: 5000,
        },
    }];
    let out = run(&sc, &RunOptions::default()).unwrap();
    assert_clean(&out);
    let f = out.report.flow("a-b").unwrap();
    assert!(f.transit_latency.is_none());
    assert!(f.received > 50);
}

#[test]
fn infeasible_flow_is_reported() {
    let mut sc = canonical_scenario();
    sc.flows[0].deadline_us = 1000;
    match run(&sc, &RunOptions::default()) {
        Err(SimError::AdmissionMissing {
            flow_id, reason, ..
        }) => {
            assert_eq!(flow_id, "ue1-critical");
            assert_eq!(reason, RejectReason::DeadlineInfeasible);
        }
        other => panic!(
            "expected a missing admission, got {:?}",
            other.map(|o| o.report)
        ),
    }
}
