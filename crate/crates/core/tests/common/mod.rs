//! Random topologies and admitted scenarios shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detnet5g::admission::{AdmissionOptions, FlowSpec, NetworkState};
use detnet5g::nwtt::{MatchMode, RegulatorConfig};
use detnet5g::scenario::{
    AdmissionBlock, BackgroundSource, ClassesBlock, NwttBlock, Scenario, ScenarioFlow, SimBlock,
    SourceModel,
};
use detnet5g::topology::{Link, LinkAttrs, NodeId, PortId, SwitchProfile, Topology, TopologyFile};
use detnet5g::transit5g::{TddConfig, TransitNode5G, UeRecord};

/// Link rates whose byte time is a whole number of nanoseconds.
pub const RATES: [u64; 4] = [125_000, 250_000, 500_000, 1_000_000];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct PortAlloc(BTreeMap<String, u32>);

impl PortAlloc {
    fn next(&mut self, sw: &str) -> PortId {
        let n = self.0.entry(sw.to_owned()).or_insert(0);
        *n += 1;
        PortId::new(sw, *n)
    }
}

/// A connected switch graph with `n` switches, as a list of unordered pairs
/// without repeats.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra_prob: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 1..n {
        edges.push((rng.gen_range(0..i), i));
    }
    for a in 0..n {
        for b in a + 1..n {
            if !edges.contains(&(a, b)) && rng.gen_bool(extra_prob) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Topology over `edges` with no hosts, for tree counting.
pub fn bare_topology(n: usize, edges: &[(usize, usize)]) -> Topology {
    let mut alloc = PortAlloc(BTreeMap::new());
    let name = |i: usize| format!("S{}", i + 1);
    let mut topo = Topology::default();
    for i in 0..n {
        topo.switches
            .insert(NodeId::from(name(i).as_str()), SwitchProfile::default());
    }
    for &(a, b) in edges {
        let pa = alloc.next(&name(a));
        let pb = alloc.next(&name(b));
        topo.links.insert(Link::new(pa, pb), LinkAttrs::default());
    }
    topo
}

fn random_pattern(rng: &mut ChaCha8Rng) -> String {
    loop {
        let len = rng.gen_range(2..=10);
        let p: String = (0..len)
            .map(|_| *b"DUS".choose(rng).unwrap() as char)
            .collect();
        if p.contains('U') && p.contains('D') {
            return p;
        }
    }
}

pub struct Generated {
    pub scenario: Scenario,
    pub topology: Topology,
    pub admitted: usize,
}

/// A random scenario whose critical flows were all admitted. `None` when no
/// flow could be admitted.
pub fn random_scenario(seed: u64) -> Option<Generated> {
    let mut rng = rng(seed);
    let n = rng.gen_range(2..=5);
    let mut alloc = PortAlloc(BTreeMap::new());
    let mut topo = Topology::default();
    let name = |i: usize| format!("S{}", i + 1);
    for i in 0..n {
        let profile = SwitchProfile {
            class_count: 4,
            fwd_delay_us: (0..4).map(|_| rng.gen_range(0..=20)).collect(),
            port_buffer_bytes: *[20_000, 64_000, 200_000].choose(&mut rng).unwrap(),
            link_rate_bps: *RATES.choose(&mut rng).unwrap(),
        };
        topo.switches
            .insert(NodeId::from(name(i).as_str()), profile);
    }
    for (a, b) in random_graph(&mut rng, n, 0.3) {
        let pa = alloc.next(&name(a));
        let pb = alloc.next(&name(b));
        let attrs = LinkAttrs {
            prop_delay_us: rng.gen_range(0..=10),
        };
        topo.links.insert(Link::new(pa, pb), attrs);
    }
    let hosts = rng.gen_range(2..=4);
    for h in 0..hosts {
        let sw = name(rng.gen_range(0..n));
        topo.hosts.insert(
            NodeId::from(format!("H{}", h + 1).as_str()),
            alloc.next(&sw),
        );
    }
    if rng.gen_bool(0.6) {
        let tdd = TddConfig::new(&random_pattern(&mut rng), rng.gen_range(0..=2))
            .unwrap()
            .with_grant_delay(rng.gen_range(0..=2));
        let ues = (0..rng.gen_range(1..=2))
            .map(|i| {
                let u = UeRecord::new(
                    format!("UE{}", i + 1).as_str(),
                    rng.gen_range(200..=3000),
                    rng.gen_range(500..=5000),
                );
                (u.id.clone(), u)
            })
            .collect();
        let sw = name(rng.gen_range(0..n));
        topo.transit = Some(TransitNode5G {
            id: "5GS".into(),
            tdd,
            ues,
            attach: alloc.next(&sw),
        });
    }
    topo.validate().ok()?;

    let regulator = RegulatorConfig {
        hold_us: rng.gen_range(0..=3000),
        release_period_us: rng.gen_range(1000..=8000),
        queue_cap_pkts: 256,
        mode: if rng.gen_bool(0.5) {
            MatchMode::PerFlow
        } else {
            MatchMode::PerClass
        },
    };
    let mut state = NetworkState::new(
        topo.clone(),
        AdmissionOptions {
            regulator: Some(regulator),
            ..AdmissionOptions::default()
        },
    )
    .ok()?;

    let mut endpoints: Vec<NodeId> = topo.hosts.keys().cloned().collect();
    if let Some(t) = &topo.transit {
        endpoints.extend(t.ues.keys().cloned());
    }
    let pick_pair = |rng: &mut ChaCha8Rng| loop {
        let s = endpoints.choose(rng).unwrap().clone();
        let d = endpoints.choose(rng).unwrap().clone();
        if s != d && !(topo.is_ue(&s) && topo.is_ue(&d)) {
            return (s, d);
        }
    };

    let mut flows = Vec::new();
    for i in 0..rng.gen_range(1..=8) {
        let (src, dst) = pick_pair(&mut rng);
        let max_pkt = rng.gen_range(64..=1500u64);
        let burst = max_pkt * rng.gen_range(1..=4u64);
        let rate = rng.gen_range(1000..=40_000u64);
        let uplink = topo.is_ue(&src);
        let dejitter = uplink && rng.gen_bool(0.5);
        let spec = FlowSpec {
            flow_id: format!("c{i}"),
            src: src.clone(),
            dst: dst.clone(),
            rate_bps: rate,
            burst_bytes: burst,
            max_pkt_bytes: max_pkt,
            deadline_us: rng.gen_range(5_000..=2_000_000),
            dejitter,
        };
        if !state.register_flow(spec.clone()).is_accept() {
            continue;
        }
        let source = match rng.gen_range(0..10) {
            0..=5 => SourceModel::GreedyTokenBucket {
                pkt_bytes: max_pkt,
                pause_permille: rng.gen_range(0..=300),
                max_pause_us: rng.gen_range(0..=20_000),
            },
            6..=7 => {
                let pkts = burst / max_pkt;
                let bytes = pkts * max_pkt;
                SourceModel::BurstPeriodic {
                    period_us: (bytes * 1_000_000).div_ceil(rate),
                    burst_pkts: pkts as u32,
                    pkt_bytes: max_pkt,
                    offset_us: None,
                }
            }
            _ => SourceModel::Periodic {
                period_us: (max_pkt * 1_000_000).div_ceil(rate),
                pkt_bytes: max_pkt,
                offset_us: None,
            },
        };
        flows.push(ScenarioFlow {
            flow_id: spec.flow_id,
            src,
            dst,
            rate_bps: rate,
            burst_bytes: burst,
            max_pkt_bytes: max_pkt,
            deadline_us: spec.deadline_us,
            dejitter,
            critical: true,
            source,
        });
    }
    let admitted = flows.len();
    if admitted == 0 {
        return None;
    }
    for i in 0..rng.gen_range(0..=2) {
        let (src, dst) = pick_pair(&mut rng);
        let pkt = rng.gen_range(40..=1500);
        flows.push(ScenarioFlow {
            flow_id: format!("be{i}"),
            src,
            dst,
            rate_bps: 1000,
            burst_bytes: pkt,
            max_pkt_bytes: pkt,
            deadline_us: 1_000_000,
            dejitter: false,
            critical: false,
            source: SourceModel::Periodic {
                period_us: rng.gen_range(500..=20_000),
                pkt_bytes: pkt,
                offset_us: None,
            },
        });
    }
    let mut background = Vec::new();
    if rng.gen_bool(0.7) {
        let hosts: Vec<&NodeId> = topo.hosts.keys().collect();
        let src = (*hosts.choose(&mut rng).unwrap()).clone();
        let dst = loop {
            let d = endpoints.choose(&mut rng).unwrap().clone();
            if d != src {
                break d;
            }
        };
        background.push(BackgroundSource {
            id: "bg".into(),
            src,
            dst,
            source: SourceModel::OnoffBackground {
                on_ms: rng.gen_range(50..=400),
                off_ms: rng.gen_range(50..=400),
                rate_bps: *RATES.choose(&mut rng).unwrap(),
                pkt_bytes: 1500,
                start_ms: rng.gen_range(0..=100),
            },
        });
    }

    let scenario = Scenario {
        schema_version: 1,
        name: Some(format!("random-{seed}")),
        topology: Some(TopologyFile::from(&topo)),
        topology_file: None,
        classes: Some(ClassesBlock {
            count: 4,
            best_effort_class: 0,
        }),
        flows,
        nwtt: NwttBlock {
            dejitter: Some(regulator),
        },
        admission: AdmissionBlock::default(),
        sim: SimBlock {
            duration_ms: 2000,
            seed,
            background,
            ue_schedule: Vec::new(),
        },
    };
    Some(Generated {
        scenario,
        topology: topo,
        admitted,
    })
}

/// The first `count` generator seeds from `start` that yield a scenario.
pub fn admitted_scenarios(start: u64, count: usize) -> Vec<Generated> {
    (start..).filter_map(random_scenario).take(count).collect()
}
