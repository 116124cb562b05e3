//! Discrete-event simulator of the data plane: strict-priority switch ports,
//! the slotted 5G segment and the NW-TT. Every packet is checked against the
//! bounds the admission control computed for its flow.

mod report;
mod source;

pub use report::{
    parse_us, read_trace, summarize_trace, write_trace, FlowReport, LatencyStats, RunReport,
    TraceRecord, TraceSummary, UeEvent, Violations, REPORT_SCHEMA_VERSION,
};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use log::{debug, info, warn};
use thiserror::Error;

use crate::admission::{AdmissionError, Decision, FlowKind, NetworkState, RejectReason};
use crate::calculus::TokenBucket;
use crate::nwtt::{MatchMode, Offer, Policer, Regulator, Reshaper};
use crate::scenario::{Scenario, ScenarioError};
use crate::topology::{NodeId, Peer, PortId};
use crate::transit5g::{Direction, TransitContract, UeRecord};
use crate::units::{transfer_ns_ceil, us_to_ns};
use source::Source;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Admission(#[from] AdmissionError),
    #[error("critical flow `{flow_id}` was not admitted: {reason:?}: {detail}")]
    AdmissionMissing {
        flow_id: String,
        reason: RejectReason,
        detail: String,
    },
    #[error("cannot route `{0}`: {1}")]
    Route(String, String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub dejitter: bool,
    pub background: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            dejitter: true,
            background: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: RunReport,
    pub trace: Vec<TraceRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Emit(usize),
    /// Packet fully received by the switch owning hop `hop`.
    Switch {
        pkt: usize,
        hop: usize,
    },
    /// Forwarding delay elapsed; the packet joins the egress queue.
    Enqueue {
        pkt: usize,
        hop: usize,
    },
    TxDone(usize),
    SlotEnd(Direction),
    Release(usize),
    PollFiveG,
}

#[derive(Debug)]
struct Packet {
    flow: usize,
    seq: u64,
    size: u64,
    sent: u64,
    hop_in: u64,
    fiveg_in: u64,
    recv: Option<u64>,
    dropped: bool,
}

#[derive(Debug)]
struct FlowRt {
    id: String,
    src: NodeId,
    dst: NodeId,
    critical: bool,
    background: bool,
    kind: FlowKind,
    class: u8,
    vlan: Option<u16>,
    hops: Vec<usize>,
    hop_bounds_ns: Vec<u64>,
    e2e_bound_us: Option<u64>,
    transit: Option<TransitContract>,
    regulator: Option<usize>,
    reshaper: Option<Reshaper>,
    policer: Option<Policer>,
    next_seq: u64,
    emitted: u64,
    dropped: u64,
    latencies: Vec<u64>,
    transit_latencies: Vec<u64>,
    violations: Violations,
}

#[derive(Debug)]
struct PortRt {
    id: PortId,
    rate: u64,
    buffer: u64,
    reserved: u64,
    peer: Peer,
    fwd_delay_us: Vec<u64>,
    backlog_bound: Vec<Option<u64>>,
    queues: Vec<VecDeque<usize>>,
    class_bytes: Vec<u64>,
    queued: u64,
    busy: Option<(usize, u64)>,
}

#[derive(Debug, Default)]
struct DirQueue {
    /// (packet, bytes still to send, first slot it may use)
    critical: VecDeque<(usize, u64, u64)>,
    best_effort: VecDeque<(usize, u64, u64)>,
}

impl DirQueue {
    fn is_empty(&self) -> bool {
        self.critical.is_empty() && self.best_effort.is_empty()
    }
}

#[derive(Debug)]
struct UeRt {
    record: UeRecord,
    ul: DirQueue,
    dl: DirQueue,
}

impl UeRt {
    fn queue(&mut self, dir: Direction) -> &mut DirQueue {
        match dir {
            Direction::Uplink => &mut self.ul,
            Direction::Downlink => &mut self.dl,
        }
    }
}

struct RegRt {
    reg: Regulator<usize>,
    scheduled: Option<u64>,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    state: NetworkState,
    now: u64,
    seq: u64,
    events: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    packets: Vec<Packet>,
    flows: Vec<FlowRt>,
    sources: Vec<(usize, Source)>,
    ports: Vec<PortRt>,
    ues: Vec<UeRt>,
    ue_index: BTreeMap<NodeId, usize>,
    slot_active: [bool; 2],
    regulators: Vec<RegRt>,
    ue_events: Vec<UeEvent>,
    stop_ns: u64,
}

fn dir_index(dir: Direction) -> usize {
    match dir {
        Direction::Uplink => 0,
        Direction::Downlink => 1,
    }
}

/// Runs one scenario to completion. Critical flows are admitted first; a
/// rejected one aborts the run.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<SimOutput, SimError> {
    let mut sc = scenario.clone();
    if !opts.dejitter {
        sc = sc.without_dejitter();
    }
    if !opts.background {
        sc = sc.without_background();
    }
    if let Some(seed) = opts.seed {
        sc.sim.seed = seed;
    }
    sc.validate()?;
    let mut sim = Sim::build(&sc)?;
    sim.run();
    Ok(sim.finish(opts))
}

impl<'a> Sim<'a> {
    fn build(sc: &'a Scenario) -> Result<Self, SimError> {
        let topo = sc.topology()?;
        let mut state = NetworkState::new(topo.clone(), sc.admission_options(true))?;
        for f in sc.flows.iter().filter(|f| f.critical) {
            if let Decision::Reject(r) = state.register_flow(f.spec()) {
                return Err(SimError::AdmissionMissing {
                    flow_id: f.flow_id.clone(),
                    reason: r.reason,
                    detail: r.detail,
                });
            }
        }
        let stop_ns = sc.sim.duration_ms * 1_000_000;
        let mut sim = Sim {
            scenario: sc,
            state,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            packets: Vec::new(),
            flows: Vec::new(),
            sources: Vec::new(),
            ports: Vec::new(),
            ues: Vec::new(),
            ue_index: BTreeMap::new(),
            slot_active: [false; 2],
            regulators: Vec::new(),
            ue_events: Vec::new(),
            stop_ns,
        };
        if let Some(t) = &topo.transit {
            for (i, (id, rec)) in t.ues.iter().enumerate() {
                sim.ue_index.insert(id.clone(), i);
                sim.ues.push(UeRt {
                    record: rec.clone(),
                    ul: DirQueue::default(),
                    dl: DirQueue::default(),
                });
            }
        }

        let mut port_index: BTreeMap<PortId, usize> = BTreeMap::new();
        let mut class_regs: BTreeMap<u8, usize> = BTreeMap::new();
        let best_effort_tree = sim.state.trees().first().cloned();
        let all = sc
            .flows
            .iter()
            .map(|f| {
                (
                    f.flow_id.clone(),
                    f.src.clone(),
                    f.dst.clone(),
                    f.critical,
                    false,
                    f.spec().token_bucket(),
                    f.source.clone(),
                )
            })
            .chain(sc.sim.background.iter().map(|b| {
                (
                    b.id.clone(),
                    b.src.clone(),
                    b.dst.clone(),
                    false,
                    true,
                    TokenBucket::new(1, 1),
                    b.source.clone(),
                )
            }))
            .collect::<Vec<_>>();

        for (idx, (id, src, dst, critical, background, tb, model)) in all.into_iter().enumerate() {
            let registered = if critical {
                sim.state.flow(&id).cloned()
            } else {
                None
            };
            let (kind, class, vlan, hop_ports) = match &registered {
                Some(r) => (
                    r.assignment.kind.clone(),
                    r.assignment.priority_class,
                    Some(r.assignment.vlan_id),
                    r.assignment.hop_ports.clone(),
                ),
                None => {
                    let spec = crate::admission::FlowSpec {
                        flow_id: id.clone(),
                        src: src.clone(),
                        dst: dst.clone(),
                        rate_bps: 1,
                        burst_bytes: 1,
                        max_pkt_bytes: 1,
                        deadline_us: 1,
                        dejitter: false,
                    };
                    let kind = sim
                        .state
                        .classify(&spec)
                        .map_err(|r| SimError::Route(id.clone(), r.detail))?;
                    let tree = best_effort_tree
                        .as_ref()
                        .ok_or_else(|| SimError::Route(id.clone(), "no spanning tree".into()))?;
                    let hops = topo
                        .path_in_tree(tree, &src, &dst)
                        .map_err(|e| SimError::Route(id.clone(), e.to_string()))?;
                    (kind, 0, None, hops)
                }
            };

            let mut hops = Vec::with_capacity(hop_ports.len());
            for p in &hop_ports {
                let next = port_index.len();
                let i = *port_index.entry(p.clone()).or_insert(next);
                if i == next {
                    let profile = topo.profile_of(p).cloned().unwrap_or_default();
                    let peer = topo.peer(p).ok_or_else(|| {
                        SimError::Route(id.clone(), format!("port {p} leads nowhere"))
                    })?;
                    let classes = usize::from(topo.class_count());
                    let mut fwd = profile.fwd_delay_us.clone();
                    fwd.resize(classes, fwd.last().copied().unwrap_or(0));
                    sim.ports.push(PortRt {
                        id: p.clone(),
                        rate: profile.link_rate_bps,
                        buffer: profile.port_buffer_bytes,
                        reserved: 0,
                        peer,
                        fwd_delay_us: fwd,
                        backlog_bound: vec![None; classes],
                        queues: vec![VecDeque::new(); classes],
                        class_bytes: vec![0; classes],
                        queued: 0,
                        busy: None,
                    });
                }
                hops.push(i);
            }

            let mut rt = FlowRt {
                id: id.clone(),
                src: src.clone(),
                dst,
                critical,
                background,
                kind: kind.clone(),
                class,
                vlan,
                hops,
                hop_bounds_ns: Vec::new(),
                e2e_bound_us: None,
                transit: None,
                regulator: None,
                reshaper: None,
                policer: None,
                next_seq: 0,
                emitted: 0,
                dropped: 0,
                latencies: Vec::new(),
                transit_latencies: Vec::new(),
                violations: Violations::default(),
            };
            if let Some(r) = &registered {
                let a = &r.assignment;
                rt.hop_bounds_ns = a.per_hop_bounds_us.iter().map(|&d| us_to_ns(d)).collect();
                rt.e2e_bound_us = Some(a.e2e_bound_us);
                if let (Some(ue), Some(dir)) = (kind.ue(), kind.direction()) {
                    rt.transit = sim.state.transit_contract(ue, dir).copied();
                }
                match &kind {
                    FlowKind::Uplink { .. } => {
                        let rule = sim.state.config_for_nwtt(&id)?;
                        rt.reshaper = Some(Reshaper::new(rule.shaper));
                        if let Some(cfg) = rule.regulator.filter(|c| !c.is_disabled()) {
                            let new_reg = |regs: &mut Vec<RegRt>| {
                                regs.push(RegRt {
                                    reg: Regulator::new(cfg),
                                    scheduled: None,
                                });
                                regs.len() - 1
                            };
                            rt.regulator = Some(match cfg.mode {
                                MatchMode::PerFlow => new_reg(&mut sim.regulators),
                                MatchMode::PerClass => *class_regs
                                    .entry(class)
                                    .or_insert_with(|| new_reg(&mut sim.regulators)),
                            });
                        }
                    }
                    _ => {
                        let host = sim.state.config_for_host(&id)?;
                        rt.policer = Some(Policer::new(host.policer));
                    }
                }
            }
            let source = Source::new(model, tb, sc.sim.seed, idx as u64, stop_ns);
            if let Some(t) = source.next_time() {
                sim.schedule(t, Ev::Emit(sim.sources.len()));
            }
            sim.sources.push((sim.flows.len(), source));
            sim.flows.push(rt);
        }

        for port in &mut sim.ports {
            port.reserved = sim.state.reserved_buffer(&port.id);
            for (c, slot) in port.backlog_bound.iter_mut().enumerate() {
                *slot = sim.state.backlog_bound(&port.id, c as u8);
            }
        }
        if !sc.sim.ue_schedule.is_empty() {
            let every = topo.fiveg_poll_interval_s * 1_000_000_000;
            if every > 0 && every < stop_ns {
                sim.schedule(every, Ev::PollFiveG);
            }
        }
        Ok(sim)
    }

    fn schedule(&mut self, t: u64, ev: Ev) {
        debug_assert!(t >= self.now);
        self.seq += 1;
        self.events.push(Reverse((t, self.seq, ev)));
    }

    fn run(&mut self) {
        while let Some(Reverse((t, _, ev))) = self.events.pop() {
            self.now = t;
            match ev {
                Ev::Emit(i) => self.emit(i),
                Ev::Switch { pkt, hop } => self.switch_arrival(pkt, hop),
                Ev::Enqueue { pkt, hop } => self.enqueue(pkt, hop),
                Ev::TxDone(port) => self.tx_done(port),
                Ev::SlotEnd(dir) => self.slot_end(dir),
                Ev::Release(r) => self.release(r),
                Ev::PollFiveG => self.poll_5g(),
            }
        }
    }

    fn emit(&mut self, i: usize) {
        let t = self.now;
        let (flow, sizes, next) = {
            let (flow, src) = &mut self.sources[i];
            if src.next_time() != Some(t) {
                return;
            }
            let sizes = src.fire();
            (*flow, sizes, src.next_time())
        };
        for size in sizes {
            let f = &mut self.flows[flow];
            let seq = f.next_seq;
            f.next_seq += 1;
            f.emitted += 1;
            self.packets.push(Packet {
                flow,
                seq,
                size,
                sent: t,
                hop_in: t,
                fiveg_in: t,
                recv: None,
                dropped: false,
            });
            self.inject(self.packets.len() - 1);
        }
        if let Some(n) = next {
            self.schedule(n, Ev::Emit(i));
        }
    }

    fn inject(&mut self, pkt: usize) {
        let t = self.now;
        let f = &mut self.flows[self.packets[pkt].flow];
        match f.kind.clone() {
            FlowKind::Uplink { ue } => self.fiveg_arrival(pkt, &ue, Direction::Uplink),
            _ => {
                if let Some(p) = &mut f.policer {
                    if !p.conforms(self.packets[pkt].size, t) {
                        self.drop_packet(pkt, "policer");
                        return;
                    }
                }
                self.schedule(t, Ev::Switch { pkt, hop: 0 });
            }
        }
    }

    fn drop_packet(&mut self, pkt: usize, at: &str) {
        let p = &mut self.packets[pkt];
        p.dropped = true;
        let f = &mut self.flows[p.flow];
        f.dropped += 1;
        if f.critical {
            f.violations.loss += 1;
            warn!("critical packet {}#{} dropped at {at}", f.id, p.seq);
        } else {
            debug!("{}#{} dropped at {at}", f.id, p.seq);
        }
    }

    fn switch_arrival(&mut self, pkt: usize, hop: usize) {
        let t = self.now;
        self.packets[pkt].hop_in = t;
        let f = &self.flows[self.packets[pkt].flow];
        let port = &self.ports[f.hops[hop]];
        let fwd = port.fwd_delay_us[usize::from(f.class)];
        if fwd > 0 {
            self.schedule(t + us_to_ns(fwd), Ev::Enqueue { pkt, hop });
        } else {
            self.enqueue(pkt, hop);
        }
    }

    fn enqueue(&mut self, pkt: usize, hop: usize) {
        let t = self.now;
        let size = self.packets[pkt].size;
        let flow = self.packets[pkt].flow;
        let class = self.flows[flow].class;
        let c = usize::from(class);
        let pi = self.flows[flow].hops[hop];
        let port = &mut self.ports[pi];

        let fits = if class == 0 {
            port.class_bytes[0] + size <= port.buffer.saturating_sub(port.reserved)
        } else {
            port.queued + size <= port.buffer
        };
        if !fits {
            let at = port.id.to_string();
            self.drop_packet(pkt, &at);
            return;
        }

        if let Some(q) = port.backlog_bound[c].filter(|_| class > 0) {
            let mut backlog = u128::from(port.class_bytes[c] + size) * 1_000_000_000;
            if let Some((busy, start)) = port.busy {
                let bp = &self.packets[busy];
                if self.flows[bp.flow].class == class {
                    let sent = u128::from(t - start) * u128::from(port.rate);
                    backlog += (u128::from(bp.size) * 1_000_000_000).saturating_sub(sent);
                }
            }
            if backlog > u128::from(q) * 1_000_000_000 {
                let f = &mut self.flows[flow];
                f.violations.backlog += 1;
                warn!("backlog bound {q} B exceeded at {} by {}", port.id, f.id);
            }
        }

        let port = &mut self.ports[pi];
        port.queues[c].push_back(pkt);
        port.class_bytes[c] += size;
        port.queued += size;
        if port.busy.is_none() {
            self.start_service(pi);
        }
    }

    fn start_service(&mut self, pi: usize) {
        let t = self.now;
        let port = &mut self.ports[pi];
        let Some(c) = (0..port.queues.len())
            .rev()
            .find(|&c| !port.queues[c].is_empty())
        else {
            return;
        };
        let pkt = port.queues[c].pop_front().expect("non-empty class");
        let size = self.packets[pkt].size;
        port.class_bytes[c] -= size;
        port.queued -= size;
        port.busy = Some((pkt, t));
        let done = t + transfer_ns_ceil(size, port.rate);
        self.schedule(done, Ev::TxDone(pi));
    }

    fn tx_done(&mut self, pi: usize) {
        let t = self.now;
        let (pkt, _) = self.ports[pi].busy.take().expect("port was busy");
        let flow = self.packets[pkt].flow;
        let hop = self.flows[flow]
            .hops
            .iter()
            .position(|&h| h == pi)
            .expect("packet crosses this port");
        let f = &mut self.flows[flow];
        if let Some(&bound) = f.hop_bounds_ns.get(hop) {
            let took = t - self.packets[pkt].hop_in;
            if took > bound {
                f.violations.hop += 1;
                warn!(
                    "{} took {took} ns at {}, bound {bound} ns",
                    f.id, self.ports[pi].id
                );
            }
        }
        match self.ports[pi].peer.clone() {
            Peer::Switch { prop_delay_us, .. } => {
                self.schedule(
                    t + us_to_ns(prop_delay_us),
                    Ev::Switch { pkt, hop: hop + 1 },
                );
            }
            Peer::Leaf(node) => {
                let to_5g = self
                    .state
                    .topology()
                    .transit
                    .as_ref()
                    .is_some_and(|tr| tr.id == node);
                if to_5g {
                    let ue = self.flows[flow].dst.clone();
                    self.fiveg_arrival(pkt, &ue, Direction::Downlink);
                } else {
                    self.deliver(pkt);
                }
            }
        }
        self.start_service(pi);
    }

    fn slot_ns(&self) -> u64 {
        self.state
            .topology()
            .transit
            .as_ref()
            .map_or(1, |t| t.tdd.slot_ns())
    }

    fn fiveg_arrival(&mut self, pkt: usize, ue: &NodeId, dir: Direction) {
        let t = self.now;
        let Some(&ui) = self.ue_index.get(ue) else {
            self.drop_packet(pkt, "unknown UE");
            return;
        };
        let grant_delay = self
            .state
            .topology()
            .transit
            .as_ref()
            .map_or(0, |tr| u64::from(tr.tdd.grant_delay_slots));
        let slot = self.slot_ns();
        let eligible = t / slot + 1 + grant_delay;
        self.packets[pkt].fiveg_in = t;
        let p = &self.packets[pkt];
        let critical = self.flows[p.flow].critical;
        let q = self.ues[ui].queue(dir);
        let entry = (pkt, p.size, eligible);
        if critical {
            q.critical.push_back(entry);
        } else {
            q.best_effort.push_back(entry);
        }
        if !self.slot_active[dir_index(dir)] {
            self.slot_active[dir_index(dir)] = true;
            self.schedule((eligible + 1) * slot, Ev::SlotEnd(dir));
        }
    }

    fn slot_end(&mut self, dir: Direction) {
        let t = self.now;
        let slot_ns = self.slot_ns();
        let slot = t / slot_ns - 1;
        let usable = self
            .state
            .topology()
            .transit
            .as_ref()
            .is_some_and(|tr| tr.tdd.is_usable(dir, slot));
        let mut delivered = Vec::new();
        if usable && !self.ues.is_empty() {
            let n = self.ues.len();
            let first = (slot % n as u64) as usize;
            for k in 0..n {
                let ue = &mut self.ues[(first + k) % n];
                let mut budget = ue.record.tbs(dir);
                let q = ue.queue(dir);
                for fifo in [&mut q.critical, &mut q.best_effort] {
                    while budget > 0 {
                        let Some(head) = fifo.front_mut() else { break };
                        if head.2 > slot {
                            break;
                        }
                        let take = head.1.min(budget);
                        head.1 -= take;
                        budget -= take;
                        if head.1 == 0 {
                            delivered.push(head.0);
                            fifo.pop_front();
                        }
                    }
                }
            }
        }
        for pkt in delivered {
            self.leave_5g(pkt, dir);
        }
        if self.ues.iter_mut().any(|u| !u.queue(dir).is_empty()) {
            self.schedule(t + slot_ns, Ev::SlotEnd(dir));
        } else {
            self.slot_active[dir_index(dir)] = false;
        }
    }

    fn leave_5g(&mut self, pkt: usize, dir: Direction) {
        let t = self.now;
        let p = &self.packets[pkt];
        let took = t - p.fiveg_in;
        let f = &mut self.flows[p.flow];
        if let Some(c) = f.transit {
            f.transit_latencies.push(took);
            if took > us_to_ns(c.delay_bound_us) || took < us_to_ns(c.best_case_us) {
                f.violations.transit += 1;
                warn!("{} spent {took} ns in the 5G segment, contract {c:?}", f.id);
            }
        }
        match dir {
            Direction::Downlink => self.deliver(pkt),
            Direction::Uplink => self.nwtt_ingress(pkt),
        }
    }

    /// NW-TT: classify, optionally hold in the regulator, then re-shape.
    fn nwtt_ingress(&mut self, pkt: usize) {
        let t = self.now;
        let f = &self.flows[self.packets[pkt].flow];
        if !f.critical {
            self.schedule(t, Ev::Switch { pkt, hop: 0 });
            return;
        }
        match f.regulator {
            Some(r) => {
                let due = self.regulators[r].reg.release(t);
                for (p, depart, _) in due {
                    self.reshape(p, depart);
                }
                if self.regulators[r].reg.offer(pkt, t) == Offer::Dropped {
                    self.drop_packet(pkt, "regulator");
                }
                self.arm_regulator(r);
            }
            None => self.reshape(pkt, t),
        }
    }

    fn arm_regulator(&mut self, r: usize) {
        let rt = &mut self.regulators[r];
        if let Some(at) = rt.reg.next_departure() {
            if rt.scheduled != Some(at) {
                rt.scheduled = Some(at);
                self.schedule(at, Ev::Release(r));
            }
        }
    }

    fn release(&mut self, r: usize) {
        let t = self.now;
        if self.regulators[r].scheduled == Some(t) {
            self.regulators[r].scheduled = None;
        }
        let due = self.regulators[r].reg.release(t);
        for (p, depart, _) in due {
            self.reshape(p, depart);
        }
        self.arm_regulator(r);
    }

    fn reshape(&mut self, pkt: usize, t: u64) {
        let size = self.packets[pkt].size;
        let f = &mut self.flows[self.packets[pkt].flow];
        let depart = f.reshaper.as_mut().map_or(t, |s| s.admit(size, t));
        self.schedule(depart, Ev::Switch { pkt, hop: 0 });
    }

    fn deliver(&mut self, pkt: usize) {
        let t = self.now;
        let p = &mut self.packets[pkt];
        p.recv = Some(t);
        let latency = t - p.sent;
        let f = &mut self.flows[p.flow];
        f.latencies.push(latency);
        if let Some(b) = f.e2e_bound_us {
            if latency > us_to_ns(b) {
                f.violations.e2e += 1;
                warn!("{}#{} took {latency} ns, bound {b} us", f.id, p.seq);
            }
        }
    }

    /// Applies the UE set the AF reports now and stops traffic of UEs that
    /// left.
    fn poll_5g(&mut self) {
        let t = self.now;
        let at_ms = t / 1_000_000;
        let entry = self
            .scenario
            .sim
            .ue_schedule
            .iter()
            .filter(|e| e.at_ms <= at_ms)
            .max_by_key(|e| e.at_ms);
        if let Some(entry) = entry {
            let records: Vec<UeRecord> = self
                .ues
                .iter()
                .map(|u| u.record.clone())
                .filter(|r| entry.ues.contains(&r.id))
                .collect();
            let known = self
                .state
                .topology()
                .transit
                .as_ref()
                .map(|tr| tr.ues.len());
            let changed = known != Some(records.len())
                || records.iter().any(|r| !self.state.topology().is_ue(&r.id));
            if changed {
                match self.state.apply_5g_report(&records) {
                    Ok(rep) => {
                        info!(
                            "AF report at {at_ms} ms: +{:?} -{:?}",
                            rep.added, rep.removed
                        );
                        for (fi, src) in &mut self.sources {
                            let f = &self.flows[*fi];
                            if rep.removed.contains(&f.src) || rep.removed.contains(&f.dst) {
                                src.stop();
                            }
                        }
                        self.ue_events.push(UeEvent {
                            at_ms,
                            added: rep.added,
                            removed: rep.removed,
                            orphaned: rep.orphaned,
                            degraded: rep.degraded,
                        });
                    }
                    Err(e) => warn!("AF report at {at_ms} ms rejected: {e}"),
                }
            }
        }
        let every = self.state.topology().fiveg_poll_interval_s * 1_000_000_000;
        if every > 0 && t + every < self.stop_ns {
            self.schedule(t + every, Ev::PollFiveG);
        }
    }

    fn finish(self, opts: &RunOptions) -> SimOutput {
        let flows: Vec<FlowReport> = self
            .flows
            .iter()
            .map(|f| FlowReport {
                flow_id: f.id.clone(),
                critical: f.critical,
                background: f.background,
                kind: f.kind.clone(),
                priority_class: f.class,
                vlan_id: f.vlan,
                emitted: f.emitted,
                received: f.latencies.len() as u64,
                dropped: f.dropped,
                latency: LatencyStats::from_ns(&f.latencies),
                bound_us: f.e2e_bound_us,
                transit_latency: LatencyStats::from_ns(&f.transit_latencies),
                violations: f.violations,
            })
            .collect();
        let conservation_ok = self.packets.iter().all(|p| p.dropped != p.recv.is_some())
            && flows.iter().all(|f| f.emitted == f.received + f.dropped);
        let total_violations = flows.iter().map(|f| f.violations.total()).sum();
        let trace = self
            .packets
            .iter()
            .map(|p| {
                let f = &self.flows[p.flow];
                TraceRecord::new(&f.id, p.seq, p.size, p.sent, p.recv)
            })
            .collect();
        SimOutput {
            report: RunReport {
                schema_version: REPORT_SCHEMA_VERSION,
                scenario: self.scenario.name.clone(),
                seed: self.scenario.sim.seed,
                dejitter: opts.dejitter,
                background: opts.background,
                duration_ms: self.scenario.sim.duration_ms,
                flows,
                ue_events: self.ue_events,
                conservation_ok,
                total_violations,
            },
            trace,
        }
    }
}
