//! The central network manager: flow registry plus the joint routing and
//! scheduling pipeline.
//!
//! A request is tried on every (class, tree) candidate in a fixed order. Each
//! candidate is judged by re-evaluating the whole network with the new flow
//! in place, so a placement is only accepted if every registered flow still
//! meets its deadline and every port fits its worst-case backlog. State is
//! touched only on accept.

mod messages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{self, CalculusError, PortClassState, TokenBucket};
use crate::nwtt::{MatchMode, NwttConfig, NwttRule, RegulatorConfig};
use crate::topology::{NodeId, NodeKind, Peer, PortId, Topology, TopologyError, VlanTree};
use crate::topology::{DEFAULT_TREE_CAP, DEFAULT_VLAN_BASE};
use crate::transit5g::{self, Direction, TddError, TransitContract, UeRecord};
use crate::units::bytes_in_us_ceil;

pub use messages::{DeviceConfig, FlowRequest, FlowResponse, HostConfig, RESPONSE_SCHEMA_VERSION};

/// Give up on burst propagation around cyclic dependencies after this many
/// rounds.
const MAX_FIXED_POINT_ROUNDS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    InvalidSpec,
    Unreachable,
    Unschedulable,
    DeadlineInfeasible,
    BufferExceeded,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{reason}: {detail}")]
pub struct Rejection {
    pub reason: RejectReason,
    pub detail: String,
}

impl Rejection {
    fn new(reason: RejectReason, detail: impl Into<String>) -> Self {
        Self {
            reason,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdmissionError {
    #[error("unknown flow `{0}`")]
    UnknownFlow(String),
    #[error("flow `{0}` does not leave the 5G system")]
    NotA5GFlow(String),
    #[error("flow `{0}` is not sourced by a fixed host")]
    NotAHostFlow(String),
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

fn default_false() -> bool {
    false
}

/// TSpec of one flow plus its deadline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub flow_id: String,
    pub src: NodeId,
    pub dst: NodeId,
    #[serde(rename = "rate_Bps")]
    pub rate_bps: u64,
    #[serde(rename = "burst_B")]
    pub burst_bytes: u64,
    #[serde(rename = "max_pkt_B")]
    pub max_pkt_bytes: u64,
    pub deadline_us: u64,
    #[serde(default = "default_false")]
    pub dejitter: bool,
}

impl FlowSpec {
    pub fn token_bucket(&self) -> TokenBucket {
        TokenBucket::new(self.burst_bytes, self.rate_bps)
    }
}

/// Where a flow crosses the 5G system, if at all.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowKind {
    Fixed,
    Uplink { ue: NodeId },
    Downlink { ue: NodeId },
}

impl FlowKind {
    pub fn ue(&self) -> Option<&NodeId> {
        match self {
            Self::Fixed => None,
            Self::Uplink { ue } | Self::Downlink { ue } => Some(ue),
        }
    }

    pub fn direction(&self) -> Option<Direction> {
        match self {
            Self::Fixed => None,
            Self::Uplink { .. } => Some(Direction::Uplink),
            Self::Downlink { .. } => Some(Direction::Downlink),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowAssignment {
    pub flow_id: String,
    #[serde(flatten)]
    pub kind: FlowKind,
    pub vlan_id: u16,
    pub tree_index: usize,
    pub priority_class: u8,
    pub hop_ports: Vec<PortId>,
    pub per_hop_bounds_us: Vec<u64>,
    pub propagation_us: u64,
    pub transit_bound_us: u64,
    pub regulator_bound_us: u64,
    pub e2e_bound_us: u64,
}

impl FlowAssignment {
    pub fn components_sum(&self) -> u64 {
        calculus::e2e_delay(
            &self.per_hop_bounds_us,
            self.transit_bound_us,
            self.regulator_bound_us,
        ) + self.propagation_us
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegisteredFlow {
    pub spec: FlowSpec,
    pub assignment: FlowAssignment,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Accept {
        assignment: FlowAssignment,
        reconfigured: Vec<String>,
    },
    Reject(Rejection),
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Self::Accept { .. })
    }
}

#[derive(Clone, Debug)]
pub struct AdmissionOptions {
    pub vlan_base: u16,
    pub tree_cap: usize,
    pub reconfiguration: bool,
    /// Hold-and-forward settings of the NW-TT; flows asking for de-jittering
    /// need one.
    pub regulator: Option<RegulatorConfig>,
}

impl Default for AdmissionOptions {
    fn default() -> Self {
        Self {
            vlan_base: DEFAULT_VLAN_BASE,
            tree_cap: DEFAULT_TREE_CAP,
            reconfiguration: true,
            regulator: None,
        }
    }
}

/// Outcome of folding an AF report into the registry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UeReport {
    pub added: Vec<NodeId>,
    pub removed: Vec<NodeId>,
    /// Flows whose UE vanished, moved out of the registry.
    pub orphaned: Vec<String>,
    /// Flows still registered whose bound now exceeds the deadline.
    pub degraded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Placement {
    kind: FlowKind,
    tree_index: usize,
    vlan_id: u16,
    class: u8,
    hops: Vec<PortId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Evaluation {
    assignments: BTreeMap<String, FlowAssignment>,
    ports: BTreeMap<PortId, PortClassState>,
    transit: BTreeMap<(NodeId, Direction), TransitContract>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkState {
    topology: Topology,
    trees: Vec<VlanTree>,
    trees_truncated: bool,
    reconfiguration: bool,
    regulator: Option<RegulatorConfig>,
    flows: BTreeMap<String, RegisteredFlow>,
    ports: BTreeMap<PortId, PortClassState>,
    transit: BTreeMap<(NodeId, Direction), TransitContract>,
    orphaned: BTreeMap<String, FlowSpec>,
}

impl NetworkState {
    pub fn new(topology: Topology, opts: AdmissionOptions) -> Result<Self, AdmissionError> {
        topology.validate()?;
        if let Some(reg) = &opts.regulator {
            reg.validate()
                .map_err(|e| AdmissionError::MalformedRequest(e.to_string()))?;
        }
        let trees = topology.enumerate_spanning_trees_with(opts.vlan_base, opts.tree_cap)?;
        if trees.truncated {
            warn!(
                "spanning tree enumeration stopped at the cap of {} trees",
                opts.tree_cap
            );
        }
        Ok(Self {
            topology,
            trees: trees.trees,
            trees_truncated: trees.truncated,
            reconfiguration: opts.reconfiguration,
            regulator: opts.regulator,
            flows: BTreeMap::new(),
            ports: BTreeMap::new(),
            transit: BTreeMap::new(),
            orphaned: BTreeMap::new(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn trees(&self) -> &[VlanTree] {
        &self.trees
    }

    pub fn trees_truncated(&self) -> bool {
        self.trees_truncated
    }

    pub fn regulator(&self) -> Option<&RegulatorConfig> {
        self.regulator.as_ref()
    }

    pub fn flows(&self) -> impl Iterator<Item = &RegisteredFlow> {
        self.flows.values()
    }

    pub fn flow(&self, flow_id: &str) -> Option<&RegisteredFlow> {
        self.flows.get(flow_id)
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn ports(&self) -> &BTreeMap<PortId, PortClassState> {
        &self.ports
    }

    pub fn transit_contract(&self, ue: &NodeId, dir: Direction) -> Option<&TransitContract> {
        self.transit.get(&(ue.clone(), dir))
    }

    pub fn orphaned(&self) -> &BTreeMap<String, FlowSpec> {
        &self.orphaned
    }

    /// Worst-case backlog of `class` at `port`, or `None` if no registered
    /// flow uses it.
    pub fn backlog_bound(&self, port: &PortId, class: u8) -> Option<u64> {
        let state = self.ports.get(port)?;
        if class == 0 || state.class(class).flows.is_empty() {
            return None;
        }
        calculus::backlog_bound(state, class).ok()
    }

    /// Buffer space at `port` set aside for the registered classes.
    pub fn reserved_buffer(&self, port: &PortId) -> u64 {
        (1..self.topology.class_count())
            .filter_map(|c| self.backlog_bound(port, c))
            .sum()
    }

    pub fn classify(&self, spec: &FlowSpec) -> Result<FlowKind, Rejection> {
        let unreachable =
            |n: &NodeId| Rejection::new(RejectReason::Unreachable, format!("unknown node `{n}`"));
        let src = self
            .topology
            .kind_of(&spec.src)
            .ok_or_else(|| unreachable(&spec.src))?;
        let dst = self
            .topology
            .kind_of(&spec.dst)
            .ok_or_else(|| unreachable(&spec.dst))?;
        let endpoint = |k: NodeKind, n: &NodeId| match k {
            NodeKind::Host | NodeKind::Ue => Ok(()),
            _ => Err(Rejection::new(
                RejectReason::InvalidSpec,
                format!("`{n}` is not a host or UE"),
            )),
        };
        endpoint(src, &spec.src)?;
        endpoint(dst, &spec.dst)?;
        match (src, dst) {
            (NodeKind::Ue, NodeKind::Ue) => Err(Rejection::new(
                RejectReason::Unreachable,
                "UE-to-UE traffic would hairpin through the fixed network",
            )),
            (NodeKind::Ue, _) => Ok(FlowKind::Uplink {
                ue: spec.src.clone(),
            }),
            (_, NodeKind::Ue) => Ok(FlowKind::Downlink {
                ue: spec.dst.clone(),
            }),
            _ => Ok(FlowKind::Fixed),
        }
    }

    fn validate(&self, spec: &FlowSpec) -> Result<(), Rejection> {
        let invalid = |m: String| Err(Rejection::new(RejectReason::InvalidSpec, m));
        if spec.flow_id.is_empty() || spec.flow_id.contains([',', '\n', '"']) {
            return invalid(format!(
                "flow id `{}` is empty or has reserved characters",
                spec.flow_id
            ));
        }
        if self.flows.contains_key(&spec.flow_id) {
            return invalid(format!("flow `{}` is already registered", spec.flow_id));
        }
        if spec.rate_bps == 0 {
            return invalid("rate must be positive".into());
        }
        if spec.max_pkt_bytes == 0 || spec.burst_bytes < spec.max_pkt_bytes {
            return invalid("need burst >= max packet > 0".into());
        }
        if spec.max_pkt_bytes > self.topology.max_pkt_bytes {
            return invalid(format!(
                "max packet {} B exceeds the network limit of {} B",
                spec.max_pkt_bytes, self.topology.max_pkt_bytes
            ));
        }
        if spec.deadline_us == 0 {
            return invalid("deadline must be positive".into());
        }
        if spec.src == spec.dst {
            return invalid("source and destination coincide".into());
        }
        Ok(())
    }

    fn regulated(&self, spec: &FlowSpec, kind: &FlowKind) -> Option<&RegulatorConfig> {
        match kind {
            FlowKind::Uplink { .. } if spec.dejitter => {
                self.regulator.as_ref().filter(|r| !r.is_disabled())
            }
            _ => None,
        }
    }

    /// Candidates in search order: class descending, then tree index, then
    /// hop count.
    fn candidates(&self, spec: &FlowSpec, kind: &FlowKind) -> Result<Vec<Placement>, Rejection> {
        let mut out = Vec::new();
        let mut last_err = None;
        for class in (1..self.topology.class_count()).rev() {
            for tree in &self.trees {
                match self.topology.path_in_tree(tree, &spec.src, &spec.dst) {
                    Ok(hops) if !hops.is_empty() => out.push(Placement {
                        kind: kind.clone(),
                        tree_index: tree.tree_index,
                        vlan_id: tree.vlan_id,
                        class,
                        hops,
                    }),
                    Ok(_) => {}
                    Err(e) => last_err = Some(e),
                }
            }
        }
        out.sort_by_key(|p| (std::cmp::Reverse(p.class), p.tree_index, p.hops.len()));
        if out.is_empty() {
            let detail =
                last_err.map_or_else(|| "no path in any tree".to_owned(), |e| e.to_string());
            return Err(Rejection::new(RejectReason::Unreachable, detail));
        }
        Ok(out)
    }

    fn placement_of(&self, flow: &RegisteredFlow) -> Placement {
        let a = &flow.assignment;
        Placement {
            kind: a.kind.clone(),
            tree_index: a.tree_index,
            vlan_id: a.vlan_id,
            class: a.priority_class,
            hops: a.hop_ports.clone(),
        }
    }

    fn committed(&self) -> Vec<(FlowSpec, Placement)> {
        self.flows
            .values()
            .map(|f| (f.spec.clone(), self.placement_of(f)))
            .collect()
    }

    pub fn register_flow(&mut self, spec: FlowSpec) -> Decision {
        match self.try_register(spec) {
            Ok(d) => d,
            Err(r) => {
                debug!("rejected: {r}");
                Decision::Reject(r)
            }
        }
    }

    fn try_register(&mut self, spec: FlowSpec) -> Result<Decision, Rejection> {
        self.validate(&spec)?;
        let kind = self.classify(&spec)?;
        if spec.dejitter && matches!(kind, FlowKind::Uplink { .. }) && self.regulator.is_none() {
            return Err(Rejection::new(
                RejectReason::InvalidSpec,
                "de-jittering requested but the NW-TT has no regulator",
            ));
        }
        let candidates = self.candidates(&spec, &kind)?;
        let base = self.committed();

        let mut first_err = None;
        for cand in candidates {
            let mut entries = base.clone();
            entries.push((spec.clone(), cand));
            match evaluate(self, &entries, true) {
                Ok(ev) => {
                    let assignment = ev.assignments[&spec.flow_id].clone();
                    self.commit(entries, ev);
                    info!(
                        "accepted {} on VLAN {} class {} bound {} us",
                        spec.flow_id,
                        assignment.vlan_id,
                        assignment.priority_class,
                        assignment.e2e_bound_us
                    );
                    return Ok(Decision::Accept {
                        assignment,
                        reconfigured: Vec::new(),
                    });
                }
                Err(r) => {
                    first_err.get_or_insert(r);
                }
            }
        }
        let first_err = first_err.expect("at least one candidate");

        if self.reconfiguration && !self.flows.is_empty() {
            if let Some((entries, ev)) = self.batch_pass(&spec, &kind) {
                let reconfigured: Vec<String> = self
                    .flows
                    .values()
                    .filter(|f| {
                        let a = &ev.assignments[&f.spec.flow_id];
                        (a.tree_index, a.priority_class)
                            != (f.assignment.tree_index, f.assignment.priority_class)
                    })
                    .map(|f| f.spec.flow_id.clone())
                    .collect();
                let assignment = ev.assignments[&spec.flow_id].clone();
                self.commit(entries, ev);
                info!(
                    "accepted {} after reconfiguring {:?}",
                    spec.flow_id, reconfigured
                );
                return Ok(Decision::Accept {
                    assignment,
                    reconfigured,
                });
            }
        }
        Err(first_err)
    }

    /// Places every flow again, tightest deadline first, each on its first
    /// feasible candidate given the flows placed before it.
    fn batch_pass(
        &self,
        spec: &FlowSpec,
        kind: &FlowKind,
    ) -> Option<(Vec<(FlowSpec, Placement)>, Evaluation)> {
        let mut all: Vec<(FlowSpec, FlowKind)> = self
            .flows
            .values()
            .map(|f| (f.spec.clone(), f.assignment.kind.clone()))
            .collect();
        all.push((spec.clone(), kind.clone()));
        all.sort_by(|a, b| (a.0.deadline_us, &a.0.flow_id).cmp(&(b.0.deadline_us, &b.0.flow_id)));

        let mut placed: Vec<(FlowSpec, Placement)> = Vec::new();
        let mut last = None;
        for (s, k) in all {
            let cands = self.candidates(&s, &k).ok()?;
            let mut done = false;
            for cand in cands {
                placed.push((s.clone(), cand));
                if let Ok(ev) = evaluate(self, &placed, true) {
                    last = Some(ev);
                    done = true;
                    break;
                }
                placed.pop();
            }
            if !done {
                return None;
            }
        }
        last.map(|ev| (placed, ev))
    }

    fn commit(&mut self, entries: Vec<(FlowSpec, Placement)>, ev: Evaluation) {
        let mut assignments = ev.assignments;
        self.flows = entries
            .into_iter()
            .map(|(spec, _)| {
                let assignment = assignments.remove(&spec.flow_id).expect("evaluated");
                (spec.flow_id.clone(), RegisteredFlow { spec, assignment })
            })
            .collect();
        self.ports = ev.ports;
        self.transit = ev.transit;
    }

    pub fn remove_flow(&mut self, flow_id: &str) -> Result<FlowSpec, AdmissionError> {
        if !self.flows.contains_key(flow_id) {
            return Err(AdmissionError::UnknownFlow(flow_id.to_owned()));
        }
        let mut entries = self.committed();
        let idx = entries
            .iter()
            .position(|(s, _)| s.flow_id == flow_id)
            .expect("present");
        let (spec, _) = entries.remove(idx);
        // fewer flows only shrink bursts and bounds, so this cannot fail
        let ev = evaluate(self, &entries, false).expect("removal keeps the network feasible");
        self.commit(entries, ev);
        Ok(spec)
    }

    /// Folds the AF's list of active UEs into the topology. Flows of vanished
    /// UEs are moved out of the registry.
    pub fn apply_5g_report(&mut self, ues: &[UeRecord]) -> Result<UeReport, AdmissionError> {
        let update = self.topology.merge_5g_snapshot(ues)?;
        let gone: BTreeSet<&NodeId> = update.removed.iter().collect();
        let mut report = UeReport {
            added: update.added.clone(),
            removed: update.removed.clone(),
            ..UeReport::default()
        };
        let mut next = self.clone();
        next.topology = update.topology;
        for f in self.flows.values() {
            if f.assignment.kind.ue().is_some_and(|ue| gone.contains(ue)) {
                next.orphan(&f.spec.flow_id);
                report.orphaned.push(f.spec.flow_id.clone());
            }
        }
        let entries = next.committed();
        match evaluate(&next, &entries, false) {
            Ok(ev) => next.commit(entries, ev),
            Err(r) => {
                // the new radio parameters cannot carry the 5G flows at all
                warn!("5G contract no longer computable ({r}); orphaning all 5G flows");
                let fiveg: Vec<String> = next
                    .flows
                    .values()
                    .filter(|f| f.assignment.kind != FlowKind::Fixed)
                    .map(|f| f.spec.flow_id.clone())
                    .collect();
                for id in fiveg {
                    next.orphan(&id);
                    report.orphaned.push(id);
                }
                let entries = next.committed();
                let ev = evaluate(&next, &entries, false).expect("fixed flows stay feasible");
                next.commit(entries, ev);
            }
        }
        report.degraded = next
            .flows
            .values()
            .filter(|f| f.assignment.e2e_bound_us > f.spec.deadline_us)
            .map(|f| f.spec.flow_id.clone())
            .collect();
        for id in &report.orphaned {
            warn!("flow {id} orphaned by the 5G report");
        }
        *self = next;
        Ok(report)
    }

    fn orphan(&mut self, flow_id: &str) {
        if let Some(f) = self.flows.remove(flow_id) {
            self.orphaned.insert(flow_id.to_owned(), f.spec);
        }
    }

    /// Recomputes every aggregate from the registry alone; equal to the
    /// cached state whenever the cache is coherent.
    pub fn recompute_ports(&self) -> BTreeMap<PortId, PortClassState> {
        evaluate(self, &self.committed(), false)
            .map(|ev| ev.ports)
            .unwrap_or_default()
    }

    /// Recomputed assignments, for checking the cached ones.
    pub fn recompute_assignments(&self) -> BTreeMap<String, FlowAssignment> {
        evaluate(self, &self.committed(), false)
            .map(|ev| ev.assignments)
            .unwrap_or_default()
    }

    pub fn config_for_nwtt(&self, flow_id: &str) -> Result<NwttRule, AdmissionError> {
        let f = self
            .flows
            .get(flow_id)
            .ok_or_else(|| AdmissionError::UnknownFlow(flow_id.to_owned()))?;
        if !matches!(f.assignment.kind, FlowKind::Uplink { .. }) {
            return Err(AdmissionError::NotA5GFlow(flow_id.to_owned()));
        }
        let transit = self
            .topology
            .transit
            .as_ref()
            .ok_or(TopologyError::NoTransitNode)?;
        Ok(NwttRule {
            flow_id: flow_id.to_owned(),
            src: f.spec.src.clone(),
            dst: f.spec.dst.clone(),
            egress: transit.attach.clone(),
            vlan_id: f.assignment.vlan_id,
            pcp: f.assignment.priority_class,
            shaper: f.spec.token_bucket(),
            regulator: self.regulated(&f.spec, &f.assignment.kind).copied(),
        })
    }

    pub fn config_for_host(&self, flow_id: &str) -> Result<HostConfig, AdmissionError> {
        let f = self
            .flows
            .get(flow_id)
            .ok_or_else(|| AdmissionError::UnknownFlow(flow_id.to_owned()))?;
        if matches!(f.assignment.kind, FlowKind::Uplink { .. }) {
            return Err(AdmissionError::NotAHostFlow(flow_id.to_owned()));
        }
        Ok(HostConfig {
            host: f.spec.src.clone(),
            flow_id: flow_id.to_owned(),
            src: f.spec.src.clone(),
            dst: f.spec.dst.clone(),
            vlan_id: f.assignment.vlan_id,
            pcp: f.assignment.priority_class,
            policer: f.spec.token_bucket(),
        })
    }

    /// The device configuration that installs `flow_id`.
    pub fn device_config(&self, flow_id: &str) -> Result<DeviceConfig, AdmissionError> {
        match self.config_for_nwtt(flow_id) {
            Ok(rule) => Ok(DeviceConfig::Nwtt(rule)),
            Err(AdmissionError::NotA5GFlow(_)) => {
                self.config_for_host(flow_id).map(DeviceConfig::Host)
            }
            Err(e) => Err(e),
        }
    }

    /// All NW-TT rules currently installed.
    pub fn nwtt_config(&self) -> NwttConfig {
        let mut cfg = NwttConfig::default();
        for id in self.flows.keys() {
            if let Ok(rule) = self.config_for_nwtt(id) {
                cfg.insert(rule).expect("flow ids are unique");
            }
        }
        cfg
    }
}

fn calc_reject(port: &PortId, e: CalculusError) -> Rejection {
    Rejection::new(RejectReason::Unschedulable, format!("port {port}: {e}"))
}

fn tdd_reject(ue: &NodeId, e: TddError) -> Rejection {
    let reason = match e {
        TddError::UnknownUe(_) => RejectReason::Unreachable,
        _ => RejectReason::Unschedulable,
    };
    Rejection::new(reason, format!("5G segment for {ue}: {e}"))
}

fn port_state(topo: &Topology, port: &PortId) -> PortClassState {
    let profile = topo.profile_of(port).cloned().unwrap_or_default();
    let classes = usize::from(topo.class_count());
    let mut fwd = profile.fwd_delay_us.clone();
    fwd.resize(classes, profile.fwd_delay_us.last().copied().unwrap_or(0));
    PortClassState::new(profile.link_rate_bps, fwd, topo.max_pkt_bytes)
}

fn propagation_us(topo: &Topology, hops: &[PortId]) -> u64 {
    hops.iter()
        .map(|p| match topo.peer(p) {
            Some(Peer::Switch { prop_delay_us, .. }) => prop_delay_us,
            _ => 0,
        })
        .sum()
}

/// Bounds every flow of `entries` jointly.
///
/// Each hop sees the flow's burst grown by the bounds of the hops before it.
/// Those bounds depend on the other flows' bursts in turn, possibly in a
/// cycle, so bursts start at their source values and are propagated until
/// nothing changes. The sequence only grows, which makes an early deadline
/// miss final.
fn evaluate(
    state: &NetworkState,
    entries: &[(FlowSpec, Placement)],
    check_deadlines: bool,
) -> Result<Evaluation, Rejection> {
    let topo = &state.topology;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[a].0.flow_id.cmp(&entries[b].0.flow_id));

    let mut bursts: Vec<Vec<u64>> = entries
        .iter()
        .map(|(s, p)| vec![s.burst_bytes; p.hops.len()])
        .collect();

    for _ in 0..MAX_FIXED_POINT_ROUNDS {
        let mut ports: BTreeMap<PortId, PortClassState> = BTreeMap::new();
        for &i in &order {
            let (spec, place) = &entries[i];
            for (j, port) in place.hops.iter().enumerate() {
                ports
                    .entry(port.clone())
                    .or_insert_with(|| port_state(topo, port))
                    .add(
                        place.class,
                        &spec.flow_id,
                        TokenBucket::new(bursts[i][j], spec.rate_bps),
                        spec.max_pkt_bytes,
                    );
            }
        }

        let mut hop_bounds: BTreeMap<(&PortId, u8), u64> = BTreeMap::new();
        for (port, ps) in &ports {
            for class in 1..ps.class_count() {
                if !ps.class(class).flows.is_empty() {
                    let d =
                        calculus::hop_delay_bound(ps, class).map_err(|e| calc_reject(port, e))?;
                    hop_bounds.insert((port, class), d);
                }
            }
        }

        let mut next = bursts.clone();
        let mut per_hop: Vec<Vec<u64>> = Vec::with_capacity(entries.len());
        let mut exit_burst: Vec<u64> = Vec::with_capacity(entries.len());
        for (i, (spec, place)) in entries.iter().enumerate() {
            let bounds: Vec<u64> = place
                .hops
                .iter()
                .map(|p| hop_bounds[&(p, place.class)])
                .collect();
            let mut out = spec.burst_bytes;
            for (j, &d) in bounds.iter().enumerate() {
                out = calculus::propagate_burst(TokenBucket::new(bursts[i][j], spec.rate_bps), d)
                    .burst_bytes;
                if j + 1 < bounds.len() {
                    next[i][j + 1] = out;
                }
            }
            per_hop.push(bounds);
            exit_burst.push(out);
        }

        // the 5G segment, one aggregate per UE and direction
        let mut aggregates: BTreeMap<(NodeId, Direction), (u64, u64)> = BTreeMap::new();
        for &i in &order {
            let (spec, place) = &entries[i];
            let (Some(ue), Some(dir)) = (place.kind.ue(), place.kind.direction()) else {
                continue;
            };
            let burst = match dir {
                Direction::Uplink => spec.burst_bytes,
                Direction::Downlink => exit_burst[i],
            };
            let agg = aggregates.entry((ue.clone(), dir)).or_default();
            agg.0 += burst;
            agg.1 += spec.rate_bps;
        }
        let mut transit = BTreeMap::new();
        if !aggregates.is_empty() {
            let node = topo.transit.as_ref().ok_or_else(|| {
                Rejection::new(RejectReason::Unreachable, "topology has no 5G segment")
            })?;
            for ((ue, dir), (b, r)) in aggregates {
                let c = transit5g::transit_contract(node, &ue, dir, b, r)
                    .map_err(|e| tdd_reject(&ue, e))?;
                transit.insert((ue, dir), c);
            }
        }
        let transit_of = |kind: &FlowKind| match (kind.ue(), kind.direction()) {
            (Some(ue), Some(dir)) => transit[&(ue.clone(), dir)].delay_bound_us,
            _ => 0,
        };

        let regulator = regulator_bounds(state, entries, &transit_of)?;

        let mut assignments = BTreeMap::new();
        for &i in &order {
            let (spec, place) = &entries[i];
            let transit_bound_us = transit_of(&place.kind);
            let regulator_bound_us = regulator.get(&i).copied().unwrap_or(0);
            let propagation = propagation_us(topo, &place.hops);
            let e2e = calculus::e2e_delay(&per_hop[i], transit_bound_us, regulator_bound_us)
                + propagation;
            if check_deadlines && e2e > spec.deadline_us {
                return Err(Rejection::new(
                    RejectReason::DeadlineInfeasible,
                    format!(
                        "flow {} would need {} us against a deadline of {} us",
                        spec.flow_id, e2e, spec.deadline_us
                    ),
                ));
            }
            assignments.insert(
                spec.flow_id.clone(),
                FlowAssignment {
                    flow_id: spec.flow_id.clone(),
                    kind: place.kind.clone(),
                    vlan_id: place.vlan_id,
                    tree_index: place.tree_index,
                    priority_class: place.class,
                    hop_ports: place.hops.clone(),
                    per_hop_bounds_us: per_hop[i].clone(),
                    propagation_us: propagation,
                    transit_bound_us,
                    regulator_bound_us,
                    e2e_bound_us: e2e,
                },
            );
        }

        if next == bursts {
            for (port, ps) in &ports {
                let reserved: u64 = (1..ps.class_count())
                    .filter(|&c| !ps.class(c).flows.is_empty())
                    .map(|c| calculus::backlog_bound(ps, c).map_err(|e| calc_reject(port, e)))
                    .sum::<Result<u64, _>>()?;
                let buffer = topo.profile_of(port).map_or(0, |p| p.port_buffer_bytes);
                if reserved > buffer {
                    return Err(Rejection::new(
                        RejectReason::BufferExceeded,
                        format!("port {port} may hold {reserved} B but has {buffer} B"),
                    ));
                }
            }
            return Ok(Evaluation {
                assignments,
                ports,
                transit,
            });
        }
        bursts = next;
    }
    Err(Rejection::new(
        RejectReason::DeadlineInfeasible,
        "burst propagation does not converge",
    ))
}

/// Hold-and-forward delay charged to each de-jittered uplink flow, keyed by
/// entry index.
fn regulator_bounds(
    state: &NetworkState,
    entries: &[(FlowSpec, Placement)],
    transit_of: &dyn Fn(&FlowKind) -> u64,
) -> Result<BTreeMap<usize, u64>, Rejection> {
    let mut out = BTreeMap::new();
    let slow = |id: &str| {
        Rejection::new(
            RejectReason::Unschedulable,
            format!("flow {id} is faster than the regulator's release rate"),
        )
    };
    let regulated: Vec<usize> = (0..entries.len())
        .filter(|&i| state.regulated(&entries[i].0, &entries[i].1.kind).is_some())
        .collect();
    let Some(cfg) = state.regulator.filter(|r| !r.is_disabled()) else {
        return Ok(out);
    };
    match cfg.mode {
        MatchMode::PerFlow => {
            for i in regulated {
                let spec = &entries[i].0;
                if !cfg.sustains(spec.rate_bps, spec.max_pkt_bytes) {
                    return Err(slow(&spec.flow_id));
                }
                out.insert(i, cfg.delay_bound_us(spec.burst_bytes, spec.max_pkt_bytes));
            }
        }
        MatchMode::PerClass => {
            // one shared queue per class; its input burst includes whatever
            // the 5G segment bunched up
            let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
            for i in regulated {
                by_class.entry(entries[i].1.class).or_default().push(i);
            }
            for members in by_class.values() {
                let mut burst = 0;
                let mut rate = 0;
                let mut pkt = u64::MAX;
                for &i in members {
                    let (spec, place) = &entries[i];
                    burst +=
                        spec.burst_bytes + bytes_in_us_ceil(spec.rate_bps, transit_of(&place.kind));
                    rate += spec.rate_bps;
                    pkt = pkt.min(spec.max_pkt_bytes);
                }
                if !cfg.sustains(rate, pkt) {
                    return Err(slow(&entries[members[0]].0.flow_id));
                }
                let bound = cfg.delay_bound_us(burst, pkt);
                for &i in members {
                    out.insert(i, bound);
                }
            }
        }
    }
    Ok(out)
}
