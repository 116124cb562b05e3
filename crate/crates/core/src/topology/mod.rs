//! Device and link graph of the fixed network plus the 5G segment.
//!
//! Switches are the only nodes that forward. Hosts and the 5G transit node
//! are leaves hanging off one switch port each; switch-to-switch cables are
//! the [`Link`]s that spanning trees are built from.

mod file;
mod trees;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::transit5g::{TransitNode5G, UeRecord};

pub use file::{HostEntry, LinkEntry, SwitchEntry, TopologyFile, TransitEntry};
pub use trees::{TreeEnumeration, VlanTree, DEFAULT_TREE_CAP, DEFAULT_VLAN_BASE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("port {0} appears in two different links")]
    ConflictingPort(PortId),
    #[error("topology has no 5G transit node")]
    NoTransitNode,
    #[error("switch graph is not connected")]
    Disconnected,
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

/// A port on a node, written `NODE.INDEX` (e.g. `S1.3`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortId {
    pub node: NodeId,
    pub index: u32,
}

impl PortId {
    pub fn new(node: impl Into<NodeId>, index: u32) -> Self {
        Self {
            node: node.into(),
            index,
        }
    }
}

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.index)
    }
}

impl FromStr for PortId {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TopologyError::Invalid(format!("malformed port `{s}`, expected NODE.INDEX"));
        let (node, index) = s.rsplit_once('.').ok_or_else(bad)?;
        if node.is_empty() {
            return Err(bad());
        }
        let index = index.parse().map_err(|_| bad())?;
        Ok(Self::new(node, index))
    }
}

impl Serialize for PortId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-switch properties the controller must know a priori.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchProfile {
    pub class_count: u8,
    /// Forwarding delay per priority class, in microseconds.
    pub fwd_delay_us: Vec<u64>,
    #[serde(rename = "port_buffer_B")]
    pub port_buffer_bytes: u64,
    #[serde(rename = "link_rate_Bps")]
    pub link_rate_bps: u64,
}

impl Default for SwitchProfile {
    fn default() -> Self {
        Self {
            class_count: 8,
            fwd_delay_us: vec![0; 8],
            port_buffer_bytes: 64_000,
            link_rate_bps: 125_000,
        }
    }
}

impl SwitchProfile {
    pub fn fwd_delay(&self, class: u8) -> u64 {
        self.fwd_delay_us
            .get(usize::from(class))
            .or(self.fwd_delay_us.last())
            .copied()
            .unwrap_or(0)
    }

    fn validate(&self, id: &NodeId) -> Result<(), TopologyError> {
        let fail = |what: &str| Err(TopologyError::Invalid(format!("switch {id}: {what}")));
        if self.class_count < 2 {
            return fail("class_count must be at least 2");
        }
        if self.fwd_delay_us.len() != usize::from(self.class_count) {
            return fail("fwd_delay_us needs one entry per class");
        }
        if self.port_buffer_bytes == 0 {
            return fail("port buffer must be positive");
        }
        if self.link_rate_bps == 0 {
            return fail("link rate must be positive");
        }
        Ok(())
    }
}

/// An undirected switch-to-switch cable, stored with `a < b`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub a: PortId,
    pub b: PortId,
}

impl Link {
    pub fn new(x: PortId, y: PortId) -> Self {
        if x <= y {
            Self { a: x, b: y }
        } else {
            Self { a: y, b: x }
        }
    }

    pub fn touches(&self, node: &NodeId) -> bool {
        &self.a.node == node || &self.b.node == node
    }

    /// The far end of the link as seen from `port`.
    pub fn peer_of(&self, port: &PortId) -> Option<&PortId> {
        if &self.a == port {
            Some(&self.b)
        } else if &self.b == port {
            Some(&self.a)
        } else {
            None
        }
    }

    /// The port of this link that sits on `node`.
    pub fn port_on(&self, node: &NodeId) -> Option<&PortId> {
        if &self.a.node == node {
            Some(&self.a)
        } else if &self.b.node == node {
            Some(&self.b)
        } else {
            None
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.a, self.b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAttrs {
    pub prop_delay_us: u64,
}

/// One lldp-style neighbor record: `node.port` sees `neighbor.neighbor_port`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub port: PortId,
    pub neighbor: PortId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub timestamp_s: u64,
    pub records: Vec<NeighborRecord>,
}

impl TopologySnapshot {
    /// Devices that answered this poll.
    pub fn polled(&self) -> BTreeSet<NodeId> {
        self.records.iter().map(|r| r.port.node.clone()).collect()
    }
}

/// What kind of endpoint a node id names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Switch,
    Host,
    TransitNode,
    Ue,
}

pub const DEFAULT_FIXED_POLL_INTERVAL_S: u64 = 200;
pub const DEFAULT_FIVEG_POLL_INTERVAL_S: u64 = 5;
pub const DEFAULT_MAX_PKT_BYTES: u64 = 1500;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub switches: BTreeMap<NodeId, SwitchProfile>,
    /// Host id to the switch port it is cabled to.
    pub hosts: BTreeMap<NodeId, PortId>,
    pub transit: Option<TransitNode5G>,
    pub links: BTreeMap<Link, LinkAttrs>,
    pub fixed_poll_interval_s: u64,
    pub fiveg_poll_interval_s: u64,
    /// Largest frame any device may send, best effort included.
    pub max_pkt_bytes: u64,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            switches: BTreeMap::new(),
            hosts: BTreeMap::new(),
            transit: None,
            links: BTreeMap::new(),
            fixed_poll_interval_s: DEFAULT_FIXED_POLL_INTERVAL_S,
            fiveg_poll_interval_s: DEFAULT_FIVEG_POLL_INTERVAL_S,
            max_pkt_bytes: DEFAULT_MAX_PKT_BYTES,
        }
    }
}

/// Result of merging a UE report from the AF.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UeUpdate {
    pub topology: Topology,
    pub added: Vec<NodeId>,
    pub removed: Vec<NodeId>,
}

impl Topology {
    pub fn kind_of(&self, node: &NodeId) -> Option<NodeKind> {
        if self.switches.contains_key(node) {
            Some(NodeKind::Switch)
        } else if self.hosts.contains_key(node) {
            Some(NodeKind::Host)
        } else if let Some(t) = &self.transit {
            if &t.id == node {
                Some(NodeKind::TransitNode)
            } else if t.ues.contains_key(node) {
                Some(NodeKind::Ue)
            } else {
                None
            }
        } else {
            None
        }
    }

    pub fn is_ue(&self, node: &NodeId) -> bool {
        self.kind_of(node) == Some(NodeKind::Ue)
    }

    /// Switch port through which traffic reaches `node`. UEs and the transit
    /// node share the NW-TT attachment.
    pub fn attachment(&self, node: &NodeId) -> Option<&PortId> {
        match self.kind_of(node)? {
            NodeKind::Switch => None,
            NodeKind::Host => self.hosts.get(node),
            NodeKind::TransitNode | NodeKind::Ue => self.transit.as_ref().map(|t| &t.attach),
        }
    }

    pub fn link_at(&self, port: &PortId) -> Option<(&Link, &LinkAttrs)> {
        self.links
            .iter()
            .find(|(l, _)| &l.a == port || &l.b == port)
    }

    /// Whatever sits at the far end of `port`: a switch port, or the node a
    /// host/NW-TT attachment leads to.
    pub fn peer(&self, port: &PortId) -> Option<Peer> {
        if let Some((link, attrs)) = self.link_at(port) {
            return Some(Peer::Switch {
                port: link.peer_of(port)?.clone(),
                prop_delay_us: attrs.prop_delay_us,
            });
        }
        if let Some((host, _)) = self.hosts.iter().find(|(_, p)| *p == port) {
            return Some(Peer::Leaf(host.clone()));
        }
        match &self.transit {
            Some(t) if &t.attach == port => Some(Peer::Leaf(t.id.clone())),
            _ => None,
        }
    }

    pub fn profile_of(&self, port: &PortId) -> Option<&SwitchProfile> {
        self.switches.get(&port.node)
    }

    /// Number of priority classes every switch supports.
    pub fn class_count(&self) -> u8 {
        self.switches
            .values()
            .map(|p| p.class_count)
            .min()
            .unwrap_or(SwitchProfile::default().class_count)
    }

    fn switch_components(&self, links: impl Iterator<Item = Link>) -> usize {
        let ids: Vec<&NodeId> = self.switches.keys().collect();
        let index: BTreeMap<&NodeId, usize> =
            ids.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut dsu = trees::Dsu::new(ids.len());
        for link in links {
            if let (Some(&x), Some(&y)) = (index.get(&link.a.node), index.get(&link.b.node)) {
                dsu.union(x, y);
            }
        }
        dsu.components()
    }

    pub fn switches_connected(&self) -> bool {
        self.switch_components(self.links.keys().cloned()) <= 1
    }

    /// Checks the structural invariants: known endpoints, one cable per port,
    /// valid profiles and a connected fixed network.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let invalid = |m: String| Err(TopologyError::Invalid(m));
        for (id, profile) in &self.switches {
            profile.validate(id)?;
        }
        let mut used: BTreeSet<&PortId> = BTreeSet::new();
        let claim = |p: &'_ PortId| -> Result<(), TopologyError> {
            if !self.switches.contains_key(&p.node) {
                return Err(TopologyError::Invalid(format!(
                    "port {p} is not on a switch"
                )));
            }
            Ok(())
        };
        for link in self.links.keys() {
            claim(&link.a)?;
            claim(&link.b)?;
            if link.a.node == link.b.node {
                return invalid(format!("link {link} loops back to its own switch"));
            }
        }
        for (host, port) in &self.hosts {
            claim(port)?;
            if self.switches.contains_key(host) {
                return invalid(format!("{host} is both a host and a switch"));
            }
        }
        if let Some(t) = &self.transit {
            claim(&t.attach)?;
            for ue in t.ues.keys() {
                if self.switches.contains_key(ue) || self.hosts.contains_key(ue) || ue == &t.id {
                    return invalid(format!("UE id {ue} clashes with another node"));
                }
            }
            if self.switches.contains_key(&t.id) || self.hosts.contains_key(&t.id) {
                return invalid(format!(
                    "transit node id {} clashes with another node",
                    t.id
                ));
            }
        }
        let ports = self
            .links
            .keys()
            .flat_map(|l| [&l.a, &l.b])
            .chain(self.hosts.values())
            .chain(self.transit.iter().map(|t| &t.attach));
        for p in ports {
            if !used.insert(p) {
                return Err(TopologyError::ConflictingPort(p.clone()));
            }
        }
        if self.switches.is_empty() {
            return invalid("no switches".into());
        }
        if self.max_pkt_bytes == 0 {
            return invalid("max packet size must be positive".into());
        }
        if !self.switches_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(())
    }

    /// Folds one lldp poll into the topology.
    ///
    /// Links reported by any device are added. Links that touch a polled
    /// device but were not reported by anyone in this snapshot are pruned, as
    /// are older links that collide with a freshly reported port. Unknown
    /// devices show up as switches with the default profile.
    pub fn merge_snapshot(&self, snap: &TopologySnapshot) -> Result<Topology, TopologyError> {
        let mut out = self.clone();
        let mut reported: BTreeMap<Link, ()> = BTreeMap::new();
        let mut by_port: BTreeMap<PortId, Link> = BTreeMap::new();
        let transit_id = self.transit.as_ref().map(|t| t.id.clone());

        for rec in &snap.records {
            let neighbor = &rec.neighbor.node;
            if self.hosts.contains_key(neighbor) {
                out.hosts.insert(neighbor.clone(), rec.port.clone());
                continue;
            }
            if transit_id.as_ref() == Some(neighbor) {
                if let Some(t) = out.transit.as_mut() {
                    t.attach = rec.port.clone();
                }
                continue;
            }
            let link = Link::new(rec.port.clone(), rec.neighbor.clone());
            for p in [&link.a, &link.b] {
                match by_port.get(p) {
                    Some(existing) if existing != &link => {
                        return Err(TopologyError::ConflictingPort(p.clone()));
                    }
                    _ => {
                        by_port.insert(p.clone(), link.clone());
                    }
                }
            }
            reported.insert(link, ());
        }

        let polled = snap.polled();
        out.links.retain(|link, _| {
            if reported.contains_key(link) {
                return true;
            }
            let stale = polled.iter().any(|n| link.touches(n));
            let collides = by_port.contains_key(&link.a) || by_port.contains_key(&link.b);
            !stale && !collides
        });
        for link in reported.into_keys() {
            for node in [&link.a.node, &link.b.node] {
                if !out.switches.contains_key(node) {
                    out.switches.insert(node.clone(), SwitchProfile::default());
                }
            }
            out.links.entry(link).or_default();
        }
        Ok(out)
    }

    /// Replaces the UE set with what the AF reported.
    pub fn merge_5g_snapshot(&self, ues: &[UeRecord]) -> Result<UeUpdate, TopologyError> {
        let transit = self.transit.as_ref().ok_or(TopologyError::NoTransitNode)?;
        let fresh: BTreeMap<NodeId, UeRecord> =
            ues.iter().map(|u| (u.id.clone(), u.clone())).collect();
        let removed = transit
            .ues
            .keys()
            .filter(|id| !fresh.contains_key(*id))
            .cloned()
            .collect();
        let added = fresh
            .keys()
            .filter(|id| !transit.ues.contains_key(*id))
            .cloned()
            .collect();
        let mut topology = self.clone();
        if let Some(t) = topology.transit.as_mut() {
            t.ues = fresh;
        }
        Ok(UeUpdate {
            topology,
            added,
            removed,
        })
    }

    /// The lldp view the switches would report for this topology.
    pub fn snapshot(&self, timestamp_s: u64) -> TopologySnapshot {
        let mut records = Vec::new();
        for link in self.links.keys() {
            records.push(NeighborRecord {
                port: link.a.clone(),
                neighbor: link.b.clone(),
            });
            records.push(NeighborRecord {
                port: link.b.clone(),
                neighbor: link.a.clone(),
            });
        }
        for (host, port) in &self.hosts {
            records.push(NeighborRecord {
                port: port.clone(),
                neighbor: PortId::new(host.clone(), 0),
            });
        }
        if let Some(t) = &self.transit {
            records.push(NeighborRecord {
                port: t.attach.clone(),
                neighbor: PortId::new(t.id.clone(), 0),
            });
        }
        TopologySnapshot {
            timestamp_s,
            records,
        }
    }

    /// Ordered egress ports a packet from `src` to `dst` crosses inside
    /// `tree`. Every egress port is one queuing hop; the last one is the
    /// destination's attachment port.
    pub fn path_in_tree(
        &self,
        tree: &VlanTree,
        src: &NodeId,
        dst: &NodeId,
    ) -> Result<Vec<PortId>, TopologyError> {
        if src == dst {
            return Ok(Vec::new());
        }
        let attach = |n: &NodeId| {
            self.attachment(n)
                .filter(|p| self.switches.contains_key(&p.node))
                .ok_or_else(|| TopologyError::Unreachable(format!("{n} has no switch attachment")))
        };
        let from = attach(src)?;
        let to = attach(dst)?;

        let start = &from.node;
        let goal = &to.node;
        let mut came_from: BTreeMap<&NodeId, &Link> = BTreeMap::new();
        let mut seen: BTreeSet<&NodeId> = BTreeSet::from([start]);
        let mut frontier = VecDeque::from([start]);
        while let Some(node) = frontier.pop_front() {
            if node == goal {
                break;
            }
            for link in tree.edges.iter().filter(|l| l.touches(node)) {
                let next = if &link.a.node == node {
                    &link.b.node
                } else {
                    &link.a.node
                };
                if seen.insert(next) {
                    came_from.insert(next, link);
                    frontier.push_back(next);
                }
            }
        }
        if !seen.contains(goal) {
            return Err(TopologyError::Unreachable(format!(
                "{goal} not reachable from {start} in VLAN {}",
                tree.vlan_id
            )));
        }

        let mut hops = vec![to.clone()];
        let mut node = goal;
        while node != start {
            let link = came_from[node];
            let prev = if &link.a.node == node {
                &link.b.node
            } else {
                &link.a.node
            };
            hops.push(link.port_on(prev).expect("tree edge touches prev").clone());
            node = prev;
        }
        hops.reverse();
        Ok(hops)
    }
}

/// Far end of an egress port.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Peer {
    Switch { port: PortId, prop_delay_us: u64 },
    Leaf(NodeId),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn port(s: &str) -> PortId {
        s.parse().unwrap()
    }

    fn rec(a: &str, b: &str) -> NeighborRecord {
        NeighborRecord {
            port: port(a),
            neighbor: port(b),
        }
    }

    fn snap(records: Vec<NeighborRecord>) -> TopologySnapshot {
        TopologySnapshot {
            timestamp_s: 0,
            records,
        }
    }

    #[test]
    fn port_ids_parse_from_the_last_dot() {
        assert_eq!(port("S1.3"), PortId::new("S1", 3));
        assert_eq!(port("rack.a.12"), PortId::new("rack.a", 12));
        assert!("S1".parse::<PortId>().is_err());
        assert!(".3".parse::<PortId>().is_err());
        assert!("S1.x".parse::<PortId>().is_err());
    }

    #[test]
    fn merge_into_empty_topology() {
        let topo = Topology::default();
        let merged = topo
            .merge_snapshot(&snap(vec![rec("S1.1", "S2.1")]))
            .unwrap();
        assert_eq!(merged.links.len(), 1);
        assert_eq!(merged.switches.len(), 2);
    }

    #[test]
    fn merge_is_idempotent() {
        let s = snap(vec![rec("S1.1", "S2.1"), rec("S2.1", "S1.1")]);
        let once = Topology::default().merge_snapshot(&s).unwrap();
        let twice = once.merge_snapshot(&s).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.links.len(), 1);
    }

    #[test]
    fn triangle_snapshot_builds_a_ring() {
        let s = snap(vec![
            rec("S1.1", "S2.1"),
            rec("S2.2", "S3.2"),
            rec("S1.2", "S3.1"),
        ]);
        let ring = Topology::default().merge_snapshot(&s).unwrap();
        assert_eq!(ring.links.len(), 3);
        assert_eq!(ring.switches.len(), 3);
        assert!(ring.switches_connected());
    }

    #[test]
    fn conflicting_port_in_one_snapshot() {
        let s = snap(vec![rec("S1.1", "S2.1"), rec("S1.1", "S3.1")]);
        assert_eq!(
            Topology::default().merge_snapshot(&s),
            Err(TopologyError::ConflictingPort(port("S1.1")))
        );
    }

    #[test]
    fn vanished_neighbor_of_polled_device_is_pruned() {
        let s = snap(vec![rec("S1.1", "S2.1"), rec("S1.2", "S3.1")]);
        let topo = Topology::default().merge_snapshot(&s).unwrap();
        // S1 answers again but no longer sees S3
        let topo = topo
            .merge_snapshot(&snap(vec![rec("S1.1", "S2.1")]))
            .unwrap();
        assert_eq!(topo.links.len(), 1);
        // a poll of S2 alone does not touch S1's other links
        let topo = topo
            .merge_snapshot(&snap(vec![rec("S2.2", "S3.2")]))
            .unwrap();
        assert_eq!(topo.links.len(), 1);
        assert!(topo.link_at(&port("S2.2")).is_some());
    }

    #[test]
    fn merge_5g_snapshot_reports_removed_ues() {
        let mut topo = Topology::default();
        assert_eq!(
            topo.merge_5g_snapshot(&[]),
            Err(TopologyError::NoTransitNode)
        );
        topo.transit = Some(TransitNode5G {
            id: "5GS".into(),
            tdd: "DDDSU".parse().unwrap(),
            ues: BTreeMap::new(),
            attach: port("S1.3"),
        });
        let empty = topo.merge_5g_snapshot(&[]).unwrap();
        assert!(empty.topology.transit.as_ref().unwrap().ues.is_empty());

        let two = [
            UeRecord::new("UE1", 1500, 3000),
            UeRecord::new("UE2", 1500, 3000),
        ];
        let up = topo.merge_5g_snapshot(&two).unwrap();
        assert_eq!(up.added.len(), 2);
        assert_eq!(up.topology.attachment(&"UE2".into()), Some(&port("S1.3")));

        let down = up.topology.merge_5g_snapshot(&two[..1]).unwrap();
        assert_eq!(down.removed, vec![NodeId::from("UE2")]);
        assert!(!down.topology.is_ue(&"UE2".into()));
    }

    #[test]
    fn own_snapshot_round_trips() {
        let topo = crate::scenario::canonical_topology();
        let merged = topo.merge_snapshot(&topo.snapshot(0)).unwrap();
        assert_eq!(merged, topo);
    }

    #[test]
    fn validate_catches_shared_ports() {
        let mut topo = crate::scenario::canonical_topology();
        topo.hosts.insert("H9".into(), port("S1.1"));
        assert_eq!(
            topo.validate(),
            Err(TopologyError::ConflictingPort(port("S1.1")))
        );
    }

    #[test]
    fn validate_catches_disconnected_fabric() {
        let mut topo = crate::scenario::canonical_topology();
        topo.links.clear();
        assert_eq!(topo.validate(), Err(TopologyError::Disconnected));
    }
}
