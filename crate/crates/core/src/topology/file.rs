//! JSON schema of the topology input file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    Link, LinkAttrs, NodeId, PortId, SwitchProfile, Topology, TopologyError,
    DEFAULT_FIVEG_POLL_INTERVAL_S, DEFAULT_FIXED_POLL_INTERVAL_S, DEFAULT_MAX_PKT_BYTES,
};
use crate::transit5g::{TddConfig, TransitNode5G, UeRecord};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_class_count() -> u8 {
    8
}

fn default_true() -> bool {
    true
}

fn default_transit_id() -> NodeId {
    NodeId::from("5GS")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchEntry {
    pub id: NodeId,
    #[serde(rename = "link_rate_Bps")]
    pub link_rate_bps: u64,
    /// One value per class, or a single value applied to every class.
    #[serde(deserialize_with = "one_or_many")]
    pub fwd_delay_us: Vec<u64>,
    #[serde(rename = "port_buffer_B")]
    pub port_buffer_bytes: u64,
    #[serde(default = "default_class_count")]
    pub class_count: u8,
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(u64),
        Many(Vec<u64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkEntry {
    Pair([PortId; 2]),
    Detailed {
        ports: [PortId; 2],
        #[serde(default)]
        prop_delay_us: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostEntry {
    pub id: NodeId,
    pub attach: PortId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitEntry {
    #[serde(default = "default_transit_id")]
    pub id: NodeId,
    pub tdd_pattern: String,
    pub numerology: u8,
    #[serde(default)]
    pub grant_delay_slots: u32,
    #[serde(default)]
    pub s_slot_usable_ul: bool,
    #[serde(default = "default_true")]
    pub s_slot_usable_dl: bool,
    #[serde(default)]
    pub ues: Vec<UeRecord>,
    pub attach: PortId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub switches: Vec<SwitchEntry>,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
    #[serde(default)]
    pub hosts: Vec<HostEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transit5g: Option<TransitEntry>,
    #[serde(rename = "max_pkt_B", default, skip_serializing_if = "Option::is_none")]
    pub max_pkt_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_poll_interval_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiveg_poll_interval_s: Option<u64>,
}

impl TopologyFile {
    /// Builds and validates the in-memory topology.
    pub fn into_topology(self) -> Result<Topology, TopologyError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(TopologyError::Invalid(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let mut topo = Topology {
            max_pkt_bytes: self.max_pkt_bytes.unwrap_or(DEFAULT_MAX_PKT_BYTES),
            fixed_poll_interval_s: self
                .fixed_poll_interval_s
                .unwrap_or(DEFAULT_FIXED_POLL_INTERVAL_S),
            fiveg_poll_interval_s: self
                .fiveg_poll_interval_s
                .unwrap_or(DEFAULT_FIVEG_POLL_INTERVAL_S),
            ..Topology::default()
        };
        for sw in self.switches {
            let fwd_delay_us = match sw.fwd_delay_us.as_slice() {
                [single] => vec![*single; usize::from(sw.class_count)],
                _ => sw.fwd_delay_us,
            };
            let profile = SwitchProfile {
                class_count: sw.class_count,
                fwd_delay_us,
                port_buffer_bytes: sw.port_buffer_bytes,
                link_rate_bps: sw.link_rate_bps,
            };
            if topo.switches.insert(sw.id.clone(), profile).is_some() {
                return Err(TopologyError::Invalid(format!(
                    "duplicate switch {}",
                    sw.id
                )));
            }
        }
        for entry in self.links {
            let ([x, y], prop_delay_us) = match entry {
                LinkEntry::Pair(ports) => (ports, 0),
                LinkEntry::Detailed {
                    ports,
                    prop_delay_us,
                } => (ports, prop_delay_us),
            };
            let link = Link::new(x, y);
            if topo
                .links
                .insert(link.clone(), LinkAttrs { prop_delay_us })
                .is_some()
            {
                return Err(TopologyError::Invalid(format!("duplicate link {link}")));
            }
        }
        for host in self.hosts {
            if topo.hosts.insert(host.id.clone(), host.attach).is_some() {
                return Err(TopologyError::Invalid(format!(
                    "duplicate host {}",
                    host.id
                )));
            }
        }
        if let Some(t) = self.transit5g {
            let tdd = TddConfig::new(&t.tdd_pattern, t.numerology)
                .map_err(|e| TopologyError::Invalid(e.to_string()))?
                .with_grant_delay(t.grant_delay_slots)
                .with_special_slots(t.s_slot_usable_ul, t.s_slot_usable_dl);
            let mut ues = BTreeMap::new();
            for ue in t.ues {
                if ue.tbs_ul_bytes == 0 || ue.tbs_dl_bytes == 0 {
                    return Err(TopologyError::Invalid(format!(
                        "UE {} has a zero TBS",
                        ue.id
                    )));
                }
                if ues.insert(ue.id.clone(), ue.clone()).is_some() {
                    return Err(TopologyError::Invalid(format!("duplicate UE {}", ue.id)));
                }
            }
            topo.transit = Some(TransitNode5G {
                id: t.id,
                tdd,
                ues,
                attach: t.attach,
            });
        }
        topo.validate()?;
        Ok(topo)
    }
}

impl From<&Topology> for TopologyFile {
    fn from(topo: &Topology) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            switches: topo
                .switches
                .iter()
                .map(|(id, p)| SwitchEntry {
                    id: id.clone(),
                    link_rate_bps: p.link_rate_bps,
                    fwd_delay_us: p.fwd_delay_us.clone(),
                    port_buffer_bytes: p.port_buffer_bytes,
                    class_count: p.class_count,
                })
                .collect(),
            links: topo
                .links
                .iter()
                .map(|(l, attrs)| {
                    let ports = [l.a.clone(), l.b.clone()];
                    if attrs.prop_delay_us == 0 {
                        LinkEntry::Pair(ports)
                    } else {
                        LinkEntry::Detailed {
                            ports,
                            prop_delay_us: attrs.prop_delay_us,
                        }
                    }
                })
                .collect(),
            hosts: topo
                .hosts
                .iter()
                .map(|(id, attach)| HostEntry {
                    id: id.clone(),
                    attach: attach.clone(),
                })
                .collect(),
            transit5g: topo.transit.as_ref().map(|t| TransitEntry {
                id: t.id.clone(),
                tdd_pattern: t.tdd.pattern_string(),
                numerology: t.tdd.numerology(),
                grant_delay_slots: t.tdd.grant_delay_slots,
                s_slot_usable_ul: t.tdd.s_slot_usable_ul,
                s_slot_usable_dl: t.tdd.s_slot_usable_dl,
                ues: t.ues.values().cloned().collect(),
                attach: t.attach.clone(),
            }),
            max_pkt_bytes: Some(topo.max_pkt_bytes),
            fixed_poll_interval_s: Some(topo.fixed_poll_interval_s),
            fiveg_poll_interval_s: Some(topo.fiveg_poll_interval_s),
        }
    }
}
