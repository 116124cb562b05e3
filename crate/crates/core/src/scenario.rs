//! Scenario files: a topology, the flows to request, NW-TT settings and the
//! traffic the simulator should generate. Also the canonical two-UE demo.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::{AdmissionOptions, FlowSpec};
use crate::nwtt::{MatchMode, RegulatorConfig};
use crate::topology::{
    Link, LinkAttrs, NodeId, NodeKind, PortId, SwitchProfile, Topology, TopologyError,
    TopologyFile, DEFAULT_TREE_CAP, DEFAULT_VLAN_BASE,
};
use crate::transit5g::{TddConfig, TransitNode5G, UeRecord};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

/// Reads and parses a JSON file, keeping the line and column of a failure.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
        path: path.to_owned(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_topology(path: &Path) -> Result<Topology, ScenarioError> {
    let file: TopologyFile = read_json(path)?;
    Ok(file.into_topology()?)
}

fn schema_version() -> u32 {
    SCENARIO_SCHEMA_VERSION
}

fn yes() -> bool {
    true
}

fn default_seed() -> u64 {
    1
}

/// How a source emits packets. Times in the source are relative to the
/// start of the run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceModel {
    /// One packet every period. Without an offset the phase is drawn from
    /// the run seed.
    Periodic {
        period_us: u64,
        #[serde(rename = "pkt_B")]
        pkt_bytes: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset_us: Option<u64>,
    },
    /// `burst_pkts` back-to-back packets every period.
    BurstPeriodic {
        period_us: u64,
        burst_pkts: u32,
        #[serde(rename = "pkt_B")]
        pkt_bytes: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset_us: Option<u64>,
    },
    /// Sends as early as the flow's token bucket allows, with random pauses.
    GreedyTokenBucket {
        #[serde(rename = "pkt_B")]
        pkt_bytes: u64,
        #[serde(default)]
        pause_permille: u32,
        #[serde(default)]
        max_pause_us: u64,
    },
    /// Line-rate bursts of unregistered class-0 traffic.
    OnoffBackground {
        on_ms: u64,
        off_ms: u64,
        #[serde(rename = "rate_Bps")]
        rate_bps: u64,
        #[serde(rename = "pkt_B")]
        pkt_bytes: u64,
        #[serde(default)]
        start_ms: u64,
    },
}

impl SourceModel {
    pub fn pkt_bytes(&self) -> u64 {
        match self {
            Self::Periodic { pkt_bytes, .. }
            | Self::BurstPeriodic { pkt_bytes, .. }
            | Self::GreedyTokenBucket { pkt_bytes, .. }
            | Self::OnoffBackground { pkt_bytes, .. } => *pkt_bytes,
        }
    }

    /// Whether every emission pattern stays within `b + r t`.
    fn conforms(&self, burst: u64, rate: u64) -> bool {
        let fits = |bytes: u64, period_us: u64| {
            bytes <= burst
                && u128::from(bytes) * 1_000_000 <= u128::from(rate) * u128::from(period_us)
        };
        match self {
            Self::Periodic {
                period_us,
                pkt_bytes,
                ..
            } => fits(*pkt_bytes, *period_us),
            Self::BurstPeriodic {
                period_us,
                burst_pkts,
                pkt_bytes,
                ..
            } => fits(u64::from(*burst_pkts) * pkt_bytes, *period_us),
            Self::GreedyTokenBucket { pkt_bytes, .. } => *pkt_bytes <= burst,
            Self::OnoffBackground { .. } => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFlow {
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
    #[serde(default)]
    pub dejitter: bool,
    /// Critical flows are registered with the CNM and must be admitted;
    /// the others travel as best effort.
    #[serde(default = "yes")]
    pub critical: bool,
    pub source: SourceModel,
}

impl ScenarioFlow {
    pub fn spec(&self) -> FlowSpec {
        FlowSpec {
            flow_id: self.flow_id.clone(),
            src: self.src.clone(),
            dst: self.dst.clone(),
            rate_bps: self.rate_bps,
            burst_bytes: self.burst_bytes,
            max_pkt_bytes: self.max_pkt_bytes,
            deadline_us: self.deadline_us,
            dejitter: self.dejitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSource {
    pub id: String,
    pub src: NodeId,
    pub dst: NodeId,
    pub source: SourceModel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassesBlock {
    pub count: u8,
    #[serde(default)]
    pub best_effort_class: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NwttBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dejitter: Option<RegulatorConfig>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmissionBlock {
    #[serde(default = "yes")]
    pub reconfiguration: bool,
    #[serde(default = "default_tree_cap")]
    pub tree_cap: usize,
    #[serde(default = "default_vlan_base")]
    pub vlan_base: u16,
}

fn default_tree_cap() -> usize {
    DEFAULT_TREE_CAP
}

fn default_vlan_base() -> u16 {
    DEFAULT_VLAN_BASE
}

impl Default for AdmissionBlock {
    fn default() -> Self {
        Self {
            reconfiguration: true,
            tree_cap: DEFAULT_TREE_CAP,
            vlan_base: DEFAULT_VLAN_BASE,
        }
    }
}

/// From `at_ms` on, the AF reports exactly these UEs as active.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeScheduleEntry {
    pub at_ms: u64,
    pub ues: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub duration_ms: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub background: Vec<BackgroundSource>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ue_schedule: Vec<UeScheduleEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Inline topology; alternatively `topology_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyFile>,
    /// Path of a topology file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<ClassesBlock>,
    pub flows: Vec<ScenarioFlow>,
    #[serde(default)]
    pub nwtt: NwttBlock,
    #[serde(default)]
    pub admission: AdmissionBlock,
    pub sim: SimBlock,
}

impl Scenario {
    /// Reads a scenario and inlines a referenced topology file.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let mut sc: Scenario = read_json(path)?;
        if let Some(rel) = sc.topology_file.take() {
            if sc.topology.is_some() {
                return invalid("give either `topology` or `topology_file`, not both");
            }
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            sc.topology = Some(read_json(&full)?);
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn topology(&self) -> Result<Topology, ScenarioError> {
        match &self.topology {
            Some(t) => Ok(t.clone().into_topology()?),
            None => invalid("scenario has no topology"),
        }
    }

    pub fn admission_options(&self, dejitter: bool) -> AdmissionOptions {
        AdmissionOptions {
            vlan_base: self.admission.vlan_base,
            tree_cap: self.admission.tree_cap,
            reconfiguration: self.admission.reconfiguration,
            regulator: if dejitter { self.nwtt.dejitter } else { None },
        }
    }

    /// Copy with de-jittering switched off for every flow.
    pub fn without_dejitter(&self) -> Self {
        let mut sc = self.clone();
        for f in &mut sc.flows {
            f.dejitter = false;
        }
        sc.nwtt.dejitter = None;
        sc
    }

    pub fn without_background(&self) -> Self {
        let mut sc = self.clone();
        sc.sim.background.clear();
        sc
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return invalid(format!(
                "unsupported schema_version {}",
                self.schema_version
            ));
        }
        let topo = self.topology()?;
        if let Some(c) = &self.classes {
            if c.best_effort_class != 0 {
                return invalid("the best-effort class must be 0");
            }
            if c.count < 2 || c.count > topo.class_count() {
                return invalid(format!(
                    "class count {} outside 2..={}",
                    c.count,
                    topo.class_count()
                ));
            }
        }
        if let Some(reg) = &self.nwtt.dejitter {
            reg.validate()
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        if self.sim.duration_ms == 0 {
            return invalid("sim.duration_ms must be positive");
        }

        let mut ids = BTreeSet::new();
        let endpoint = |n: &NodeId| -> Result<NodeKind, ScenarioError> {
            match topo.kind_of(n) {
                Some(k @ (NodeKind::Host | NodeKind::Ue)) => Ok(k),
                Some(_) => invalid(format!("`{n}` is not a host or UE")),
                None => invalid(format!("unknown node `{n}`")),
            }
        };
        let check_pair = |id: &str, src: &NodeId, dst: &NodeId| -> Result<(), ScenarioError> {
            let (s, d) = (endpoint(src)?, endpoint(dst)?);
            if src == dst {
                return invalid(format!("{id}: source equals destination"));
            }
            if s == NodeKind::Ue && d == NodeKind::Ue {
                return invalid(format!("{id}: UE-to-UE traffic is not supported"));
            }
            Ok(())
        };
        let check_source = |id: &str, src: &SourceModel| -> Result<(), ScenarioError> {
            let pkt = src.pkt_bytes();
            if pkt == 0 || pkt > topo.max_pkt_bytes {
                return invalid(format!(
                    "{id}: packet size {pkt} outside 1..={}",
                    topo.max_pkt_bytes
                ));
            }
            let ok = match src {
                SourceModel::Periodic { period_us, .. } => *period_us > 0,
                SourceModel::BurstPeriodic {
                    period_us,
                    burst_pkts,
                    ..
                } => *period_us > 0 && *burst_pkts > 0,
                SourceModel::GreedyTokenBucket { pause_permille, .. } => *pause_permille <= 1000,
                SourceModel::OnoffBackground {
                    on_ms, rate_bps, ..
                } => *on_ms > 0 && *rate_bps > 0,
            };
            if !ok {
                return invalid(format!("{id}: source parameters must be positive"));
            }
            Ok(())
        };

        for f in &self.flows {
            if !ids.insert(f.flow_id.as_str()) {
                return invalid(format!("duplicate flow id `{}`", f.flow_id));
            }
            check_pair(&f.flow_id, &f.src, &f.dst)?;
            check_source(&f.flow_id, &f.source)?;
            if matches!(f.source, SourceModel::OnoffBackground { .. }) {
                return invalid(format!("{}: on/off sources are background only", f.flow_id));
            }
            if f.source.pkt_bytes() > f.max_pkt_bytes {
                return invalid(format!("{}: source packets exceed max_pkt_B", f.flow_id));
            }
            if f.critical && !f.source.conforms(f.burst_bytes, f.rate_bps) {
                return invalid(format!(
                    "{}: source does not conform to its token bucket",
                    f.flow_id
                ));
            }
            if f.dejitter && self.nwtt.dejitter.is_some() && f.source.pkt_bytes() != f.max_pkt_bytes
            {
                return invalid(format!(
                    "{}: de-jittered flows must send max_pkt_B sized packets",
                    f.flow_id
                ));
            }
        }
        for bg in &self.sim.background {
            if !ids.insert(bg.id.as_str()) {
                return invalid(format!("duplicate flow id `{}`", bg.id));
            }
            check_pair(&bg.id, &bg.src, &bg.dst)?;
            check_source(&bg.id, &bg.source)?;
            if !matches!(bg.source, SourceModel::OnoffBackground { .. }) {
                return invalid(format!("{}: background sources must be on/off", bg.id));
            }
        }
        if ids
            .iter()
            .any(|id| id.is_empty() || id.contains([',', '\n', '"']))
        {
            return invalid("flow ids must be non-empty and free of commas and quotes");
        }
        let known: BTreeMap<&NodeId, ()> = topo
            .transit
            .iter()
            .flat_map(|t| t.ues.keys())
            .map(|k| (k, ()))
            .collect();
        for entry in &self.sim.ue_schedule {
            if let Some(ue) = entry.ues.iter().find(|u| !known.contains_key(u)) {
                return invalid(format!("UE schedule names unknown UE `{ue}`"));
            }
        }
        Ok(())
    }
}

fn port(s: &str) -> PortId {
    s.parse().expect("static port id")
}

/// Three switches in a ring, destination hosts D on S3 and H2 on S2, the
/// NW-TT on S1 with two UEs behind a "DDDSU" carrier.
pub fn canonical_topology() -> Topology {
    let profile = SwitchProfile {
        class_count: 8,
        fwd_delay_us: vec![0; 8],
        port_buffer_bytes: 32_000,
        link_rate_bps: 125_000,
    };
    let switches = ["S1", "S2", "S3"]
        .into_iter()
        .map(|s| (NodeId::from(s), profile.clone()))
        .collect();
    let links = [("S1.1", "S2.1"), ("S1.2", "S3.1"), ("S2.2", "S3.2")]
        .into_iter()
        .map(|(a, b)| (Link::new(port(a), port(b)), LinkAttrs::default()))
        .collect();
    let hosts = [("D", "S3.3"), ("H2", "S2.3")]
        .into_iter()
        .map(|(h, p)| (NodeId::from(h), port(p)))
        .collect();
    let ues = [
        UeRecord::new("UE1", 1500, 3000),
        UeRecord::new("UE2", 1500, 3000),
    ]
    .into_iter()
    .map(|u| (u.id.clone(), u))
    .collect();
    Topology {
        switches,
        hosts,
        links,
        transit: Some(TransitNode5G {
            id: "5GS".into(),
            tdd: TddConfig::new("DDDSU", 1).expect("static pattern"),
            ues,
            attach: port("S1.3"),
        }),
        ..Topology::default()
    }
}

/// The two-UE demo: a de-jitterable critical flow from UE1, a best-effort
/// flow from UE2 and saturating on/off background from H2, all towards D.
pub fn canonical_scenario() -> Scenario {
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: Some("canonical two-UE demo".into()),
        topology: Some(TopologyFile::from(&canonical_topology())),
        topology_file: None,
        classes: Some(ClassesBlock {
            count: 8,
            best_effort_class: 0,
        }),
        flows: vec![
            ScenarioFlow {
                flow_id: "ue1-critical".into(),
                src: "UE1".into(),
                dst: "D".into(),
                rate_bps: 12_500,
                burst_bytes: 1250,
                max_pkt_bytes: 100,
                deadline_us: 200_000,
                dejitter: true,
                critical: true,
                source: SourceModel::Periodic {
                    period_us: 8000,
                    pkt_bytes: 100,
                    offset_us: Some(250),
                },
            },
            ScenarioFlow {
                flow_id: "ue2-best-effort".into(),
                src: "UE2".into(),
                dst: "D".into(),
                rate_bps: 6250,
                burst_bytes: 25,
                max_pkt_bytes: 25,
                deadline_us: 100_000,
                dejitter: false,
                critical: false,
                source: SourceModel::Periodic {
                    period_us: 4000,
                    pkt_bytes: 25,
                    offset_us: Some(1000),
                },
            },
        ],
        nwtt: NwttBlock {
            dejitter: Some(RegulatorConfig {
                hold_us: 3000,
                release_period_us: 8000,
                queue_cap_pkts: 64,
                mode: MatchMode::PerFlow,
            }),
        },
        admission: AdmissionBlock::default(),
        sim: SimBlock {
            duration_ms: 20_000,
            seed: 1,
            background: vec![BackgroundSource {
                id: "background".into(),
                src: "H2".into(),
                dst: "D".into(),
                source: SourceModel::OnoffBackground {
                    on_ms: 1000,
                    off_ms: 1000,
                    rate_bps: 125_000,
                    pkt_bytes: 1500,
                    start_ms: 500,
                },
            }],
            ue_schedule: Vec::new(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_scenario_is_valid() {
        let sc = canonical_scenario();
        sc.validate().unwrap();
        assert_eq!(sc.topology().unwrap(), canonical_topology());
        let text = serde_json::to_string_pretty(&sc).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sc);
    }

    #[test]
    fn rejects_non_conforming_critical_sources() {
        let mut sc = canonical_scenario();
        sc.flows[0].source = SourceModel::Periodic {
            period_us: 1000,
            pkt_bytes: 100,
            offset_us: None,
        };
        assert!(matches!(sc.validate(), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn rejects_unknown_nodes_and_fields() {
        let mut sc = canonical_scenario();
        sc.flows[1].dst = "nowhere".into();
        assert!(sc.validate().is_err());

        let text = serde_json::to_string(&canonical_scenario())
            .unwrap()
            .replacen("\"duration_ms\"", "\"duration\"", 1);
        assert!(serde_json::from_str::<Scenario>(&text).is_err());
    }

    #[test]
    fn background_must_be_on_off() {
        let mut sc = canonical_scenario();
        sc.sim.background[0].source = SourceModel::Periodic {
            period_us: 100,
            pkt_bytes: 100,
            offset_us: None,
        };
        assert!(sc.validate().is_err());
    }
}
