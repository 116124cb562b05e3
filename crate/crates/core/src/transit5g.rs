//! The 5G system seen from the DetNet controller: a single transit node with
//! a per-UE delay contract derived from the TDD pattern, the numerology and
//! the transport block size granted to each UE.
//!
//! All radio detail below slot granularity is ignored. A byte that arrives
//! during slot `k` may be carried by the first usable slot whose index is at
//! least `k + 1 + grant_delay_slots`; every usable slot carries up to `tbs`
//! bytes of the UE and the data is delivered at the end of that slot.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{NodeId, PortId};
use crate::units::{ns_to_us_ceil, NANOS_PER_SEC};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TddError {
    #[error("TDD pattern has no usable uplink slot")]
    NoUplinkSlots,
    #[error("TDD pattern has no usable downlink slot")]
    NoDownlinkSlots,
    #[error("rate {rate_bps} B/s exceeds the {direction} capacity of {capacity_bps} B/s")]
    RateExceedsCapacity {
        direction: Direction,
        rate_bps: u64,
        capacity_bps: u64,
    },
    #[error("unknown UE `{0}`")]
    UnknownUe(NodeId),
    #[error("invalid TDD configuration: {0}")]
    InvalidConfig(String),
}

/// Slot kinds of a TDD pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Downlink,
    Uplink,
    Special,
    Flexible,
}

impl SlotKind {
    fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'D' => Some(Self::Downlink),
            'U' => Some(Self::Uplink),
            'S' => Some(Self::Special),
            'F' => Some(Self::Flexible),
            _ => None,
        }
    }

    fn as_char(self) -> char {
        match self {
            Self::Downlink => 'D',
            Self::Uplink => 'U',
            Self::Special => 'S',
            Self::Flexible => 'F',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uplink => f.write_str("uplink"),
            Self::Downlink => f.write_str("downlink"),
        }
    }
}

/// A periodic TDD pattern together with the slot timing.
///
/// Flexible slots are never counted as usable in either direction: their
/// direction is decided at run time by the gNB and cannot be promised.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TddConfig {
    pattern: Vec<SlotKind>,
    numerology: u8,
    pub grant_delay_slots: u32,
    pub s_slot_usable_ul: bool,
    pub s_slot_usable_dl: bool,
}

impl TddConfig {
    pub fn new(pattern: &str, numerology: u8) -> Result<Self, TddError> {
        if numerology > 4 {
            return Err(TddError::InvalidConfig(format!(
                "numerology {numerology} outside 0..=4"
            )));
        }
        let pattern = pattern
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                SlotKind::from_char(c)
                    .ok_or_else(|| TddError::InvalidConfig(format!("unknown slot kind `{c}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if pattern.is_empty() {
            return Err(TddError::InvalidConfig("empty TDD pattern".into()));
        }
        Ok(Self {
            pattern,
            numerology,
            grant_delay_slots: 0,
            s_slot_usable_ul: false,
            s_slot_usable_dl: true,
        })
    }

    pub fn with_grant_delay(mut self, slots: u32) -> Self {
        self.grant_delay_slots = slots;
        self
    }

    pub fn with_special_slots(mut self, usable_ul: bool, usable_dl: bool) -> Self {
        self.s_slot_usable_ul = usable_ul;
        self.s_slot_usable_dl = usable_dl;
        self
    }

    pub fn pattern(&self) -> &[SlotKind] {
        &self.pattern
    }

    pub fn pattern_string(&self) -> String {
        self.pattern.iter().map(|k| k.as_char()).collect()
    }

    pub fn numerology(&self) -> u8 {
        self.numerology
    }

    pub fn period_slots(&self) -> usize {
        self.pattern.len()
    }

    /// Slot duration in nanoseconds (1 ms / 2^mu).
    pub fn slot_ns(&self) -> u64 {
        1_000_000 >> self.numerology
    }

    pub fn period_ns(&self) -> u64 {
        self.slot_ns() * self.pattern.len() as u64
    }

    /// Whether the slot at absolute index `slot` carries data in `dir`.
    pub fn is_usable(&self, dir: Direction, slot: u64) -> bool {
        let kind = self.pattern[(slot % self.pattern.len() as u64) as usize];
        match (dir, kind) {
            (Direction::Uplink, SlotKind::Uplink) => true,
            (Direction::Uplink, SlotKind::Special) => self.s_slot_usable_ul,
            (Direction::Downlink, SlotKind::Downlink) => true,
            (Direction::Downlink, SlotKind::Special) => self.s_slot_usable_dl,
            _ => false,
        }
    }

    /// Indices within one period of the slots usable in `dir`, ascending.
    pub fn usable_slots(&self, dir: Direction) -> Vec<u64> {
        (0..self.pattern.len() as u64)
            .filter(|&i| self.is_usable(dir, i))
            .collect()
    }
}

impl FromStr for TddConfig {
    type Err = TddError;

    /// Parses a bare pattern with numerology 1.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeRecord {
    pub id: NodeId,
    #[serde(rename = "tbs_ul_B")]
    pub tbs_ul_bytes: u64,
    #[serde(rename = "tbs_dl_B")]
    pub tbs_dl_bytes: u64,
    #[serde(default)]
    pub mcs_index: u32,
}

impl UeRecord {
    pub fn new(id: impl Into<NodeId>, tbs_ul_bytes: u64, tbs_dl_bytes: u64) -> Self {
        Self {
            id: id.into(),
            tbs_ul_bytes,
            tbs_dl_bytes,
            mcs_index: 0,
        }
    }

    pub fn tbs(&self, dir: Direction) -> u64 {
        match dir {
            Direction::Uplink => self.tbs_ul_bytes,
            Direction::Downlink => self.tbs_dl_bytes,
        }
    }
}

/// The 5G system abstracted as one forwarding device attached to the fixed
/// network through the NW-TT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitNode5G {
    pub id: NodeId,
    pub tdd: TddConfig,
    pub ues: BTreeMap<NodeId, UeRecord>,
    /// Switch port the NW-TT is cabled to.
    pub attach: PortId,
}

impl TransitNode5G {
    pub fn ue(&self, id: &NodeId) -> Result<&UeRecord, TddError> {
        self.ues
            .get(id)
            .ok_or_else(|| TddError::UnknownUe(id.clone()))
    }
}

/// Extremes of the burst-completion latency over all arrival slots of one
/// period, in nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrantSweep {
    /// Arrival just after the start of the worst slot.
    pub worst_ns: u64,
    /// Arrival just before the end of the best slot.
    pub best_ns: u64,
}

fn no_slots(dir: Direction) -> TddError {
    match dir {
        Direction::Uplink => TddError::NoUplinkSlots,
        Direction::Downlink => TddError::NoDownlinkSlots,
    }
}

/// Latency to complete `grants` slot grants, swept over every arrival slot of
/// one period.
///
/// Inside a slot the remaining wait shrinks linearly, so the supremum sits at
/// an arrival just after a slot boundary and the infimum just before one.
pub fn grant_sweep(tdd: &TddConfig, dir: Direction, grants: u64) -> Result<GrantSweep, TddError> {
    let usable = tdd.usable_slots(dir);
    if usable.is_empty() {
        return Err(no_slots(dir));
    }
    let grants = grants.max(1);
    let period = tdd.period_slots() as u64;
    let per_period = usable.len() as u64;
    let slot_ns = tdd.slot_ns();

    let mut worst = 0;
    let mut best = u64::MAX;
    for k in 0..period {
        let first = k + 1 + u64::from(tdd.grant_delay_slots);
        let (base, offset) = (first / period, first % period);
        let pos = usable.partition_point(|&s| s < offset) as u64;
        let idx = pos + grants - 1;
        let last_slot = (base + idx / per_period) * period + usable[(idx % per_period) as usize];
        let end = (last_slot + 1) * slot_ns;
        worst = worst.max(end - k * slot_ns);
        best = best.min(end - (k + 1) * slot_ns);
    }
    Ok(GrantSweep {
        worst_ns: worst,
        best_ns: best,
    })
}

/// Long-run bytes per second a UE can move in `dir`.
pub fn capacity(tdd: &TddConfig, ue: &UeRecord, dir: Direction) -> u64 {
    let usable = tdd.usable_slots(dir).len() as u128;
    let bytes = usable * u128::from(ue.tbs(dir)) * u128::from(NANOS_PER_SEC);
    (bytes / u128::from(tdd.period_ns())) as u64
}

pub fn ul_capacity(tdd: &TddConfig, ue: &UeRecord) -> u64 {
    capacity(tdd, ue, Direction::Uplink)
}

pub fn dl_capacity(tdd: &TddConfig, ue: &UeRecord) -> u64 {
    capacity(tdd, ue, Direction::Downlink)
}

fn check_flow(
    tdd: &TddConfig,
    ue: &UeRecord,
    dir: Direction,
    burst_bytes: u64,
    rate_bps: u64,
) -> Result<(), TddError> {
    if tdd.usable_slots(dir).is_empty() {
        return Err(no_slots(dir));
    }
    if burst_bytes == 0 || rate_bps == 0 {
        return Err(TddError::InvalidConfig(
            "burst and rate must be positive".into(),
        ));
    }
    if ue.tbs(dir) == 0 {
        return Err(TddError::InvalidConfig(format!(
            "UE `{}` has a zero {dir} TBS",
            ue.id
        )));
    }
    let capacity_bps = capacity(tdd, ue, dir);
    if rate_bps > capacity_bps {
        return Err(TddError::RateExceedsCapacity {
            direction: dir,
            rate_bps,
            capacity_bps,
        });
    }
    Ok(())
}

/// Worst-case latency, in microseconds, of a burst of `burst_bytes` that
/// needs `ceil(burst / tbs)` grants.
pub fn worst_case_latency(
    tdd: &TddConfig,
    ue: &UeRecord,
    dir: Direction,
    burst_bytes: u64,
    rate_bps: u64,
) -> Result<u64, TddError> {
    check_flow(tdd, ue, dir, burst_bytes, rate_bps)?;
    let grants = burst_bytes.div_ceil(ue.tbs(dir));
    Ok(ns_to_us_ceil(grant_sweep(tdd, dir, grants)?.worst_ns))
}

pub fn worst_case_ul_latency(
    tdd: &TddConfig,
    ue: &UeRecord,
    burst_bytes: u64,
    rate_bps: u64,
) -> Result<u64, TddError> {
    worst_case_latency(tdd, ue, Direction::Uplink, burst_bytes, rate_bps)
}

pub fn worst_case_dl_latency(
    tdd: &TddConfig,
    ue: &UeRecord,
    burst_bytes: u64,
    rate_bps: u64,
) -> Result<u64, TddError> {
    worst_case_latency(tdd, ue, Direction::Downlink, burst_bytes, rate_bps)
}

/// What the AF reports to the CNM for one UE and direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitContract {
    pub delay_bound_us: u64,
    pub best_case_us: u64,
    pub jitter_us: u64,
}

/// Delay contract of the 5G segment for a `(burst, rate)` token-bucket
/// aggregate of one UE.
///
/// Data that keeps arriving at `rate` while the initial burst is still queued
/// may push the last byte into later grants. The bound is therefore the
/// largest `L(n) - t(n)` over grant counts `n`, where `L(n)` is the worst
/// completion time of `n` grants and `t(n)` the earliest arrival offset at
/// which the backlog can need `n` grants. One pattern period of grant counts
/// past `ceil(burst / tbs)` is enough: after that each term repeats one
/// period later while `t(n)` grows at least as fast, since `rate <= capacity`.
pub fn transit_contract(
    node: &TransitNode5G,
    ue_id: &NodeId,
    dir: Direction,
    burst_bytes: u64,
    rate_bps: u64,
) -> Result<TransitContract, TddError> {
    let ue = node.ue(ue_id)?;
    let tdd = &node.tdd;
    check_flow(tdd, ue, dir, burst_bytes, rate_bps)?;
    let tbs = ue.tbs(dir);
    let first = burst_bytes.div_ceil(tbs);
    let per_period = tdd.usable_slots(dir).len() as u64;

    let mut worst_ns = 0u64;
    for grants in first..=first + per_period {
        let sweep = grant_sweep(tdd, dir, grants)?;
        let needed = (grants - 1) * tbs;
        let offset_ns = if needed <= burst_bytes {
            0
        } else {
            (u128::from(needed - burst_bytes) * u128::from(NANOS_PER_SEC) / u128::from(rate_bps))
                as u64
        };
        worst_ns = worst_ns.max(sweep.worst_ns.saturating_sub(offset_ns));
    }
    let best_ns = grant_sweep(tdd, dir, 1)?.best_ns;
    let delay_bound_us = ns_to_us_ceil(worst_ns);
    let best_case_us = best_ns / 1_000;
    Ok(TransitContract {
        delay_bound_us,
        best_case_us,
        jitter_us: delay_bound_us - best_case_us,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ue(tbs_ul: u64, tbs_dl: u64) -> UeRecord {
        UeRecord::new("UE1", tbs_ul, tbs_dl)
    }

    fn node(pattern: &str) -> TransitNode5G {
        let mut ues = BTreeMap::new();
        ues.insert(NodeId::from("UE1"), ue(1500, 3000));
        TransitNode5G {
            id: "5GS".into(),
            tdd: TddConfig::new(pattern, 1).unwrap(),
            ues,
            attach: "S1.3".parse().unwrap(),
        }
    }

    #[test]
    fn all_uplink_single_grant_takes_two_slots() {
        let tdd = TddConfig::new("UUUUU", 1).unwrap();
        assert_eq!(
            worst_case_ul_latency(&tdd, &ue(1500, 1500), 1000, 1000),
            Ok(1000)
        );
    }

    #[test]
    fn dddsu_single_grant() {
        let tdd = TddConfig::new("DDDSU", 1).unwrap();
        assert_eq!(
            worst_case_ul_latency(&tdd, &ue(1500, 1500), 1250, 12_500),
            Ok(3000)
        );
    }

    #[test]
    fn rate_above_capacity_is_rejected() {
        let tdd = TddConfig::new("DDDSU", 1).unwrap();
        let err = worst_case_ul_latency(&tdd, &ue(1500, 1500), 1500, 700_000).unwrap_err();
        assert_eq!(
            err,
            TddError::RateExceedsCapacity {
                direction: Direction::Uplink,
                rate_bps: 700_000,
                capacity_bps: 600_000
            }
        );
    }

    #[test]
    fn capacity_examples() {
        let tdd = TddConfig::new("DDDSU", 1).unwrap();
        assert_eq!(ul_capacity(&tdd, &ue(1500, 1500)), 600_000);
        assert_eq!(ul_capacity(&tdd, &ue(3000, 1500)), 1_200_000);
        let all_d = TddConfig::new("DDDDD", 1).unwrap();
        assert_eq!(ul_capacity(&all_d, &ue(1500, 1500)), 0);
    }

    #[test]
    fn downlink_mirror() {
        let all_d = TddConfig::new("DDDDD", 1).unwrap();
        assert_eq!(
            worst_case_dl_latency(&all_d, &ue(1500, 1500), 1000, 1000),
            Ok(1000)
        );
        let all_u = TddConfig::new("UUUUU", 1).unwrap();
        assert_eq!(
            worst_case_dl_latency(&all_u, &ue(1500, 1500), 1000, 1000),
            Err(TddError::NoDownlinkSlots)
        );
        let no_ul = TddConfig::new("DDDSD", 1).unwrap();
        assert_eq!(
            worst_case_ul_latency(&no_ul, &ue(1500, 1500), 1000, 1000),
            Err(TddError::NoUplinkSlots)
        );
    }

    #[test]
    fn special_slot_not_usable_for_downlink_two_grants() {
        // Usable DL slots 0,1,2. Worst start is slot 2: grants in 5 and 6
        // complete at boundary 7, i.e. 5 slots after the arrival.
        let tdd = TddConfig::new("DDDSU", 1)
            .unwrap()
            .with_special_slots(false, false);
        assert_eq!(
            worst_case_dl_latency(&tdd, &ue(1500, 1500), 3000, 1000),
            Ok(2500)
        );
    }

    #[test]
    fn numerology_four_rounds_up_to_whole_microseconds() {
        let tdd = TddConfig::new("UUUUU", 4).unwrap();
        assert_eq!(tdd.slot_ns(), 62_500);
        // two slots = 125 us exactly, three grants = 4 slots = 250 us
        assert_eq!(worst_case_ul_latency(&tdd, &ue(100, 100), 100, 10), Ok(125));
        let tdd = TddConfig::new("DU", 4).unwrap();
        // worst arrival at slot 1: next U is slot 3, ends at 4 -> 3 slots = 187.5 us
        assert_eq!(worst_case_ul_latency(&tdd, &ue(100, 100), 100, 10), Ok(188));
    }

    #[test]
    fn grant_delay_pushes_the_first_usable_slot() {
        let tdd = TddConfig::new("UUUUU", 1).unwrap().with_grant_delay(2);
        assert_eq!(
            worst_case_ul_latency(&tdd, &ue(1500, 1500), 1000, 1000),
            Ok(2000)
        );
    }

    #[test]
    fn contract_examples() {
        let n = node("DDDSU");
        let c = transit_contract(&n, &"UE1".into(), Direction::Uplink, 1250, 12_500).unwrap();
        assert_eq!(c.delay_bound_us, 3000);
        assert_eq!(c.best_case_us, 500);
        assert_eq!(c.jitter_us, 2500);

        let n = node("UUUUU");
        let c = transit_contract(&n, &"UE1".into(), Direction::Uplink, 1000, 1000).unwrap();
        assert_eq!(c.delay_bound_us, 1000);
        assert_eq!(c.best_case_us, 500);

        assert_eq!(
            transit_contract(&n, &"UE9".into(), Direction::Uplink, 1000, 1000),
            Err(TddError::UnknownUe("UE9".into()))
        );
    }

    #[test]
    fn contract_accounts_for_rate_after_a_full_burst() {
        // One usable slot per period, burst fills it completely: data arriving
        // right after the burst must wait one more period.
        let n = node("UDDDD");
        let burst_only =
            worst_case_ul_latency(&n.tdd, &n.ues[&NodeId::from("UE1")], 1500, 1000).unwrap();
        let c = transit_contract(&n, &"UE1".into(), Direction::Uplink, 1500, 100_000).unwrap();
        assert_eq!(burst_only, 3000);
        // data right behind the burst leaves at the end of slot 10
        assert_eq!(c.delay_bound_us, 5500);
    }

    #[test]
    fn flexible_slots_are_never_usable() {
        let tdd = TddConfig::new("FFFFU", 1).unwrap();
        assert_eq!(tdd.usable_slots(Direction::Uplink), vec![4]);
        assert!(tdd.usable_slots(Direction::Downlink).is_empty());
    }

    #[test]
    fn rejects_bad_patterns() {
        assert!(TddConfig::new("", 1).is_err());
        assert!(TddConfig::new("DDXU", 1).is_err());
        assert!(TddConfig::new("DU", 5).is_err());
    }
}
