//! Network-side translator at the 5G egress: per-flow classification and
//! VLAN tagging, the hold-and-forward regulator, and the token-bucket
//! reshaper that hands traffic to the fixed network with its declared
//! envelope restored.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::TokenBucket;
use crate::topology::{NodeId, PortId};
use crate::units::{us_to_ns, NANOS_PER_SEC};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NwttError {
    #[error("invalid regulator configuration: {0}")]
    InvalidRegulator(String),
    #[error("two rules match flow `{0}`")]
    DuplicateRule(String),
}

/// What a packet exposes to the classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacketMeta {
    pub flow_id: String,
    pub src: NodeId,
    pub dst: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NwttRule {
    pub flow_id: String,
    pub src: NodeId,
    pub dst: NodeId,
    /// First switch egress port of the flow's tree path.
    pub egress: PortId,
    pub vlan_id: u16,
    pub pcp: u8,
    pub shaper: TokenBucket,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regulator: Option<RegulatorConfig>,
}

impl NwttRule {
    fn matches(&self, meta: &PacketMeta) -> bool {
        self.flow_id == meta.flow_id && self.src == meta.src && self.dst == meta.dst
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NwttConfig {
    pub rules: Vec<NwttRule>,
}

impl NwttConfig {
    pub fn insert(&mut self, rule: NwttRule) -> Result<(), NwttError> {
        if self.rules.iter().any(|r| r.flow_id == rule.flow_id) {
            return Err(NwttError::DuplicateRule(rule.flow_id));
        }
        self.rules.push(rule);
        Ok(())
    }

    pub fn rule(&self, flow_id: &str) -> Option<&NwttRule> {
        self.rules.iter().find(|r| r.flow_id == flow_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Classification {
    Tagged {
        egress: PortId,
        vlan_id: u16,
        pcp: u8,
    },
    BestEffort,
}

pub fn classify_and_tag(cfg: &NwttConfig, meta: &PacketMeta) -> Classification {
    match cfg.rules.iter().find(|r| r.matches(meta)) {
        Some(r) => Classification::Tagged {
            egress: r.egress.clone(),
            vlan_id: r.vlan_id,
            pcp: r.pcp,
        },
        None => Classification::BestEffort,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    PerFlow,
    PerClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegulatorConfig {
    pub hold_us: u64,
    pub release_period_us: u64,
    pub queue_cap_pkts: usize,
    #[serde(default)]
    pub mode: MatchMode,
}

impl RegulatorConfig {
    /// Zero hold with zero period passes traffic through untouched.
    pub fn is_disabled(&self) -> bool {
        self.hold_us == 0 && self.release_period_us == 0
    }

    pub fn validate(&self) -> Result<(), NwttError> {
        if self.is_disabled() {
            return Ok(());
        }
        if self.release_period_us == 0 {
            return Err(NwttError::InvalidRegulator(
                "release period must be positive".into(),
            ));
        }
        if self.queue_cap_pkts == 0 {
            return Err(NwttError::InvalidRegulator(
                "queue capacity must be at least one packet".into(),
            ));
        }
        Ok(())
    }

    /// Longest a packet of a `burst_bytes` envelope made of `pkt_bytes`
    /// packets waits here: the hold plus one period per packet queued ahead
    /// of it in the worst busy period.
    pub fn delay_bound_us(&self, burst_bytes: u64, pkt_bytes: u64) -> u64 {
        if self.is_disabled() {
            return 0;
        }
        self.hold_us + (burst_bytes.div_ceil(pkt_bytes.max(1)) - 1) * self.release_period_us
    }

    /// Whether releasing one `pkt_bytes` packet per period keeps up with
    /// `rate_bps`.
    pub fn sustains(&self, rate_bps: u64, pkt_bytes: u64) -> bool {
        self.is_disabled()
            || u128::from(rate_bps) * u128::from(self.release_period_us)
                <= u128::from(pkt_bytes) * 1_000_000
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Offer {
    Enqueued,
    Dropped,
}

/// One hold-and-forward queue. Times are nanoseconds.
///
/// A busy period starts when a packet finds the queue empty and no release
/// instant pending; it is held for `hold` and later packets leave one per
/// period behind it. The period keeps ticking for one more instant after the
/// queue drains, so spacing never falls below `P`.
#[derive(Clone, Debug)]
pub struct Regulator<T> {
    cfg: RegulatorConfig,
    queue: VecDeque<(T, u64)>,
    anchor: Option<u64>,
    next_release: Option<u64>,
    last_arrival: u64,
    offered: u64,
    released: u64,
    drops: u64,
}

impl<T> Regulator<T> {
    pub fn new(cfg: RegulatorConfig) -> Self {
        Self {
            cfg,
            queue: VecDeque::new(),
            anchor: None,
            next_release: None,
            last_arrival: 0,
            offered: 0,
            released: 0,
            drops: 0,
        }
    }

    pub fn config(&self) -> &RegulatorConfig {
        &self.cfg
    }

    /// Call `release(t)` first so instants already due are consumed.
    pub fn offer(&mut self, item: T, t: u64) -> Offer {
        debug_assert!(t >= self.last_arrival, "arrivals must be monotone");
        self.last_arrival = t;
        self.offered += 1;
        if self.queue.len() >= self.cfg.queue_cap_pkts {
            self.drops += 1;
            return Offer::Dropped;
        }
        let idle = self.queue.is_empty() && self.next_release.is_none_or(|r| t > r);
        if idle {
            self.anchor = Some(t);
            self.next_release = Some(t + us_to_ns(self.cfg.hold_us));
        }
        self.queue.push_back((item, t));
        Offer::Enqueued
    }

    /// Releases every packet whose instant is at or before `t`, returning
    /// each with its departure time and arrival time.
    pub fn release(&mut self, t: u64) -> Vec<(T, u64, u64)> {
        let mut out = Vec::new();
        while let Some(at) = self.next_release {
            if at > t || self.queue.is_empty() {
                break;
            }
            let (item, arrived) = self.queue.pop_front().expect("non-empty");
            out.push((item, at, arrived));
            self.released += 1;
            self.next_release = Some(at + us_to_ns(self.cfg.release_period_us));
        }
        out
    }

    /// Next instant a queued packet leaves.
    pub fn next_departure(&self) -> Option<u64> {
        if self.queue.is_empty() {
            None
        } else {
            self.next_release
        }
    }

    pub fn anchor(&self) -> Option<u64> {
        self.anchor
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn offered(&self) -> u64 {
        self.offered
    }

    pub fn released(&self) -> u64 {
        self.released
    }

    pub fn drops(&self) -> u64 {
        self.drops
    }
}

/// FIFO token-bucket shaper. Packets are delayed until the bucket holds
/// enough tokens, never dropped.
#[derive(Clone, Debug)]
pub struct Reshaper {
    tb: TokenBucket,
    /// Tokens in byte-nanoseconds per second units, i.e. bytes times 1e9.
    tokens: u128,
    at: u64,
}

impl Reshaper {
    pub fn new(tb: TokenBucket) -> Self {
        Self {
            tb,
            tokens: u128::from(tb.burst_bytes) * u128::from(NANOS_PER_SEC),
            at: 0,
        }
    }

    fn cap(&self) -> u128 {
        u128::from(self.tb.burst_bytes) * u128::from(NANOS_PER_SEC)
    }

    fn refill(&mut self, t: u64) {
        if t > self.at {
            let gained = u128::from(t - self.at) * u128::from(self.tb.rate_bps);
            self.tokens = (self.tokens + gained).min(self.cap());
            self.at = t;
        }
    }

    /// Time the `size`-byte packet offered at `t` may leave. Packets must be
    /// offered in FIFO order.
    pub fn admit(&mut self, size: u64, t: u64) -> u64 {
        let t = t.max(self.at);
        self.refill(t);
        let need = u128::from(size) * u128::from(NANOS_PER_SEC);
        let depart = if self.tokens >= need {
            t
        } else {
            let wait = (need - self.tokens).div_ceil(u128::from(self.tb.rate_bps.max(1)));
            t + wait as u64
        };
        self.refill(depart);
        self.tokens = self.tokens.saturating_sub(need);
        depart
    }
}

/// Token-bucket policer: forwards conforming packets, drops the rest.
#[derive(Clone, Debug)]
pub struct Policer {
    shaper: Reshaper,
}

impl Policer {
    pub fn new(tb: TokenBucket) -> Self {
        Self {
            shaper: Reshaper::new(tb),
        }
    }

    pub fn conforms(&mut self, size: u64, t: u64) -> bool {
        let t = t.max(self.shaper.at);
        self.shaper.refill(t);
        let need = u128::from(size) * u128::from(NANOS_PER_SEC);
        if self.shaper.tokens >= need {
            self.shaper.tokens -= need;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hold_us: u64, period_us: u64, cap: usize) -> RegulatorConfig {
        RegulatorConfig {
            hold_us,
            release_period_us: period_us,
            queue_cap_pkts: cap,
            mode: MatchMode::PerFlow,
        }
    }

    fn us(v: u64) -> u64 {
        us_to_ns(v)
    }

    fn drive(reg: &mut Regulator<u32>, arrivals_us: &[u64]) -> Vec<(u32, u64)> {
        let mut out = Vec::new();
        for (i, &a) in arrivals_us.iter().enumerate() {
            out.extend(reg.release(us(a)).into_iter().map(|(p, d, _)| (p, d)));
            reg.offer(i as u32, us(a));
        }
        out.extend(reg.release(u64::MAX).into_iter().map(|(p, d, _)| (p, d)));
        out
    }

    #[test]
    fn first_packet_is_held() {
        let mut reg = Regulator::new(cfg(10_000, 1000, 8));
        assert_eq!(reg.offer(0u32, 0), Offer::Enqueued);
        assert_eq!(reg.next_departure(), Some(us(10_000)));
        assert_eq!(reg.anchor(), Some(0));
    }

    #[test]
    fn burst_leaves_one_per_period() {
        let mut reg = Regulator::new(cfg(10_000, 1000, 8));
        let out = drive(&mut reg, &[0, 100, 200]);
        assert_eq!(out, vec![(0, us(10_000)), (1, us(11_000)), (2, us(12_000))]);
    }

    #[test]
    fn arrival_during_busy_period_keeps_the_schedule() {
        let mut reg = Regulator::new(cfg(10_000, 1000, 8));
        reg.offer(0u32, 0);
        reg.offer(1, us(100));
        assert_eq!(reg.next_departure(), Some(us(10_000)));
    }

    #[test]
    fn single_packet_departs_after_hold() {
        let mut reg = Regulator::new(cfg(2500, 1000, 8));
        assert_eq!(drive(&mut reg, &[40]), vec![(0, us(2540))]);
    }

    #[test]
    fn sparse_arrivals_re_anchor() {
        let mut reg = Regulator::new(cfg(10_000, 1000, 8));
        let out = drive(&mut reg, &[0, 20_000, 40_000]);
        assert_eq!(out, vec![(0, us(10_000)), (1, us(30_000)), (2, us(50_000))]);
    }

    #[test]
    fn arrival_before_pending_instant_joins_the_period() {
        let mut reg = Regulator::new(cfg(1000, 1000, 8));
        let out = drive(&mut reg, &[0, 1500]);
        // first leaves at 1000, the next instant 2000 is still pending
        assert_eq!(out, vec![(0, us(1000)), (1, us(2000))]);
    }

    #[test]
    fn full_queue_drops_and_counts() {
        let mut reg = Regulator::new(cfg(10_000, 1000, 2));
        assert_eq!(reg.offer(0u32, 0), Offer::Enqueued);
        assert_eq!(reg.offer(1, 1), Offer::Enqueued);
        assert_eq!(reg.offer(2, 2), Offer::Dropped);
        assert_eq!(reg.drops(), 1);
        assert_eq!(reg.offered(), 3);
        let left = reg.release(u64::MAX).len() as u64;
        assert_eq!(reg.offered(), left + reg.drops());
    }

    #[test]
    fn delay_bound_formula() {
        let c = cfg(3000, 8000, 64);
        assert_eq!(c.delay_bound_us(1250, 100), 3000 + 12 * 8000);
        assert_eq!(c.delay_bound_us(100, 100), 3000);
        assert!(c.sustains(12_500, 100));
        assert!(!c.sustains(12_501, 100));
        let off = cfg(0, 0, 1);
        assert!(off.is_disabled());
        assert_eq!(off.delay_bound_us(1250, 100), 0);
        assert!(cfg(10, 0, 4).validate().is_err());
        assert!(cfg(10, 10, 0).validate().is_err());
    }

    #[test]
    fn classification_is_exact_match() {
        let rule = |flow: &str, src: &str| NwttRule {
            flow_id: flow.into(),
            src: src.into(),
            dst: "D".into(),
            egress: "S1.2".parse().unwrap(),
            vlan_id: 100,
            pcp: if src == "UE1" { 7 } else { 6 },
            shaper: TokenBucket::new(1250, 12_500),
            regulator: None,
        };
        let mut cfg = NwttConfig::default();
        cfg.insert(rule("f1", "UE1")).unwrap();
        cfg.insert(rule("f2", "UE2")).unwrap();
        assert!(cfg.insert(rule("f1", "UE1")).is_err());
        let meta = |flow: &str, src: &str| PacketMeta {
            flow_id: flow.into(),
            src: src.into(),
            dst: "D".into(),
        };
        assert!(matches!(
            classify_and_tag(&cfg, &meta("f1", "UE1")),
            Classification::Tagged { pcp: 7, .. }
        ));
        assert!(matches!(
            classify_and_tag(&cfg, &meta("f2", "UE2")),
            Classification::Tagged { pcp: 6, .. }
        ));
        assert_eq!(
            classify_and_tag(&cfg, &meta("f1", "UE2")),
            Classification::BestEffort
        );
        assert_eq!(
            classify_and_tag(&cfg, &meta("zz", "UE1")),
            Classification::BestEffort
        );
    }

    #[test]
    fn reshaper_restores_the_envelope() {
        let mut s = Reshaper::new(TokenBucket::new(200, 100_000));
        // two packets fit in the bucket, the third waits for 100 B of tokens
        assert_eq!(s.admit(100, 0), 0);
        assert_eq!(s.admit(100, 0), 0);
        assert_eq!(s.admit(100, 0), 1_000_000);
        // later packets queue behind it in order
        assert_eq!(s.admit(100, 10), 2_000_000);
        assert_eq!(s.admit(100, 50_000_000), 50_000_000);
    }

    #[test]
    fn policer_drops_excess() {
        let mut p = Policer::new(TokenBucket::new(200, 100_000));
        assert!(p.conforms(100, 0));
        assert!(p.conforms(100, 0));
        assert!(!p.conforms(100, 0));
        assert!(p.conforms(100, 1_000_000));
    }
}
