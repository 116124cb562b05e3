//! Run reports and packet traces.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::admission::FlowKind;
use crate::topology::NodeId;
use crate::units::fmt_ns_as_us;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Bound checks that failed during a run, by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violations {
    pub e2e: u64,
    pub hop: u64,
    pub backlog: u64,
    pub transit: u64,
    /// Critical packets dropped anywhere.
    pub loss: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.e2e + self.hop + self.backlog + self.transit + self.loss
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub min_us: f64,
    pub mean_us: f64,
    pub max_us: f64,
    pub p99_us: f64,
    /// `max - min`.
    pub jitter_us: f64,
}

impl LatencyStats {
    /// Nearest-rank statistics of latencies in nanoseconds.
    pub fn from_ns(latencies: &[u64]) -> Option<Self> {
        if latencies.is_empty() {
            return None;
        }
        let mut v = latencies.to_vec();
        v.sort_unstable();
        let n = v.len();
        let sum: u128 = v.iter().map(|&x| u128::from(x)).sum();
        let rank = (n * 99).div_ceil(100).max(1);
        let us = |ns: u64| ns as f64 / 1000.0;
        Some(Self {
            min_us: us(v[0]),
            mean_us: (sum as f64 / n as f64) / 1000.0,
            max_us: us(v[n - 1]),
            p99_us: us(v[rank - 1]),
            jitter_us: us(v[n - 1] - v[0]),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub flow_id: String,
    pub critical: bool,
    pub background: bool,
    #[serde(flatten)]
    pub kind: FlowKind,
    pub priority_class: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlan_id: Option<u16>,
    pub emitted: u64,
    pub received: u64,
    pub dropped: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    /// Admitted end-to-end bound; only registered flows have one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transit_latency: Option<LatencyStats>,
    pub violations: Violations,
}

/// One AF report applied during the run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeEvent {
    pub at_ms: u64,
    pub added: Vec<NodeId>,
    pub removed: Vec<NodeId>,
    pub orphaned: Vec<String>,
    pub degraded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    pub seed: u64,
    pub dejitter: bool,
    pub background: bool,
    pub duration_ms: u64,
    pub flows: Vec<FlowReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ue_events: Vec<UeEvent>,
    /// Every emitted packet was either delivered or dropped.
    pub conservation_ok: bool,
    pub total_violations: u64,
}

impl RunReport {
    pub fn flow(&self, flow_id: &str) -> Option<&FlowReport> {
        self.flows.iter().find(|f| f.flow_id == flow_id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// One packet of the trace. A dropped packet has no receive time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub flow_id: String,
    pub seq: u64,
    #[serde(rename = "size_B")]
    pub size_bytes: u64,
    pub t_send_us: String,
    pub t_recv_us: String,
    pub latency_us: String,
    pub dropped: bool,
}

impl TraceRecord {
    pub fn new(flow_id: &str, seq: u64, size: u64, sent_ns: u64, recv_ns: Option<u64>) -> Self {
        let fmt = |v: Option<u64>| v.map(fmt_ns_as_us).unwrap_or_default();
        Self {
            flow_id: flow_id.to_owned(),
            seq,
            size_bytes: size,
            t_send_us: fmt_ns_as_us(sent_ns),
            t_recv_us: fmt(recv_ns),
            latency_us: fmt(recv_ns.map(|r| r - sent_ns)),
            dropped: recv_ns.is_none(),
        }
    }

    pub fn latency_ns(&self) -> Option<u64> {
        parse_us(&self.latency_us)
    }
}

/// Parses a microsecond value with up to three decimals into nanoseconds.
pub fn parse_us(s: &str) -> Option<u64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 3 || !frac.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let whole: u64 = int.parse().ok()?;
    let frac_ns: u64 = if frac.is_empty() {
        0
    } else {
        format!("{frac:0<3}").parse().ok()?
    };
    whole.checked_mul(1000)?.checked_add(frac_ns)
}

pub fn write_trace<W: Write>(out: W, records: &[TraceRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> csv::Result<Vec<TraceRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Per-flow summary of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub flow_id: String,
    pub packets: u64,
    pub received: u64,
    pub dropped: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_us: Option<u64>,
    /// Delivered packets slower than the bound.
    pub over_bound: u64,
}

/// Summarizes a trace, flows in order of first appearance. With `bounds`,
/// latencies are also compared against each flow's admitted bound.
pub fn summarize_trace(records: &[TraceRecord], bounds: Option<&RunReport>) -> Vec<TraceSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut per_flow: BTreeMap<&str, (u64, u64, Vec<u64>)> = BTreeMap::new();
    for r in records {
        let e = per_flow.entry(&r.flow_id).or_insert_with(|| {
            order.push(&r.flow_id);
            (0, 0, Vec::new())
        });
        e.0 += 1;
        match r.latency_ns() {
            Some(l) if !r.dropped => e.2.push(l),
            _ => e.1 += 1,
        }
    }
    order
        .into_iter()
        .map(|id| {
            let (packets, dropped, lat) = &per_flow[id];
            let bound_us = bounds.and_then(|b| b.flow(id)).and_then(|f| f.bound_us);
            let over_bound =
                bound_us.map_or(0, |b| lat.iter().filter(|&&l| l > b * 1000).count() as u64);
            TraceSummary {
                flow_id: id.to_owned(),
                packets: *packets,
                received: lat.len() as u64,
                dropped: *dropped,
                latency: LatencyStats::from_ns(lat),
                bound_us,
                over_bound,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        let s = LatencyStats::from_ns(&[3000, 1000, 2000, 4500]).unwrap();
        assert_eq!(s.min_us, 1.0);
        assert_eq!(s.max_us, 4.5);
        assert_eq!(s.jitter_us, 3.5);
        assert_eq!(s.mean_us, 2.625);
        assert_eq!(s.p99_us, 4.5);
        assert!(LatencyStats::from_ns(&[]).is_none());
    }

    #[test]
    fn microsecond_parsing() {
        assert_eq!(parse_us("12.345"), Some(12_345));
        assert_eq!(parse_us("12.3"), Some(12_300));
        assert_eq!(parse_us("7"), Some(7000));
        assert_eq!(parse_us(""), None);
        assert_eq!(parse_us("1.2345"), None);
        assert_eq!(parse_us(&fmt_ns_as_us(987_654_321)), Some(987_654_321));
    }

    #[test]
    fn trace_round_trip() {
        let recs = vec![
            TraceRecord::new("a", 0, 100, 1_000, Some(5_500)),
            TraceRecord::new("a", 1, 100, 2_000, None),
            TraceRecord::new("b", 0, 40, 2_500, Some(3_000)),
        ];
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("flow_id,seq,size_B,t_send_us,t_recv_us,latency_us,dropped\n"));
        assert!(text.contains("a,1,100,2.000,,,true"));
        let back = read_trace(&buf[..]).unwrap();
        assert_eq!(back, recs);

        let sum = summarize_trace(&back, None);
        assert_eq!(sum.len(), 2);
        assert_eq!((sum[0].packets, sum[0].received, sum[0].dropped), (2, 1, 1));
        assert_eq!(sum[0].latency.unwrap().max_us, 4.5);
    }
}
