//! Per-hop bounds for a non-preemptive strict-priority egress port.
//!
//! Higher class index means higher priority. Flows inside one class are
//! aggregated and served FIFO, so every member shares the class bound. All
//! durations are whole microseconds rounded up, sizes are bytes and rates
//! bytes per second.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{bytes_in_us_ceil, transfer_us_ceil};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CalculusError {
    #[error("higher classes use {higher_rate_bps} B/s of a {link_rate_bps} B/s link")]
    Unschedulable {
        higher_rate_bps: u64,
        link_rate_bps: u64,
    },
    #[error("class {class} needs {rate_bps} B/s but only {residual_bps} B/s remain")]
    RateOverload {
        class: u8,
        rate_bps: u64,
        residual_bps: u64,
    },
}

/// Arrival curve `b + r t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBucket {
    #[serde(rename = "burst_B")]
    pub burst_bytes: u64,
    #[serde(rename = "rate_Bps")]
    pub rate_bps: u64,
}

impl TokenBucket {
    pub fn new(burst_bytes: u64, rate_bps: u64) -> Self {
        Self {
            burst_bytes,
            rate_bps,
        }
    }
}

/// Service curve `R (t - T)+`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RateLatency {
    pub rate_bps: u64,
    pub latency_us: u64,
}

/// Sum of the token buckets of one class at one port.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassAggregate {
    pub burst_bytes: u64,
    pub rate_bps: u64,
    pub max_pkt_bytes: u64,
    pub flows: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PortClassState {
    pub link_rate_bps: u64,
    /// Largest frame unregistered best-effort traffic may send through here.
    pub best_effort_max_pkt: u64,
    pub fwd_delay_us: Vec<u64>,
    pub classes: Vec<ClassAggregate>,
}

impl PortClassState {
    pub fn new(link_rate_bps: u64, fwd_delay_us: Vec<u64>, best_effort_max_pkt: u64) -> Self {
        let classes = vec![ClassAggregate::default(); fwd_delay_us.len()];
        Self {
            link_rate_bps,
            best_effort_max_pkt,
            fwd_delay_us,
            classes,
        }
    }

    pub fn class_count(&self) -> u8 {
        self.classes.len() as u8
    }

    pub fn add(&mut self, class: u8, flow_id: &str, tb: TokenBucket, max_pkt_bytes: u64) {
        let agg = &mut self.classes[usize::from(class)];
        agg.burst_bytes += tb.burst_bytes;
        agg.rate_bps += tb.rate_bps;
        agg.max_pkt_bytes = agg.max_pkt_bytes.max(max_pkt_bytes);
        agg.flows.insert(flow_id.to_owned());
    }

    pub fn class(&self, class: u8) -> &ClassAggregate {
        &self.classes[usize::from(class)]
    }

    pub fn is_idle(&self) -> bool {
        self.classes.iter().all(|c| c.flows.is_empty())
    }

    /// Summed burst and rate of every class above `class`.
    pub fn higher(&self, class: u8) -> (u64, u64) {
        self.classes[usize::from(class) + 1..]
            .iter()
            .fold((0, 0), |(b, r), c| (b + c.burst_bytes, r + c.rate_bps))
    }

    /// Longest packet that can block `class` or sit ahead of it.
    pub fn l_max(&self, class: u8) -> u64 {
        self.classes[..=usize::from(class)]
            .iter()
            .map(|c| c.max_pkt_bytes)
            .fold(self.best_effort_max_pkt, u64::max)
    }

    pub fn fwd_delay(&self, class: u8) -> u64 {
        self.fwd_delay_us
            .get(usize::from(class))
            .copied()
            .unwrap_or(0)
    }
}

pub fn sp_residual_service(
    state: &PortClassState,
    class: u8,
) -> Result<RateLatency, CalculusError> {
    let (b_h, r_h) = state.higher(class);
    if r_h >= state.link_rate_bps {
        return Err(CalculusError::Unschedulable {
            higher_rate_bps: r_h,
            link_rate_bps: state.link_rate_bps,
        });
    }
    let rate_bps = state.link_rate_bps - r_h;
    Ok(RateLatency {
        rate_bps,
        latency_us: transfer_us_ceil(b_h + state.l_max(class), rate_bps),
    })
}

fn checked_service(state: &PortClassState, class: u8) -> Result<RateLatency, CalculusError> {
    let service = sp_residual_service(state, class)?;
    let rate_bps = state.class(class).rate_bps;
    if rate_bps > service.rate_bps {
        return Err(CalculusError::RateOverload {
            class,
            rate_bps,
            residual_bps: service.rate_bps,
        });
    }
    Ok(service)
}

/// Worst delay of a `class` packet from entering the switch until its last
/// bit leaves the port: `T + b_p / R + d_proc`.
pub fn hop_delay_bound(state: &PortClassState, class: u8) -> Result<u64, CalculusError> {
    let service = checked_service(state, class)?;
    Ok(service.latency_us
        + transfer_us_ceil(state.class(class).burst_bytes, service.rate_bps)
        + state.fwd_delay(class))
}

/// Worst class backlog at the port: `b_p + r_p T`.
pub fn backlog_bound(state: &PortClassState, class: u8) -> Result<u64, CalculusError> {
    let service = checked_service(state, class)?;
    let agg = state.class(class);
    Ok(agg.burst_bytes + bytes_in_us_ceil(agg.rate_bps, service.latency_us))
}

/// Output arrival curve after a hop that delays every byte by at most
/// `hop_delay_us`.
pub fn propagate_burst(tb: TokenBucket, hop_delay_us: u64) -> TokenBucket {
    TokenBucket {
        burst_bytes: tb.burst_bytes + bytes_in_us_ceil(tb.rate_bps, hop_delay_us),
        rate_bps: tb.rate_bps,
    }
}

pub fn e2e_delay(per_hop_us: &[u64], transit_us: u64, regulator_us: u64) -> u64 {
    per_hop_us.iter().sum::<u64>() + transit_us + regulator_us
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn port(l_max: u64) -> PortClassState {
        PortClassState::new(125_000, vec![0; 8], l_max)
    }

    #[test]
    fn residual_service_examples() {
        let idle = port(0);
        assert_eq!(
            sp_residual_service(&idle, 7),
            Ok(RateLatency {
                rate_bps: 125_000,
                latency_us: 0
            })
        );

        let mut s = port(1500);
        s.add(7, "hi", TokenBucket::new(1250, 62_500), 100);
        assert_eq!(
            sp_residual_service(&s, 6),
            Ok(RateLatency {
                rate_bps: 62_500,
                latency_us: 44_000
            })
        );

        let mut full = port(1500);
        full.add(7, "hog", TokenBucket::new(1500, 125_000), 1500);
        assert!(matches!(
            sp_residual_service(&full, 6),
            Err(CalculusError::Unschedulable { .. })
        ));
    }

    #[test]
    fn hop_delay_and_backlog_examples() {
        let mut s = port(1500);
        s.add(7, "hi", TokenBucket::new(1250, 62_500), 100);
        s.add(6, "me", TokenBucket::new(1250, 12_500), 100);
        assert_eq!(hop_delay_bound(&s, 6), Ok(64_000));
        assert_eq!(backlog_bound(&s, 6), Ok(1800));

        let mut alone = port(0);
        alone.add(7, "f", TokenBucket::new(1250, 12_500), 0);
        assert_eq!(hop_delay_bound(&alone, 7), Ok(10_000));
        assert_eq!(backlog_bound(&alone, 7), Ok(1250));
        alone.fwd_delay_us[7] = 500;
        assert_eq!(hop_delay_bound(&alone, 7), Ok(10_500));
    }

    #[test]
    fn class_rate_above_residual_overloads() {
        let mut s = port(1500);
        s.add(7, "hi", TokenBucket::new(1500, 100_000), 1500);
        s.add(6, "lo", TokenBucket::new(1500, 30_000), 1500);
        assert_eq!(
            hop_delay_bound(&s, 6),
            Err(CalculusError::RateOverload {
                class: 6,
                rate_bps: 30_000,
                residual_bps: 25_000
            })
        );
    }

    #[test]
    fn burst_propagation_and_sum() {
        let tb = TokenBucket::new(1250, 12_500);
        assert_eq!(propagate_burst(tb, 0), tb);
        assert_eq!(propagate_burst(tb, 64_000).burst_bytes, 2050);
        assert_eq!(e2e_delay(&[], 0, 0), 0);
        assert_eq!(e2e_delay(&[22_000, 24_200], 3000, 0), 49_200);
    }

    fn state_strategy() -> impl Strategy<Value = (u64, u64, u64, u64, u64, u64)> {
        (
            10_000u64..2_000_000, // C
            0u64..5000,           // b_H
            0u64..5000,           // b_p
            0u64..1500,           // l_max
            0u64..50,             // r_H as percent of C
            1u64..40,             // r_p as percent of C
        )
    }

    fn build(c: u64, b_h: u64, b_p: u64, l_max: u64, rh_pct: u64, rp_pct: u64) -> PortClassState {
        let mut s = PortClassState::new(c, vec![0; 4], l_max);
        if b_h > 0 || rh_pct > 0 {
            s.add(3, "h", TokenBucket::new(b_h, c * rh_pct / 100), 0);
        }
        s.add(2, "p", TokenBucket::new(b_p, (c * rp_pct / 100).max(1)), 0);
        s
    }

    proptest! {
        #[test]
        fn hop_bound_is_monotone(
            (c, b_h, b_p, l_max, rh, rp) in state_strategy(),
            db in 0u64..1000, dl in 0u64..500, dc in 0u64..10_000,
        ) {
            let base = hop_delay_bound(&build(c, b_h, b_p, l_max, rh, rp), 2).unwrap();
            let more_bp = hop_delay_bound(&build(c, b_h, b_p + db, l_max, rh, rp), 2).unwrap();
            let more_bh = hop_delay_bound(&build(c, b_h + db, b_p, l_max, rh, rp), 2).unwrap();
            let more_l = hop_delay_bound(&build(c, b_h, b_p, l_max + dl, rh, rp), 2).unwrap();
            prop_assert!(more_bp >= base);
            prop_assert!(more_bh >= base);
            prop_assert!(more_l >= base);

            // more higher-priority rate on the same link
            let mut hotter = build(c, b_h, b_p, l_max, rh, rp);
            hotter.classes[3].rate_bps += c / 100;
            prop_assert!(hop_delay_bound(&hotter, 2).unwrap() >= base);

            // a faster link with the same absolute rates
            let mut faster = build(c, b_h, b_p, l_max, rh, rp);
            faster.link_rate_bps += dc;
            prop_assert!(hop_delay_bound(&faster, 2).unwrap() <= base);
        }

        #[test]
        fn propagation_never_shrinks(b in 1u64..1_000_000, r in 1u64..10_000_000, d in 0u64..1_000_000, dd in 0u64..1000) {
            let tb = TokenBucket::new(b, r);
            let out = propagate_burst(tb, d);
            prop_assert!(out.burst_bytes >= b);
            prop_assert_eq!(out.rate_bps, r);
            prop_assert!(propagate_burst(tb, d + dd).burst_bytes >= out.burst_bytes);
        }
    }
}
