//! Packet generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calculus::TokenBucket;
use crate::nwtt::Reshaper;
use crate::scenario::SourceModel;
use crate::units::us_to_ns;

#[derive(Debug)]
pub(crate) struct Source {
    model: SourceModel,
    rng: ChaCha8Rng,
    /// Run-relative instant of the next emission, if any.
    next: Option<u64>,
    stop_ns: u64,
    greedy: Option<Reshaper>,
}

impl Source {
    /// `stream` separates the random sequences of sources sharing a seed.
    pub(crate) fn new(
        model: SourceModel,
        tb: TokenBucket,
        seed: u64,
        stream: u64,
        stop_ns: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut greedy = None;
        let first = match &model {
            SourceModel::Periodic {
                period_us,
                offset_us,
                ..
            }
            | SourceModel::BurstPeriodic {
                period_us,
                offset_us,
                ..
            } => us_to_ns(offset_us.unwrap_or_else(|| rng.gen_range(0..*period_us))),
            SourceModel::GreedyTokenBucket { pkt_bytes, .. } => {
                let mut shaper = Reshaper::new(tb);
                let t = shaper.admit(*pkt_bytes, 0);
                greedy = Some(shaper);
                t
            }
            SourceModel::OnoffBackground { start_ms, .. } => us_to_ns(start_ms * 1000),
        };
        Self {
            model,
            rng,
            next: (first < stop_ns).then_some(first),
            stop_ns,
            greedy,
        }
    }

    pub(crate) fn next_time(&self) -> Option<u64> {
        self.next
    }

    pub(crate) fn stop(&mut self) {
        self.next = None;
    }

    /// Packet sizes emitted at the pending instant; advances to the next one.
    pub(crate) fn fire(&mut self) -> Vec<u64> {
        let Some(t) = self.next else {
            return Vec::new();
        };
        let (sizes, next) = match &self.model {
            SourceModel::Periodic {
                period_us,
                pkt_bytes,
                ..
            } => (vec![*pkt_bytes], t + us_to_ns(*period_us)),
            SourceModel::BurstPeriodic {
                period_us,
                burst_pkts,
                pkt_bytes,
                ..
            } => (
                vec![*pkt_bytes; *burst_pkts as usize],
                t + us_to_ns(*period_us),
            ),
            SourceModel::GreedyTokenBucket {
                pkt_bytes,
                pause_permille,
                max_pause_us,
            } => {
                let mut at = t;
                if *pause_permille > 0 && self.rng.gen_range(0..1000) < *pause_permille {
                    at += us_to_ns(self.rng.gen_range(0..=*max_pause_us));
                }
                let shaper = self.greedy.as_mut().expect("greedy source has a shaper");
                (vec![*pkt_bytes], shaper.admit(*pkt_bytes, at))
            }
            SourceModel::OnoffBackground {
                on_ms,
                off_ms,
                rate_bps,
                pkt_bytes,
                start_ms,
            } => {
                let gap =
                    (u128::from(*pkt_bytes) * 1_000_000_000).div_ceil(u128::from(*rate_bps)) as u64;
                let cycle = us_to_ns((on_ms + off_ms) * 1000);
                let start = us_to_ns(start_ms * 1000);
                let phase_start = start + (t - start) / cycle * cycle;
                let on_end = phase_start + us_to_ns(on_ms * 1000);
                let next = if t + gap < on_end {
                    t + gap
                } else {
                    phase_start + cycle
                };
                (vec![*pkt_bytes], next)
            }
        };
        self.next = (next < self.stop_ns).then_some(next);
        sizes
    }
}
