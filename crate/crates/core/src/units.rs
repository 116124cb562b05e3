//! Integer time and size helpers. Bounds are kept in whole microseconds and
//! always rounded up; the simulator clock runs in nanoseconds.

pub const NANOS_PER_SEC: u64 = 1_000_000_000;
pub const MICROS_PER_SEC: u64 = 1_000_000;

pub fn ns_to_us_ceil(ns: u64) -> u64 {
    ns.div_ceil(1_000)
}

pub fn us_to_ns(us: u64) -> u64 {
    us * 1_000
}

/// Time in microseconds, rounded up, to move `bytes` at `rate_bps`.
pub fn transfer_us_ceil(bytes: u64, rate_bps: u64) -> u64 {
    (u128::from(bytes) * u128::from(MICROS_PER_SEC)).div_ceil(u128::from(rate_bps)) as u64
}

/// Time in nanoseconds, rounded up, to move `bytes` at `rate_bps`.
pub fn transfer_ns_ceil(bytes: u64, rate_bps: u64) -> u64 {
    (u128::from(bytes) * u128::from(NANOS_PER_SEC)).div_ceil(u128::from(rate_bps)) as u64
}

/// Bytes, rounded up, accumulated at `rate_bps` over `us` microseconds.
pub fn bytes_in_us_ceil(rate_bps: u64, us: u64) -> u64 {
    (u128::from(rate_bps) * u128::from(us)).div_ceil(u128::from(MICROS_PER_SEC)) as u64
}

/// Renders nanoseconds as microseconds with three decimals, e.g. `1234.567`.
pub fn fmt_ns_as_us(ns: u64) -> String {
    format!("{}.{:03}", ns / 1_000, ns % 1_000)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_upward() {
        assert_eq!(ns_to_us_ceil(1), 1);
        assert_eq!(ns_to_us_ceil(1_000), 1);
        assert_eq!(transfer_us_ceil(2750, 62_500), 44_000);
        assert_eq!(transfer_us_ceil(1, 3), 333_334);
        assert_eq!(bytes_in_us_ceil(12_500, 44_000), 550);
        assert_eq!(transfer_ns_ceil(100, 125_000), 800_000);
        assert_eq!(fmt_ns_as_us(1_234_567), "1234.567");
        assert_eq!(fmt_ns_as_us(5), "0.005");
    }
}
