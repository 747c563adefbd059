//! GPS time handling.
//!
//! Times are carried as a week number plus seconds of week so that the
//! fractional part keeps sub-nanosecond resolution; a single f64 of seconds
//! since the GPS epoch would already be ~0.2 us granular today, which is
//! tens of meters at the speed of light.

use serde::{Deserialize, Serialize};

/// Seconds between the Unix epoch (1970-01-01) and the GPS epoch (1980-01-06).
pub const GPS_UNIX_OFFSET_S: i64 = 315_964_800;

/// GPS - UTC leap second count. Constant since 2017; pinned, not tabulated.
pub const GPS_UTC_LEAP_SECONDS: i64 = 18;

/// Seconds in one GPS week.
pub const SECONDS_PER_WEEK: f64 = 604_800.0;

/// An instant on the GPS time scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsTime {
    pub week: i32,
    /// Seconds into the week, in [0, 604800).
    pub tow: f64,
}

impl GpsTime {
    /// Builds a normalized instant; `tow` may be any finite value and is
    /// folded into the week number.
    pub fn new(week: i32, tow: f64) -> Self {
        let mut t = GpsTime { week, tow };
        t.normalize();
        t
    }

    fn normalize(&mut self) {
        let shift = (self.tow / SECONDS_PER_WEEK).floor();
        self.week += shift as i32;
        self.tow -= shift * SECONDS_PER_WEEK;
        if self.tow >= SECONDS_PER_WEEK {
            // Guard against tow landing exactly on the boundary after rounding.
            self.week += 1;
            self.tow -= SECONDS_PER_WEEK;
        }
    }

    /// Seconds from `other` to `self` (positive when self is later).
    pub fn diff(&self, other: &GpsTime) -> f64 {
        f64::from(self.week - other.week) * SECONDS_PER_WEEK + (self.tow - other.tow)
    }

    /// This instant shifted by `dt` seconds.
    pub fn add_seconds(&self, dt: f64) -> GpsTime {
        GpsTime::new(self.week, self.tow + dt)
    }

    /// Converts a Unix millisecond timestamp (UTC) to GPS time.
    pub fn from_unix_ms(ms: u64) -> GpsTime {
        let gps_s = ms as f64 / 1000.0 - GPS_UNIX_OFFSET_S as f64 + GPS_UTC_LEAP_SECONDS as f64;
        GpsTime::new(0, gps_s)
    }

    /// Converts to a Unix millisecond timestamp (UTC), rounded to the nearest
    /// millisecond.
    pub fn to_unix_ms(&self) -> i64 {
        let unix_s = f64::from(self.week) * SECONDS_PER_WEEK + self.tow
            + GPS_UNIX_OFFSET_S as f64
            - GPS_UTC_LEAP_SECONDS as f64;
        (unix_s * 1000.0).round() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_tow_into_range() {
        let t = GpsTime::new(100, -1.5);
        assert_eq!(t.week, 99);
        assert!((t.tow - (SECONDS_PER_WEEK - 1.5)).abs() < 1e-9);

        let t = GpsTime::new(100, SECONDS_PER_WEEK + 2.0);
        assert_eq!(t.week, 101);
        assert!((t.tow - 2.0).abs() < 1e-9);
    }

    #[test]
    fn diff_and_add_are_inverse() {
        let a = GpsTime::new(2200, 345_600.0);
        let b = a.add_seconds(123_456.789);
        assert!((b.diff(&a) - 123_456.789).abs() < 1e-6);
    }

    #[test]
    fn unix_round_trip() {
        // 2022-07-01T00:00:00Z.
        let ms: u64 = 1_656_633_600_000;
        let t = GpsTime::from_unix_ms(ms);
        assert_eq!(t.to_unix_ms(), ms as i64);
    }

    #[test]
    fn gps_epoch_maps_to_week_zero() {
        let t = GpsTime::from_unix_ms((GPS_UNIX_OFFSET_S * 1000) as u64);
        assert_eq!(t.week, 0);
        // The pinned leap offset appears as seconds into week zero.
        assert!((t.tow - GPS_UTC_LEAP_SECONDS as f64).abs() < 1e-9);
    }
}
