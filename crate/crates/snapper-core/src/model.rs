//! Core data model: snapshots, datasets, device identity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::SAMPLES_PER_SNAPSHOT;
use crate::geo::Geodetic;

/// Default a-priori position uncertainty when the uploader gives none, m.
pub const DEFAULT_APRIORI_UNCERTAINTY_M: f64 = 10_000.0;

/// Battery voltage range accepted by the wire format, V.
pub const BATTERY_DECODE_MAX_V: f64 = 5.5;

/// Battery operating range of the modeled hardware, V.
pub const BATTERY_VALID_RANGE_V: (f64, f64) = (3.0, 4.2);

/// 64-bit device identifier, rendered as 16 hex digits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DeviceId(pub u64);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("device id must be 16 hex digits, got {0:?}")]
pub struct DeviceIdParseError(String);

impl FromStr for DeviceId {
    type Err = DeviceIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 16 {
            return Err(DeviceIdParseError(s.to_string()));
        }
        u64::from_str_radix(s, 16).map(DeviceId).map_err(|_| DeviceIdParseError(s.to_string()))
    }
}

impl TryFrom<String> for DeviceId {
    type Error = DeviceIdParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DeviceId> for String {
    fn from(id: DeviceId) -> String {
        id.to_string()
    }
}

/// One captured snapshot: 12 ms of 1-bit samples plus capture-time telemetry.
///
/// Temperature and battery voltage are stored at wire resolution (centi-degC
/// and mV) so that encode/decode round-trips are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Capture timestamp, ms since the Unix epoch, by the uncorrected
    /// receiver clock.
    pub timestamp_ms: u64,
    /// Board temperature, hundredths of a degree Celsius.
    pub temperature_centi_c: i16,
    /// Battery voltage, mV.
    pub battery_mv: u16,
    /// Sign-quantized samples, each +1 or -1, exactly 49104 of them for the
    /// fixed signal chain.
    pub samples: Vec<i8>,
}

impl Snapshot {
    pub fn temperature_c(&self) -> f64 {
        f64::from(self.temperature_centi_c) / 100.0
    }

    pub fn battery_v(&self) -> f64 {
        f64::from(self.battery_mv) / 1000.0
    }

    /// Whether the battery reading is inside the hardware operating range.
    pub fn battery_in_operating_range(&self) -> bool {
        let v = self.battery_v();
        (BATTERY_VALID_RANGE_V.0..=BATTERY_VALID_RANGE_V.1).contains(&v)
    }

    /// Checks the sample vector length against the fixed signal chain.
    pub fn has_expected_length(&self) -> bool {
        self.samples.len() == SAMPLES_PER_SNAPSHOT
    }
}

/// An uploaded capture session: one device, consecutive snapshots, and the
/// uploader's rough idea of where the device was.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub device_id: DeviceId,
    /// Uploader-supplied starting point; only latitude and longitude travel
    /// in the wire format, height is informational.
    pub a_priori_position: Geodetic,
    /// 1-sigma radius of the a-priori position, m.
    pub a_priori_uncertainty_m: f64,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("snapshot {index}: timestamp {timestamp_ms} is not after the previous record")]
    NonMonotonicTimestamp { index: usize, timestamp_ms: u64 },
    #[error("snapshot {index}: battery {battery_mv} mV exceeds the decodable range")]
    BatteryOutOfRange { index: usize, battery_mv: u16 },
    #[error("snapshot {index}: expected {expected} samples, got {got}")]
    BadSnapshotLength { index: usize, expected: usize, got: usize },
    #[error("a-priori position ({lat_deg}, {lon_deg}) is outside geodetic bounds")]
    AprioriOutOfBounds { lat_deg: f64, lon_deg: f64 },
}

impl Dataset {
    pub fn new(device_id: DeviceId, a_priori_position: Geodetic) -> Self {
        Dataset {
            device_id,
            a_priori_position,
            a_priori_uncertainty_m: DEFAULT_APRIORI_UNCERTAINTY_M,
            snapshots: Vec::new(),
        }
    }

    /// Validates the invariants the wire format and pipeline rely on:
    /// strictly increasing timestamps, decodable battery readings, full-length
    /// sample vectors, and an in-bounds a-priori position.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let g = &self.a_priori_position;
        if !(-90.0..=90.0).contains(&g.lat_deg) || !(-180.0..=180.0).contains(&g.lon_deg) {
            return Err(DatasetError::AprioriOutOfBounds { lat_deg: g.lat_deg, lon_deg: g.lon_deg });
        }
        let mut last: Option<u64> = None;
        for (index, s) in self.snapshots.iter().enumerate() {
            if !s.has_expected_length() {
                return Err(DatasetError::BadSnapshotLength {
                    index,
                    expected: SAMPLES_PER_SNAPSHOT,
                    got: s.samples.len(),
                });
            }
            if s.battery_v() > BATTERY_DECODE_MAX_V {
                return Err(DatasetError::BatteryOutOfRange { index, battery_mv: s.battery_mv });
            }
            if let Some(prev) = last {
                if s.timestamp_ms <= prev {
                    return Err(DatasetError::NonMonotonicTimestamp {
                        index,
                        timestamp_ms: s.timestamp_ms,
                    });
                }
            }
            last = Some(s.timestamp_ms);
        }
        Ok(())
    }
}
