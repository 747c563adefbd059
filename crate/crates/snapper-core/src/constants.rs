//! Signal-chain and physical constants shared across the toolkit.
//!
//! Everything downstream (replica generation, acquisition grids, pseudorange
//! reconstruction, lifetime arithmetic) is derived from the handful of values
//! here, so they live in one place and are asserted against each other in
//! tests rather than re-declared ad hoc.

use serde::{Deserialize, Serialize};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// WGS-84 value of the Earth's rotation rate, rad/s.
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_146_7e-5;

/// WGS-84 value of the Earth's gravitational constant for GPS users, m^3/s^2.
pub const EARTH_GRAVITATIONAL_PARAM: f64 = 3.986_005e14;

/// Relativistic clock correction constant F = -2*sqrt(mu)/c^2, s/sqrt(m).
pub const RELATIVISTIC_CLOCK_F: f64 = -4.442_807_633e-10;

/// WGS-84 ellipsoid semi-major axis, m.
pub const WGS84_SEMI_MAJOR_AXIS: f64 = 6_378_137.0;

/// WGS-84 ellipsoid flattening.
pub const WGS84_FLATTENING: f64 = 1.0 / 298.257_223_563;

/// C/A code length in chips.
pub const CODE_LENGTH_CHIPS: usize = 1023;

/// C/A chipping rate, chips/s.
pub const CHIP_RATE: f64 = 1_023_000.0;

/// One C/A code period, s.
pub const CODE_PERIOD: f64 = 1e-3;

/// Samples per chip at the fixed sampling rate (4.092 MHz / 1.023 Mcps).
pub const SAMPLES_PER_CHIP: usize = 4;

/// Samples in one C/A code period (one millisecond).
pub const SAMPLES_PER_CODE: usize = CODE_LENGTH_CHIPS * SAMPLES_PER_CHIP;

/// Code periods in one snapshot (12 ms).
pub const CODE_PERIODS_PER_SNAPSHOT: usize = 12;

/// Samples in one snapshot: 0.012 s * 4.092 MHz.
pub const SAMPLES_PER_SNAPSHOT: usize = SAMPLES_PER_CODE * CODE_PERIODS_PER_SNAPSHOT;

/// Bytes of packed 1-bit samples per snapshot: 49104 / 8.
pub const SNAPSHOT_PAYLOAD_BYTES: usize = SAMPLES_PER_SNAPSHOT / 8;

/// Seconds in one Julian year, used for drift-over-deployment arithmetic.
pub const SECONDS_PER_YEAR: f64 = 31_557_600.0;

/// Fixed parameters of the receiver signal chain.
///
/// The defaults describe the only hardware configuration the toolkit models:
/// a 16.368 MHz TCXO driving a quarter-rate 1-bit sampler, a 32.768 kHz RTC
/// keeping time between captures, and a 12 ms snapshot length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConstants {
    /// GPS L1 carrier frequency, Hz.
    pub f_l1: f64,
    /// TCXO reference frequency, Hz.
    pub f_tcxo: f64,
    /// Real-time-clock frequency, Hz.
    pub f_rtc: f64,
    /// Sampling rate, Hz. Always f_tcxo / 4.
    pub f_s: f64,
    /// Snapshot duration, s.
    pub snapshot_duration: f64,
    /// Quantization depth, bits per sample.
    pub quantization_bits: u8,
    /// Nominal residual intermediate frequency after the front end, Hz.
    pub if_residual_nominal: f64,
    /// TCXO frequency tolerance, parts per billion.
    pub tcxo_tolerance_ppb: f64,
    /// RTC frequency tolerance, parts per million.
    pub rtc_tolerance_ppm: f64,
}

impl Default for SignalConstants {
    fn default() -> Self {
        SignalConstants {
            f_l1: 1_575_420_000.0,
            f_tcxo: 16_368_000.0,
            f_rtc: 32_768.0,
            f_s: 16_368_000.0 / 4.0,
            snapshot_duration: 0.012,
            quantization_bits: 1,
            if_residual_nominal: 0.0,
            tcxo_tolerance_ppb: 500.0,
            rtc_tolerance_ppm: 10.0,
        }
    }
}

impl SignalConstants {
    /// Samples in one snapshot at these rates, rounded to the nearest sample.
    pub fn samples_per_snapshot(&self) -> usize {
        (self.f_s * self.snapshot_duration).round() as usize
    }

    /// Ratio by which a reference oscillator error appears at the L1 carrier.
    ///
    /// A TCXO relative error of x multiplies into x * f_l1 of front-end
    /// frequency offset; expressed against f_tcxo this is a factor of
    /// f_l1 / f_tcxo, a little under 100 for this chain.
    pub fn lo_amplification(&self) -> f64 {
        self.f_l1 / self.f_tcxo
    }

    /// Worst-case front-end frequency offset from the TCXO tolerance, Hz.
    pub fn worst_case_frontend_offset(&self) -> f64 {
        self.tcxo_tolerance_ppb * 1e-9 * self.f_l1
    }

    /// Worst-case RTC timekeeping error over an interval, s.
    pub fn worst_case_time_error(&self, elapsed_s: f64) -> f64 {
        self.rtc_tolerance_ppm * 1e-6 * elapsed_s
    }

    /// Snapshot memory saving relative to a conventional front end that
    /// samples at the full reference rate with 2-bit quantization.
    pub fn memory_reduction_factor(&self) -> f64 {
        (self.f_tcxo * 2.0) / (self.f_s * f64::from(self.quantization_bits))
    }
}
