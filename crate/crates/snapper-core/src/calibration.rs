//! Receiver clock and front-end frequency calibration.
//!
//! Two error sources separate a raw capture from a solvable one. The 32 kHz
//! RTC that timestamps captures drifts by up to ±10 ppm, which compounds to
//! minutes over a long deployment, far past the coarse-time budget; and the
//! TCXO reference multiplies its relative error by f_l1/f_tcxo = 96.25 into
//! the downconverted carrier, so 500 ppb of crystal becomes 787.7 Hz of
//! apparent Doppler on every satellite at once.
//!
//! [`ClockModel`] handles the first. It chains the timestamp error from fix
//! to fix: each solved coarse-time correction re-anchors the chain, and the
//! drift rate is re-estimated over a sliding window of recent fixes, so the
//! a-priori time handed to navigation stays near the truth even when the raw
//! timestamps are minutes off. Between anchors the model's trust decays at
//! the worst-case RTC tolerance; once the decay bound crosses the 60 s
//! coarse-time budget the segment is flagged as unrecoverable until some
//! fix re-anchors it.
//!
//! [`estimate_frontend_offset`] handles the second. The offset is common to
//! every satellite, so the estimator scans candidate offsets and scores each
//! candidate by the summed detection metric of single-bin acquisitions
//! centered on each satellite's predicted Doppler plus the candidate.
//! Per-satellite ridges stack only where the candidate matches the true
//! offset; mirror images from the real-sample frequency fold land at
//! satellite-dependent candidates and do not stack. A parabolic fit through
//! the scored peak refines the estimate well below the scan step, and the
//! per-snapshot estimates are reduced by median. [`FrequencyModel`] then
//! carries the estimate across temperature with an optional linear slope.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    acquire_with_cache, precompute_codes, AcquisitionError, AcquisitionSettings,
    DEFAULT_DETECTION_THRESHOLD,
};
use crate::constants::{SignalConstants, SPEED_OF_LIGHT};
use crate::ephemeris::{
    best_ephemeris, transmit_geometry, EphemerisError, GpsEphemeris, DEFAULT_VALIDITY_S,
};
use crate::geo::{elevation_azimuth, geodetic_to_ecef, Geodetic};
use crate::model::Snapshot;
use crate::time::GpsTime;

/// Coarse-time navigation stops converging reliably past this a-priori
/// time error, so the clock chain must keep the estimate inside it.
pub const COARSE_TIME_BUDGET_S: f64 = 60.0;

/// Hard bound on a credible front-end offset; anything larger means the
/// estimate (or the crystal) is broken.
pub const MAX_FREQUENCY_OFFSET_HZ: f64 = 10_000.0;

/// Half-width of the candidate-offset scan, Hz. More than ten times the
/// worst offset the TCXO tolerance allows.
pub const OFFSET_SCAN_SPAN_HZ: f64 = 8_000.0;

/// Snapshots from the start of a dataset used for offset estimation.
pub const DEFAULT_CALIBRATION_SNAPSHOTS: usize = 5;

/// Solved fixes kept for drift re-estimation.
pub const DRIFT_WINDOW_FIXES: usize = 20;

/// Scan grid spacing. The single-bin metric rolls off over roughly the
/// 1 ms-block bandwidth (~400 Hz half-width), so quarter-kilohertz samples
/// leave the peak well conditioned for the parabolic fit.
const OFFSET_SCAN_STEP_HZ: f64 = 250.0;

/// Satellites below this predicted elevation are not worth scanning.
const SCAN_ELEVATION_MASK_DEG: f64 = 5.0;

/// Floor on the best candidate's summed metric: twice the single-PRN
/// detection threshold, so one stray false alarm cannot anchor the fit.
const MIN_SCAN_SCORE: f64 = 2.0 * DEFAULT_DETECTION_THRESHOLD;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("offset estimation needs at least one snapshot")]
    NoSnapshots,
    #[error("offset estimation failed: no satellites detected in {0} calibration snapshot(s)")]
    OffsetEstimationFailed(usize),
    #[error("frequency model fit needs at least one (temperature, offset) point")]
    EmptyFit,
    #[error("frequency offset {0} Hz exceeds the ±{MAX_FREQUENCY_OFFSET_HZ} Hz budget")]
    OffsetOutOfRange(f64),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
}

/// Linear temperature model for the front-end frequency offset.
///
/// `predict_offset` evaluates `offset_at_ref_hz + slope·(T − ref)`. The
/// slope defaults to zero: a fitted value only enters through
/// [`FrequencyModel::fit`] or explicit configuration, never as a baked-in
/// constant, because the slope is a property of the individual crystal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrequencyModel {
    /// Offset at the reference temperature, Hz.
    pub offset_at_ref_hz: f64,
    /// Temperature sensitivity, Hz per °C.
    pub slope_hz_per_degc: f64,
    /// Reference temperature, °C.
    pub ref_temperature_c: f64,
}

impl Default for FrequencyModel {
    fn default() -> Self {
        FrequencyModel {
            offset_at_ref_hz: 0.0,
            slope_hz_per_degc: 0.0,
            ref_temperature_c: 25.0,
        }
    }
}

impl FrequencyModel {
    /// Expected front-end offset at the given board temperature, Hz.
    pub fn predict_offset(&self, temperature_c: f64) -> f64 {
        self.offset_at_ref_hz + self.slope_hz_per_degc * (temperature_c - self.ref_temperature_c)
    }

    /// Checks the model against the front-end budget.
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !self.offset_at_ref_hz.is_finite()
            || !self.slope_hz_per_degc.is_finite()
            || !self.ref_temperature_c.is_finite()
            || self.offset_at_ref_hz.abs() > MAX_FREQUENCY_OFFSET_HZ
        {
            return Err(CalibrationError::OffsetOutOfRange(self.offset_at_ref_hz));
        }
        Ok(())
    }

    /// Least-squares line through `(temperature °C, offset Hz)` points,
    /// referenced at the mean temperature. A single point, or points with no
    /// temperature spread, fit a zero-slope model at their mean.
    pub fn fit(points: &[(f64, f64)]) -> Result<FrequencyModel, CalibrationError> {
        if points.is_empty() {
            return Err(CalibrationError::EmptyFit);
        }
        let n = points.len() as f64;
        let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
        let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
        let mut stt = 0.0;
        let mut sty = 0.0;
        for &(t, y) in points {
            stt += (t - t_mean) * (t - t_mean);
            sty += (t - t_mean) * (y - y_mean);
        }
        let model = FrequencyModel {
            offset_at_ref_hz: y_mean,
            slope_hz_per_degc: if stt > 0.0 { sty / stt } else { 0.0 },
            ref_temperature_c: t_mean,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Propagates a timestamp error forward: `previous + drift_rate · elapsed`.
pub fn propagate_time_error(previous_s: f64, elapsed_s: f64, drift_rate: f64) -> f64 {
    previous_s + drift_rate * elapsed_s
}

/// Drift re-estimation strategy over the fix window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftEstimator {
    /// Ordinary least-squares slope through the window.
    #[default]
    LeastSquares,
    /// Median of all pairwise slopes; one wild solved correction cannot
    /// steer the drift estimate.
    MedianOfSlopes,
}

/// Chained receiver-clock error (timestamp minus true time) for one dataset.
///
/// Construction anchors the chain at the deployment's clock sync, where the
/// error is zero by definition. Every solved fix provides a fresh absolute
/// measurement: if the fix's coarse-time correction is `δt` against an
/// a-priori built from this model, the solved error is `predicted − δt`,
/// and [`ClockModel::anchor_fix`] re-anchors on it while re-fitting the
/// drift rate over the last [`DRIFT_WINDOW_FIXES`] anchors.
#[derive(Debug, Clone)]
pub struct ClockModel {
    /// Error at the last anchor, s.
    pub time_error_s: f64,
    /// Estimated drift, s/s.
    pub drift_rate: f64,
    pub estimator: DriftEstimator,
    /// Worst-case RTC drift, s/s, bounding how far the chain can be trusted
    /// past its last anchor.
    pub drift_tolerance_s_per_s: f64,
    anchor_unix_ms: i64,
    epoch_unix_ms: i64,
    history: VecDeque<(f64, f64)>,
}

impl ClockModel {
    /// Starts a chain at a known sync point (deployment configuration, or
    /// the first snapshot when nothing better is known).
    pub fn new(at_unix_ms: i64, initial_time_error_s: f64) -> Self {
        let mut history = VecDeque::with_capacity(DRIFT_WINDOW_FIXES);
        history.push_back((0.0, initial_time_error_s));
        ClockModel {
            time_error_s: initial_time_error_s,
            drift_rate: 0.0,
            estimator: DriftEstimator::default(),
            drift_tolerance_s_per_s: SignalConstants::default().rtc_tolerance_ppm * 1e-6,
            anchor_unix_ms: at_unix_ms,
            epoch_unix_ms: at_unix_ms,
            history,
        }
    }

    /// Predicted timestamp error at the given receiver timestamp, s.
    pub fn time_error_at(&self, unix_ms: i64) -> f64 {
        let elapsed = (unix_ms - self.anchor_unix_ms) as f64 / 1_000.0;
        propagate_time_error(self.time_error_s, elapsed, self.drift_rate)
    }

    /// Worst-case error of [`Self::time_error_at`], s: the RTC tolerance
    /// integrated since the last anchor. Deliberately conservative; it says
    /// when the chain is guaranteed usable, not when it certainly fails.
    pub fn uncertainty_bound_s(&self, unix_ms: i64) -> f64 {
        let elapsed = (unix_ms - self.anchor_unix_ms) as f64 / 1_000.0;
        self.drift_tolerance_s_per_s * elapsed.abs()
    }

    /// Whether the chained prediction is still inside the coarse-time
    /// budget. False means the segment needs a new time anchor.
    pub fn recoverable_at(&self, unix_ms: i64) -> bool {
        self.uncertainty_bound_s(unix_ms) < COARSE_TIME_BUDGET_S
    }

    /// Re-anchors the chain on a solved fix and refits the drift rate.
    pub fn anchor_fix(&mut self, unix_ms: i64, solved_time_error_s: f64) {
        let t = (unix_ms - self.epoch_unix_ms) as f64 / 1_000.0;
        self.history.push_back((t, solved_time_error_s));
        while self.history.len() > DRIFT_WINDOW_FIXES {
            self.history.pop_front();
        }
        let slope = match self.estimator {
            DriftEstimator::LeastSquares => least_squares_slope(&self.history),
            DriftEstimator::MedianOfSlopes => median_of_slopes(&self.history),
        };
        if let Some(slope) = slope {
            self.drift_rate = slope;
        }
        self.time_error_s = solved_time_error_s;
        self.anchor_unix_ms = unix_ms;
    }

    /// Anchors currently inside the drift window.
    pub fn anchors(&self) -> usize {
        self.history.len()
    }
}

fn least_squares_slope(points: &VecDeque<(f64, f64)>) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for &(t, y) in points {
        stt += (t - t_mean) * (t - t_mean);
        sty += (t - t_mean) * (y - y_mean);
    }
    (stt > 0.0).then(|| sty / stt)
}

fn median_of_slopes(points: &VecDeque<(f64, f64)>) -> Option<f64> {
    let pts: Vec<_> = points.iter().copied().collect();
    let mut slopes = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let dt = pts[j].0 - pts[i].0;
            if dt != 0.0 {
                slopes.push((pts[j].1 - pts[i].1) / dt);
            }
        }
    }
    if slopes.is_empty() {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    let mid = slopes.len() / 2;
    Some(if slopes.len() % 2 == 1 {
        slopes[mid]
    } else {
        0.5 * (slopes[mid - 1] + slopes[mid])
    })
}

/// Doppler a static receiver at `receiver_ecef` would observe from this
/// satellite with a perfect front end: geometric range rate and satellite
/// clock drift scaled to L1, plus the nominal residual IF.
pub fn predict_doppler(
    eph: &GpsEphemeris,
    receiver_ecef: &Vector3<f64>,
    t: &GpsTime,
    constants: &SignalConstants,
) -> Result<f64, EphemerisError> {
    let g = transmit_geometry(eph, receiver_ecef, t, DEFAULT_VALIDITY_S)?;
    let rate = g.range_rate_mps - SPEED_OF_LIGHT * g.clock_drift_s_per_s;
    Ok(-rate / SPEED_OF_LIGHT * constants.f_l1 + constants.if_residual_nominal)
}

/// Estimates the front-end frequency offset from the first snapshots of a
/// dataset.
///
/// For each snapshot, candidate offsets over ±[`OFFSET_SCAN_SPAN_HZ`] are
/// scored by the summed peak metric of detected single-bin acquisitions at
/// `predicted_doppler + candidate` for every predicted-visible satellite;
/// the best-scoring candidate is refined by parabolic interpolation, and the
/// per-snapshot estimates are reduced by median. `coarse_time_error_s` is
/// the current belief about the receiver timestamp error (see
/// [`ClockModel`]); position and time only shape Doppler predictions, so
/// the documented 100 km / 60 s coarse bounds cost a few hertz at worst.
pub fn estimate_frontend_offset(
    snapshots: &[Snapshot],
    ephemerides: &[GpsEphemeris],
    coarse_position: &Geodetic,
    coarse_time_error_s: f64,
    constants: &SignalConstants,
) -> Result<f64, CalibrationError> {
    if snapshots.is_empty() {
        return Err(CalibrationError::NoSnapshots);
    }
    let prns: Vec<u8> = ephemerides
        .iter()
        .map(|e| e.prn)
        .filter(|&p| (1..=32).contains(&p))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cache = precompute_codes(&prns).expect("PRNs prefiltered to the valid range");
    let receiver_ecef = geodetic_to_ecef(coarse_position);

    let side = (OFFSET_SCAN_SPAN_HZ / OFFSET_SCAN_STEP_HZ).round() as i64;
    let candidate = |i: usize| (i as i64 - side) as f64 * OFFSET_SCAN_STEP_HZ;
    let ncand = (2 * side + 1) as usize;

    let mut estimates = Vec::with_capacity(snapshots.len());
    for snapshot in snapshots {
        let t = GpsTime::from_unix_ms(snapshot.timestamp_ms).add_seconds(-coarse_time_error_s);
        let mut predictions = Vec::new();
        for &prn in &prns {
            let Ok(eph) = best_ephemeris(ephemerides, prn, &t, DEFAULT_VALIDITY_S) else {
                continue;
            };
            let Ok(geometry) = transmit_geometry(eph, &receiver_ecef, &t, DEFAULT_VALIDITY_S)
            else {
                continue;
            };
            let (elevation, _) = elevation_azimuth(coarse_position, &geometry.state.position);
            if elevation < SCAN_ELEVATION_MASK_DEG {
                continue;
            }
            let rate = geometry.range_rate_mps - SPEED_OF_LIGHT * geometry.clock_drift_s_per_s;
            predictions
                .push((prn, -rate / SPEED_OF_LIGHT * constants.f_l1 + constants.if_residual_nominal));
        }
        if predictions.is_empty() {
            continue;
        }

        let mut scores = vec![0.0f64; ncand];
        for (i, score) in scores.iter_mut().enumerate() {
            for &(prn, predicted) in &predictions {
                let settings = AcquisitionSettings {
                    doppler_center: predicted + candidate(i),
                    doppler_span: 0.0,
                    doppler_step: OFFSET_SCAN_STEP_HZ,
                    threshold: DEFAULT_DETECTION_THRESHOLD,
                };
                let result =
                    acquire_with_cache(&snapshot.samples, &[prn], &settings, constants, &cache)?;
                if result[0].detected {
                    *score += result[0].peak_metric;
                }
            }
        }

        let best = (0..ncand).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        if scores[best] < MIN_SCAN_SCORE {
            continue;
        }
        let refined = if best > 0 && best + 1 < ncand {
            let (a, b, c) = (scores[best - 1], scores[best], scores[best + 1]);
            let denom = a - 2.0 * b + c;
            let vertex = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
            candidate(best) + vertex * OFFSET_SCAN_STEP_HZ
        } else {
            candidate(best)
        };
        estimates.push(refined);
    }

    if estimates.is_empty() {
        return Err(CalibrationError::OffsetEstimationFailed(snapshots.len()));
    }
    estimates.sort_by(f64::total_cmp);
    let mid = estimates.len() / 2;
    let median = if estimates.len() % 2 == 1 {
        estimates[mid]
    } else {
        0.5 * (estimates[mid - 1] + estimates[mid])
    };
    Ok(median)
}
