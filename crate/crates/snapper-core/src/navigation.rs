//! Coarse-time navigation: turns per-snapshot code phases into full
//! pseudoranges and solves for position and capture time.
//!
//! A 12 ms snapshot observes each satellite's spreading code only inside one
//! 1 ms code period, so acquisition yields pseudoranges modulo one light
//! millisecond (~300 km), and the capture timestamp itself may be off by tens
//! of seconds. Reconstruction recovers the whole-millisecond counts by
//! anchoring each measurement to the range predicted from an a-priori
//! position and time: the satellite with the strongest peak metric is
//! unfolded against its own prediction, and every other satellite against
//! the prediction *difference* to that reference. Anchoring differences
//! rather than absolutes makes the result invariant to any error shared by
//! all predictions, which the solver later absorbs into a common bias.
//!
//! The solver estimates five states: ECEF position, a common range bias `b`
//! (sub-millisecond receiver clock offset plus whatever constant the
//! reconstruction left in all pseudoranges), and a coarse-time correction
//! `δt` that slides every satellite along its orbit. `δt` is observable
//! because satellites move at different apparent rates, so a timestamp error
//! bends the pseudorange set in a way no position shift can mimic.
//!
//! Each measurement model runs its own light-time iteration: the signal
//! travel time, and with it the Earth-rotation angle bridging transmit and
//! receive frames, is converged against the candidate state rather than
//! taken from the measurement, so the model is a pure function of the state
//! (a constant added to every pseudorange, or a relabeling of the a-priori
//! epoch with `δt` absorbing the difference, changes nothing but the bias or
//! `δt` it should). The Jacobian accounts for the travel time's dependence
//! on the state through the implicit-function resolvent `1/(1 − q/c)` — `q`
//! being the range rate against travel time, a few parts per million — so
//! analytic and finite-difference gradients agree to machine precision.

use nalgebra::{Matrix5, Vector3, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::AcquisitionResult;
use crate::constants::{CODE_PERIOD, EARTH_ROTATION_RATE, SPEED_OF_LIGHT, SignalConstants};
use crate::ephemeris::{
    DEFAULT_VALIDITY_S, EcefState, EphemerisError, GpsEphemeris, best_ephemeris, rotate_earth,
    transmit_geometry,
};
use crate::geo::{Geodetic, ecef_to_geodetic, geodetic_to_ecef};
use crate::time::GpsTime;

/// Window a reconstructed pseudorange must land in, m. GPS orbits put any
/// satellite above the horizon between roughly 19 000 and 26 600 km away;
/// the margin covers the half-millisecond slack of the unfolding.
pub const PSEUDORANGE_PLAUSIBLE_M: (f64, f64) = (1.8e7, 2.8e7);

/// Fewest satellites the five-state solver accepts.
pub const MIN_SATELLITES: usize = 5;

/// Residual RMS above which a fix is rejected outright, m.
pub const DEFAULT_MAX_RMS_M: f64 = 100.0;

/// Residual RMS above which a surviving fix is only low confidence, m.
pub const LOW_CONFIDENCE_RMS_M: f64 = 30.0;

/// Position-update norm below which the solver declares convergence, m.
const CONVERGENCE_POSITION_M: f64 = 1e-4;

/// Position-update norm beyond which the solver declares divergence, m.
const DIVERGENCE_UPDATE_M: f64 = 1e7;

const MAX_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("no satellites: nothing detected to reconstruct")]
    NoSatellites,
    #[error("insufficient satellites: {got} of {MIN_SATELLITES} required")]
    InsufficientSatellites { got: usize },
    #[error("diverged")]
    Diverged,
    #[error(transparent)]
    Ephemeris(#[from] EphemerisError),
}

/// How measurements are weighted in the solve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Every satellite counts the same.
    #[default]
    Uniform,
    /// Weights proportional to the acquisition peak metric, normalized to
    /// mean 1 over the set.
    PeakMetric,
}

/// One satellite's contribution to a solve.
#[derive(Debug, Clone)]
pub struct SatelliteMeasurement {
    pub prn: u8,
    /// Full pseudorange with millisecond integers resolved, m.
    pub pseudorange_m: f64,
    /// Relative weight in the solve.
    pub weight: f64,
    /// Satellite state predicted from the a-priori position and time, in the
    /// receive-epoch frame. Diagnostic; the solver re-propagates.
    pub predicted_state: EcefState,
    /// Satellite clock correction at the predicted transmit time, s.
    pub predicted_clock_s: f64,
    /// Broadcast record the solver re-evaluates at each iteration's epoch.
    pub ephemeris: GpsEphemeris,
}

/// Reconstructed pseudoranges for one snapshot.
#[derive(Debug, Clone, Default)]
pub struct PseudorangeSet {
    pub satellites: Vec<SatelliteMeasurement>,
    /// PRN whose millisecond unfolding anchored the others (highest peak
    /// metric among the detected satellites).
    pub reference_prn: u8,
}

/// Fix quality classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Low,
    Rejected,
}

impl std::fmt::Display for Confidence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Confidence::High => "high",
            Confidence::Low => "low",
            Confidence::Rejected => "rejected",
        })
    }
}

impl std::str::FromStr for Confidence {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high" => Ok(Confidence::High),
            "low" => Ok(Confidence::Low),
            "rejected" => Ok(Confidence::Rejected),
            other => Err(format!("unknown confidence {other:?}")),
        }
    }
}

/// One solved snapshot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fix {
    pub position: Geodetic,
    /// Correction that moves the a-priori epoch onto the solved capture
    /// time, s.
    pub coarse_time_correction_s: f64,
    /// Common pseudorange bias, m: the sub-millisecond receiver clock offset
    /// plus the constant the reconstruction left in every pseudorange.
    pub common_bias_m: f64,
    pub residual_rms_m: f64,
    pub n_sats: usize,
    pub confidence: Confidence,
    /// Corrected capture instant, Unix milliseconds.
    pub solved_unix_ms: i64,
}

/// Resolves the whole-millisecond part of each detected satellite's
/// pseudorange against ranges predicted from the a-priori state.
///
/// The a-priori position must be within ~100 km and the a-priori time within
/// ~60 s of the truth for the unfolding to pick the right integers; both
/// bounds stay well inside the half-light-millisecond (150 km) decision
/// distance. Satellites without a usable broadcast record, and any whose
/// reconstructed pseudorange falls outside [`PSEUDORANGE_PLAUSIBLE_M`], are
/// dropped from the set.
pub fn reconstruct_pseudoranges(
    acquisitions: &[AcquisitionResult],
    a_priori_pos: &Geodetic,
    a_priori_time: &GpsTime,
    ephemerides: &[GpsEphemeris],
    constants: &SignalConstants,
    weighting: Weighting,
) -> Result<PseudorangeSet, NavError> {
    let receiver = geodetic_to_ecef(a_priori_pos);

    // Detected satellites with a usable broadcast record, each with its
    // predicted pseudorange (geometric range minus the satellite clock) and
    // measured sub-millisecond pseudorange in seconds of travel time.
    struct Candidate {
        acq: AcquisitionResult,
        ephemeris: GpsEphemeris,
        state: EcefState,
        clock_s: f64,
        predicted_m: f64,
        sub_ms_s: f64,
    }
    let mut candidates = Vec::new();
    for acq in acquisitions.iter().filter(|a| a.detected) {
        let Ok(eph) = best_ephemeris(ephemerides, acq.prn, a_priori_time, DEFAULT_VALIDITY_S)
        else {
            continue;
        };
        let Ok(geom) = transmit_geometry(eph, &receiver, a_priori_time, DEFAULT_VALIDITY_S) else {
            continue;
        };
        candidates.push(Candidate {
            acq: *acq,
            ephemeris: *eph,
            state: geom.state,
            clock_s: geom.clock_correction_s,
            predicted_m: geom.range_m - SPEED_OF_LIGHT * geom.clock_correction_s,
            sub_ms_s: acq.code_phase / constants.f_s,
        });
    }
    if candidates.is_empty() {
        return Err(NavError::NoSatellites);
    }

    let reference = candidates
        .iter()
        .max_by(|a, b| a.acq.peak_metric.total_cmp(&b.acq.peak_metric))
        .expect("candidates is non-empty");
    let reference_prn = reference.acq.prn;

    // Unfold the reference against its own prediction, then every satellite
    // against the prediction differences to the reference. Integer counts
    // survive the difference exactly, so a constant added to all predictions
    // shifts every pseudorange by the same whole number of milliseconds.
    let unfold = |target_m: f64, sub_ms_s: f64| -> f64 {
        let n = ((target_m / SPEED_OF_LIGHT - sub_ms_s) / CODE_PERIOD).round();
        (sub_ms_s + n * CODE_PERIOD) * SPEED_OF_LIGHT
    };
    let reference_pr = unfold(reference.predicted_m, reference.sub_ms_s);
    let reference_predicted = reference.predicted_m;

    let mut satellites: Vec<SatelliteMeasurement> = candidates
        .iter()
        .filter_map(|c| {
            let target = c.predicted_m - reference_predicted + reference_pr;
            let pseudorange_m = unfold(target, c.sub_ms_s);
            let (lo, hi) = PSEUDORANGE_PLAUSIBLE_M;
            if !(lo..=hi).contains(&pseudorange_m) {
                return None;
            }
            Some(SatelliteMeasurement {
                prn: c.acq.prn,
                pseudorange_m,
                weight: 1.0,
                predicted_state: c.state,
                predicted_clock_s: c.clock_s,
                ephemeris: c.ephemeris,
            })
        })
        .collect();
    if satellites.is_empty() {
        return Err(NavError::NoSatellites);
    }

    if weighting == Weighting::PeakMetric {
        let metrics: Vec<f64> = candidates
            .iter()
            .filter(|c| satellites.iter().any(|s| s.prn == c.acq.prn))
            .map(|c| c.acq.peak_metric)
            .collect();
        let mean = metrics.iter().sum::<f64>() / metrics.len() as f64;
        for (sat, metric) in satellites.iter_mut().zip(metrics) {
            sat.weight = metric / mean;
        }
    }

    Ok(PseudorangeSet { satellites, reference_prn })
}

/// Modeled pseudorange and its gradient for one satellite at state
/// `(x, b, δt)` around the a-priori epoch `t0`.
///
/// The satellite is propagated to `t0 + δt − τ` and rotated into the receive
/// frame by the Earth rotation accrued over `τ`, where the travel time `τ`
/// is iterated to its fixed point `τ = |sat(τ) − x|/c`; `seed_s` primes the
/// iteration (any value within half a millisecond of the truth converges
/// identically, so the measured pseudorange over `c` is a natural seed).
/// The model is `|sat − x| + b − c·clk`.
///
/// The gradient row is `[−κ·eᵀ, 1, κ·(e·v) − c·d]` with `e` the
/// receiver-to-satellite unit vector, `v` the receive-frame satellite
/// velocity, `d` the satellite clock drift, and `κ = (1 + d)/(1 − q/c)` the
/// implicit-function factor from the travel time's own dependence on the
/// state (`q` = sensitivity of the range to `τ`, a few km/s). `κ` differs
/// from 1 by only parts per million, but that is exactly the scale a 1e-6
/// gradient check resolves.
fn model_row(
    eph: &GpsEphemeris,
    seed_s: f64,
    t0: &GpsTime,
    x: &Vector3<f64>,
    b: f64,
    dt: f64,
) -> Result<(f64, Vector5<f64>), EphemerisError> {
    let mut travel_time = seed_s;
    let mut position = Vector3::zeros();
    let mut velocity = Vector3::zeros();
    let mut range = 0.0;
    let mut t_tx = *t0;
    // Fixed pass count: each pass shrinks the travel-time error by ~3e-6, so
    // three passes from any sane seed land below f64 resolution while
    // keeping the model a smooth composition for the gradient check.
    for _ in 0..3 {
        t_tx = t0.add_seconds(dt - travel_time);
        let raw = eph.state_at_with_validity(&t_tx, DEFAULT_VALIDITY_S)?;
        let theta = EARTH_ROTATION_RATE * travel_time;
        position = rotate_earth(&raw.position, theta);
        velocity = rotate_earth(&raw.velocity, theta);
        range = (position - x).norm();
        travel_time = range / SPEED_OF_LIGHT;
    }
    let e = (position - x) / range;
    let clock = eph.clock_correction(&t_tx);
    let drift = eph.clock_drift(&t_tx);
    let modeled = range + b - SPEED_OF_LIGHT * clock;

    // d(range)/d(travel time) at fixed state: frame rotation plus satellite
    // motion along the line of sight.
    let q = EARTH_ROTATION_RATE * (e.x * position.y - e.y * position.x) - e.dot(&velocity);
    let kappa = (1.0 + drift) / (1.0 - q / SPEED_OF_LIGHT);
    let rate = kappa * e.dot(&velocity) - SPEED_OF_LIGHT * drift;
    Ok((modeled, Vector5::new(-kappa * e.x, -kappa * e.y, -kappa * e.z, 1.0, rate)))
}

/// Solves the five-state coarse-time problem by Gauss-Newton: position,
/// common bias, and the correction `δt` of the a-priori epoch.
///
/// Satellite states are re-propagated to the corrected epoch at every
/// iteration. Iteration stops when the position part of the update drops
/// below 0.1 mm, or after ten iterations; an update beyond 10 000 km (or a
/// numerically singular normal matrix) reports divergence.
pub fn solve_coarse_time(
    set: &PseudorangeSet,
    a_priori_pos: &Geodetic,
    a_priori_time: &GpsTime,
) -> Result<Fix, NavError> {
    let n = set.satellites.len();
    if n < MIN_SATELLITES {
        return Err(NavError::InsufficientSatellites { got: n });
    }

    let mut x = geodetic_to_ecef(a_priori_pos);
    let mut b = 0.0;
    let mut dt = 0.0;
    for _ in 0..MAX_ITERATIONS {
        let mut normal = Matrix5::zeros();
        let mut projected = Vector5::zeros();
        for m in &set.satellites {
            let seed = m.pseudorange_m / SPEED_OF_LIGHT;
            let (modeled, row) = model_row(&m.ephemeris, seed, a_priori_time, &x, b, dt)?;
            let residual = m.pseudorange_m - modeled;
            normal += row * row.transpose() * m.weight;
            projected += row * (m.weight * residual);
        }
        let Some(update) = normal.lu().solve(&projected) else {
            return Err(NavError::Diverged);
        };
        let position_step = update.fixed_rows::<3>(0).norm();
        if !position_step.is_finite() || position_step > DIVERGENCE_UPDATE_M {
            return Err(NavError::Diverged);
        }
        x += Vector3::new(update[0], update[1], update[2]);
        b += update[3];
        dt += update[4];
        if position_step < CONVERGENCE_POSITION_M {
            break;
        }
    }

    let mut sum_squares = 0.0;
    for m in &set.satellites {
        let seed = m.pseudorange_m / SPEED_OF_LIGHT;
        let (modeled, _) = model_row(&m.ephemeris, seed, a_priori_time, &x, b, dt)?;
        sum_squares += (m.pseudorange_m - modeled).powi(2);
    }
    let residual_rms_m = (sum_squares / n as f64).sqrt();

    Ok(Fix {
        position: ecef_to_geodetic(&x),
        coarse_time_correction_s: dt,
        common_bias_m: b,
        residual_rms_m,
        n_sats: n,
        confidence: classify_confidence(residual_rms_m, n, DEFAULT_MAX_RMS_M),
        solved_unix_ms: a_priori_time.add_seconds(dt).to_unix_ms(),
    })
}

/// Classification shared by the solver and track filtering: rejected when
/// the geometry is too thin or the residuals exceed `max_rms_m`, low
/// confidence in the (30, max] band, high below.
pub fn classify_confidence(residual_rms_m: f64, n_sats: usize, max_rms_m: f64) -> Confidence {
    if n_sats < MIN_SATELLITES || residual_rms_m > max_rms_m {
        Confidence::Rejected
    } else if residual_rms_m > LOW_CONFIDENCE_RMS_M {
        Confidence::Low
    } else {
        Confidence::High
    }
}

/// Re-classifies every fix against a configurable rejection threshold.
/// Snapshots with no detections never produced a fix, so they are absent
/// from the input by construction; rejected fixes stay in the list (callers
/// exclude them from exports) so datasets remain auditable.
pub fn filter_track(fixes: &mut [Fix], max_rms_m: f64) {
    for fix in fixes {
        fix.confidence = classify_confidence(fix.residual_rms_m, fix.n_sats, max_rms_m);
    }
}
