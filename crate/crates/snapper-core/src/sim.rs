//! Snapshot and deployment synthesis from ground-truth scenarios.
//!
//! This is the oracle side of the toolkit: given where a receiver truly was,
//! what time it truly was, and how wrong its oscillators were, build the
//! exact 1-bit sample stream the hardware would have recorded. Every quantity
//! the processing chain later recovers (code phase, Doppler, position, clock
//! error) is known here by construction, which is what makes end-to-end
//! accuracy measurable at all.
//!
//! The signal model is deliberately plain: for each satellite above the
//! elevation mask, a C/A code replica at the geometric code phase, a real
//! carrier at the Doppler-plus-front-end-offset frequency, an amplitude set
//! by C/N0 against unit-variance noise, at most one navigation-bit sign flip
//! per 12 ms snapshot, and a final 1-bit quantization by sign. No multipath,
//! no atmosphere, no antenna pattern.
//!
//! Code phase convention: the value carried in ground truth (and later
//! reported by acquisition) is the `sample_replica` alignment parameter, i.e.
//! the snapshot matches the replica generated with that same code phase. It
//! grows by one sample per 1/f_s of extra light time, so sub-millisecond
//! pseudoranges fall straight out of it. Note that with exactly four samples
//! per chip the sampled waveform realizes only the integer part of the
//! alignment: code phases sharing a floor yield bit-identical snapshots, and
//! that one-sample (73 m) quantization is the dominant noise-free error in
//! the downstream position budget.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cacode::{ca_code, InvalidPrn};
use crate::constants::{
    SignalConstants, CODE_LENGTH_CHIPS, CODE_PERIOD, CODE_PERIODS_PER_SNAPSHOT, SAMPLES_PER_CHIP,
    SAMPLES_PER_CODE, SPEED_OF_LIGHT,
};
use crate::ephemeris::{
    best_ephemeris, transmit_geometry, EphemerisError, GpsEphemeris, RinexParseError,
    DEFAULT_VALIDITY_S,
};
use crate::geo::{ecef_to_geodetic, elevation_azimuth, geodetic_to_ecef, Geodetic};
use crate::model::{Dataset, DatasetError, DeviceId, Snapshot, DEFAULT_APRIORI_UNCERTAINTY_M};
use crate::time::GpsTime;

/// Satellites below this elevation are not synthesized.
pub const ELEVATION_MASK_DEG: f64 = 5.0;

/// Scenario C/N0 bounds, dB-Hz.
pub const CN0_VALID_RANGE_DBHZ: (f64, f64) = (20.0, 60.0);

/// Largest front-end offset a scenario may request, Hz.
pub const MAX_FRONTEND_OFFSET_HZ: f64 = 10_000.0;

/// Default carrier-to-noise density for open-sky scenarios, dB-Hz.
pub const DEFAULT_CN0_DBHZ: f64 = 45.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("C/N0 {cn0} dB-Hz for PRN {prn} is outside [20, 60]")]
    Cn0OutOfRange { prn: u8, cn0: f64 },
    #[error("front-end offset {0} Hz exceeds the {MAX_FRONTEND_OFFSET_HZ} Hz limit")]
    FrontendOffsetTooLarge(f64),
    #[error(transparent)]
    InvalidPrn(#[from] InvalidPrn),
    #[error(transparent)]
    Ephemeris(#[from] EphemerisError),
    #[error("track must contain at least one waypoint")]
    EmptyTrack,
    #[error("track times must be strictly increasing")]
    NonMonotonicTrack,
    #[error("capture interval {0} s is below the 1 s minimum")]
    IntervalTooShort(f64),
    #[error("capture time precedes the Unix epoch")]
    TimeBeforeEpoch,
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Rinex { path: String, source: RinexParseError },
    #[error(transparent)]
    InvalidDataset(#[from] DatasetError),
}

/// splitmix64-style mix of a seed and an index, used to derive independent
/// per-snapshot and per-satellite RNG seeds from one scenario seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Carrier amplitude that realizes `cn0_dbhz` against unit-variance noise at
/// sampling rate `f_s`: C/N0 = A^2 f_s / 4 for a real carrier in real noise.
pub fn amplitude_for_cn0(cn0_dbhz: f64, f_s: f64) -> f64 {
    2.0 * (10f64.powf(cn0_dbhz / 10.0) / f_s).sqrt()
}

/// One satellite's contribution to the sample stream, fully resolved.
#[derive(Debug, Clone, Copy)]
pub struct SimSatellite {
    pub prn: u8,
    /// Replica-convention code phase, fractional samples in [0, 4092).
    pub code_phase_samples: f64,
    /// Observed carrier frequency after downconversion, Hz.
    pub doppler_hz: f64,
    pub amplitude: f64,
    pub carrier_phase_rad: f64,
    /// First 1 ms block whose sign is inverted by a navigation-bit flip.
    pub nav_flip_block: Option<usize>,
}

/// Sums the satellite signals, optionally adds unit-variance Gaussian noise,
/// and quantizes to 1-bit samples by sign (an exact zero maps to +1).
///
/// `noise_seed: None` produces the noise-free sum, which is useful for
/// pinning detector behavior in tests; scenarios always add noise.
pub fn synthesize_samples(
    sats: &[SimSatellite],
    noise_seed: Option<u64>,
    constants: &SignalConstants,
) -> Result<Vec<i8>, InvalidPrn> {
    let n = constants.samples_per_snapshot();
    let mut acc = vec![0.0f64; n];
    for sat in sats {
        let code = ca_code(sat.prn)?;
        let w = TAU * sat.doppler_hz / constants.f_s;
        for (k, a) in acc.iter_mut().enumerate() {
            let block = k / SAMPLES_PER_CODE;
            let sign = match sat.nav_flip_block {
                Some(flip) if block >= flip => -1.0,
                _ => 1.0,
            };
            let pos = (k as f64 + sat.code_phase_samples).rem_euclid(SAMPLES_PER_CODE as f64);
            let chip = usize::min(pos as usize / SAMPLES_PER_CHIP, CODE_LENGTH_CHIPS - 1);
            *a += sat.amplitude
                * sign
                * f64::from(code[chip])
                * (w * k as f64 + sat.carrier_phase_rad).cos();
        }
    }
    if let Some(seed) = noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in &mut acc {
            *a += rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(acc.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect())
}

/// Receiver position given either way; ECEF wins for tests that need exact
/// geometry, geodetic is the natural choice for scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PositionSpec {
    Geodetic(Geodetic),
    Ecef { ecef_m: [f64; 3] },
}

impl PositionSpec {
    pub fn ecef(&self) -> Vector3<f64> {
        match self {
            PositionSpec::Geodetic(g) => geodetic_to_ecef(g),
            PositionSpec::Ecef { ecef_m } => Vector3::from(*ecef_m),
        }
    }

    pub fn geodetic(&self) -> Geodetic {
        match self {
            PositionSpec::Geodetic(g) => *g,
            PositionSpec::Ecef { ecef_m } => ecef_to_geodetic(&Vector3::from(*ecef_m)),
        }
    }
}

/// How a scenario pins each satellite's motion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SatelliteSource {
    /// Broadcast orbit; geometry comes from the usual propagation with the
    /// 5 degree elevation mask applied.
    Ephemeris { ephemeris: GpsEphemeris },
    /// Pinned ECEF state, for tests that need exact geometry. Treated as
    /// co-rotating with the Earth, so no light-time or Sagnac iteration
    /// applies, and the elevation mask is not enforced.
    Fixed {
        prn: u8,
        position_m: [f64; 3],
        #[serde(default)]
        velocity_mps: [f64; 3],
        #[serde(default)]
        clock_bias_s: f64,
        #[serde(default)]
        clock_drift_s_per_s: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSatellite {
    #[serde(flatten)]
    pub source: SatelliteSource,
    pub cn0_dbhz: f64,
    /// Inject a navigation-bit sign flip at a random 1 ms block boundary.
    #[serde(default)]
    pub nav_bit_flip: bool,
}

impl ScenarioSatellite {
    fn prn(&self) -> u8 {
        match &self.source {
            SatelliteSource::Ephemeris { ephemeris } => ephemeris.prn,
            SatelliteSource::Fixed { prn, .. } => *prn,
        }
    }
}

fn default_temperature() -> f64 {
    20.0
}

fn default_battery_mv() -> u16 {
    3_900
}

/// Ground truth for one capture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotScenario {
    pub truth_position: PositionSpec,
    /// Receiver ECEF velocity, m/s.
    #[serde(default)]
    pub truth_velocity: [f64; 3],
    /// True GPS time of the capture.
    pub truth_time: GpsTime,
    /// Receiver clock reading minus true time, s.
    #[serde(default)]
    pub clock_offset: f64,
    /// Front-end downconversion error, Hz.
    #[serde(default)]
    pub frontend_offset: f64,
    /// Air temperature at the receiver, degrees C.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_battery_mv")]
    pub battery_mv: u16,
    pub satellites: Vec<ScenarioSatellite>,
    pub noise_seed: u64,
    #[serde(default)]
    pub device_id: DeviceId,
    /// A-priori position recorded in a dataset built from this scenario;
    /// defaults to the truth position.
    #[serde(default)]
    pub apriori: Option<Geodetic>,
}

impl SnapshotScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.frontend_offset.abs() > MAX_FRONTEND_OFFSET_HZ {
            return Err(SimError::FrontendOffsetTooLarge(self.frontend_offset));
        }
        for sat in &self.satellites {
            ca_code(sat.prn())?;
            if !(CN0_VALID_RANGE_DBHZ.0..=CN0_VALID_RANGE_DBHZ.1).contains(&sat.cn0_dbhz) {
                return Err(SimError::Cn0OutOfRange { prn: sat.prn(), cn0: sat.cn0_dbhz });
            }
        }
        Ok(())
    }
}

/// Per-satellite truth recorded alongside a synthesized snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SatelliteTruth {
    pub prn: u8,
    /// Replica-convention code phase, fractional samples in [0, 4092).
    pub code_phase: f64,
    /// Observed carrier frequency including the front-end offset, Hz.
    pub doppler: f64,
    /// Geometric range at transmit time, m.
    pub range_m: f64,
    /// Satellite clock correction at transmit time, s.
    pub sat_clock_s: f64,
    pub elevation_deg: f64,
    pub cn0_dbhz: f64,
    /// 1 ms block index where a navigation-bit sign flip was injected.
    pub nav_flip_block: Option<usize>,
}

/// Everything a test needs to judge what processing recovered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True receiver position.
    pub position: Geodetic,
    /// True GPS time of the capture.
    pub truth_time: GpsTime,
    /// Receiver clock reading minus true time, s.
    pub clock_offset: f64,
    /// Front-end offset in effect, Hz.
    pub frontend_offset: f64,
    /// Receiver-clock capture timestamp as it lands in the dataset, Unix ms.
    pub timestamp_ms: u64,
    pub satellites: Vec<SatelliteTruth>,
}

/// A satellite's geometry resolved against the receiver at capture time.
struct ResolvedSatellite {
    prn: u8,
    range_m: f64,
    /// Pseudorange rate: geometric range rate minus c times clock drift, m/s.
    rate_mps: f64,
    sat_clock_s: f64,
    elevation_deg: f64,
    cn0_dbhz: f64,
}

fn resolve_satellite(
    sat: &ScenarioSatellite,
    receiver_ecef: &Vector3<f64>,
    receiver_geo: &Geodetic,
    receiver_velocity: &Vector3<f64>,
    t: &GpsTime,
) -> Result<Option<ResolvedSatellite>, SimError> {
    match &sat.source {
        SatelliteSource::Ephemeris { ephemeris } => {
            let g = transmit_geometry(ephemeris, receiver_ecef, t, DEFAULT_VALIDITY_S)?;
            let (elevation, _) = elevation_azimuth(receiver_geo, &g.state.position);
            if elevation < ELEVATION_MASK_DEG {
                return Ok(None);
            }
            let unit = (g.state.position - receiver_ecef) / g.range_m;
            Ok(Some(ResolvedSatellite {
                prn: ephemeris.prn,
                range_m: g.range_m,
                rate_mps: g.range_rate_mps
                    - unit.dot(receiver_velocity)
                    - SPEED_OF_LIGHT * g.clock_drift_s_per_s,
                sat_clock_s: g.clock_correction_s,
                elevation_deg: elevation,
                cn0_dbhz: sat.cn0_dbhz,
            }))
        }
        SatelliteSource::Fixed {
            prn,
            position_m,
            velocity_mps,
            clock_bias_s,
            clock_drift_s_per_s,
        } => {
            let position = Vector3::from(*position_m);
            let offset = position - receiver_ecef;
            let range = offset.norm();
            let unit = offset / range;
            let relative = Vector3::from(*velocity_mps) - receiver_velocity;
            let (elevation, _) = elevation_azimuth(receiver_geo, &position);
            Ok(Some(ResolvedSatellite {
                prn: *prn,
                range_m: range,
                rate_mps: unit.dot(&relative) - SPEED_OF_LIGHT * clock_drift_s_per_s,
                sat_clock_s: *clock_bias_s,
                elevation_deg: elevation,
                cn0_dbhz: sat.cn0_dbhz,
            }))
        }
    }
}

/// Builds the 1-bit snapshot a receiver would have recorded under `scenario`,
/// plus the ground truth needed to judge anything recovered from it.
///
/// Bit-identical output for identical scenarios: all randomness (noise,
/// carrier phases, nav-bit boundaries) derives from `noise_seed`.
pub fn synthesize_snapshot(scenario: &SnapshotScenario) -> Result<(Snapshot, GroundTruth), SimError> {
    scenario.validate()?;
    let constants = SignalConstants::default();
    let receiver_geo = scenario.truth_position.geodetic();
    let receiver_ecef = scenario.truth_position.ecef();
    let receiver_velocity = Vector3::from(scenario.truth_velocity);
    let tow = scenario.truth_time.tow;

    let mut sim_sats = Vec::with_capacity(scenario.satellites.len());
    let mut truth_sats = Vec::with_capacity(scenario.satellites.len());
    for (i, sat) in scenario.satellites.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.noise_seed, 1 + i as u64));
        let Some(resolved) = resolve_satellite(
            sat,
            &receiver_ecef,
            &receiver_geo,
            &receiver_velocity,
            &scenario.truth_time,
        )?
        else {
            continue;
        };
        // The received code time at the capture instant is t - range/c plus
        // the satellite clock correction; the wire code phase is its
        // negative folded into one code period (see module docs).
        let code_phase = (resolved.range_m / SPEED_OF_LIGHT - resolved.sat_clock_s - tow)
            .rem_euclid(CODE_PERIOD)
            * constants.f_s;
        let doppler = -resolved.rate_mps / SPEED_OF_LIGHT * constants.f_l1
            + scenario.frontend_offset
            + constants.if_residual_nominal;
        let carrier_phase = rng.random_range(0.0..TAU);
        let nav_flip = sat
            .nav_bit_flip
            .then(|| rng.random_range(1..CODE_PERIODS_PER_SNAPSHOT));
        sim_sats.push(SimSatellite {
            prn: resolved.prn,
            code_phase_samples: code_phase,
            doppler_hz: doppler,
            amplitude: amplitude_for_cn0(resolved.cn0_dbhz, constants.f_s),
            carrier_phase_rad: carrier_phase,
            nav_flip_block: nav_flip,
        });
        truth_sats.push(SatelliteTruth {
            prn: resolved.prn,
            code_phase,
            doppler,
            range_m: resolved.range_m,
            sat_clock_s: resolved.sat_clock_s,
            elevation_deg: resolved.elevation_deg,
            cn0_dbhz: resolved.cn0_dbhz,
            nav_flip_block: nav_flip,
        });
    }

    let samples =
        synthesize_samples(&sim_sats, Some(derive_seed(scenario.noise_seed, 0)), &constants)?;
    let reading = scenario.truth_time.add_seconds(scenario.clock_offset);
    let unix_ms = reading.to_unix_ms();
    if unix_ms < 0 {
        return Err(SimError::TimeBeforeEpoch);
    }
    let temperature_centi = (scenario.temperature * 100.0)
        .round()
        .clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
    let snapshot = Snapshot {
        timestamp_ms: unix_ms as u64,
        temperature_centi_c: temperature_centi,
        battery_mv: scenario.battery_mv,
        samples,
    };
    let truth = GroundTruth {
        position: receiver_geo,
        truth_time: scenario.truth_time,
        clock_offset: scenario.clock_offset,
        frontend_offset: scenario.frontend_offset,
        timestamp_ms: snapshot.timestamp_ms,
        satellites: truth_sats,
    };
    Ok((snapshot, truth))
}

/// One point of a deployment track.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Waypoint {
    pub time: GpsTime,
    pub position: Geodetic,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Captures falling in the segment that starts here see zero satellites.
    #[serde(default)]
    pub submerged: bool,
}

fn default_sat_count() -> u8 {
    31
}

/// Where a deployment's broadcast records come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstellationSpec {
    /// A RINEX navigation file on disk.
    RinexFile { path: String },
    /// Inline broadcast records.
    Ephemerides { ephemerides: Vec<GpsEphemeris> },
    /// A generated constellation: `count` satellites spread over six planes,
    /// with records issued every two hours across the track span.
    Synthetic {
        seed: u64,
        #[serde(default = "default_sat_count")]
        count: u8,
    },
}

impl ConstellationSpec {
    fn load(&self, track: &[Waypoint]) -> Result<Vec<GpsEphemeris>, SimError> {
        match self {
            ConstellationSpec::RinexFile { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| SimError::Io { path: path.clone(), source })?;
                let nav = crate::ephemeris::parse_rinex_nav(&text)
                    .map_err(|source| SimError::Rinex { path: path.clone(), source })?;
                Ok(nav.ephemerides)
            }
            ConstellationSpec::Ephemerides { ephemerides } => Ok(ephemerides.clone()),
            ConstellationSpec::Synthetic { seed, count } => Ok(synthesize_constellation(
                *seed,
                *count,
                &track[0].time,
                &track[track.len() - 1].time,
            )),
        }
    }
}

fn default_nav_flip_probability() -> f64 {
    0.3
}

/// Receiver error models applied across a deployment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorModels {
    /// Receiver clock reading minus true time at the first capture, s.
    #[serde(default)]
    pub initial_clock_offset: f64,
    /// RTC drift, s/s. Omit to draw uniformly from the RTC tolerance band.
    #[serde(default)]
    pub clock_drift: Option<f64>,
    /// Front-end offset at the reference temperature, Hz.
    #[serde(default)]
    pub frontend_offset_at_ref: f64,
    /// Front-end offset slope, Hz per degree C.
    #[serde(default)]
    pub frontend_slope_per_c: f64,
    /// Reference temperature of the front-end model, degrees C.
    #[serde(default = "default_temperature")]
    pub frontend_ref_temperature: f64,
    /// Chance that a given satellite carries a nav-bit flip in a snapshot.
    #[serde(default = "default_nav_flip_probability")]
    pub nav_bit_flip_probability: f64,
}

impl Default for ErrorModels {
    fn default() -> Self {
        ErrorModels {
            initial_clock_offset: 0.0,
            clock_drift: None,
            frontend_offset_at_ref: 0.0,
            frontend_slope_per_c: 0.0,
            frontend_ref_temperature: default_temperature(),
            nav_bit_flip_probability: default_nav_flip_probability(),
        }
    }
}

fn default_cn0() -> f64 {
    DEFAULT_CN0_DBHZ
}

fn default_battery_start() -> u16 {
    4_050
}

fn default_battery_end() -> u16 {
    3_650
}

/// A periodic-capture deployment along a track.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeploymentScenario {
    #[serde(default)]
    pub device_id: DeviceId,
    pub track: Vec<Waypoint>,
    /// Capture interval on the receiver's own clock, s.
    pub interval: f64,
    pub constellation: ConstellationSpec,
    /// Carrier-to-noise density for every synthesized satellite, dB-Hz.
    #[serde(default = "default_cn0")]
    pub cn0_dbhz: f64,
    #[serde(default)]
    pub errors: ErrorModels,
    pub noise_seed: u64,
    /// Dataset a-priori position; defaults to the first waypoint.
    #[serde(default)]
    pub apriori: Option<Geodetic>,
    #[serde(default = "default_battery_start")]
    pub battery_start_mv: u16,
    #[serde(default = "default_battery_end")]
    pub battery_end_mv: u16,
}

/// A generated deployment: the dataset as the receiver would have stored it,
/// per-capture ground truth, and the broadcast records everything was
/// synthesized against (needed to process the dataset afterwards).
#[derive(Debug, Clone)]
pub struct Deployment {
    pub dataset: Dataset,
    pub truths: Vec<GroundTruth>,
    pub ephemerides: Vec<GpsEphemeris>,
}

/// Linear interpolation along the track; clamps beyond the ends. Longitudes
/// are interpolated directly, so tracks should not cross the antimeridian.
fn interpolate_track(track: &[Waypoint], t: &GpsTime) -> (Geodetic, f64, bool) {
    let first = &track[0];
    if track.len() == 1 || t.diff(&first.time) <= 0.0 {
        return (first.position, first.temperature, first.submerged);
    }
    let last = &track[track.len() - 1];
    if t.diff(&last.time) >= 0.0 {
        return (last.position, last.temperature, last.submerged);
    }
    let mut segment = 0;
    for (i, w) in track.iter().enumerate() {
        if t.diff(&w.time) >= 0.0 {
            segment = i;
        }
    }
    let a = &track[segment];
    let b = &track[segment + 1];
    let frac = t.diff(&a.time) / b.time.diff(&a.time);
    let lerp = |x: f64, y: f64| x + (y - x) * frac;
    let position = Geodetic::new(
        lerp(a.position.lat_deg, b.position.lat_deg),
        lerp(a.position.lon_deg, b.position.lon_deg),
        lerp(a.position.height_m, b.position.height_m),
    );
    (position, lerp(a.temperature, b.temperature), a.submerged)
}

/// Generates a whole deployment: captures scheduled on the receiver's own
/// (drifting) clock, positions interpolated along the track, front-end offset
/// following the temperature model.
///
/// Dataset timestamps are the receiver's clock readings, so they are exactly
/// `interval` apart while the true capture times drift away from them.
pub fn generate_deployment(scenario: &DeploymentScenario) -> Result<Deployment, SimError> {
    if scenario.track.is_empty() {
        return Err(SimError::EmptyTrack);
    }
    if scenario.track.windows(2).any(|w| w[1].time.diff(&w[0].time) <= 0.0) {
        return Err(SimError::NonMonotonicTrack);
    }
    if scenario.interval < 1.0 {
        return Err(SimError::IntervalTooShort(scenario.interval));
    }
    let records = scenario.constellation.load(&scenario.track)?;
    let mut by_prn: Vec<(u8, Vec<GpsEphemeris>)> = Vec::new();
    for record in &records {
        match by_prn.iter_mut().find(|(prn, _)| *prn == record.prn) {
            Some((_, list)) => list.push(*record),
            None => by_prn.push((record.prn, vec![*record])),
        }
    }
    by_prn.sort_by_key(|(prn, _)| *prn);

    let mut master = ChaCha8Rng::seed_from_u64(derive_seed(scenario.noise_seed, u64::MAX - 1));
    let tolerance = SignalConstants::default().rtc_tolerance_ppm * 1e-6;
    let drift = scenario
        .errors
        .clock_drift
        .unwrap_or_else(|| master.random_range(-tolerance..=tolerance));

    let start = scenario.track[0].time;
    let span = scenario.track[scenario.track.len() - 1].time.diff(&start);
    let captures = (span * (1.0 + drift) / scenario.interval).floor() as u64 + 1;

    let mut snapshots = Vec::with_capacity(captures as usize);
    let mut truths = Vec::with_capacity(captures as usize);
    for k in 0..captures {
        let elapsed_receiver = k as f64 * scenario.interval;
        let elapsed_true = elapsed_receiver / (1.0 + drift);
        if elapsed_true > span {
            break;
        }
        let t_k = start.add_seconds(elapsed_true);
        let (position, temperature, submerged) = interpolate_track(&scenario.track, &t_k);
        let clock_offset = scenario.errors.initial_clock_offset + drift * elapsed_true;
        let frontend_offset = scenario.errors.frontend_offset_at_ref
            + scenario.errors.frontend_slope_per_c
                * (temperature - scenario.errors.frontend_ref_temperature);
        let snapshot_seed = derive_seed(scenario.noise_seed, k);
        let mut flags = ChaCha8Rng::seed_from_u64(derive_seed(snapshot_seed, u64::MAX));
        let mut satellites = Vec::new();
        if !submerged {
            for (prn, group) in &by_prn {
                let Ok(eph) = best_ephemeris(group, *prn, &t_k, DEFAULT_VALIDITY_S) else {
                    continue;
                };
                satellites.push(ScenarioSatellite {
                    source: SatelliteSource::Ephemeris { ephemeris: *eph },
                    cn0_dbhz: scenario.cn0_dbhz,
                    nav_bit_flip: flags.random_bool(scenario.errors.nav_bit_flip_probability),
                });
            }
        }
        let fraction = if captures > 1 { k as f64 / (captures - 1) as f64 } else { 0.0 };
        let battery = f64::from(scenario.battery_start_mv)
            + (f64::from(scenario.battery_end_mv) - f64::from(scenario.battery_start_mv))
                * fraction;
        let capture = SnapshotScenario {
            truth_position: PositionSpec::Geodetic(position),
            truth_velocity: [0.0; 3],
            truth_time: t_k,
            clock_offset,
            frontend_offset,
            temperature,
            battery_mv: battery.round() as u16,
            satellites,
            noise_seed: snapshot_seed,
            device_id: scenario.device_id,
            apriori: None,
        };
        let (snapshot, truth) = synthesize_snapshot(&capture)?;
        snapshots.push(snapshot);
        truths.push(truth);
    }

    let dataset = Dataset {
        device_id: scenario.device_id,
        a_priori_position: scenario.apriori.unwrap_or(scenario.track[0].position),
        a_priori_uncertainty_m: DEFAULT_APRIORI_UNCERTAINTY_M,
        snapshots,
    };
    dataset.validate()?;
    Ok(Deployment { dataset, truths, ephemerides: records })
}

/// Any scenario file: a single capture or a whole deployment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Scenario {
    Snapshot(SnapshotScenario),
    Deployment(DeploymentScenario),
}

/// Generates a plausible GPS-like constellation: `count` satellites (clamped
/// to 1..=32) spread over six 55-degree planes, with broadcast records issued
/// every two hours from just before `start` to just after `end`. Successive
/// records of one satellite describe the same orbit, so nearest-record
/// selection is seamless across the span.
pub fn synthesize_constellation(
    seed: u64,
    count: u8,
    start: &GpsTime,
    end: &GpsTime,
) -> Vec<GpsEphemeris> {
    use crate::constants::EARTH_GRAVITATIONAL_PARAM;
    use crate::time::SECONDS_PER_WEEK;

    let count = count.clamp(1, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let start_abs = f64::from(start.week) * SECONDS_PER_WEEK + start.tow;
    let end_abs = f64::from(end.week) * SECONDS_PER_WEEK + end.tow;
    let first_epoch = ((start_abs - 3_600.0) / 7_200.0).floor() * 7_200.0;
    let last_epoch = end_abs + 3_600.0;

    let mut records = Vec::new();
    for s in 0..count {
        let plane = f64::from(s % 6);
        let slot = f64::from(s / 6);
        // Walker-style phasing: spread each plane's satellites over the full
        // circle and stagger planes by one count'th of a turn, so no two
        // planes leave an aligned gap.
        let in_plane = f64::from((u32::from(count) - u32::from(s % 6) + 5) / 6);
        let sqrt_a = (26_559_700.0 + rng.random_range(-30_000.0..30_000.0_f64)).sqrt();
        let e = rng.random_range(0.001..0.02);
        let i0 = 55f64.to_radians() + rng.random_range(-0.01..0.01);
        let omega0_base = plane * 60f64.to_radians() + rng.random_range(-0.03..0.03);
        let omega = rng.random_range(0.0..TAU);
        // Place the slot by argument of latitude (omega + M for these nearly
        // circular orbits), not by mean anomaly alone, or the random perigee
        // would scramble the spacing.
        let m0_base = slot * (TAU / in_plane) + plane * (TAU / f64::from(count)) - omega
            + rng.random_range(-0.05..0.05);
        let af0_base = rng.random_range(-5e-4..5e-4);
        let af1 = rng.random_range(-2e-11..2e-11);
        let delta_n = rng.random_range(3.5e-9..5.5e-9);
        let omega_dot = -8.1e-9 + rng.random_range(-3e-10..3e-10);
        let idot = rng.random_range(-6e-10..6e-10);
        let crs = rng.random_range(-60.0..60.0);
        let crc = rng.random_range(-300.0..300.0);
        let cuc = rng.random_range(-8e-6..8e-6);
        let cus = rng.random_range(-8e-6..8e-6);
        let cic = rng.random_range(-2e-7..2e-7);
        let cis = rng.random_range(-2e-7..2e-7);
        let tgd = rng.random_range(-1e-8..1e-8);

        let a = sqrt_a * sqrt_a;
        let n = (EARTH_GRAVITATIONAL_PARAM / (a * a * a)).sqrt() + delta_n;

        let mut epoch = first_epoch;
        while epoch <= last_epoch {
            let dt = epoch - first_epoch;
            let toe_time = GpsTime::new(0, epoch);
            let issue = ((epoch / 7_200.0) % 240.0).floor();
            records.push(GpsEphemeris {
                prn: s + 1,
                week: toe_time.week,
                toc: toe_time,
                af0: af0_base + af1 * dt,
                af1,
                af2: 0.0,
                iode: issue,
                crs,
                crc,
                delta_n,
                m0: (m0_base + n * dt + PI).rem_euclid(TAU) - PI,
                cuc,
                cus,
                e,
                sqrt_a,
                toe: toe_time.tow,
                cic,
                cis,
                omega0: omega0_base + omega_dot * dt,
                omega_dot,
                i0,
                idot,
                omega,
                codes_on_l2: 1.0,
                l2p_flag: 0.0,
                sv_accuracy: 2.0,
                sv_health: 0.0,
                tgd,
                iodc: issue,
                transmission_time: (epoch - 3_600.0).rem_euclid(SECONDS_PER_WEEK),
                fit_interval: 4.0,
            });
            epoch += 7_200.0;
        }
    }
    records
}
