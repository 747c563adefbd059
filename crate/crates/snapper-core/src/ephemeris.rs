//! Broadcast ephemeris handling: GPS Keplerian orbit propagation, satellite
//! clock correction, and RINEX navigation-file I/O.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{
    EARTH_GRAVITATIONAL_PARAM, EARTH_ROTATION_RATE, RELATIVISTIC_CLOCK_F, SPEED_OF_LIGHT,
};
use crate::time::GpsTime;

mod rinex;

pub use rinex::{parse_rinex_nav, write_rinex_nav, RinexNav, RinexParseError};

/// Default broadcast ephemeris validity window around toe, s.
pub const DEFAULT_VALIDITY_S: f64 = 7_200.0;

/// Newton iteration tolerance for Kepler's equation, rad.
pub const KEPLER_TOLERANCE: f64 = 1e-12;

/// Newton iteration cap for Kepler's equation.
pub const KEPLER_MAX_ITERATIONS: usize = 20;

/// Satellite position and velocity in ECEF coordinates, m and m/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// One GPS LNAV broadcast record, fields in SI units (radians, seconds,
/// meters) as carried by RINEX navigation files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsEphemeris {
    pub prn: u8,
    /// GPS week of toe (continuous numbering).
    pub week: i32,
    /// Clock reference epoch.
    pub toc: GpsTime,
    /// Clock bias, s; drift, s/s; drift rate, s/s^2.
    pub af0: f64,
    pub af1: f64,
    pub af2: f64,
    pub iode: f64,
    /// Orbit radius sine/cosine harmonic corrections, m.
    pub crs: f64,
    pub crc: f64,
    /// Mean motion difference from the computed value, rad/s.
    pub delta_n: f64,
    /// Mean anomaly at toe, rad.
    pub m0: f64,
    /// Argument-of-latitude harmonic corrections, rad.
    pub cuc: f64,
    pub cus: f64,
    /// Eccentricity.
    pub e: f64,
    /// Square root of the semi-major axis, sqrt(m).
    pub sqrt_a: f64,
    /// Ephemeris reference time, s of week.
    pub toe: f64,
    /// Inclination harmonic corrections, rad.
    pub cic: f64,
    pub cis: f64,
    /// Right ascension at the weekly epoch, rad, and its rate, rad/s.
    pub omega0: f64,
    pub omega_dot: f64,
    /// Inclination at toe, rad, and its rate, rad/s.
    pub i0: f64,
    pub idot: f64,
    /// Argument of perigee, rad.
    pub omega: f64,
    pub codes_on_l2: f64,
    pub l2p_flag: f64,
    pub sv_accuracy: f64,
    pub sv_health: f64,
    /// Group delay, s.
    pub tgd: f64,
    pub iodc: f64,
    /// Transmission time of message, s of week.
    pub transmission_time: f64,
    pub fit_interval: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EphemerisError {
    #[error("PRN {prn}: time is {age:.0} s from toe, outside the {validity:.0} s validity window")]
    Stale { prn: u8, age: f64, validity: f64 },
    #[error("no ephemeris for PRN {0}")]
    NoEphemeris(u8),
}

/// Solves Kepler's equation M = E - e sin E for the eccentric anomaly by
/// Newton iteration.
pub fn solve_kepler(m: f64, e: f64) -> f64 {
    let mut big_e = m;
    for _ in 0..KEPLER_MAX_ITERATIONS {
        let delta = (big_e - e * big_e.sin() - m) / (1.0 - e * big_e.cos());
        big_e -= delta;
        if delta.abs() < KEPLER_TOLERANCE {
            break;
        }
    }
    big_e
}

impl GpsEphemeris {
    fn toe_time(&self) -> GpsTime {
        GpsTime::new(self.week, self.toe)
    }

    /// Seconds from toe to `t`, wrapped into a half-week.
    pub fn time_from_toe(&self, t: &GpsTime) -> f64 {
        t.diff(&self.toe_time())
    }

    fn check_validity(&self, t: &GpsTime, validity: f64) -> Result<f64, EphemerisError> {
        let tk = self.time_from_toe(t);
        if tk.abs() > validity {
            return Err(EphemerisError::Stale { prn: self.prn, age: tk, validity });
        }
        Ok(tk)
    }

    /// ECEF position and velocity at GPS time `t`, failing outside the
    /// default validity window.
    pub fn state_at(&self, t: &GpsTime) -> Result<EcefState, EphemerisError> {
        self.state_at_with_validity(t, DEFAULT_VALIDITY_S)
    }

    pub fn state_at_with_validity(
        &self,
        t: &GpsTime,
        validity: f64,
    ) -> Result<EcefState, EphemerisError> {
        let tk = self.check_validity(t, validity)?;
        Ok(self.propagate(tk))
    }

    /// Keplerian propagation with harmonic corrections, evaluated `tk`
    /// seconds from toe. Velocity is the analytic derivative; it agrees with
    /// central differences of the position to well under 1e-3 m/s.
    fn propagate(&self, tk: f64) -> EcefState {
        let a = self.sqrt_a * self.sqrt_a;
        let n = (EARTH_GRAVITATIONAL_PARAM / (a * a * a)).sqrt() + self.delta_n;
        let m = self.m0 + n * tk;
        let big_e = solve_kepler(m, self.e);
        let (sin_e, cos_e) = big_e.sin_cos();

        let one_me2 = (1.0 - self.e * self.e).sqrt();
        let nu = (one_me2 * sin_e).atan2(cos_e - self.e);
        let phi = nu + self.omega;
        let (sin_2phi, cos_2phi) = (2.0 * phi).sin_cos();

        let du = self.cus * sin_2phi + self.cuc * cos_2phi;
        let dr = self.crs * sin_2phi + self.crc * cos_2phi;
        let di = self.cis * sin_2phi + self.cic * cos_2phi;

        let u = phi + du;
        let r = a * (1.0 - self.e * cos_e) + dr;
        let i = self.i0 + self.idot * tk + di;

        let (sin_u, cos_u) = u.sin_cos();
        let (sin_i, cos_i) = i.sin_cos();
        let xp = r * cos_u;
        let yp = r * sin_u;

        // Longitude of the ascending node in ECEF, absorbing Earth rotation.
        let omega_k =
            self.omega0 + (self.omega_dot - EARTH_ROTATION_RATE) * tk - EARTH_ROTATION_RATE * self.toe;
        let (sin_om, cos_om) = omega_k.sin_cos();

        let position = Vector3::new(
            xp * cos_om - yp * cos_i * sin_om,
            xp * sin_om + yp * cos_i * cos_om,
            yp * sin_i,
        );

        // Rates, by differentiating the chain above.
        let e_dot = n / (1.0 - self.e * cos_e);
        let nu_dot = e_dot * one_me2 / (1.0 - self.e * cos_e);
        let u_dot = nu_dot * (1.0 + 2.0 * (self.cus * cos_2phi - self.cuc * sin_2phi));
        let r_dot = a * self.e * sin_e * e_dot + 2.0 * nu_dot * (self.crs * cos_2phi - self.crc * sin_2phi);
        let i_dot = self.idot + 2.0 * nu_dot * (self.cis * cos_2phi - self.cic * sin_2phi);
        let omega_k_dot = self.omega_dot - EARTH_ROTATION_RATE;

        let xp_dot = r_dot * cos_u - r * u_dot * sin_u;
        let yp_dot = r_dot * sin_u + r * u_dot * cos_u;

        let velocity = Vector3::new(
            xp_dot * cos_om - yp_dot * cos_i * sin_om + yp * sin_i * sin_om * i_dot
                - position.y * omega_k_dot,
            xp_dot * sin_om + yp_dot * cos_i * cos_om - yp * sin_i * cos_om * i_dot
                + position.x * omega_k_dot,
            yp_dot * sin_i + yp * cos_i * i_dot,
        );

        EcefState { position, velocity }
    }

    /// Satellite clock correction at `t`, s: the polynomial plus the
    /// relativistic eccentricity term. Positive means the satellite clock
    /// runs ahead of GPS time.
    pub fn clock_correction(&self, t: &GpsTime) -> f64 {
        let dt = t.diff(&self.toc);
        let a = self.sqrt_a * self.sqrt_a;
        let n = (EARTH_GRAVITATIONAL_PARAM / (a * a * a)).sqrt() + self.delta_n;
        let m = self.m0 + n * self.time_from_toe(t);
        let big_e = solve_kepler(m, self.e);
        let relativistic = RELATIVISTIC_CLOCK_F * self.e * self.sqrt_a * big_e.sin();
        self.af0 + self.af1 * dt + self.af2 * dt * dt + relativistic
    }

    /// Rate of the clock correction at `t`, s/s.
    pub fn clock_drift(&self, t: &GpsTime) -> f64 {
        let dt = t.diff(&self.toc);
        let a = self.sqrt_a * self.sqrt_a;
        let n = (EARTH_GRAVITATIONAL_PARAM / (a * a * a)).sqrt() + self.delta_n;
        let m = self.m0 + n * self.time_from_toe(t);
        let big_e = solve_kepler(m, self.e);
        let e_dot = n / (1.0 - self.e * big_e.cos());
        self.af1 + 2.0 * self.af2 * dt + RELATIVISTIC_CLOCK_F * self.e * self.sqrt_a * big_e.cos() * e_dot
    }
}

/// Satellite geometry for a signal arriving at `receive_time`, expressed in
/// the ECEF frame of the receive epoch.
#[derive(Debug, Clone, Copy)]
pub struct TransmitGeometry {
    /// Satellite state at transmit time, rotated into the receive-epoch frame.
    pub state: EcefState,
    /// Geometric range from transmit event to receive event, m.
    pub range_m: f64,
    /// Range rate against a static receiver, m/s. Positive means receding.
    pub range_rate_mps: f64,
    /// Signal travel time, s.
    pub travel_time_s: f64,
    /// Satellite clock correction at transmit time, s.
    pub clock_correction_s: f64,
    /// Satellite clock drift at transmit time, s/s.
    pub clock_drift_s_per_s: f64,
}

/// Rotates an ECEF vector produced at transmit time into the frame `theta`
/// radians of Earth rotation later.
pub(crate) fn rotate_earth(v: &Vector3<f64>, theta: f64) -> Vector3<f64> {
    let (s, c) = theta.sin_cos();
    Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z)
}

/// Solves the light-time problem for a signal received at `receiver_ecef` at
/// `receive_time`: where the satellite was when it transmitted, with the
/// Earth-rotation (Sagnac) correction applied. Two fixed-point passes bring
/// the transmit time well below a nanosecond of error.
pub fn transmit_geometry(
    eph: &GpsEphemeris,
    receiver_ecef: &Vector3<f64>,
    receive_time: &GpsTime,
    validity_s: f64,
) -> Result<TransmitGeometry, EphemerisError> {
    let mut travel_time = 0.075;
    let mut state = EcefState {
        position: Vector3::zeros(),
        velocity: Vector3::zeros(),
    };
    let mut range = 0.0;
    for _ in 0..2 {
        let t_tx = receive_time.add_seconds(-travel_time);
        let raw = eph.state_at_with_validity(&t_tx, validity_s)?;
        let theta = EARTH_ROTATION_RATE * travel_time;
        state = EcefState {
            position: rotate_earth(&raw.position, theta),
            velocity: rotate_earth(&raw.velocity, theta),
        };
        range = (state.position - receiver_ecef).norm();
        travel_time = range / SPEED_OF_LIGHT;
    }
    let t_tx = receive_time.add_seconds(-travel_time);
    let unit = (state.position - receiver_ecef) / range;
    Ok(TransmitGeometry {
        state,
        range_m: range,
        range_rate_mps: unit.dot(&state.velocity),
        travel_time_s: travel_time,
        clock_correction_s: eph.clock_correction(&t_tx),
        clock_drift_s_per_s: eph.clock_drift(&t_tx),
    })
}

/// Picks the record for `prn` whose toe is nearest to `t` and inside the
/// validity window.
pub fn best_ephemeris<'a>(
    records: &'a [GpsEphemeris],
    prn: u8,
    t: &GpsTime,
    validity: f64,
) -> Result<&'a GpsEphemeris, EphemerisError> {
    let mut best: Option<(&GpsEphemeris, f64)> = None;
    for eph in records.iter().filter(|e| e.prn == prn) {
        let age = eph.time_from_toe(t).abs();
        if best.as_ref().is_none_or(|(_, b)| age < *b) {
            best = Some((eph, age));
        }
    }
    match best {
        Some((eph, age)) if age <= validity => Ok(eph),
        Some((eph, age)) => Err(EphemerisError::Stale { prn: eph.prn, age, validity }),
        None => Err(EphemerisError::NoEphemeris(prn)),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// A plausible mid-week GPS record, loosely shaped like a real broadcast.
    pub(crate) fn test_ephemeris() -> GpsEphemeris {
        GpsEphemeris {
            prn: 5,
            week: 2200,
            toc: GpsTime::new(2200, 259_200.0),
            af0: 2.5e-4,
            af1: 1.8e-12,
            af2: 0.0,
            iode: 44.0,
            crs: 23.5,
            crc: 262.4,
            delta_n: 4.3e-9,
            m0: 1.25,
            cuc: 1.2e-6,
            cus: 7.3e-6,
            e: 0.0123,
            sqrt_a: 5_153.68,
            toe: 259_200.0,
            cic: -7.5e-8,
            cis: 1.1e-7,
            omega0: -2.41,
            omega_dot: -8.1e-9,
            i0: 0.96,
            idot: 4.2e-10,
            omega: 0.72,
            codes_on_l2: 1.0,
            l2p_flag: 0.0,
            sv_accuracy: 2.0,
            sv_health: 0.0,
            tgd: 4.6e-9,
            iodc: 44.0,
            transmission_time: 252_000.0,
            fit_interval: 4.0,
        }
    }

    #[test]
    fn kepler_residual_below_tolerance_for_a_million_draws() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let m: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let e: f64 = rng.random_range(0.0..0.03);
            let big_e = solve_kepler(m, e);
            assert!((big_e - e * big_e.sin() - m).abs() < KEPLER_TOLERANCE);
        }
    }

    /// Independent two-body propagation: bisection for Kepler's equation and
    /// rotation matrices for the plane orientation, against the expanded trig
    /// in `propagate`. Harmonic corrections and rates are zeroed so both
    /// models describe the same pure ellipse.
    #[test]
    fn matches_two_body_oracle_without_corrections() {
        let mut eph = test_ephemeris();
        eph.crs = 0.0;
        eph.crc = 0.0;
        eph.cuc = 0.0;
        eph.cus = 0.0;
        eph.cic = 0.0;
        eph.cis = 0.0;
        eph.delta_n = 0.0;
        eph.idot = 0.0;
        eph.omega_dot = 0.0;

        for &dt in &[0.0, -3_600.0, 1_800.0, 7_000.0] {
            let t = GpsTime::new(eph.week, eph.toe + dt);
            let got = eph.state_at(&t).unwrap().position;

            // Oracle: solve E by bisection on [M - 1, M + 1].
            let a = eph.sqrt_a * eph.sqrt_a;
            let n = (EARTH_GRAVITATIONAL_PARAM / (a * a * a)).sqrt();
            let m = eph.m0 + n * dt;
            let (mut lo, mut hi) = (m - 1.0, m + 1.0);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if mid - eph.e * mid.sin() - m < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let big_e = 0.5 * (lo + hi);
            let nu = ((1.0 - eph.e * eph.e).sqrt() * big_e.sin()).atan2(big_e.cos() - eph.e);
            let r = a * (1.0 - eph.e * big_e.cos());
            let in_plane = Vector3::new(r * nu.cos(), r * nu.sin(), 0.0);
            let omega_k = eph.omega0 - EARTH_ROTATION_RATE * (dt + eph.toe);
            let oracle = Rotation3::from_axis_angle(&Vector3::z_axis(), omega_k)
                * Rotation3::from_axis_angle(&Vector3::x_axis(), eph.i0)
                * Rotation3::from_axis_angle(&Vector3::z_axis(), eph.omega)
                * in_plane;

            assert!(
                (got - oracle).norm() < 1e-6,
                "dt {dt}: {} m apart",
                (got - oracle).norm()
            );
        }
    }

    #[test]
    fn orbit_radius_and_speed_are_gps_like() {
        let eph = test_ephemeris();
        let state = eph.state_at(&GpsTime::new(eph.week, eph.toe + 900.0)).unwrap();
        let r = state.position.norm();
        let v = state.velocity.norm();
        assert!((2.5e7..2.8e7).contains(&r), "radius {r}");
        // Earth-fixed speed: inertial ~3.9 km/s minus up to omega_e * r.
        assert!((1_900.0..4_500.0).contains(&v), "speed {v}");
    }

    #[test]
    fn velocity_matches_central_difference() {
        let eph = test_ephemeris();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let dt: f64 = rng.random_range(-7_000.0..7_000.0);
            let t = GpsTime::new(eph.week, eph.toe + dt);
            let state = eph.state_at(&t).unwrap();
            let step = 0.1;
            let ahead = eph.state_at(&t.add_seconds(step)).unwrap().position;
            let behind = eph.state_at(&t.add_seconds(-step)).unwrap().position;
            let fd = (ahead - behind) / (2.0 * step);
            let err = (state.velocity - fd).norm();
            assert!(err < 1e-3, "dt {dt}: velocity error {err}");
        }
    }

    #[test]
    fn clock_correction_terms() {
        let eph = test_ephemeris();
        // At toc with a circular-orbit record the polynomial dominates.
        let mut circular = eph;
        circular.e = 0.0;
        let at_toc = circular.clock_correction(&circular.toc);
        assert!((at_toc - circular.af0).abs() < 1e-15);

        // One hour later the af1 term has accumulated.
        let later = circular.toc.add_seconds(3_600.0);
        let drifted = circular.clock_correction(&later);
        assert!((drifted - (circular.af0 + circular.af1 * 3_600.0)).abs() < 1e-15);

        // The relativistic term has amplitude F e sqrt(a) and flips sign with
        // the eccentric anomaly.
        let full = eph.clock_correction(&eph.toc);
        let rel = full - (eph.af0);
        let bound = RELATIVISTIC_CLOCK_F.abs() * eph.e * eph.sqrt_a;
        assert!(rel.abs() <= bound * 1.01, "relativistic part {rel}");

        // Drift matches a finite difference of the correction.
        let t = eph.toc.add_seconds(500.0);
        let h = 0.5;
        let fd = (eph.clock_correction(&t.add_seconds(h)) - eph.clock_correction(&t.add_seconds(-h)))
            / (2.0 * h);
        assert!((eph.clock_drift(&t) - fd).abs() < 1e-16);
    }

    #[test]
    fn stale_ephemeris_is_an_error() {
        let eph = test_ephemeris();
        let t = GpsTime::new(eph.week, eph.toe + DEFAULT_VALIDITY_S + 1.0);
        assert!(matches!(eph.state_at(&t), Err(EphemerisError::Stale { prn: 5, .. })));
        let records = vec![eph];
        assert!(matches!(
            best_ephemeris(&records, 5, &t, DEFAULT_VALIDITY_S),
            Err(EphemerisError::Stale { .. })
        ));
        assert!(matches!(
            best_ephemeris(&records, 6, &t, DEFAULT_VALIDITY_S),
            Err(EphemerisError::NoEphemeris(6))
        ));
    }

    #[test]
    fn best_ephemeris_prefers_nearest_toe() {
        let mut a = test_ephemeris();
        a.toe = 252_000.0;
        a.iode = 1.0;
        let mut b = test_ephemeris();
        b.toe = 259_200.0;
        b.iode = 2.0;
        let records = vec![a, b];
        let t = GpsTime::new(2200, 258_000.0);
        let picked = best_ephemeris(&records, 5, &t, DEFAULT_VALIDITY_S).unwrap();
        assert_eq!(picked.iode, 2.0);
    }

    #[test]
    fn transmit_geometry_is_self_consistent() {
        let eph = test_ephemeris();
        let receiver = crate::geo::geodetic_to_ecef(&crate::geo::Geodetic::new(12.0, 44.0, 50.0));
        let t = GpsTime::new(2200, 259_500.0);
        let g = transmit_geometry(&eph, &receiver, &t, DEFAULT_VALIDITY_S).unwrap();

        // The returned state, range, and travel time must describe the same
        // event: range = |state - receiver| = c * travel_time.
        let r = (g.state.position - receiver).norm();
        assert!((r - g.range_m).abs() < 1e-3, "range mismatch {}", r - g.range_m);
        assert!(
            (g.range_m - SPEED_OF_LIGHT * g.travel_time_s).abs() < 1e-3,
            "travel time mismatch"
        );
        assert!((0.05..0.11).contains(&g.travel_time_s), "travel time {}", g.travel_time_s);

        // Earth turns a few microradians during the flight; skipping the
        // frame rotation moves the range by metres to tens of metres.
        let raw = eph.state_at(&t.add_seconds(-g.travel_time_s)).unwrap();
        let unrotated = (raw.position - receiver).norm();
        assert!((unrotated - g.range_m).abs() > 1.0, "Sagnac term too small");
    }

    #[test]
    fn range_rate_matches_receive_time_difference() {
        let eph = test_ephemeris();
        let receiver = crate::geo::geodetic_to_ecef(&crate::geo::Geodetic::new(-35.0, 149.0, 600.0));
        let t = GpsTime::new(2200, 258_700.0);
        let g = transmit_geometry(&eph, &receiver, &t, DEFAULT_VALIDITY_S).unwrap();
        let h = 0.5;
        let before = transmit_geometry(&eph, &receiver, &t.add_seconds(-h), DEFAULT_VALIDITY_S)
            .unwrap()
            .range_m;
        let after = transmit_geometry(&eph, &receiver, &t.add_seconds(h), DEFAULT_VALIDITY_S)
            .unwrap()
            .range_m;
        let numeric = (after - before) / (2.0 * h);
        // The analytic rate ignores d(travel time)/dt, a part in c of itself.
        assert!(
            (numeric - g.range_rate_mps).abs() < 0.01,
            "range rate {} vs numeric {}",
            g.range_rate_mps,
            numeric
        );
    }
}
