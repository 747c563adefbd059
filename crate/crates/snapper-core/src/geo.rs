//! WGS-84 geodetic/ECEF conversions and local-frame geometry.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::constants::{WGS84_FLATTENING, WGS84_SEMI_MAJOR_AXIS};

/// A geodetic position on the WGS-84 ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geodetic {
    pub lat_deg: f64,
    pub lon_deg: f64,
    #[serde(default)]
    pub height_m: f64,
}

impl Geodetic {
    pub fn new(lat_deg: f64, lon_deg: f64, height_m: f64) -> Self {
        Geodetic { lat_deg, lon_deg, height_m }
    }
}

/// Geodetic position to ECEF coordinates, m.
pub fn geodetic_to_ecef(g: &Geodetic) -> Vector3<f64> {
    let lat = g.lat_deg.to_radians();
    let lon = g.lon_deg.to_radians();
    let e2 = WGS84_FLATTENING * (2.0 - WGS84_FLATTENING);
    let n = WGS84_SEMI_MAJOR_AXIS / (1.0 - e2 * lat.sin().powi(2)).sqrt();
    Vector3::new(
        (n + g.height_m) * lat.cos() * lon.cos(),
        (n + g.height_m) * lat.cos() * lon.sin(),
        (n * (1.0 - e2) + g.height_m) * lat.sin(),
    )
}

/// ECEF coordinates to geodetic position.
///
/// Fixed-point iteration on the latitude; converges to sub-millimeter in a
/// handful of rounds for any terrestrial or orbital point.
pub fn ecef_to_geodetic(p: &Vector3<f64>) -> Geodetic {
    let e2 = WGS84_FLATTENING * (2.0 - WGS84_FLATTENING);
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let lon = p.y.atan2(p.x);
    if rho < 1e-9 {
        // On the polar axis the longitude is arbitrary.
        let lat = if p.z >= 0.0 { 90.0 } else { -90.0 };
        let b = WGS84_SEMI_MAJOR_AXIS * (1.0 - WGS84_FLATTENING);
        return Geodetic::new(lat, 0.0, p.z.abs() - b);
    }
    let mut lat = (p.z / (rho * (1.0 - e2))).atan();
    let mut h = 0.0;
    for _ in 0..8 {
        let n = WGS84_SEMI_MAJOR_AXIS / (1.0 - e2 * lat.sin().powi(2)).sqrt();
        h = rho / lat.cos() - n;
        lat = (p.z / (rho * (1.0 - e2 * n / (n + h)))).atan();
    }
    Geodetic::new(lat.to_degrees(), lon.to_degrees(), h)
}

/// Rotation from ECEF deltas to local east/north/up axes at `origin`.
pub fn enu_rotation(origin: &Geodetic) -> Matrix3<f64> {
    let lat = origin.lat_deg.to_radians();
    let lon = origin.lon_deg.to_radians();
    Matrix3::new(
        -lon.sin(),
        lon.cos(),
        0.0,
        -lat.sin() * lon.cos(),
        -lat.sin() * lon.sin(),
        lat.cos(),
        lat.cos() * lon.cos(),
        lat.cos() * lon.sin(),
        lat.sin(),
    )
}

/// ECEF point expressed as east/north/up offsets from `origin`.
pub fn ecef_to_enu(origin: &Geodetic, p: &Vector3<f64>) -> Vector3<f64> {
    enu_rotation(origin) * (p - geodetic_to_ecef(origin))
}

/// Elevation and azimuth of `target` as seen from `observer`, degrees.
/// Azimuth is clockwise from north.
pub fn elevation_azimuth(observer: &Geodetic, target: &Vector3<f64>) -> (f64, f64) {
    let enu = ecef_to_enu(observer, target);
    let horizontal = (enu.x * enu.x + enu.y * enu.y).sqrt();
    let el = enu.z.atan2(horizontal).to_degrees();
    let az = enu.x.atan2(enu.y).to_degrees();
    (el, if az < 0.0 { az + 360.0 } else { az })
}

/// Horizontal (east/north) distance between two geodetic points, m.
pub fn horizontal_distance(a: &Geodetic, b: &Geodetic) -> f64 {
    let enu = ecef_to_enu(a, &geodetic_to_ecef(b));
    (enu.x * enu.x + enu.y * enu.y).sqrt()
}
