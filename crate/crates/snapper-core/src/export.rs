//! Track assembly and export.
//!
//! A [`Track`] is the presentable end product of processing: solved fixes in
//! time order, rejected solutions already excluded. The serializers here
//! turn one track into the four interchange formats downstream GIS tooling
//! expects (CSV, JSON, GPX 1.1, KML), all deterministic byte-for-byte for
//! the same input: fixed field order, fixed float precision, no wall-clock
//! or locale leakage.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::navigation::{Confidence, Fix};

/// One exported fix: the solution plus the capture context that rides along
/// into the files.
#[derive(Debug, Clone, Copy)]
pub struct TrackPoint {
    pub fix: Fix,
    pub temperature_c: f64,
    pub battery_v: f64,
}

/// An ordered, filtered sequence of fixes. Construction enforces the track
/// invariants: no rejected fixes, times strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct Track {
    points: Vec<TrackPoint>,
}

impl Track {
    /// Builds a track from solved points: rejected fixes are dropped, and
    /// any point whose solved time does not advance past its predecessor is
    /// dropped with it (solve noise cannot reorder healthy fixes captured
    /// at least a second apart, so anything out of order is unhealthy).
    pub fn from_points(points: Vec<TrackPoint>) -> Track {
        let mut kept: Vec<TrackPoint> = Vec::with_capacity(points.len());
        for point in points {
            if point.fix.confidence == Confidence::Rejected {
                continue;
            }
            if let Some(last) = kept.last() {
                if point.fix.solved_unix_ms <= last.fix.solved_unix_ms {
                    continue;
                }
            }
            kept.push(point);
        }
        Track { points: kept }
    }

    pub fn points(&self) -> &[TrackPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// The export formats and their MIME types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
    Gpx,
    Kml,
}

impl ExportFormat {
    pub const ALL: [ExportFormat; 4] =
        [ExportFormat::Csv, ExportFormat::Json, ExportFormat::Gpx, ExportFormat::Kml];

    pub fn mime_type(&self) -> &'static str {
        match self {
            ExportFormat::Csv => "text/csv",
            ExportFormat::Json => "application/json",
            ExportFormat::Gpx => "application/gpx+xml",
            ExportFormat::Kml => "application/vnd.google-earth.kml+xml",
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
            ExportFormat::Gpx => "gpx",
            ExportFormat::Kml => "kml",
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown export format {0:?}, expected csv, json, gpx, or kml")]
pub struct UnknownFormat(pub String);

impl FromStr for ExportFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            "gpx" => Ok(ExportFormat::Gpx),
            "kml" => Ok(ExportFormat::Kml),
            other => Err(UnknownFormat(other.to_string())),
        }
    }
}

/// Serializes a track into the requested format.
pub fn export_track(track: &Track, format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::Csv => to_csv(track),
        ExportFormat::Json => to_json(track),
        ExportFormat::Gpx => to_gpx(track),
        ExportFormat::Kml => to_kml(track),
    }
}

/// Millisecond-resolution UTC timestamp, e.g. `2026-02-01T12:00:00.000Z`.
fn iso8601(unix_ms: i64) -> String {
    DateTime::from_timestamp_millis(unix_ms)
        .expect("solved times are within chrono's range")
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn to_csv(track: &Track) -> Vec<u8> {
    let mut out = String::from("time,lat,lon,confidence,temperature_c,battery_v\n");
    for p in track.points() {
        out.push_str(&format!(
            "{},{:.7},{:.7},{},{:.2},{:.3}\n",
            iso8601(p.fix.solved_unix_ms),
            p.fix.position.lat_deg,
            p.fix.position.lon_deg,
            p.fix.confidence,
            p.temperature_c,
            p.battery_v,
        ));
    }
    out.into_bytes()
}

#[derive(Serialize)]
struct JsonPoint {
    time: String,
    lat_deg: f64,
    lon_deg: f64,
    height_m: f64,
    solved_unix_ms: i64,
    coarse_time_correction_s: f64,
    common_bias_m: f64,
    residual_rms_m: f64,
    n_sats: usize,
    confidence: Confidence,
    temperature_c: f64,
    battery_v: f64,
}

fn to_json(track: &Track) -> Vec<u8> {
    let points: Vec<JsonPoint> = track
        .points()
        .iter()
        .map(|p| JsonPoint {
            time: iso8601(p.fix.solved_unix_ms),
            lat_deg: p.fix.position.lat_deg,
            lon_deg: p.fix.position.lon_deg,
            height_m: p.fix.position.height_m,
            solved_unix_ms: p.fix.solved_unix_ms,
            coarse_time_correction_s: p.fix.coarse_time_correction_s,
            common_bias_m: p.fix.common_bias_m,
            residual_rms_m: p.fix.residual_rms_m,
            n_sats: p.fix.n_sats,
            confidence: p.fix.confidence,
            temperature_c: p.temperature_c,
            battery_v: p.battery_v,
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&points).expect("fix fields serialize");
    bytes.push(b'\n');
    bytes
}

fn to_gpx(track: &Track) -> Vec<u8> {
    let mut out = String::from(concat!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
        "<gpx version=\"1.1\" creator=\"snapper\" ",
        "xmlns=\"http://www.topografix.com/GPX/1/1\" ",
        "xmlns:xsi=\"http://www.w3.org/2001/XMLSchema-instance\" ",
        "xsi:schemaLocation=\"http://www.topografix.com/GPX/1/1 ",
        "http://www.topografix.com/GPX/1/1/gpx.xsd\">\n",
        "  <trk>\n",
        "    <name>snapper track</name>\n",
        "    <trkseg>\n",
    ));
    for p in track.points() {
        // wptType is a schema sequence: ele must precede time.
        out.push_str(&format!(
            concat!(
                "      <trkpt lat=\"{:.7}\" lon=\"{:.7}\">\n",
                "        <ele>{:.2}</ele>\n",
                "        <time>{}</time>\n",
                "      </trkpt>\n",
            ),
            p.fix.position.lat_deg,
            p.fix.position.lon_deg,
            p.fix.position.height_m,
            iso8601(p.fix.solved_unix_ms),
        ));
    }
    out.push_str("    </trkseg>\n  </trk>\n</gpx>\n");
    out.into_bytes()
}

fn to_kml(track: &Track) -> Vec<u8> {
    let mut out = String::from(concat!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
        "<kml xmlns=\"http://www.opengis.net/kml/2.2\">\n",
        "  <Document>\n",
        "    <name>snapper track</name>\n",
        "    <Placemark>\n",
        "      <name>path</name>\n",
        "      <LineString>\n",
        "        <tessellate>1</tessellate>\n",
        "        <coordinates>\n",
    ));
    for p in track.points() {
        out.push_str(&format!(
            "          {:.7},{:.7},{:.2}\n",
            p.fix.position.lon_deg, p.fix.position.lat_deg, p.fix.position.height_m,
        ));
    }
    out.push_str(concat!("        </coordinates>\n", "      </LineString>\n", "    </Placemark>\n",));
    for (i, p) in track.points().iter().enumerate() {
        out.push_str(&format!(
            concat!(
                "    <Placemark>\n",
                "      <name>fix {}</name>\n",
                "      <TimeStamp><when>{}</when></TimeStamp>\n",
                "      <Point><coordinates>{:.7},{:.7},{:.2}</coordinates></Point>\n",
                "    </Placemark>\n",
            ),
            i + 1,
            iso8601(p.fix.solved_unix_ms),
            p.fix.position.lon_deg,
            p.fix.position.lat_deg,
            p.fix.position.height_m,
        ));
    }
    out.push_str("  </Document>\n</kml>\n");
    out.into_bytes()
}
