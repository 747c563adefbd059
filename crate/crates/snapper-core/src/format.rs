//! Dataset wire format.
//!
//! Layout (all integers and doubles little-endian):
//!
//! ```text
//! header, 33 bytes:
//!   0   magic "SNPR"                 4 bytes
//!   4   format version (= 1)         1 byte
//!   5   device id                    8 bytes
//!   13  snapshot count               4 bytes
//!   17  a-priori latitude, degrees   8 bytes (f64)
//!   25  a-priori longitude, degrees  8 bytes (f64)
//! record, 6150 bytes, repeated `count` times:
//!   0   timestamp, ms since epoch    8 bytes
//!   8   temperature, centi-degC      2 bytes (i16)
//!   10  battery, mV                  2 bytes (u16)
//!   12  packed 1-bit samples         6138 bytes
//! ```
//!
//! Decoding is strict: a wrong magic, an unknown version, a length that does
//! not match the declared count, or field values outside the documented
//! ranges are all errors, with the failing record index where applicable.

use thiserror::Error;

use crate::bits::{pack_bits, unpack_bits};
use crate::constants::{SAMPLES_PER_SNAPSHOT, SNAPSHOT_PAYLOAD_BYTES};
use crate::geo::Geodetic;
use crate::model::{Dataset, DatasetError, DeviceId, Snapshot, DEFAULT_APRIORI_UNCERTAINTY_M};

pub const MAGIC: [u8; 4] = *b"SNPR";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 33;
pub const RECORD_HEADER_LEN: usize = 12;
pub const RECORD_LEN: usize = RECORD_HEADER_LEN + SNAPSHOT_PAYLOAD_BYTES;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("dataset does not satisfy format invariants: {0}")]
    Invalid(#[from] DatasetError),
    #[error("snapshot count {0} exceeds the 32-bit record counter")]
    TooManySnapshots(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("file is {0} bytes, shorter than the {HEADER_LEN}-byte header")]
    TruncatedHeader(usize),
    #[error("bad magic {0:02x?}, expected \"SNPR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("declared {count} records need {expected} bytes, file has {got}")]
    LengthMismatch { count: u32, expected: usize, got: usize },
    #[error("record fields are invalid: {0}")]
    Invalid(#[from] DatasetError),
}

/// Serializes a dataset. The dataset must satisfy [`Dataset::validate`]; a
/// wrong per-snapshot sample count is reported with the offending index.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>, EncodeError> {
    dataset.validate()?;
    let count =
        u32::try_from(dataset.snapshots.len()).map_err(|_| EncodeError::TooManySnapshots(dataset.snapshots.len()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + dataset.snapshots.len() * RECORD_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&dataset.device_id.0.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dataset.a_priori_position.lat_deg.to_le_bytes());
    out.extend_from_slice(&dataset.a_priori_position.lon_deg.to_le_bytes());

    for snapshot in &dataset.snapshots {
        out.extend_from_slice(&snapshot.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&snapshot.temperature_centi_c.to_le_bytes());
        out.extend_from_slice(&snapshot.battery_mv.to_le_bytes());
        let payload = pack_bits(&snapshot.samples);
        debug_assert_eq!(payload.len(), SNAPSHOT_PAYLOAD_BYTES);
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

/// Parses a dataset file. The a-priori height and uncertainty do not travel
/// in the format and come back as 0 m and the default radius.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedHeader(bytes.len()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion(bytes[4]));
    }
    let device_id = DeviceId(u64::from_le_bytes(bytes[5..13].try_into().unwrap()));
    let count = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let lat_deg = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let lon_deg = f64::from_le_bytes(bytes[25..33].try_into().unwrap());

    let expected = HEADER_LEN + count as usize * RECORD_LEN;
    if bytes.len() != expected {
        return Err(DecodeError::LengthMismatch { count, expected, got: bytes.len() });
    }

    let mut dataset = Dataset {
        device_id,
        a_priori_position: Geodetic::new(lat_deg, lon_deg, 0.0),
        a_priori_uncertainty_m: DEFAULT_APRIORI_UNCERTAINTY_M,
        snapshots: Vec::with_capacity(count as usize),
    };
    for i in 0..count as usize {
        let r = &bytes[HEADER_LEN + i * RECORD_LEN..HEADER_LEN + (i + 1) * RECORD_LEN];
        let samples = unpack_bits(&r[RECORD_HEADER_LEN..], SAMPLES_PER_SNAPSHOT)
            .expect("record payload holds exactly one snapshot");
        dataset.snapshots.push(Snapshot {
            timestamp_ms: u64::from_le_bytes(r[0..8].try_into().unwrap()),
            temperature_centi_c: i16::from_le_bytes(r[8..10].try_into().unwrap()),
            battery_mv: u16::from_le_bytes(r[10..12].try_into().unwrap()),
            samples,
        });
    }
    dataset.validate()?;
    Ok(dataset)
}
