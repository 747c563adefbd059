//! Dataset persistence and processing: the cloud side of the system.
//!
//! Uploaded datasets are content-addressed (the id is the SHA-256 of the
//! file bytes, so re-uploads are idempotent) and live in a relational store
//! with four tables: `datasets`, `snapshots`, `fixes`, and `freq_models`.
//! The schema is the contract; SQLite is the engine behind it.
//!
//! Processing walks one dataset in timestamp order: estimate the front-end
//! frequency offset on the first few snapshots, then per snapshot predict
//! the offset from temperature, acquire each predicted-visible satellite in
//! a narrow assisted Doppler window, reconstruct full pseudoranges, solve
//! the coarse-time problem, and feed accepted fixes back into the receiver
//! clock-error chain that seeds the next snapshot. Fixes and progress are
//! committed per snapshot, and the `complete` status is only ever written
//! after the last fix, so an interrupted run can never leave a complete
//! dataset with missing fixes.
//!
//! Everything is deterministic: the same dataset bytes, broadcast records,
//! and options yield byte-identical tracks in every export format.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rusqlite::{Connection, OptionalExtension, params};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::{
    AcquisitionResult, AcquisitionSettings, DEFAULT_DETECTION_THRESHOLD, precompute_codes,
    acquire_with_cache,
};
use crate::bits::{pack_bits, unpack_bits};
use crate::calibration::{
    CalibrationError, ClockModel, DEFAULT_CALIBRATION_SNAPSHOTS, FrequencyModel,
    estimate_frontend_offset, predict_doppler,
};
use crate::constants::{SAMPLES_PER_SNAPSHOT, SignalConstants};
use crate::ephemeris::{DEFAULT_VALIDITY_S, GpsEphemeris, best_ephemeris, transmit_geometry};
use crate::export::{ExportFormat, Track, TrackPoint, export_track};
use crate::format::decode_dataset;
use crate::geo::{Geodetic, elevation_azimuth, geodetic_to_ecef};
use crate::model::{Dataset, DeviceId, Snapshot};
use crate::navigation::{
    Confidence, DEFAULT_MAX_RMS_M, Fix, Weighting, classify_confidence, reconstruct_pseudoranges,
    solve_coarse_time,
};
use crate::time::GpsTime;

/// Dataset lifecycle. Forward transitions are uploaded -> processing ->
/// {complete, failed}; crash recovery may reset processing back to uploaded
/// after discarding partial results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStatus {
    Uploaded,
    Processing,
    Complete,
    Failed,
}

impl std::fmt::Display for DatasetStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetStatus::Uploaded => "uploaded",
            DatasetStatus::Processing => "processing",
            DatasetStatus::Complete => "complete",
            DatasetStatus::Failed => "failed",
        })
    }
}

impl std::str::FromStr for DatasetStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uploaded" => Ok(DatasetStatus::Uploaded),
            "processing" => Ok(DatasetStatus::Processing),
            "complete" => Ok(DatasetStatus::Complete),
            "failed" => Ok(DatasetStatus::Failed),
            other => Err(format!("unknown dataset status {other:?}")),
        }
    }
}

/// One stored dataset as the API reports it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// SHA-256 of the uploaded file, hex.
    pub id: String,
    pub device_id: u64,
    pub status: DatasetStatus,
    pub upload_unix_ms: i64,
    pub snapshot_count: usize,
    /// Snapshots processed so far; equals `snapshot_count` when complete.
    pub processed_count: usize,
    pub failure_reason: Option<String>,
    pub a_priori_position: Geodetic,
    pub a_priori_uncertainty_m: f64,
    /// Optional per-upload callback POSTed `{id, status}` on completion.
    pub webhook_url: Option<String>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset rejected: {0}")]
    Decode(#[from] crate::format::DecodeError),
    #[error("storage: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("unknown dataset {0}")]
    UnknownDataset(String),
    #[error("dataset {id} is {status}, expected {expected}")]
    WrongStatus { id: String, status: DatasetStatus, expected: DatasetStatus },
    #[error("processing failed: {0}")]
    ProcessingFailed(String),
    #[error("processing interrupted after {0} snapshots")]
    Interrupted(usize),
    #[error(transparent)]
    UnknownFormat(#[from] crate::export::UnknownFormat),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS datasets (
    id                   TEXT PRIMARY KEY,
    device_id            INTEGER NOT NULL,
    status               TEXT NOT NULL,
    upload_unix_ms       INTEGER NOT NULL,
    snapshot_count       INTEGER NOT NULL,
    processed_count      INTEGER NOT NULL DEFAULT 0,
    failure_reason       TEXT,
    apriori_lat_deg      REAL NOT NULL,
    apriori_lon_deg      REAL NOT NULL,
    apriori_height_m     REAL NOT NULL,
    apriori_uncertainty_m REAL NOT NULL,
    webhook_url          TEXT
);
CREATE TABLE IF NOT EXISTS snapshots (
    dataset_id           TEXT NOT NULL REFERENCES datasets(id) ON DELETE CASCADE,
    idx                  INTEGER NOT NULL,
    timestamp_ms         INTEGER NOT NULL,
    temperature_centi_c  INTEGER NOT NULL,
    battery_mv           INTEGER NOT NULL,
    payload              BLOB NOT NULL,
    PRIMARY KEY (dataset_id, idx)
);
CREATE TABLE IF NOT EXISTS fixes (
    dataset_id           TEXT NOT NULL REFERENCES datasets(id) ON DELETE CASCADE,
    snapshot_idx         INTEGER NOT NULL,
    solved_unix_ms       INTEGER NOT NULL,
    lat_deg              REAL NOT NULL,
    lon_deg              REAL NOT NULL,
    height_m             REAL NOT NULL,
    coarse_time_correction_s REAL NOT NULL,
    common_bias_m        REAL NOT NULL,
    residual_rms_m       REAL NOT NULL,
    n_sats               INTEGER NOT NULL,
    confidence           TEXT NOT NULL,
    temperature_centi_c  INTEGER NOT NULL,
    battery_mv           INTEGER NOT NULL,
    PRIMARY KEY (dataset_id, snapshot_idx)
);
CREATE TABLE IF NOT EXISTS freq_models (
    device_id            INTEGER PRIMARY KEY,
    offset_at_ref_hz     REAL NOT NULL,
    slope_hz_per_degc    REAL NOT NULL,
    ref_temperature_c    REAL NOT NULL,
    updated_unix_ms      INTEGER NOT NULL
);
";

/// The snapshot-and-track store.
pub struct Store {
    conn: Connection,
}

impl Store {
    /// Opens (creating if needed) the store rooted at `dir`.
    pub fn open(dir: &Path) -> Result<Store, PipelineError> {
        std::fs::create_dir_all(dir)
            .map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
        Store::init(Connection::open(dir.join("snapper.db"))?)
    }

    /// A throwaway in-memory store for tests.
    pub fn in_memory() -> Result<Store, PipelineError> {
        Store::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Store, PipelineError> {
        conn.pragma_update(None, "journal_mode", "WAL").ok();
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store { conn })
    }

    /// Stores an uploaded dataset file. The id is the SHA-256 of the bytes,
    /// so ingesting the same content twice returns the existing record and
    /// stores nothing new; a file that fails to decode persists nothing.
    pub fn ingest(
        &mut self,
        bytes: &[u8],
        webhook_url: Option<&str>,
        upload_unix_ms: i64,
    ) -> Result<DatasetRecord, PipelineError> {
        let dataset = decode_dataset(bytes).map_err(PipelineError::Decode)?;
        let id = hex_digest(bytes);
        if let Some(existing) = self.get(&id)? {
            return Ok(existing);
        }
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO datasets (id, device_id, status, upload_unix_ms, snapshot_count,
                 processed_count, apriori_lat_deg, apriori_lon_deg, apriori_height_m,
                 apriori_uncertainty_m, webhook_url)
             VALUES (?1, ?2, 'uploaded', ?3, ?4, 0, ?5, ?6, ?7, ?8, ?9)",
            params![
                id,
                dataset.device_id.0 as i64,
                upload_unix_ms,
                dataset.snapshots.len() as i64,
                dataset.a_priori_position.lat_deg,
                dataset.a_priori_position.lon_deg,
                dataset.a_priori_position.height_m,
                dataset.a_priori_uncertainty_m,
                webhook_url,
            ],
        )?;
        for (idx, snapshot) in dataset.snapshots.iter().enumerate() {
            tx.execute(
                "INSERT INTO snapshots (dataset_id, idx, timestamp_ms, temperature_centi_c,
                     battery_mv, payload)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![
                    id,
                    idx as i64,
                    snapshot.timestamp_ms as i64,
                    snapshot.temperature_centi_c,
                    snapshot.battery_mv,
                    pack_bits(&snapshot.samples),
                ],
            )?;
        }
        tx.commit()?;
        self.dataset(&id)
    }

    fn get(&self, id: &str) -> Result<Option<DatasetRecord>, PipelineError> {
        let record = self
            .conn
            .query_row(
                "SELECT id, device_id, status, upload_unix_ms, snapshot_count, processed_count,
                        failure_reason, apriori_lat_deg, apriori_lon_deg, apriori_height_m,
                        apriori_uncertainty_m, webhook_url
                 FROM datasets WHERE id = ?1",
                params![id],
                row_to_record,
            )
            .optional()?;
        Ok(record)
    }

    /// Looks a dataset up by id.
    pub fn dataset(&self, id: &str) -> Result<DatasetRecord, PipelineError> {
        self.get(id)?.ok_or_else(|| PipelineError::UnknownDataset(id.to_string()))
    }

    /// All dataset records, oldest upload first.
    pub fn list(&self) -> Result<Vec<DatasetRecord>, PipelineError> {
        let mut stmt = self.conn.prepare(
            "SELECT id, device_id, status, upload_unix_ms, snapshot_count, processed_count,
                    failure_reason, apriori_lat_deg, apriori_lon_deg, apriori_height_m,
                    apriori_uncertainty_m, webhook_url
             FROM datasets ORDER BY upload_unix_ms, id",
        )?;
        let rows = stmt.query_map([], row_to_record)?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row?);
        }
        Ok(out)
    }

    /// Reassembles the uploaded dataset from its stored rows.
    pub fn load_dataset(&self, id: &str) -> Result<Dataset, PipelineError> {
        let record = self.dataset(id)?;
        let mut stmt = self.conn.prepare(
            "SELECT timestamp_ms, temperature_centi_c, battery_mv, payload
             FROM snapshots WHERE dataset_id = ?1 ORDER BY idx",
        )?;
        let rows = stmt.query_map(params![id], |row| {
            let payload: Vec<u8> = row.get(3)?;
            Ok(Snapshot {
                timestamp_ms: row.get::<_, i64>(0)? as u64,
                temperature_centi_c: row.get(1)?,
                battery_mv: row.get(2)?,
                samples: unpack_bits(&payload, SAMPLES_PER_SNAPSHOT)
                    .expect("stored payloads hold exactly one snapshot"),
            })
        })?;
        let mut snapshots = Vec::with_capacity(record.snapshot_count);
        for row in rows {
            snapshots.push(row?);
        }
        Ok(Dataset {
            device_id: DeviceId(record.device_id),
            a_priori_position: record.a_priori_position,
            a_priori_uncertainty_m: record.a_priori_uncertainty_m,
            snapshots,
        })
    }

    /// Moves uploaded -> processing.
    fn begin_processing(&mut self, id: &str) -> Result<(), PipelineError> {
        self.transition(id, DatasetStatus::Uploaded, DatasetStatus::Processing, None)
    }

    /// Moves processing -> complete.
    fn complete(&mut self, id: &str) -> Result<(), PipelineError> {
        self.transition(id, DatasetStatus::Processing, DatasetStatus::Complete, None)
    }

    /// Moves processing -> failed with the reason.
    fn fail(&mut self, id: &str, reason: &str) -> Result<(), PipelineError> {
        self.transition(id, DatasetStatus::Processing, DatasetStatus::Failed, Some(reason))
    }

    /// Conditional, atomic status change: when two workers race for the
    /// same dataset, exactly one UPDATE matches and the loser gets
    /// [`PipelineError::WrongStatus`].
    fn transition(
        &mut self,
        id: &str,
        from: DatasetStatus,
        to: DatasetStatus,
        reason: Option<&str>,
    ) -> Result<(), PipelineError> {
        let changed = self.conn.execute(
            "UPDATE datasets SET status = ?2, failure_reason = ?3
             WHERE id = ?1 AND status = ?4",
            params![id, to.to_string(), reason, from.to_string()],
        )?;
        if changed == 0 {
            let record = self.dataset(id)?;
            return Err(PipelineError::WrongStatus {
                id: id.to_string(),
                status: record.status,
                expected: from,
            });
        }
        Ok(())
    }

    /// The oldest dataset still waiting to be processed, if any.
    pub fn next_uploaded(&self) -> Result<Option<String>, PipelineError> {
        let id = self
            .conn
            .query_row(
                "SELECT id FROM datasets WHERE status = 'uploaded'
                 ORDER BY upload_unix_ms, id LIMIT 1",
                [],
                |row| row.get(0),
            )
            .optional()?;
        Ok(id)
    }

    /// Resets datasets stranded in `processing` by a crash: partial fixes
    /// are discarded and the dataset goes back to `uploaded` for a clean
    /// rerun. Returns the ids that were reset.
    pub fn recover_interrupted(&mut self) -> Result<Vec<String>, PipelineError> {
        let ids: Vec<String> = {
            let mut stmt =
                self.conn.prepare("SELECT id FROM datasets WHERE status = 'processing'")?;
            let rows = stmt.query_map([], |row| row.get(0))?;
            rows.collect::<Result<_, _>>()?
        };
        for id in &ids {
            let tx = self.conn.transaction()?;
            tx.execute("DELETE FROM fixes WHERE dataset_id = ?1", params![id])?;
            tx.execute(
                "UPDATE datasets SET status = 'uploaded', processed_count = 0,
                     failure_reason = NULL WHERE id = ?1",
                params![id],
            )?;
            tx.commit()?;
        }
        Ok(ids)
    }

    /// Writes one solved fix and bumps progress in the same transaction.
    fn record_fix(
        &mut self,
        id: &str,
        snapshot_idx: usize,
        fix: &Fix,
        temperature_centi_c: i16,
        battery_mv: u16,
    ) -> Result<(), PipelineError> {
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT OR REPLACE INTO fixes (dataset_id, snapshot_idx, solved_unix_ms, lat_deg,
                 lon_deg, height_m, coarse_time_correction_s, common_bias_m, residual_rms_m,
                 n_sats, confidence, temperature_centi_c, battery_mv)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13)",
            params![
                id,
                snapshot_idx as i64,
                fix.solved_unix_ms,
                fix.position.lat_deg,
                fix.position.lon_deg,
                fix.position.height_m,
                fix.coarse_time_correction_s,
                fix.common_bias_m,
                fix.residual_rms_m,
                fix.n_sats as i64,
                fix.confidence.to_string(),
                temperature_centi_c,
                battery_mv,
            ],
        )?;
        tx.execute(
            "UPDATE datasets SET processed_count = ?2 WHERE id = ?1",
            params![id, (snapshot_idx + 1) as i64],
        )?;
        tx.commit()?;
        Ok(())
    }

    /// Bumps progress past a snapshot that produced no fix.
    fn record_progress(&mut self, id: &str, processed: usize) -> Result<(), PipelineError> {
        self.conn.execute(
            "UPDATE datasets SET processed_count = ?2 WHERE id = ?1",
            params![id, processed as i64],
        )?;
        Ok(())
    }

    /// The stored track of a dataset: accepted fixes in snapshot order.
    pub fn track(&self, id: &str) -> Result<Track, PipelineError> {
        self.dataset(id)?;
        let mut stmt = self.conn.prepare(
            "SELECT solved_unix_ms, lat_deg, lon_deg, height_m, coarse_time_correction_s,
                    common_bias_m, residual_rms_m, n_sats, confidence, temperature_centi_c,
                    battery_mv
             FROM fixes WHERE dataset_id = ?1 ORDER BY snapshot_idx",
        )?;
        let rows = stmt.query_map(params![id], |row| {
            let confidence: String = row.get(8)?;
            let temperature_centi_c: i16 = row.get(9)?;
            let battery_mv: u16 = row.get(10)?;
            Ok(TrackPoint {
                fix: Fix {
                    solved_unix_ms: row.get(0)?,
                    position: Geodetic::new(row.get(1)?, row.get(2)?, row.get(3)?),
                    coarse_time_correction_s: row.get(4)?,
                    common_bias_m: row.get(5)?,
                    residual_rms_m: row.get(6)?,
                    n_sats: row.get::<_, i64>(7)? as usize,
                    confidence: confidence.parse().expect("store holds valid confidence"),
                },
                temperature_c: f64::from(temperature_centi_c) / 100.0,
                battery_v: f64::from(battery_mv) / 1_000.0,
            })
        })?;
        let mut points = Vec::new();
        for row in rows {
            points.push(row?);
        }
        Ok(Track::from_points(points))
    }

    /// Serializes a complete dataset's track; anything not yet complete is
    /// refused so callers never see partial tracks.
    pub fn export(&self, id: &str, format: ExportFormat) -> Result<Vec<u8>, PipelineError> {
        let record = self.dataset(id)?;
        if record.status != DatasetStatus::Complete {
            return Err(PipelineError::WrongStatus {
                id: id.to_string(),
                status: record.status,
                expected: DatasetStatus::Complete,
            });
        }
        Ok(export_track(&self.track(id)?, format))
    }

    /// The stored per-device frequency model, if any.
    pub fn frequency_model(&self, device_id: u64) -> Result<Option<FrequencyModel>, PipelineError> {
        let model = self
            .conn
            .query_row(
                "SELECT offset_at_ref_hz, slope_hz_per_degc, ref_temperature_c
                 FROM freq_models WHERE device_id = ?1",
                params![device_id as i64],
                |row| {
                    Ok(FrequencyModel {
                        offset_at_ref_hz: row.get(0)?,
                        slope_hz_per_degc: row.get(1)?,
                        ref_temperature_c: row.get(2)?,
                    })
                },
            )
            .optional()?;
        Ok(model)
    }

    pub fn save_frequency_model(
        &mut self,
        device_id: u64,
        model: &FrequencyModel,
        updated_unix_ms: i64,
    ) -> Result<(), PipelineError> {
        self.conn.execute(
            "INSERT OR REPLACE INTO freq_models (device_id, offset_at_ref_hz, slope_hz_per_degc,
                 ref_temperature_c, updated_unix_ms)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                device_id as i64,
                model.offset_at_ref_hz,
                model.slope_hz_per_degc,
                model.ref_temperature_c,
                updated_unix_ms,
            ],
        )?;
        Ok(())
    }
}

fn row_to_record(row: &rusqlite::Row<'_>) -> rusqlite::Result<DatasetRecord> {
    let status: String = row.get(2)?;
    Ok(DatasetRecord {
        id: row.get(0)?,
        device_id: row.get::<_, i64>(1)? as u64,
        status: status.parse().expect("store holds valid statuses"),
        upload_unix_ms: row.get(3)?,
        snapshot_count: row.get::<_, i64>(4)? as usize,
        processed_count: row.get::<_, i64>(5)? as usize,
        failure_reason: row.get(6)?,
        a_priori_position: Geodetic::new(row.get(7)?, row.get(8)?, row.get(9)?),
        a_priori_uncertainty_m: row.get(10)?,
        webhook_url: row.get(11)?,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Knobs for [`process_dataset`]. Defaults match the deployed configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessOptions {
    /// Snapshots fed to the front-end offset estimate.
    pub calibration_snapshots: usize,
    /// Half-width of the assisted per-satellite Doppler window, Hz.
    pub assisted_span_hz: f64,
    /// Doppler grid step, Hz.
    pub doppler_step_hz: f64,
    /// Acquisition detection threshold.
    pub threshold: f64,
    /// Residual RMS above which a fix is rejected, m.
    pub max_rms_m: f64,
    /// Satellites below this elevation at the a-priori position are not
    /// searched, degrees.
    pub elevation_mask_deg: f64,
    /// Fault-injection hook: abort with [`PipelineError::Interrupted`]
    /// before processing this many snapshots, leaving the store exactly as
    /// a crash would. Used by crash-safety tests.
    pub interrupt_after: Option<usize>,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        ProcessOptions {
            calibration_snapshots: DEFAULT_CALIBRATION_SNAPSHOTS,
            assisted_span_hz: 1_000.0,
            doppler_step_hz: 250.0,
            threshold: DEFAULT_DETECTION_THRESHOLD,
            max_rms_m: DEFAULT_MAX_RMS_M,
            elevation_mask_deg: 0.0,
            interrupt_after: None,
        }
    }
}

/// Structured status event; also the webhook payload.
fn notify(record: &DatasetRecord, status: DatasetStatus) {
    let payload = serde_json::json!({ "id": record.id, "status": status });
    eprintln!(
        "{}",
        serde_json::json!({ "event": "dataset_status", "id": record.id, "status": status })
    );
    if !matches!(status, DatasetStatus::Complete | DatasetStatus::Failed) {
        return;
    }
    if let Some(url) = &record.webhook_url {
        let sent = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(5))
            .build()
            .and_then(|client| client.post(url).json(&payload).send());
        if let Err(error) = sent {
            eprintln!(
                "{}",
                serde_json::json!({
                    "event": "webhook_failed",
                    "id": record.id,
                    "error": error.to_string(),
                })
            );
        }
    }
}

/// Processes one uploaded dataset into a track.
///
/// Walks the documented order: front-end offset estimation on the leading
/// snapshots, then per snapshot temperature-predicted offset, assisted
/// acquisition, pseudorange reconstruction, the coarse-time solve, and the
/// clock-error chain update. Dataset-level failures (nothing to calibrate
/// against, no broadcast records for the span) mark the dataset `failed`
/// with the reason; per-snapshot solve failures just leave that snapshot
/// without a fix. Returns the assembled track on success.
pub fn process_dataset(
    store: &mut Store,
    id: &str,
    ephemerides: &[GpsEphemeris],
    options: &ProcessOptions,
) -> Result<Track, PipelineError> {
    process_dataset_cancellable(store, id, ephemerides, options, &AtomicBool::new(false))
}

/// [`process_dataset`] with a cooperative stop flag, checked between
/// snapshots. When the flag rises the in-flight snapshot still completes
/// and commits, then the run stops with [`PipelineError::Interrupted`],
/// leaving the dataset in `processing` for crash recovery to reset.
pub fn process_dataset_cancellable(
    store: &mut Store,
    id: &str,
    ephemerides: &[GpsEphemeris],
    options: &ProcessOptions,
    cancel: &AtomicBool,
) -> Result<Track, PipelineError> {
    let record = store.dataset(id)?;
    if record.status != DatasetStatus::Uploaded {
        return Err(PipelineError::WrongStatus {
            id: id.to_string(),
            status: record.status,
            expected: DatasetStatus::Uploaded,
        });
    }
    store.begin_processing(id)?;
    notify(&record, DatasetStatus::Processing);
    match run_pipeline(store, &record, ephemerides, options, cancel) {
        Ok(track) => {
            store.complete(id)?;
            notify(&record, DatasetStatus::Complete);
            Ok(track)
        }
        Err(PipelineError::Interrupted(n)) => Err(PipelineError::Interrupted(n)),
        Err(PipelineError::ProcessingFailed(reason)) => {
            store.fail(id, &reason)?;
            notify(&record, DatasetStatus::Failed);
            Err(PipelineError::ProcessingFailed(reason))
        }
        Err(other) => Err(other),
    }
}

fn run_pipeline(
    store: &mut Store,
    record: &DatasetRecord,
    ephemerides: &[GpsEphemeris],
    options: &ProcessOptions,
    cancel: &AtomicBool,
) -> Result<Track, PipelineError> {
    let dataset = store.load_dataset(&record.id)?;
    if dataset.snapshots.is_empty() {
        return Ok(Track::default());
    }
    let constants = SignalConstants::default();

    let first_ms = dataset.snapshots[0].timestamp_ms;
    let last_ms = dataset.snapshots[dataset.snapshots.len() - 1].timestamp_ms;
    let mid = GpsTime::from_unix_ms((first_ms + last_ms) / 2);
    let covered = (1..=32u8).any(|prn| {
        best_ephemeris(ephemerides, prn, &mid, DEFAULT_VALIDITY_S).is_ok()
    });
    if !covered {
        return Err(PipelineError::ProcessingFailed("no satellite data".into()));
    }

    // Front-end offset from the leading snapshots, then a temperature model:
    // the fresh offset anchors it, a previously fitted slope (if the device
    // has one on file) extrapolates across the deployment's temperatures.
    let k = options.calibration_snapshots.clamp(1, dataset.snapshots.len());
    let head = &dataset.snapshots[..k];
    let offset_hz = estimate_frontend_offset(
        head,
        ephemerides,
        &dataset.a_priori_position,
        0.0,
        &constants,
    )
    .map_err(|e: CalibrationError| {
        PipelineError::ProcessingFailed(format!("frequency offset estimation failed: {e}"))
    })?;
    let mean_temperature =
        head.iter().map(|s| s.temperature_c()).sum::<f64>() / head.len() as f64;
    let slope = store
        .frequency_model(record.device_id)?
        .map(|m| m.slope_hz_per_degc)
        .unwrap_or(0.0);
    let model = FrequencyModel {
        offset_at_ref_hz: offset_hz,
        slope_hz_per_degc: slope,
        ref_temperature_c: mean_temperature,
    };
    store.save_frequency_model(record.device_id, &model, last_ms as i64)?;

    let prns: Vec<u8> = (1..=32).collect();
    let cache = precompute_codes(&prns).expect("PRNs 1..=32 are valid");
    let apriori_ecef = geodetic_to_ecef(&dataset.a_priori_position);
    let mut clock = ClockModel::new(first_ms as i64, 0.0);
    let mut points: Vec<TrackPoint> = Vec::new();

    for (idx, snapshot) in dataset.snapshots.iter().enumerate() {
        if cancel.load(Ordering::Relaxed)
            || options.interrupt_after.is_some_and(|limit| idx >= limit)
        {
            return Err(PipelineError::Interrupted(idx));
        }
        let stamp = snapshot.timestamp_ms as i64;
        let predicted_error_s = clock.time_error_at(stamp);
        let apriori_time =
            GpsTime::from_unix_ms(snapshot.timestamp_ms).add_seconds(-predicted_error_s);
        let predicted_offset_hz = model.predict_offset(snapshot.temperature_c());

        let mut acquisitions: Vec<AcquisitionResult> = Vec::new();
        for prn in 1..=32u8 {
            let Ok(eph) = best_ephemeris(ephemerides, prn, &apriori_time, DEFAULT_VALIDITY_S)
            else {
                continue;
            };
            let Ok(geometry) =
                transmit_geometry(eph, &apriori_ecef, &apriori_time, DEFAULT_VALIDITY_S)
            else {
                continue;
            };
            let (elevation, _) =
                elevation_azimuth(&dataset.a_priori_position, &geometry.state.position);
            if elevation < options.elevation_mask_deg {
                continue;
            }
            let Ok(doppler) = predict_doppler(eph, &apriori_ecef, &apriori_time, &constants)
            else {
                continue;
            };
            let settings = AcquisitionSettings {
                doppler_center: doppler + predicted_offset_hz,
                doppler_span: options.assisted_span_hz,
                doppler_step: options.doppler_step_hz,
                threshold: options.threshold,
            };
            if let Ok(mut results) =
                acquire_with_cache(&snapshot.samples, &[prn], &settings, &constants, &cache)
            {
                acquisitions.append(&mut results);
            }
        }

        let solved = reconstruct_pseudoranges(
            &acquisitions,
            &dataset.a_priori_position,
            &apriori_time,
            ephemerides,
            &constants,
            Weighting::Uniform,
        )
        .and_then(|set| solve_coarse_time(&set, &dataset.a_priori_position, &apriori_time));

        match solved {
            Ok(mut fix) => {
                fix.confidence =
                    classify_confidence(fix.residual_rms_m, fix.n_sats, options.max_rms_m);
                if fix.confidence != Confidence::Rejected {
                    clock.anchor_fix(stamp, predicted_error_s - fix.coarse_time_correction_s);
                }
                store.record_fix(
                    &record.id,
                    idx,
                    &fix,
                    snapshot.temperature_centi_c,
                    snapshot.battery_mv,
                )?;
                points.push(TrackPoint {
                    fix,
                    temperature_c: snapshot.temperature_c(),
                    battery_v: snapshot.battery_v(),
                });
            }
            Err(reason) => {
                eprintln!(
                    "{}",
                    serde_json::json!({
                        "event": "snapshot_skipped",
                        "id": record.id,
                        "snapshot": idx,
                        "reason": reason.to_string(),
                    })
                );
                store.record_progress(&record.id, idx + 1)?;
            }
        }
    }

    Ok(Track::from_points(points))
}

/// Fits a per-device temperature-to-offset model from one stored dataset.
///
/// The dataset is cut into windows of `window` snapshots; each window gets
/// its own front-end offset estimate, paired with the window's mean
/// temperature, and a line goes through the points. Deployments that sweep
/// a temperature range pin down the slope; isothermal ones yield a flat
/// model. The fitted model is stored for the device and returned.
pub fn fit_frequency_model(
    store: &mut Store,
    id: &str,
    ephemerides: &[GpsEphemeris],
    window: usize,
) -> Result<FrequencyModel, PipelineError> {
    let record = store.dataset(id)?;
    let dataset = store.load_dataset(id)?;
    if dataset.snapshots.is_empty() {
        return Err(PipelineError::ProcessingFailed("dataset has no snapshots".into()));
    }
    let constants = SignalConstants::default();
    let window = window.max(1);
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for chunk in dataset.snapshots.chunks(window) {
        let Ok(offset) = estimate_frontend_offset(
            chunk,
            ephemerides,
            &dataset.a_priori_position,
            0.0,
            &constants,
        ) else {
            continue;
        };
        let mean_temperature =
            chunk.iter().map(|s| s.temperature_c()).sum::<f64>() / chunk.len() as f64;
        samples.push((mean_temperature, offset));
    }
    let model = FrequencyModel::fit(&samples).map_err(|e| {
        PipelineError::ProcessingFailed(format!("frequency model fit failed: {e}"))
    })?;
    let last_ms = dataset.snapshots[dataset.snapshots.len() - 1].timestamp_ms;
    store.save_frequency_model(record.device_id, &model, last_ms as i64)?;
    Ok(model)
}
