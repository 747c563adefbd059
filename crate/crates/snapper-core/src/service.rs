//! HTTP front end for the pipeline: uploads in, tracks out.
//!
//! Three endpoints under `/api/v1`: POST `/datasets` accepts a multipart
//! upload (`dataset` file part, optional `metadata` JSON part) and answers
//! 201 with the content-addressed id; GET `/datasets/{id}` reports the
//! stored record; GET `/datasets/{id}/track?format=` serves the export
//! once processing is complete (409 before that). A bounded pool of worker
//! threads drains uploaded datasets oldest-first; the single-writer rule
//! is the store's atomic uploaded-to-processing transition, so workers can
//! race for the same dataset and exactly one wins.
//!
//! Shutdown is cooperative: the stop flag lets the in-flight snapshot
//! finish and commit, the interrupted dataset stays in `processing`, and
//! the next start resets it for a clean, deterministic rerun.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use axum::Router;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{StatusCode, header};
use axum::response::{IntoResponse, Json, Response};
use axum::routing::{get, post};
use serde::Deserialize;
use thiserror::Error;

use crate::ephemeris::GpsEphemeris;
use crate::export::ExportFormat;
use crate::pipeline::{PipelineError, ProcessOptions, Store, process_dataset_cancellable};

/// Uploads up to a full device dump (10 922 records) fit comfortably.
const MAX_UPLOAD_BYTES: usize = 128 * 1024 * 1024;

/// How long an idle worker sleeps before rescanning for work.
const WORKER_IDLE_POLL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub store_dir: PathBuf,
    pub listen: SocketAddr,
    /// Broadcast records handed to every processing run.
    pub ephemerides: Vec<GpsEphemeris>,
    pub options: ProcessOptions,
    /// Worker threads draining uploaded datasets. Zero means uploads are
    /// only stored, never processed; useful for tests and bulk imports.
    pub workers: usize,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("listening on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

/// A running service. Drop disconnects nothing; call [`shutdown`] to stop
/// accepting requests, finish the in-flight snapshot, and join the workers.
///
/// [`shutdown`]: ServiceHandle::shutdown
pub struct ServiceHandle {
    /// The bound address, with the real port when the config asked for :0.
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    notify: Arc<tokio::sync::Notify>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
    workers: Vec<std::thread::JoinHandle<()>>,
}

impl ServiceHandle {
    pub async fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        self.notify.notify_one();
        let _ = self.server.await;
        let workers = self.workers;
        let _ = tokio::task::spawn_blocking(move || {
            for worker in workers {
                let _ = worker.join();
            }
        })
        .await;
    }
}

struct ServiceState {
    store_dir: PathBuf,
}

impl ServiceState {
    fn store(&self) -> Result<Store, PipelineError> {
        Store::open(&self.store_dir)
    }
}

/// Binds the listener, recovers datasets stranded by a previous crash, and
/// spawns the worker pool. Must run inside a tokio runtime.
pub async fn start(config: ServiceConfig) -> Result<ServiceHandle, ServiceError> {
    let mut store = Store::open(&config.store_dir)?;
    for id in store.recover_interrupted()? {
        eprintln!("{}", serde_json::json!({ "event": "dataset_recovered", "id": id }));
    }
    drop(store);

    let state = Arc::new(ServiceState { store_dir: config.store_dir.clone() });
    let app = Router::new()
        .route("/api/v1/datasets", post(upload_dataset))
        .route("/api/v1/datasets/{id}", get(dataset_record))
        .route("/api/v1/datasets/{id}/track", get(dataset_track))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);

    let listener = tokio::net::TcpListener::bind(config.listen)
        .await
        .map_err(|source| ServiceError::Bind { addr: config.listen, source })?;
    let addr = listener
        .local_addr()
        .map_err(|source| ServiceError::Bind { addr: config.listen, source })?;

    let stop = Arc::new(AtomicBool::new(false));
    let notify = Arc::new(tokio::sync::Notify::new());
    let signal = notify.clone();
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move { signal.notified().await })
            .await
    });

    let ephemerides: Arc<[GpsEphemeris]> = config.ephemerides.into();
    let mut workers = Vec::with_capacity(config.workers);
    for n in 0..config.workers {
        let stop = stop.clone();
        let dir = config.store_dir.clone();
        let ephemerides = ephemerides.clone();
        let options = config.options.clone();
        let handle = std::thread::Builder::new()
            .name(format!("snapper-worker-{n}"))
            .spawn(move || worker_loop(&dir, &ephemerides, &options, &stop))
            .expect("worker threads spawn");
        workers.push(handle);
    }

    Ok(ServiceHandle { addr, stop, notify, server, workers })
}

fn worker_loop(
    dir: &PathBuf,
    ephemerides: &[GpsEphemeris],
    options: &ProcessOptions,
    stop: &AtomicBool,
) {
    while !stop.load(Ordering::Relaxed) {
        let next = Store::open(dir).and_then(|store| store.next_uploaded());
        match next {
            Ok(Some(id)) => {
                let run = Store::open(dir).and_then(|mut store| {
                    process_dataset_cancellable(&mut store, &id, ephemerides, options, stop)
                });
                match run {
                    Ok(_) => {}
                    // Another worker won the claim, or this dataset's
                    // failure is already recorded on it.
                    Err(PipelineError::WrongStatus { .. })
                    | Err(PipelineError::ProcessingFailed(_)) => {}
                    // Shutdown mid-dataset: progress is committed, the
                    // next start reruns it.
                    Err(PipelineError::Interrupted(_)) => return,
                    Err(error) => {
                        eprintln!(
                            "{}",
                            serde_json::json!({
                                "event": "worker_error",
                                "id": id,
                                "error": error.to_string(),
                            })
                        );
                        std::thread::sleep(WORKER_IDLE_POLL);
                    }
                }
            }
            Ok(None) => std::thread::sleep(WORKER_IDLE_POLL),
            Err(error) => {
                eprintln!(
                    "{}",
                    serde_json::json!({ "event": "worker_error", "error": error.to_string() })
                );
                std::thread::sleep(WORKER_IDLE_POLL);
            }
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct UploadMetadata {
    webhook_url: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TrackQuery {
    format: Option<String>,
}

async fn upload_dataset(
    State(state): State<Arc<ServiceState>>,
    mut parts: Multipart,
) -> Response {
    let mut file: Option<Vec<u8>> = None;
    let mut metadata = UploadMetadata::default();
    loop {
        match parts.next_field().await {
            Ok(Some(field)) => match field.name() {
                Some("dataset") => match field.bytes().await {
                    Ok(bytes) => file = Some(bytes.to_vec()),
                    Err(error) => {
                        return bad_request(format!("reading dataset part: {error}"));
                    }
                },
                Some("metadata") => {
                    let text = match field.text().await {
                        Ok(text) => text,
                        Err(error) => {
                            return bad_request(format!("reading metadata part: {error}"));
                        }
                    };
                    metadata = match serde_json::from_str(&text) {
                        Ok(metadata) => metadata,
                        Err(error) => return bad_request(format!("metadata: {error}")),
                    };
                }
                _ => {}
            },
            Ok(None) => break,
            Err(error) => return bad_request(format!("multipart: {error}")),
        }
    }
    let Some(bytes) = file else {
        return bad_request("missing dataset part".into());
    };

    let upload_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |since| since.as_millis() as i64);
    let stored = with_store(state, move |store| {
        store.ingest(&bytes, metadata.webhook_url.as_deref(), upload_unix_ms)
    })
    .await;
    match stored {
        Ok(record) => {
            (StatusCode::CREATED, Json(serde_json::json!({ "id": record.id }))).into_response()
        }
        Err(error) => error_response(error),
    }
}

async fn dataset_record(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
) -> Response {
    match with_store(state, move |store| store.dataset(&id)).await {
        Ok(record) => Json(record).into_response(),
        Err(error) => error_response(error),
    }
}

async fn dataset_track(
    State(state): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<TrackQuery>,
) -> Response {
    let format = match query.format.as_deref().unwrap_or("json").parse::<ExportFormat>() {
        Ok(format) => format,
        Err(error) => return bad_request(error.to_string()),
    };
    match with_store(state, move |store| store.export(&id, format)).await {
        Ok(bytes) => {
            ([(header::CONTENT_TYPE, format.mime_type())], bytes).into_response()
        }
        Err(error) => error_response(error),
    }
}

/// Runs one store operation on the blocking pool: rusqlite must not stall
/// the async executor.
async fn with_store<T, F>(state: Arc<ServiceState>, op: F) -> Result<T, PipelineError>
where
    T: Send + 'static,
    F: FnOnce(&mut Store) -> Result<T, PipelineError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let mut store = state.store()?;
        op(&mut store)
    })
    .await
    .expect("store operations do not panic")
}

fn bad_request(message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(serde_json::json!({ "error": message }))).into_response()
}

fn error_response(error: PipelineError) -> Response {
    let status = match &error {
        PipelineError::Decode(_) | PipelineError::UnknownFormat(_) => StatusCode::BAD_REQUEST,
        PipelineError::UnknownDataset(_) => StatusCode::NOT_FOUND,
        PipelineError::WrongStatus { .. } => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(serde_json::json!({ "error": error.to_string() }))).into_response()
}
