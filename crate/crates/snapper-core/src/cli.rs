//! Command-line interface: simulation, processing, diagnostics, device
//! emulation, and the HTTP service, all over the same library code paths.
//!
//! Exit codes: 0 on success, 1 when flags or input files fail validation,
//! 2 when processing itself fails. Results go to stdout (JSON with
//! `--json`), diagnostics to stderr.

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, anyhow};
use clap::{Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::Deserialize;

use crate::acquisition::{AcquisitionSettings, DEFAULT_DETECTION_THRESHOLD, acquire};
use crate::constants::{SNAPSHOT_PAYLOAD_BYTES, SignalConstants};
use crate::ephemeris::{GpsEphemeris, parse_rinex_nav, write_rinex_nav};
use crate::export::ExportFormat;
use crate::format::{decode_dataset, encode_dataset};
use crate::model::Dataset;
use crate::navigation::{
    DEFAULT_MAX_RMS_M, Weighting, classify_confidence, reconstruct_pseudoranges,
    solve_coarse_time,
};
use crate::pipeline::{
    DatasetStatus, ProcessOptions, Store, fit_frequency_model, process_dataset,
};
use crate::receiver::{
    CaptureEnvironment, EnergyModel, FlashLayout, Receiver, ReceiverEvent, ReceiverState,
    estimate_lifetime, read_frame,
};
use crate::service::{ServiceConfig, start};
use crate::sim::{Scenario, derive_seed, generate_deployment, synthesize_snapshot};
use crate::time::GpsTime;

#[derive(Parser)]
#[command(
    name = "snapper",
    version,
    about = "Snapshot GNSS toolkit: simulate, process, and serve 12 ms one-bit captures"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset file from a scenario description.
    Simulate {
        /// Scenario JSON (see docs/scenarios.md).
        #[arg(long)]
        scenario: PathBuf,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the broadcast records the scenario was built against.
        #[arg(long)]
        nav_out: Option<PathBuf>,
        /// Also write per-capture ground truth as JSON.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Process a dataset file into a track export.
    Process {
        /// Dataset file to process.
        #[arg(long = "in")]
        input: PathBuf,
        /// RINEX navigation file with broadcast records covering the span.
        #[arg(long)]
        nav: PathBuf,
        /// Track file to write; format inferred from the extension.
        #[arg(long)]
        out: PathBuf,
        /// Export format (csv, json, gpx, kml) when the extension is not
        /// one of those.
        #[arg(long)]
        format: Option<String>,
        /// Persistent store directory; processing is in-memory without it.
        #[arg(long, env = "SNAPPER_STORE")]
        store: Option<PathBuf>,
    },
    /// Search one stored snapshot for satellites.
    Acquire {
        /// Dataset file to read.
        #[arg(long = "in")]
        input: PathBuf,
        /// Snapshot index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated PRNs to search; all 32 when omitted.
        #[arg(long)]
        prns: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        doppler_center: f64,
        #[arg(long, default_value_t = 6_000.0)]
        doppler_span: f64,
        #[arg(long, default_value_t = 250.0)]
        doppler_step: f64,
        #[arg(long, default_value_t = DEFAULT_DETECTION_THRESHOLD)]
        threshold: f64,
    },
    /// Acquire and solve a single snapshot into a fix.
    Solve {
        /// Dataset file to read.
        #[arg(long = "in")]
        input: PathBuf,
        /// Snapshot index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// RINEX navigation file with broadcast records covering the span.
        #[arg(long)]
        nav: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DETECTION_THRESHOLD)]
        threshold: f64,
    },
    /// Export a processed dataset's track from the store.
    Export {
        /// Store directory.
        #[arg(long, env = "SNAPPER_STORE")]
        store: PathBuf,
        /// Dataset id (SHA-256 of the uploaded file).
        #[arg(long)]
        id: String,
        /// Export format: csv, json, gpx, or kml.
        #[arg(long)]
        format: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate deployment lifetime from battery, flash, and cadence.
    Energy {
        /// Battery capacity, mAh.
        #[arg(long, default_value_t = 40.0)]
        battery_mah: f64,
        /// Capture interval, seconds.
        #[arg(long)]
        interval: f64,
        /// Flash size, Mbit.
        #[arg(long, default_value_t = 512)]
        flash_mbit: u64,
    },
    /// Emulate a receiver on a TCP socket, driven by a scripted timeline.
    DeviceSim {
        /// Address to listen on; port 0 picks a free one.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        /// Script JSON (see docs/device-protocol.md).
        #[arg(long)]
        script: PathBuf,
        /// Seed for synthesized capture payloads.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 40.0)]
        battery_mah: f64,
        #[arg(long, default_value_t = 512)]
        flash_mbit: u64,
    },
    /// Run the HTTP API and processing workers.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Store directory.
        #[arg(long, env = "SNAPPER_STORE")]
        store: PathBuf,
        /// RINEX navigation file handed to every processing run.
        #[arg(long)]
        nav: PathBuf,
        /// Processing worker threads.
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
    /// Fit a per-device temperature-to-frequency-offset model.
    FitFreqModel {
        /// Store directory.
        #[arg(long, env = "SNAPPER_STORE")]
        store: PathBuf,
        /// Dataset id to fit against.
        #[arg(long)]
        id: String,
        /// RINEX navigation file covering the dataset span.
        #[arg(long)]
        nav: PathBuf,
        /// Snapshots per estimation window.
        #[arg(long, default_value_t = 5)]
        window: usize,
    },
}

/// A failure carrying its exit code: validation problems exit 1,
/// processing problems exit 2.
enum Failure {
    Validation(anyhow::Error),
    Processing(anyhow::Error),
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(error.into())
}

fn failed(error: impl Into<anyhow::Error>) -> Failure {
    Failure::Processing(error.into())
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error) => {
            let _ = error.print();
            return if error.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(error)) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
        Err(Failure::Processing(error)) => {
            eprintln!("error: {error:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let json = cli.json;
    match cli.command {
        Command::Simulate { scenario, out, nav_out, truth_out } => {
            simulate(&scenario, &out, nav_out.as_deref(), truth_out.as_deref(), json)
        }
        Command::Process { input, nav, out, format, store } => {
            process(&input, &nav, &out, format.as_deref(), store.as_deref(), json)
        }
        Command::Acquire {
            input,
            index,
            prns,
            doppler_center,
            doppler_span,
            doppler_step,
            threshold,
        } => {
            let settings = AcquisitionSettings {
                doppler_center,
                doppler_span,
                doppler_step,
                threshold,
            };
            acquire_cmd(&input, index, prns.as_deref(), &settings, json)
        }
        Command::Solve { input, index, nav, threshold } => {
            solve_cmd(&input, index, &nav, threshold, json)
        }
        Command::Export { store, id, format, out } => {
            export_cmd(&store, &id, &format, out.as_deref(), json)
        }
        Command::Energy { battery_mah, interval, flash_mbit } => {
            energy_cmd(battery_mah, interval, flash_mbit, json)
        }
        Command::DeviceSim { listen, script, seed, battery_mah, flash_mbit } => {
            device_sim(listen, &script, seed, battery_mah, flash_mbit, json)
        }
        Command::Serve { listen, store, nav, workers } => serve(listen, &store, &nav, workers),
        Command::FitFreqModel { store, id, nav, window } => {
            fit_cmd(&store, &id, &nav, window, json)
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(failed)
}

fn load_nav(path: &Path) -> Result<Vec<GpsEphemeris>, Failure> {
    let text = String::from_utf8_lossy(&read_input(path)?).into_owned();
    let nav = parse_rinex_nav(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(invalid)?;
    if nav.skipped_records > 0 {
        eprintln!("note: skipped {} non-GPS records in {}", nav.skipped_records, path.display());
    }
    Ok(nav.ephemerides)
}

fn load_dataset_file(path: &Path) -> Result<Dataset, Failure> {
    decode_dataset(&read_input(path)?)
        .with_context(|| format!("decoding {}", path.display()))
        .map_err(invalid)
}

fn resolve_format(format: Option<&str>, out: &Path) -> Result<ExportFormat, Failure> {
    if let Some(name) = format {
        return name.parse().map_err(invalid);
    }
    out.extension()
        .and_then(std::ffi::OsStr::to_str)
        .and_then(|ext| ext.parse().ok())
        .ok_or_else(|| {
            invalid(anyhow!(
                "cannot infer an export format from {}; pass --format",
                out.display()
            ))
        })
}

fn simulate(
    scenario_path: &Path,
    out: &Path,
    nav_out: Option<&Path>,
    truth_out: Option<&Path>,
    json: bool,
) -> Result<(), Failure> {
    let text = String::from_utf8_lossy(&read_input(scenario_path)?).into_owned();
    let scenario: Scenario = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", scenario_path.display()))
        .map_err(invalid)?;

    let (dataset, truths, ephemerides) = match &scenario {
        Scenario::Snapshot(snapshot) => {
            let (snap, truth) = synthesize_snapshot(snapshot).map_err(invalid)?;
            let apriori = snapshot
                .apriori
                .unwrap_or_else(|| snapshot.truth_position.geodetic());
            let mut dataset = Dataset::new(snapshot.device_id, apriori);
            dataset.snapshots.push(snap);
            let ephemerides = snapshot
                .satellites
                .iter()
                .filter_map(|sat| match &sat.source {
                    crate::sim::SatelliteSource::Ephemeris { ephemeris } => {
                        Some(ephemeris.clone())
                    }
                    crate::sim::SatelliteSource::Fixed { .. } => None,
                })
                .collect();
            (dataset, vec![truth], ephemerides)
        }
        Scenario::Deployment(deployment) => {
            let generated = generate_deployment(deployment).map_err(invalid)?;
            (generated.dataset, generated.truths, generated.ephemerides)
        }
    };

    let bytes = encode_dataset(&dataset).map_err(failed)?;
    write_output(out, &bytes)?;
    if let Some(nav_path) = nav_out {
        if ephemerides.is_empty() {
            eprintln!("note: scenario has no broadcast records; {} will be empty", nav_path.display());
        }
        write_output(nav_path, write_rinex_nav(&ephemerides, "snapper").as_bytes())?;
    }
    if let Some(truth_path) = truth_out {
        let pretty = serde_json::to_vec_pretty(&truths).map_err(failed)?;
        write_output(truth_path, &pretty)?;
    }

    if json {
        println!(
            "{}",
            serde_json::json!({
                "dataset": out,
                "snapshots": dataset.snapshots.len(),
                "device_id": dataset.device_id.0,
                "nav": nav_out,
                "nav_records": nav_out.map(|_| ephemerides.len()),
                "truths": truth_out,
            })
        );
    } else {
        println!(
            "wrote {}-snapshot dataset for device {} to {}",
            dataset.snapshots.len(),
            dataset.device_id.0,
            out.display()
        );
        if let Some(nav_path) = nav_out {
            println!("wrote {} broadcast records to {}", ephemerides.len(), nav_path.display());
        }
        if let Some(truth_path) = truth_out {
            println!("wrote ground truth to {}", truth_path.display());
        }
    }
    Ok(())
}

fn process(
    input: &Path,
    nav: &Path,
    out: &Path,
    format: Option<&str>,
    store_dir: Option<&Path>,
    json: bool,
) -> Result<(), Failure> {
    let format = resolve_format(format, out)?;
    let bytes = read_input(input)?;
    decode_dataset(&bytes)
        .with_context(|| format!("decoding {}", input.display()))
        .map_err(invalid)?;
    let ephemerides = load_nav(nav)?;

    let mut store = match store_dir {
        Some(dir) => Store::open(dir).map_err(failed)?,
        None => Store::in_memory().map_err(failed)?,
    };
    let upload_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |since| since.as_millis() as i64);
    let record = store.ingest(&bytes, None, upload_ms).map_err(failed)?;

    match record.status {
        DatasetStatus::Uploaded => {
            process_dataset(&mut store, &record.id, &ephemerides, &ProcessOptions::default())
                .map_err(failed)?;
        }
        DatasetStatus::Complete => {
            eprintln!("note: dataset {} already processed in this store", record.id);
        }
        DatasetStatus::Processing => {
            store.recover_interrupted().map_err(failed)?;
            process_dataset(&mut store, &record.id, &ephemerides, &ProcessOptions::default())
                .map_err(failed)?;
        }
        DatasetStatus::Failed => {
            return Err(failed(anyhow!(
                "dataset {} previously failed in this store: {}",
                record.id,
                record.failure_reason.as_deref().unwrap_or("unknown reason")
            )));
        }
    }

    let export = store.export(&record.id, format).map_err(failed)?;
    write_output(out, &export)?;
    let after = store.dataset(&record.id).map_err(failed)?;
    let fixes = store.track(&record.id).map_err(failed)?.len();
    if json {
        println!(
            "{}",
            serde_json::json!({
                "id": record.id,
                "snapshots": after.snapshot_count,
                "fixes": fixes,
                "format": format.to_string(),
                "out": out,
            })
        );
    } else {
        println!(
            "solved {fixes} of {} snapshots; wrote {} track to {}",
            after.snapshot_count,
            format,
            out.display()
        );
    }
    Ok(())
}

fn parse_prns(prns: Option<&str>) -> Result<Vec<u8>, Failure> {
    match prns {
        None => Ok((1..=32).collect()),
        Some(list) => list
            .split(',')
            .map(|token| {
                let prn: u8 = token
                    .trim()
                    .parse()
                    .with_context(|| format!("PRN {token:?}"))
                    .map_err(invalid)?;
                if (1..=32).contains(&prn) {
                    Ok(prn)
                } else {
                    Err(invalid(anyhow!("PRN {prn} is outside 1..=32")))
                }
            })
            .collect(),
    }
}

fn acquire_cmd(
    input: &Path,
    index: usize,
    prns: Option<&str>,
    settings: &AcquisitionSettings,
    json: bool,
) -> Result<(), Failure> {
    let dataset = load_dataset_file(input)?;
    let snapshot = dataset.snapshots.get(index).ok_or_else(|| {
        invalid(anyhow!("snapshot {index} out of range ({} stored)", dataset.snapshots.len()))
    })?;
    let prns = parse_prns(prns)?;
    let constants = SignalConstants::default();
    let results = acquire(&snapshot.samples, &prns, settings, &constants).map_err(invalid)?;

    if json {
        println!("{}", serde_json::to_string_pretty(&results).map_err(failed)?);
    } else {
        println!("{:>4} {:>9} {:>12} {:>10} {:>8}", "prn", "detected", "code_phase", "doppler", "metric");
        for r in &results {
            println!(
                "{:>4} {:>9} {:>12.2} {:>10.1} {:>8.2}",
                r.prn, r.detected, r.code_phase, r.doppler, r.peak_metric
            );
        }
        let hits = results.iter().filter(|r| r.detected).count();
        println!("{hits} of {} PRNs detected", results.len());
    }
    Ok(())
}

fn solve_cmd(
    input: &Path,
    index: usize,
    nav: &Path,
    threshold: f64,
    json: bool,
) -> Result<(), Failure> {
    let dataset = load_dataset_file(input)?;
    let snapshot = dataset.snapshots.get(index).ok_or_else(|| {
        invalid(anyhow!("snapshot {index} out of range ({} stored)", dataset.snapshots.len()))
    })?;
    let ephemerides = load_nav(nav)?;
    let constants = SignalConstants::default();

    let prns: Vec<u8> = (1..=32).collect();
    let settings = AcquisitionSettings { threshold, ..AcquisitionSettings::default() };
    let results = acquire(&snapshot.samples, &prns, &settings, &constants).map_err(failed)?;
    let apriori_time = GpsTime::from_unix_ms(snapshot.timestamp_ms);
    let set = reconstruct_pseudoranges(
        &results,
        &dataset.a_priori_position,
        &apriori_time,
        &ephemerides,
        &constants,
        Weighting::Uniform,
    )
    .map_err(failed)?;
    let mut fix = solve_coarse_time(&set, &dataset.a_priori_position, &apriori_time)
        .map_err(failed)?;
    fix.confidence = classify_confidence(fix.residual_rms_m, fix.n_sats, DEFAULT_MAX_RMS_M);

    if json {
        println!("{}", serde_json::to_string_pretty(&fix).map_err(failed)?);
    } else {
        println!(
            "fix: {:.6} deg, {:.6} deg, {:.1} m",
            fix.position.lat_deg, fix.position.lon_deg, fix.position.height_m
        );
        println!(
            "time correction {:+.3} s, common bias {:.1} m, rms {:.1} m, {} sats, confidence {}",
            fix.coarse_time_correction_s,
            fix.common_bias_m,
            fix.residual_rms_m,
            fix.n_sats,
            fix.confidence
        );
    }
    Ok(())
}

fn export_cmd(
    store_dir: &Path,
    id: &str,
    format: &str,
    out: Option<&Path>,
    json: bool,
) -> Result<(), Failure> {
    let format: ExportFormat = format.parse().map_err(invalid)?;
    let store = Store::open(store_dir).map_err(failed)?;
    let bytes = store.export(id, format).map_err(failed)?;
    match out {
        Some(path) => {
            write_output(path, &bytes)?;
            if json {
                println!(
                    "{}",
                    serde_json::json!({ "id": id, "format": format.to_string(), "out": path })
                );
            } else {
                println!("wrote {} export to {}", format, path.display());
            }
        }
        None => {
            std::io::stdout().write_all(&bytes).map_err(failed)?;
        }
    }
    Ok(())
}

fn energy_cmd(battery_mah: f64, interval: f64, flash_mbit: u64, json: bool) -> Result<(), Failure> {
    if !(battery_mah > 0.0) {
        return Err(invalid(anyhow!("--battery-mah must be positive, got {battery_mah}")));
    }
    if !(interval >= 1.0) {
        return Err(invalid(anyhow!("--interval must be at least 1 s, got {interval}")));
    }
    if flash_mbit == 0 {
        return Err(invalid(anyhow!("--flash-mbit must be positive")));
    }
    let energy = EnergyModel {
        battery_capacity_ah: battery_mah / 1_000.0,
        ..EnergyModel::default()
    };
    energy.validate().map_err(invalid)?;
    let flash = FlashLayout { capacity_bits: flash_mbit * 1_024 * 1_024, ..FlashLayout::default() };
    let lifetime = estimate_lifetime(interval, &energy, &flash);

    if json {
        println!("{}", serde_json::to_string_pretty(&lifetime).map_err(failed)?);
    } else {
        println!("lifetime: {:.1} days, limited by {}", lifetime.days, lifetime.limiting_factor);
        println!("  energy budget: {:.1} days", lifetime.energy_days);
        println!(
            "  memory budget: {:.1} days ({} records at one per {interval} s)",
            lifetime.memory_days,
            flash.max_records()
        );
    }
    Ok(())
}

/// One step of a device-sim script. `advance` walks the device clock
/// forward, running any captures that come due on the way; `serve` accepts
/// one TCP connection and answers protocol frames until the host hangs up.
#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ScriptStep {
    PlugIn,
    Unplug,
    ShutdownCmd,
    Reboot,
    Advance {
        seconds: f64,
        #[serde(default = "default_sim_temperature")]
        temperature_c: f64,
        #[serde(default = "default_sim_battery")]
        battery_mv: u16,
    },
    Serve,
}

fn default_sim_temperature() -> f64 {
    20.0
}

fn default_sim_battery() -> u16 {
    3_900
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceScript {
    steps: Vec<ScriptStep>,
}

fn device_sim(
    listen: SocketAddr,
    script_path: &Path,
    seed: u64,
    battery_mah: f64,
    flash_mbit: u64,
    json: bool,
) -> Result<(), Failure> {
    let text = String::from_utf8_lossy(&read_input(script_path)?).into_owned();
    let script: DeviceScript = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", script_path.display()))
        .map_err(invalid)?;
    if !(battery_mah > 0.0) {
        return Err(invalid(anyhow!("--battery-mah must be positive, got {battery_mah}")));
    }
    if flash_mbit == 0 {
        return Err(invalid(anyhow!("--flash-mbit must be positive")));
    }

    let energy = EnergyModel {
        battery_capacity_ah: battery_mah / 1_000.0,
        ..EnergyModel::default()
    };
    energy.validate().map_err(invalid)?;
    let flash = FlashLayout { capacity_bits: flash_mbit * 1_024 * 1_024, ..FlashLayout::default() };
    let mut receiver = Receiver::new(energy, flash);

    let listener = std::net::TcpListener::bind(listen)
        .with_context(|| format!("listening on {listen}"))
        .map_err(failed)?;
    let addr = listener.local_addr().map_err(failed)?;
    println!("{}", serde_json::json!({ "listening": addr.to_string() }));
    std::io::stdout().flush().ok();

    for (n, step) in script.steps.iter().enumerate() {
        let outcome = match step {
            ScriptStep::PlugIn => receiver.handle_event(ReceiverEvent::PlugIn),
            ScriptStep::Unplug => receiver.handle_event(ReceiverEvent::Unplug),
            ScriptStep::ShutdownCmd => receiver.handle_event(ReceiverEvent::ShutdownCmd),
            ScriptStep::Reboot => {
                receiver.reboot();
                Ok(receiver.state())
            }
            ScriptStep::Advance { seconds, temperature_c, battery_mv } => {
                receiver.set_battery_mv(*battery_mv);
                let target = receiver.clock_unix_ms() + (seconds * 1_000.0).round() as i64;
                let temperature_centi_c = (temperature_c * 100.0).round() as i16;
                let battery_mv = *battery_mv;
                if receiver.state() == ReceiverState::Sleep {
                    receiver
                        .run_deployment_until(target, |unix_ms| CaptureEnvironment {
                            temperature_centi_c,
                            battery_mv,
                            payload: synthetic_payload(seed, unix_ms),
                        })
                        .map_err(failed)?;
                }
                receiver.advance_to(target);
                Ok(receiver.state())
            }
            ScriptStep::Serve => {
                serve_one_connection(&listener, &mut receiver).map_err(failed)?;
                Ok(receiver.state())
            }
        };
        let state = outcome
            .with_context(|| format!("script step {n} ({step:?})"))
            .map_err(failed)?;
        eprintln!(
            "{}",
            serde_json::json!({
                "event": "script_step",
                "step": n,
                "state": state,
                "clock_unix_ms": receiver.clock_unix_ms(),
                "records": receiver.records().len(),
            })
        );
    }

    let summary = serde_json::json!({
        "state": receiver.state(),
        "records": receiver.records().len(),
        "brownouts": receiver.brownouts(),
        "clock_unix_ms": receiver.clock_unix_ms(),
        "remaining_charge_ah": receiver.remaining_charge_ah(),
        "firmware": receiver
            .firmware_version()
            .map(|b| b.to_string())
            .join("."),
    });
    if json {
        println!("{summary}");
    } else {
        println!(
            "device finished in state {:?} with {} records",
            receiver.state(),
            receiver.records().len()
        );
    }
    Ok(())
}

fn synthetic_payload(seed: u64, unix_ms: i64) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, unix_ms as u64));
    let mut payload = vec![0u8; SNAPSHOT_PAYLOAD_BYTES];
    rng.fill_bytes(&mut payload);
    payload
}

fn serve_one_connection(
    listener: &std::net::TcpListener,
    receiver: &mut Receiver,
) -> anyhow::Result<()> {
    let (mut stream, peer) = listener.accept().context("accepting host connection")?;
    eprintln!("{}", serde_json::json!({ "event": "host_connected", "peer": peer.to_string() }));
    loop {
        match read_frame(&mut stream) {
            Ok(frame) => {
                let reply = receiver.handle_host_frame(&frame);
                stream.write_all(&reply).context("writing response frame")?;
            }
            Err(error) if error.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(error) => return Err(error).context("reading host frame"),
        }
    }
    eprintln!("{}", serde_json::json!({ "event": "host_disconnected" }));
    Ok(())
}

fn serve(listen: SocketAddr, store_dir: &Path, nav: &Path, workers: usize) -> Result<(), Failure> {
    let ephemerides = load_nav(nav)?;
    let config = ServiceConfig {
        store_dir: store_dir.to_path_buf(),
        listen,
        ephemerides,
        options: ProcessOptions::default(),
        workers,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(failed)?;
    runtime.block_on(async move {
        let handle = start(config).await.map_err(failed)?;
        println!("{}", serde_json::json!({ "listening": handle.addr.to_string() }));
        std::io::stdout().flush().ok();
        tokio::signal::ctrl_c().await.map_err(failed)?;
        eprintln!("{}", serde_json::json!({ "event": "shutting_down" }));
        handle.shutdown().await;
        Ok(())
    })
}

fn fit_cmd(
    store_dir: &Path,
    id: &str,
    nav: &Path,
    window: usize,
    json: bool,
) -> Result<(), Failure> {
    if window == 0 {
        return Err(invalid(anyhow!("--window must be at least 1")));
    }
    let ephemerides = load_nav(nav)?;
    let mut store = Store::open(store_dir).map_err(failed)?;
    let model = fit_frequency_model(&mut store, id, &ephemerides, window).map_err(failed)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&model).map_err(failed)?);
    } else {
        println!(
            "offset {:.1} Hz at {:.1} C, slope {:.2} Hz/C",
            model.offset_at_ref_hz, model.ref_temperature_c, model.slope_hz_per_degc
        );
    }
    Ok(())
}
