//! End-to-end checks of the `snapper` binary: exit codes, file outputs,
//! the device emulator's TCP protocol, and the served HTTP API.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Stdio};

use snapper_core::receiver::{
    OP_GET_SNAPSHOTS, OP_GET_STATUS, OP_SET_CONFIG, decode_frame, encode_frame, read_frame,
};

fn snapper() -> Command {
    Command::new(env!("CARGO_BIN_EXE_snapper"))
}

fn write_file(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

#[test]
fn energy_reports_the_memory_limited_lifetime() {
    let output = snapper()
        .args(["energy", "--battery-mah", "40", "--interval", "3600", "--json"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let lifetime: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let days = lifetime["days"].as_f64().unwrap();
    assert!((days - 455.08).abs() < 0.1, "lifetime {days} days");
    assert_eq!(lifetime["limiting_factor"], serde_json::json!("memory"));

    let text = snapper()
        .args(["energy", "--battery-mah", "40", "--interval", "3600"])
        .output()
        .unwrap();
    let stdout = String::from_utf8(text.stdout).unwrap();
    assert!(stdout.contains("455.1 days"), "{stdout}");
    assert!(stdout.contains("limited by memory"), "{stdout}");
}

#[test]
fn flag_problems_exit_with_code_one() {
    // Unknown flag.
    let unknown = snapper().args(["energy", "--interval", "60", "--nope"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1), "{unknown:?}");
    assert!(!String::from_utf8_lossy(&unknown.stderr).is_empty());

    // Missing required flag.
    let missing = snapper().args(["process", "--in", "x.snpr", "--out", "t.gpx"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1), "{missing:?}");
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(stderr.contains("--nav"), "{stderr}");

    // Bad flag value caught before any work happens.
    let bad = snapper().args(["energy", "--interval", "0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1), "{bad:?}");

    // Help is not an error.
    let help = snapper().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

/// The documented workflow: simulate a deployment, inspect one snapshot,
/// solve it, process the whole file, then do the same through a store and
/// the HTTP service.
#[test]
fn simulate_process_and_serve_work_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let scenario_path = dir.path().join("s.json");
    let dataset_path = dir.path().join("d.snpr");
    let nav_path = dir.path().join("brdc.rnx");
    let truth_path = dir.path().join("truth.json");
    let gpx_path = dir.path().join("t.gpx");

    write_file(
        &scenario_path,
        r#"{
            "type": "deployment",
            "device_id": "00000000000000a1",
            "track": [
                {"time": {"week": 2310, "tow": 223200.0},
                 "position": {"lat_deg": 46.2, "lon_deg": 6.15, "height_m": 380.0},
                 "temperature": 14.0},
                {"time": {"week": 2310, "tow": 223350.0},
                 "position": {"lat_deg": 46.203, "lon_deg": 6.157, "height_m": 380.0},
                 "temperature": 15.0}
            ],
            "interval": 60.0,
            "constellation": {"kind": "synthetic", "seed": 9, "count": 31},
            "cn0_dbhz": 45.0,
            "errors": {
                "initial_clock_offset": 0.5,
                "clock_drift": 3e-6,
                "frontend_offset_at_ref": 200.0
            },
            "noise_seed": 77
        }"#,
    );

    let simulate = snapper()
        .args(["simulate", "--scenario"])
        .arg(&scenario_path)
        .arg("--out")
        .arg(&dataset_path)
        .arg("--nav-out")
        .arg(&nav_path)
        .arg("--truth-out")
        .arg(&truth_path)
        .arg("--json")
        .output()
        .unwrap();
    assert!(simulate.status.success(), "{simulate:?}");
    let summary: serde_json::Value = serde_json::from_slice(&simulate.stdout).unwrap();
    assert_eq!(summary["snapshots"], serde_json::json!(3));
    assert!(dataset_path.exists() && nav_path.exists() && truth_path.exists());

    let acquire = snapper()
        .args(["acquire", "--in"])
        .arg(&dataset_path)
        .args(["--json"])
        .output()
        .unwrap();
    assert!(acquire.status.success(), "{acquire:?}");
    let results: serde_json::Value = serde_json::from_slice(&acquire.stdout).unwrap();
    let detected = results
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["detected"].as_bool().unwrap())
        .count();
    assert!(detected >= 5, "only {detected} satellites detected");

    let solve = snapper()
        .args(["solve", "--in"])
        .arg(&dataset_path)
        .arg("--nav")
        .arg(&nav_path)
        .arg("--json")
        .output()
        .unwrap();
    assert!(solve.status.success(), "{solve:?}");
    let fix: serde_json::Value = serde_json::from_slice(&solve.stdout).unwrap();
    assert!((fix["position"]["lat_deg"].as_f64().unwrap() - 46.2).abs() < 0.05, "{fix}");
    assert_ne!(fix["confidence"], serde_json::json!("rejected"));

    let process = snapper()
        .args(["process", "--in"])
        .arg(&dataset_path)
        .arg("--nav")
        .arg(&nav_path)
        .arg("--out")
        .arg(&gpx_path)
        .arg("--json")
        .output()
        .unwrap();
    assert!(process.status.success(), "{process:?}");
    let processed: serde_json::Value = serde_json::from_slice(&process.stdout).unwrap();
    assert_eq!(processed["snapshots"], serde_json::json!(3));
    assert!(processed["fixes"].as_u64().unwrap() >= 2, "{processed}");
    let id = processed["id"].as_str().unwrap().to_string();
    let gpx = std::fs::read_to_string(&gpx_path).unwrap();
    assert!(gpx.starts_with("<?xml"), "{gpx}");
    assert!(gpx.matches("<trkpt ").count() >= 2, "{gpx}");

    // The same dataset through a persistent store: identical export, and
    // the follow-up subcommands can reach it by id.
    let store_dir = dir.path().join("store");
    let gpx2_path = dir.path().join("t2.gpx");
    let with_store = snapper()
        .args(["process", "--in"])
        .arg(&dataset_path)
        .arg("--nav")
        .arg(&nav_path)
        .arg("--out")
        .arg(&gpx2_path)
        .arg("--store")
        .arg(&store_dir)
        .output()
        .unwrap();
    assert!(with_store.status.success(), "{with_store:?}");
    assert_eq!(std::fs::read(&gpx_path).unwrap(), std::fs::read(&gpx2_path).unwrap());

    let export = snapper()
        .args(["export", "--store"])
        .arg(&store_dir)
        .args(["--id", &id, "--format", "csv"])
        .output()
        .unwrap();
    assert!(export.status.success(), "{export:?}");
    let csv = String::from_utf8(export.stdout).unwrap();
    assert!(csv.starts_with("time,lat,lon,confidence,temperature_c,battery_v"), "{csv}");

    let fit = snapper()
        .args(["fit-freq-model", "--store"])
        .arg(&store_dir)
        .args(["--id", &id, "--nav"])
        .arg(&nav_path)
        .args(["--window", "3", "--json"])
        .output()
        .unwrap();
    assert!(fit.status.success(), "{fit:?}");
    let model: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    let offset = model["offset_at_ref_hz"].as_f64().unwrap();
    assert!((offset - 200.0).abs() < 60.0, "offset {offset} Hz vs injected 200 Hz");

    // Serve the same store over HTTP; the already-complete dataset's track
    // must come back identical to the file export.
    let mut serve = snapper()
        .args(["serve", "--listen", "127.0.0.1:0", "--store"])
        .arg(&store_dir)
        .arg("--nav")
        .arg(&nav_path)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut first_line = String::new();
    BufReader::new(serve.stdout.as_mut().unwrap()).read_line(&mut first_line).unwrap();
    let listening: serde_json::Value = serde_json::from_str(&first_line).unwrap();
    let addr = listening["listening"].as_str().unwrap().to_string();

    let body = reqwest::blocking::get(format!("http://{addr}/api/v1/datasets/{id}/track?format=gpx"))
        .unwrap();
    assert_eq!(body.status().as_u16(), 200);
    assert_eq!(body.bytes().unwrap().to_vec(), std::fs::read(&gpx_path).unwrap());
    let missing =
        reqwest::blocking::get(format!("http://{addr}/api/v1/datasets/no-such-id")).unwrap();
    assert_eq!(missing.status().as_u16(), 404);

    serve.kill().unwrap();
    serve.wait().unwrap();
}

#[test]
fn device_sim_speaks_the_host_protocol_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let script_path = dir.path().join("script.json");
    // Plug in, let a host configure it, deploy for 400 s (captures at
    // start, +60, and +120; the end_or_full check stops the one at +180),
    // then reconnect for download.
    write_file(
        &script_path,
        r#"{
            "steps": [
                {"type": "plug_in"},
                {"type": "serve"},
                {"type": "unplug"},
                {"type": "advance", "seconds": 400, "temperature_c": 18.0, "battery_mv": 3850},
                {"type": "plug_in"},
                {"type": "serve"}
            ]
        }"#,
    );

    let mut child = snapper()
        .args(["device-sim", "--listen", "127.0.0.1:0", "--script"])
        .arg(&script_path)
        .args(["--seed", "5", "--json"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut first_line = String::new();
    stdout.read_line(&mut first_line).unwrap();
    let listening: serde_json::Value = serde_json::from_str(&first_line).unwrap();
    let addr = listening["listening"].as_str().unwrap().to_string();

    // First session: status, then configuration.
    {
        let mut link = TcpStream::connect(&addr).unwrap();
        link.write_all(&encode_frame(OP_GET_STATUS, &[])).unwrap();
        let reply = read_frame(&mut link).unwrap();
        let (opcode, payload) = decode_frame(&reply).unwrap();
        assert_eq!(opcode, OP_GET_STATUS);
        assert_eq!(payload.len(), 10);
        assert_eq!(payload[6..9], [1, 0, 0], "firmware version");
        assert_eq!(payload[9], 0, "connected_unconfigured");

        let start: i64 = 1_700_000_060_000;
        let end: i64 = start + 180_000;
        let clock: i64 = 1_700_000_000_000;
        let mut cfg = Vec::new();
        cfg.extend_from_slice(&start.to_le_bytes());
        cfg.extend_from_slice(&end.to_le_bytes());
        cfg.extend_from_slice(&60u32.to_le_bytes());
        cfg.extend_from_slice(&clock.to_le_bytes());
        link.write_all(&encode_frame(OP_SET_CONFIG, &cfg)).unwrap();
        let reply = read_frame(&mut link).unwrap();
        let (opcode, _) = decode_frame(&reply).unwrap();
        assert_eq!(opcode, OP_SET_CONFIG, "configuration acknowledged");

        link.write_all(&encode_frame(OP_GET_STATUS, &[])).unwrap();
        let reply = read_frame(&mut link).unwrap();
        let (_, payload) = decode_frame(&reply).unwrap();
        assert_eq!(payload[9], 1, "connected_configured");
    }

    // Second session: the deployment left records in flash.
    {
        let mut link = TcpStream::connect(&addr).unwrap();
        link.write_all(&encode_frame(OP_GET_SNAPSHOTS, &[])).unwrap();
        let reply = read_frame(&mut link).unwrap();
        let (opcode, payload) = decode_frame(&reply).unwrap();
        assert_eq!(opcode, OP_GET_SNAPSHOTS);
        let count = u32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(count, 3, "captures at start, +60 s, and +120 s");
        assert_eq!(payload.len(), 4 + 3 * 6_150);
        let first_ts = u64::from_le_bytes(payload[4..12].try_into().unwrap());
        assert_eq!(first_ts, 1_700_000_060_000);
    }

    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    let mut rest = String::new();
    stdout.read_to_string(&mut rest).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(rest.lines().last().unwrap()).unwrap();
    assert_eq!(summary["records"], serde_json::json!(3));
    assert_eq!(summary["state"], serde_json::json!("connected_unconfigured"));
}
