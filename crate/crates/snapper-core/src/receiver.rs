//! Deterministic receiver simulation: firmware lifecycle, capture flow,
//! flash and energy budgets, and the host protocol.
//!
//! The tag's firmware is a five-state machine (connected/unconfigured,
//! connected/configured, capture, sleep, shutdown) with a fixed edge set;
//! [`step`] is that edge set as a pure function, and [`Receiver`] wraps it
//! with a device clock, flash store, energy ledger, and host message
//! handling so deployments can be planned and host tooling tested without
//! hardware. Everything is single-threaded and deterministic: the same
//! event sequence always produces the same records and the same ledger.
//!
//! Energy accounting is bookkeeping, not electronics: the ledger integrates
//! the state-dependent quiescent current over simulated time plus a fixed
//! charge per capture, so remaining charge is exact, reproducible, and
//! non-increasing. Battery voltage is environment input, not derived from
//! the ledger; chemistry is out of scope.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::SNAPSHOT_PAYLOAD_BYTES;

/// Firmware lifecycle states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverState {
    ConnectedUnconfigured,
    ConnectedConfigured,
    Capture,
    Sleep,
    Shutdown,
}

/// Events the firmware reacts to.
#[derive(Debug, Clone, PartialEq)]
pub enum ReceiverEvent {
    PlugIn,
    Unplug,
    Configure(DeploymentConfig),
    ShutdownCmd,
    CounterInterrupt,
    CaptureDone,
    EndOrFull,
}

impl ReceiverEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ReceiverEvent::PlugIn => "plug_in",
            ReceiverEvent::Unplug => "unplug",
            ReceiverEvent::Configure(_) => "configure",
            ReceiverEvent::ShutdownCmd => "shutdown_cmd",
            ReceiverEvent::CounterInterrupt => "counter_interrupt",
            ReceiverEvent::CaptureDone => "capture_done",
            ReceiverEvent::EndOrFull => "end_or_full",
        }
    }
}

/// A deployment window plus the host clock written to the device at
/// configuration time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    /// First scheduled capture, Unix ms.
    pub start_unix_ms: i64,
    /// Deployment end, Unix ms; a wake at or past this shuts the device
    /// down instead of capturing.
    pub end_unix_ms: i64,
    /// Seconds between captures, at least 1.
    pub interval_s: u32,
    /// Host time written to the device clock when the config landed.
    pub synced_clock_unix_ms: i64,
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<(), ReceiverError> {
        if self.start_unix_ms >= self.end_unix_ms {
            return Err(ReceiverError::InvalidConfig(format!(
                "start {} is not before end {}",
                self.start_unix_ms, self.end_unix_ms
            )));
        }
        if self.interval_s < 1 {
            return Err(ReceiverError::InvalidConfig("interval must be at least 1 s".into()));
        }
        if self.start_unix_ms < 0 || self.synced_clock_unix_ms < 0 {
            return Err(ReceiverError::InvalidConfig("times must be after the Unix epoch".into()));
        }
        Ok(())
    }
}

/// Board-level current draw figures.
///
/// `sleep_current_a` is the whole-board sleep figure (1-2 µA band, default
/// its midpoint); [`MCU_DEEP_SLEEP_CURRENT_A`] keeps the MCU-only figure for
/// reference, but lifetime arithmetic always uses the board-level number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    /// Whole-board sleep current, A.
    pub sleep_current_a: f64,
    /// Everything-off current, A.
    pub shutoff_current_a: f64,
    /// Peak current while the radio samples, A.
    pub capture_peak_current_a: f64,
    /// Charge consumed by one full capture sequence, Ah.
    pub capture_charge_ah: f64,
    /// Battery capacity, Ah.
    pub battery_capacity_ah: f64,
}

/// MCU-only deep-sleep draw; the board as a whole idles at `sleep_current_a`.
pub const MCU_DEEP_SLEEP_CURRENT_A: f64 = 0.5e-6;

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            sleep_current_a: 1.5e-6,
            shutoff_current_a: 2e-8,
            capture_peak_current_a: 2.5e-2,
            capture_charge_ah: 3e-7,
            battery_capacity_ah: 0.04,
        }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<(), ReceiverError> {
        if !(1e-6..=2e-6).contains(&self.sleep_current_a) {
            return Err(ReceiverError::InvalidConfig(format!(
                "sleep current {} A outside the 1-2 µA board band",
                self.sleep_current_a
            )));
        }
        if self.capture_charge_ah > 3e-7 {
            return Err(ReceiverError::InvalidConfig(format!(
                "capture charge {} Ah exceeds the 0.3 µAh budget",
                self.capture_charge_ah
            )));
        }
        if self.battery_capacity_ah <= 0.0 {
            return Err(ReceiverError::InvalidConfig("battery capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Flash capacity arithmetic. The slot size is an accounting figure for how
/// many records fit, not a byte-level layout claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlashLayout {
    pub capacity_bits: u64,
    pub record_slot_bytes: u32,
}

impl Default for FlashLayout {
    fn default() -> Self {
        FlashLayout { capacity_bits: 536_870_912, record_slot_bytes: 6_144 }
    }
}

impl FlashLayout {
    /// Records that fit: ⌊capacity/8/slot⌋, 10 922 for the default part.
    pub fn max_records(&self) -> usize {
        (self.capacity_bits / 8 / u64::from(self.record_slot_bytes)) as usize
    }
}

/// The thirteen capture-flow steps, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureStep {
    MeasureTemperature,
    MeasureBatteryVoltage,
    RadioAndHfOscillatorOn,
    StabilizationWait,
    HfClockFrequencyCheck,
    SwitchClockDomain,
    GetTimestamp,
    CaptureSnapshotToRam,
    SwitchClockDomainBack,
    RadioAndHfOscillatorOff,
    FlashOn,
    WriteRecord,
    FlashOff,
}

/// Canonical capture order; a conforming capture logs exactly this.
pub const CAPTURE_SEQUENCE: [CaptureStep; 13] = [
    CaptureStep::MeasureTemperature,
    CaptureStep::MeasureBatteryVoltage,
    CaptureStep::RadioAndHfOscillatorOn,
    CaptureStep::StabilizationWait,
    CaptureStep::HfClockFrequencyCheck,
    CaptureStep::SwitchClockDomain,
    CaptureStep::GetTimestamp,
    CaptureStep::CaptureSnapshotToRam,
    CaptureStep::SwitchClockDomainBack,
    CaptureStep::RadioAndHfOscillatorOff,
    CaptureStep::FlashOn,
    CaptureStep::WriteRecord,
    CaptureStep::FlashOff,
];

/// Capture aborts below this battery voltage.
pub const BROWNOUT_THRESHOLD_MV: u16 = 3_000;

/// What the world looks like at one capture instant.
#[derive(Debug, Clone)]
pub struct CaptureEnvironment {
    pub temperature_centi_c: i16,
    pub battery_mv: u16,
    /// Packed 1-bit samples, exactly [`SNAPSHOT_PAYLOAD_BYTES`] long.
    pub payload: Vec<u8>,
}

/// One record as it sits in flash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub timestamp_ms: u64,
    pub temperature_centi_c: i16,
    pub battery_mv: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum ReceiverError {
    #[error("no transition for {event} in state {state:?}")]
    Rejected { state: ReceiverState, event: &'static str },
    #[error("deployment config rejected: {0}")]
    InvalidConfig(String),
    #[error("capture requires the capture state, receiver is {0:?}")]
    NotCapturing(ReceiverState),
    #[error("flash is full at {0} records")]
    FlashFull(usize),
    #[error("brownout at {battery_mv} mV, capture aborted")]
    Brownout { battery_mv: u16 },
}

/// The firmware transition function: exactly the documented edge set,
/// everything else rejected with the state unchanged.
///
/// `config` and `now_unix_ms` only matter for the unplug-from-configured
/// fork, which goes to sleep when the first capture is still in the future
/// and straight to capture when one is already due.
pub fn step(
    state: ReceiverState,
    event: &ReceiverEvent,
    config: Option<&DeploymentConfig>,
    now_unix_ms: i64,
) -> Result<ReceiverState, ReceiverError> {
    use ReceiverEvent as E;
    use ReceiverState as S;
    let next = match (state, event) {
        (S::Sleep | S::Shutdown, E::PlugIn) => S::ConnectedUnconfigured,
        (S::ConnectedUnconfigured, E::Configure(cfg)) => {
            cfg.validate()?;
            S::ConnectedConfigured
        }
        (S::ConnectedConfigured, E::ShutdownCmd) => S::ConnectedUnconfigured,
        (S::ConnectedUnconfigured, E::Unplug) => S::Shutdown,
        (S::ConnectedConfigured, E::Unplug) => match config {
            Some(cfg) if now_unix_ms >= cfg.start_unix_ms => S::Capture,
            Some(_) => S::Sleep,
            None => return Err(ReceiverError::Rejected { state, event: event.name() }),
        },
        (S::Sleep, E::CounterInterrupt) => S::Capture,
        (S::Capture, E::CaptureDone) => S::Sleep,
        (S::Capture, E::EndOrFull) => S::Shutdown,
        _ => return Err(ReceiverError::Rejected { state, event: event.name() }),
    };
    Ok(next)
}

/// Lifetime estimate with both budgets spelled out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lifetime {
    pub days: f64,
    pub limiting_factor: LimitingFactor,
    pub energy_days: f64,
    pub memory_days: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitingFactor {
    Energy,
    Memory,
}

impl std::fmt::Display for LimitingFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LimitingFactor::Energy => "energy",
            LimitingFactor::Memory => "memory",
        })
    }
}

/// How long a deployment runs before the battery or the flash gives out.
///
/// Energy: the battery divided by the average draw, sleep current plus the
/// per-capture charge amortized over the interval. Memory: the flash record
/// budget times the interval. `interval_s` may be infinite to model a
/// device that never captures.
pub fn estimate_lifetime(interval_s: f64, energy: &EnergyModel, flash: &FlashLayout) -> Lifetime {
    assert!(interval_s >= 1.0, "capture interval must be at least 1 s");
    let captures_per_second = if interval_s.is_finite() { 1.0 / interval_s } else { 0.0 };
    let average_current_a = energy.sleep_current_a + energy.capture_charge_ah * 3_600.0 * captures_per_second;
    let energy_days = energy.battery_capacity_ah / average_current_a / 24.0;
    let memory_days = if interval_s.is_finite() {
        flash.max_records() as f64 * interval_s / 86_400.0
    } else {
        f64::INFINITY
    };
    let (days, limiting_factor) = if energy_days <= memory_days {
        (energy_days, LimitingFactor::Energy)
    } else {
        (memory_days, LimitingFactor::Memory)
    };
    Lifetime { days, limiting_factor, energy_days, memory_days }
}

/// A simulated receiver: the state machine plus clock, flash, energy
/// ledger, and staged firmware.
#[derive(Debug, Clone)]
pub struct Receiver {
    state: ReceiverState,
    clock_unix_ms: i64,
    config: Option<DeploymentConfig>,
    next_capture_unix_ms: i64,
    records: Vec<StoredRecord>,
    energy: EnergyModel,
    flash: FlashLayout,
    sleep_ms: i64,
    shutdown_ms: i64,
    captures: u64,
    brownouts: u64,
    battery_mv: u16,
    firmware_version: [u8; 3],
    staged_firmware: Option<Vec<u8>>,
    hf_oscillator_on: bool,
    last_capture_log: Vec<CaptureStep>,
}

impl Receiver {
    /// A fresh device, off in its box.
    pub fn new(energy: EnergyModel, flash: FlashLayout) -> Self {
        Receiver {
            state: ReceiverState::Shutdown,
            clock_unix_ms: 0,
            config: None,
            next_capture_unix_ms: 0,
            records: Vec::new(),
            energy,
            flash,
            sleep_ms: 0,
            shutdown_ms: 0,
            captures: 0,
            brownouts: 0,
            battery_mv: 3_700,
            firmware_version: [1, 0, 0],
            staged_firmware: None,
            hf_oscillator_on: false,
            last_capture_log: Vec::new(),
        }
    }

    pub fn state(&self) -> ReceiverState {
        self.state
    }

    pub fn clock_unix_ms(&self) -> i64 {
        self.clock_unix_ms
    }

    pub fn config(&self) -> Option<&DeploymentConfig> {
        self.config.as_ref()
    }

    pub fn records(&self) -> &[StoredRecord] {
        &self.records
    }

    pub fn brownouts(&self) -> u64 {
        self.brownouts
    }

    pub fn firmware_version(&self) -> [u8; 3] {
        self.firmware_version
    }

    pub fn hf_oscillator_on(&self) -> bool {
        self.hf_oscillator_on
    }

    pub fn last_capture_log(&self) -> &[CaptureStep] {
        &self.last_capture_log
    }

    /// Ambient battery voltage as the next measurement will see it.
    pub fn set_battery_mv(&mut self, mv: u16) {
        self.battery_mv = mv;
    }

    pub fn battery_mv(&self) -> u16 {
        self.battery_mv
    }

    /// Remaining charge by the ledger: capacity minus the sleep and
    /// shutdown integrals minus the per-capture debits. Computed from the
    /// counters on demand, so it is exact and non-increasing by
    /// construction.
    pub fn remaining_charge_ah(&self) -> f64 {
        self.energy.battery_capacity_ah
            - self.sleep_ms as f64 / 3_600_000.0 * self.energy.sleep_current_a
            - self.shutdown_ms as f64 / 3_600_000.0 * self.energy.shutoff_current_a
            - self.captures as f64 * self.energy.capture_charge_ah
    }

    /// Advances the device clock, integrating quiescent draw for the
    /// current state. Connected states are host-powered and the capture
    /// burst is accounted per capture, so only sleep and shutdown debit
    /// time-based charge.
    pub fn advance_to(&mut self, unix_ms: i64) {
        let dt = (unix_ms - self.clock_unix_ms).max(0);
        match self.state {
            ReceiverState::Sleep => self.sleep_ms += dt,
            ReceiverState::Shutdown => self.shutdown_ms += dt,
            _ => {}
        }
        self.clock_unix_ms = self.clock_unix_ms.max(unix_ms);
    }

    /// Applies one event through [`step`], with the side effects the edge
    /// implies (configuration storage, clock sync, capture scheduling).
    pub fn handle_event(&mut self, event: ReceiverEvent) -> Result<ReceiverState, ReceiverError> {
        let next = step(self.state, &event, self.config.as_ref(), self.clock_unix_ms)?;
        if let ReceiverEvent::Configure(cfg) = event {
            self.clock_unix_ms = cfg.synced_clock_unix_ms;
            self.next_capture_unix_ms = cfg.start_unix_ms;
            self.config = Some(cfg);
        }
        self.state = next;
        Ok(next)
    }

    /// Whether the end time or the flash bound stops the next capture.
    pub fn end_or_full_due(&self) -> bool {
        let past_end = self.config.is_some_and(|c| self.clock_unix_ms >= c.end_unix_ms);
        past_end || self.records.len() >= self.flash.max_records()
    }

    /// Runs the thirteen-step capture flow and stores a record.
    ///
    /// The environment's payload must be exactly one snapshot. A battery
    /// reading below [`BROWNOUT_THRESHOLD_MV`] aborts after the two
    /// measurement steps with nothing stored and no charge debited (the
    /// radio never powered up).
    pub fn capture(&mut self, env: &CaptureEnvironment) -> Result<&StoredRecord, ReceiverError> {
        if self.state != ReceiverState::Capture {
            return Err(ReceiverError::NotCapturing(self.state));
        }
        if self.records.len() >= self.flash.max_records() {
            return Err(ReceiverError::FlashFull(self.records.len()));
        }
        assert_eq!(env.payload.len(), SNAPSHOT_PAYLOAD_BYTES, "payload must be one snapshot");

        self.last_capture_log.clear();
        self.last_capture_log.push(CaptureStep::MeasureTemperature);
        let temperature = env.temperature_centi_c;
        self.last_capture_log.push(CaptureStep::MeasureBatteryVoltage);
        self.battery_mv = env.battery_mv;
        if env.battery_mv < BROWNOUT_THRESHOLD_MV {
            self.brownouts += 1;
            return Err(ReceiverError::Brownout { battery_mv: env.battery_mv });
        }

        self.last_capture_log.push(CaptureStep::RadioAndHfOscillatorOn);
        self.hf_oscillator_on = true;
        self.last_capture_log.push(CaptureStep::StabilizationWait);
        self.last_capture_log.push(CaptureStep::HfClockFrequencyCheck);
        self.last_capture_log.push(CaptureStep::SwitchClockDomain);
        self.last_capture_log.push(CaptureStep::GetTimestamp);
        let timestamp_ms = self.clock_unix_ms.max(0) as u64;
        self.last_capture_log.push(CaptureStep::CaptureSnapshotToRam);
        self.last_capture_log.push(CaptureStep::SwitchClockDomainBack);
        self.last_capture_log.push(CaptureStep::RadioAndHfOscillatorOff);
        self.hf_oscillator_on = false;
        self.last_capture_log.push(CaptureStep::FlashOn);
        self.last_capture_log.push(CaptureStep::WriteRecord);
        self.records.push(StoredRecord {
            timestamp_ms,
            temperature_centi_c: temperature,
            battery_mv: env.battery_mv,
            payload: env.payload.clone(),
        });
        self.last_capture_log.push(CaptureStep::FlashOff);
        self.captures += 1;
        Ok(self.records.last().expect("just pushed"))
    }

    /// Drives a configured, unplugged deployment to its end: wake at each
    /// scheduled capture, run the flow, sleep until the next, shut down on
    /// end-or-full. The environment callback supplies the world at each
    /// capture timestamp. Returns the number of records stored.
    pub fn run_deployment<F>(&mut self, environment: F) -> Result<usize, ReceiverError>
    where
        F: FnMut(i64) -> CaptureEnvironment,
    {
        self.run_deployment_until(i64::MAX, environment)
    }

    /// [`run_deployment`] bounded in time: runs every capture scheduled up
    /// to `target_unix_ms`, then leaves the device asleep with its clock on
    /// the target. Scripted simulations advance a deployment piecewise with
    /// this.
    pub fn run_deployment_until<F>(
        &mut self,
        target_unix_ms: i64,
        mut environment: F,
    ) -> Result<usize, ReceiverError>
    where
        F: FnMut(i64) -> CaptureEnvironment,
    {
        let stored_before = self.records.len();
        loop {
            match self.state {
                ReceiverState::Sleep => {
                    if self.next_capture_unix_ms > target_unix_ms {
                        self.advance_to(target_unix_ms);
                        break;
                    }
                    self.advance_to(self.next_capture_unix_ms);
                    self.handle_event(ReceiverEvent::CounterInterrupt)?;
                }
                ReceiverState::Capture => {
                    if self.end_or_full_due() {
                        self.handle_event(ReceiverEvent::EndOrFull)?;
                        break;
                    }
                    match self.capture(&environment(self.clock_unix_ms)) {
                        Ok(_) | Err(ReceiverError::Brownout { .. }) => {}
                        Err(other) => return Err(other),
                    }
                    let interval_ms =
                        i64::from(self.config.expect("capture implies config").interval_s) * 1_000;
                    self.next_capture_unix_ms += interval_ms;
                    self.handle_event(ReceiverEvent::CaptureDone)?;
                }
                _ => break,
            }
        }
        Ok(self.records.len() - stored_before)
    }

    /// Simulated reboot: applies staged firmware (first three bytes are the
    /// version) and comes back up as a freshly plugged, unconfigured
    /// device. Flash contents survive; the deployment config does not.
    pub fn reboot(&mut self) {
        if let Some(image) = self.staged_firmware.take() {
            if image.len() >= 3 {
                self.firmware_version = [image[0], image[1], image[2]];
            }
        }
        self.config = None;
        self.state = ReceiverState::ConnectedUnconfigured;
    }
}

// --- Host protocol -------------------------------------------------------
//
// Framed messages over a byte stream standing in for USB bulk endpoints:
//
//   magic 0x5A | opcode u8 | payload length u32 LE | payload | crc32 u32 LE
//
// The CRC-32 (IEEE) covers opcode, length, and payload. Responses reuse the
// request opcode; errors come back as NAK frames whose 1-byte payload is a
// reason code. Record bytes inside GET_SNAPSHOTS responses use the same
// 6150-byte layout as dataset records, so a host can assemble an upload
// file by prepending the dataset header.

pub const FRAME_MAGIC: u8 = 0x5A;
pub const FRAME_OVERHEAD: usize = 1 + 1 + 4 + 4;

pub const OP_GET_STATUS: u8 = 0x01;
pub const OP_SET_CONFIG: u8 = 0x02;
pub const OP_GET_SNAPSHOTS: u8 = 0x03;
pub const OP_FIRMWARE_UPDATE: u8 = 0x04;
pub const OP_NAK: u8 = 0x7F;

pub const NAK_UNKNOWN_OPCODE: u8 = 1;
pub const NAK_BAD_FRAME: u8 = 2;
pub const NAK_REJECTED: u8 = 3;
pub const NAK_CRC_MISMATCH: u8 = 4;
pub const NAK_MALFORMED: u8 = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame is {0} bytes, shorter than the {FRAME_OVERHEAD}-byte envelope")]
    Truncated(usize),
    #[error("bad frame magic {0:#04x}")]
    BadMagic(u8),
    #[error("frame declares {declared} payload bytes, {got} present")]
    LengthMismatch { declared: usize, got: usize },
    #[error("frame crc {got:#010x} does not match computed {computed:#010x}")]
    Crc { got: u32, computed: u32 },
}

/// Wraps an opcode and payload in the frame envelope.
pub fn encode_frame(opcode: u8, payload: &[u8]) -> Vec<u8> {
    let mut frame = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
    frame.push(FRAME_MAGIC);
    frame.push(opcode);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(payload);
    let crc = crc32fast::hash(&frame[1..]);
    frame.extend_from_slice(&crc.to_le_bytes());
    frame
}

/// Validates the envelope and returns the opcode and payload.
pub fn decode_frame(frame: &[u8]) -> Result<(u8, &[u8]), FrameError> {
    if frame.len() < FRAME_OVERHEAD {
        return Err(FrameError::Truncated(frame.len()));
    }
    if frame[0] != FRAME_MAGIC {
        return Err(FrameError::BadMagic(frame[0]));
    }
    let declared = u32::from_le_bytes(frame[2..6].try_into().expect("length checked")) as usize;
    let got = frame.len() - FRAME_OVERHEAD;
    if declared != got {
        return Err(FrameError::LengthMismatch { declared, got });
    }
    let body = &frame[1..frame.len() - 4];
    let computed = crc32fast::hash(body);
    let stored = u32::from_le_bytes(frame[frame.len() - 4..].try_into().expect("length checked"));
    if stored != computed {
        return Err(FrameError::Crc { got: stored, computed });
    }
    Ok((frame[1], &frame[6..frame.len() - 4]))
}

fn nak(code: u8) -> Vec<u8> {
    encode_frame(OP_NAK, &[code])
}

fn state_code(state: ReceiverState) -> u8 {
    match state {
        ReceiverState::ConnectedUnconfigured => 0,
        ReceiverState::ConnectedConfigured => 1,
        ReceiverState::Capture => 2,
        ReceiverState::Sleep => 3,
        ReceiverState::Shutdown => 4,
    }
}

impl Receiver {
    /// Handles one host frame and always returns a response frame.
    ///
    /// Host messages only make sense while connected; anything else NAKs
    /// with [`NAK_REJECTED`], malformed envelopes with [`NAK_BAD_FRAME`].
    pub fn handle_host_frame(&mut self, frame: &[u8]) -> Vec<u8> {
        let (opcode, payload) = match decode_frame(frame) {
            Ok(parts) => parts,
            Err(_) => return nak(NAK_BAD_FRAME),
        };
        if !matches!(
            self.state,
            ReceiverState::ConnectedUnconfigured | ReceiverState::ConnectedConfigured
        ) {
            return nak(NAK_REJECTED);
        }
        match opcode {
            OP_GET_STATUS => {
                let mut out = Vec::with_capacity(10);
                out.extend_from_slice(&self.battery_mv.to_le_bytes());
                out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
                out.extend_from_slice(&self.firmware_version);
                out.push(state_code(self.state));
                encode_frame(OP_GET_STATUS, &out)
            }
            OP_SET_CONFIG => {
                if payload.len() != 28 {
                    return nak(NAK_MALFORMED);
                }
                let cfg = DeploymentConfig {
                    start_unix_ms: i64::from_le_bytes(payload[0..8].try_into().expect("sized")),
                    end_unix_ms: i64::from_le_bytes(payload[8..16].try_into().expect("sized")),
                    interval_s: u32::from_le_bytes(payload[16..20].try_into().expect("sized")),
                    synced_clock_unix_ms: i64::from_le_bytes(
                        payload[20..28].try_into().expect("sized"),
                    ),
                };
                match self.handle_event(ReceiverEvent::Configure(cfg)) {
                    Ok(_) => encode_frame(OP_SET_CONFIG, &[]),
                    Err(ReceiverError::InvalidConfig(_)) => nak(NAK_MALFORMED),
                    Err(_) => nak(NAK_REJECTED),
                }
            }
            OP_GET_SNAPSHOTS => {
                let mut out =
                    Vec::with_capacity(4 + self.records.len() * (12 + SNAPSHOT_PAYLOAD_BYTES));
                out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
                for record in &self.records {
                    out.extend_from_slice(&record.timestamp_ms.to_le_bytes());
                    out.extend_from_slice(&record.temperature_centi_c.to_le_bytes());
                    out.extend_from_slice(&record.battery_mv.to_le_bytes());
                    out.extend_from_slice(&record.payload);
                }
                encode_frame(OP_GET_SNAPSHOTS, &out)
            }
            OP_FIRMWARE_UPDATE => {
                if payload.len() < 4 {
                    return nak(NAK_MALFORMED);
                }
                let expected = u32::from_le_bytes(payload[0..4].try_into().expect("sized"));
                let image = &payload[4..];
                let computed = crc32fast::hash(image);
                if computed != expected {
                    return nak(NAK_CRC_MISMATCH);
                }
                self.staged_firmware = Some(image.to_vec());
                encode_frame(OP_FIRMWARE_UPDATE, &computed.to_le_bytes())
            }
            _ => nak(NAK_UNKNOWN_OPCODE),
        }
    }
}

/// Reads one frame from a byte stream (socket or in-memory channel).
pub fn read_frame<R: std::io::Read>(reader: &mut R) -> std::io::Result<Vec<u8>> {
    let mut head = [0u8; 6];
    reader.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head[2..6].try_into().expect("sized")) as usize;
    let mut frame = vec![0u8; 6 + len + 4];
    frame[..6].copy_from_slice(&head);
    reader.read_exact(&mut frame[6..])?;
    Ok(frame)
}

/// In-memory duplex byte channel standing in for the USB link: host writes
/// frames in, reads responses out.
#[derive(Debug, Default)]
pub struct HostLink {
    responses: VecDeque<Vec<u8>>,
}

impl HostLink {
    pub fn new() -> Self {
        HostLink::default()
    }

    pub fn send(&mut self, receiver: &mut Receiver, opcode: u8, payload: &[u8]) {
        let response = receiver.handle_host_frame(&encode_frame(opcode, payload));
        self.responses.push_back(response);
    }

    pub fn recv(&mut self) -> Option<Vec<u8>> {
        self.responses.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config(start: i64, end: i64, interval_s: u32) -> DeploymentConfig {
        DeploymentConfig {
            start_unix_ms: start,
            end_unix_ms: end,
            interval_s,
            synced_clock_unix_ms: start - 60_000,
        }
    }

    fn payload() -> Vec<u8> {
        vec![0xA7; SNAPSHOT_PAYLOAD_BYTES]
    }

    fn good_env() -> CaptureEnvironment {
        CaptureEnvironment { temperature_centi_c: 1_850, battery_mv: 3_650, payload: payload() }
    }

    /// Puts a fresh receiver into the capture state at `now` with the given
    /// config, via the real edges.
    fn receiver_in_capture(cfg: DeploymentConfig, now: i64) -> Receiver {
        let mut r = Receiver::new(EnergyModel::default(), FlashLayout::default());
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        r.handle_event(ReceiverEvent::Configure(cfg)).unwrap();
        r.advance_to(now);
        assert_eq!(r.handle_event(ReceiverEvent::Unplug).unwrap(), ReceiverState::Capture);
        r
    }

    #[test]
    fn transition_table_is_exhaustive() {
        use ReceiverEvent as E;
        use ReceiverState as S;
        let states =
            [S::ConnectedUnconfigured, S::ConnectedConfigured, S::Capture, S::Sleep, S::Shutdown];
        let cfg = test_config(1_000_000, 2_000_000, 60);
        let events = [
            E::PlugIn,
            E::Unplug,
            E::Configure(cfg),
            E::ShutdownCmd,
            E::CounterInterrupt,
            E::CaptureDone,
            E::EndOrFull,
        ];
        // The full edge set, with the unplug fork pinned to the future-start
        // branch (now < start); the due branch is asserted separately below.
        let expected = |s: S, e: &E| -> Option<S> {
            match (s, e) {
                (S::Sleep | S::Shutdown, E::PlugIn) => Some(S::ConnectedUnconfigured),
                (S::ConnectedUnconfigured, E::Configure(_)) => Some(S::ConnectedConfigured),
                (S::ConnectedConfigured, E::ShutdownCmd) => Some(S::ConnectedUnconfigured),
                (S::ConnectedUnconfigured, E::Unplug) => Some(S::Shutdown),
                (S::ConnectedConfigured, E::Unplug) => Some(S::Sleep),
                (S::Sleep, E::CounterInterrupt) => Some(S::Capture),
                (S::Capture, E::CaptureDone) => Some(S::Sleep),
                (S::Capture, E::EndOrFull) => Some(S::Shutdown),
                _ => None,
            }
        };
        for &s in &states {
            for e in &events {
                let got = step(s, e, Some(&cfg), 500_000);
                match expected(s, e) {
                    Some(next) => assert_eq!(got.unwrap(), next, "{s:?} on {}", e.name()),
                    None => {
                        assert!(got.is_err(), "{s:?} on {} should be rejected", e.name());
                    }
                }
            }
        }
        // The unplug fork's other branch: a capture already due.
        let due = step(S::ConnectedConfigured, &E::Unplug, Some(&cfg), 1_000_000).unwrap();
        assert_eq!(due, S::Capture);
        let rejected = step(S::Shutdown, &E::CounterInterrupt, None, 0);
        assert!(matches!(rejected, Err(ReceiverError::Rejected { .. })));
    }

    #[test]
    fn capture_log_matches_the_thirteen_step_order() {
        let cfg = test_config(1_000_000, 100_000_000, 60);
        let mut r = receiver_in_capture(cfg, 1_000_000);
        let before = r.remaining_charge_ah();
        let record = r.capture(&good_env()).unwrap().clone();
        assert_eq!(r.last_capture_log(), &CAPTURE_SEQUENCE);
        assert_eq!(record.timestamp_ms, 1_000_000);
        assert_eq!(record.temperature_centi_c, 1_850);
        assert_eq!(record.battery_mv, 3_650);
        assert_eq!(record.payload, payload());
        let debit = before - r.remaining_charge_ah();
        assert!((debit - 3e-7).abs() < 1e-12, "capture debits 0.3 µAh, got {debit}");
        assert!(!r.hf_oscillator_on(), "oscillator must be off after the flow");
    }

    #[test]
    fn brownout_aborts_capture_without_a_record() {
        let cfg = test_config(1_000_000, 100_000_000, 60);
        let mut r = receiver_in_capture(cfg, 1_000_000);
        let before = r.remaining_charge_ah();
        let low = CaptureEnvironment { battery_mv: 2_900, ..good_env() };
        let err = r.capture(&low).unwrap_err();
        assert!(matches!(err, ReceiverError::Brownout { battery_mv: 2_900 }));
        assert_eq!(r.records().len(), 0);
        assert_eq!(r.brownouts(), 1);
        assert_eq!(
            r.last_capture_log(),
            &[CaptureStep::MeasureTemperature, CaptureStep::MeasureBatteryVoltage],
            "the radio never powers up on a brownout"
        );
        assert_eq!(r.remaining_charge_ah(), before, "aborted capture debits nothing");
        assert!(!r.hf_oscillator_on());
        // The flow still hands control back to sleep.
        r.handle_event(ReceiverEvent::CaptureDone).unwrap();
        assert_eq!(r.state(), ReceiverState::Sleep);

        r.handle_event(ReceiverEvent::CounterInterrupt).unwrap();
        r.capture(&good_env()).unwrap();
        assert_eq!(r.records().len(), 1);
    }

    #[test]
    fn deployment_walks_the_schedule_and_shuts_down_at_end() {
        let start = 1_700_000_000_000;
        let cfg = DeploymentConfig {
            start_unix_ms: start,
            end_unix_ms: start + 600_000,
            interval_s: 60,
            synced_clock_unix_ms: start - 5_000,
        };
        let mut r = Receiver::new(EnergyModel::default(), FlashLayout::default());
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        r.handle_event(ReceiverEvent::Configure(cfg)).unwrap();
        assert_eq!(r.clock_unix_ms(), start - 5_000, "clock syncs at configuration");
        assert_eq!(r.handle_event(ReceiverEvent::Unplug).unwrap(), ReceiverState::Sleep);

        let stored = r.run_deployment(|_| good_env()).unwrap();
        assert_eq!(stored, 10, "captures at start + 0..9 intervals, wake at end shuts down");
        assert_eq!(r.state(), ReceiverState::Shutdown);
        let times: Vec<u64> = r.records().iter().map(|rec| rec.timestamp_ms).collect();
        let expected: Vec<u64> = (0..10).map(|k| (start + k * 60_000) as u64).collect();
        assert_eq!(times, expected);
        assert!(!r.hf_oscillator_on());
    }

    #[test]
    fn flash_bound_raises_end_or_full() {
        let start = 1_700_000_000_000;
        let cfg = test_config(start, start + 86_400_000, 60);
        let tiny = FlashLayout { capacity_bits: 6_144 * 8 * 3, record_slot_bytes: 6_144 };
        assert_eq!(tiny.max_records(), 3);
        let mut r = Receiver::new(EnergyModel::default(), tiny);
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        r.handle_event(ReceiverEvent::Configure(cfg)).unwrap();
        r.advance_to(start);
        r.handle_event(ReceiverEvent::Unplug).unwrap();
        let stored = r.run_deployment(|_| good_env()).unwrap();
        assert_eq!(stored, 3, "capture count never exceeds the flash bound");
        assert_eq!(r.state(), ReceiverState::Shutdown);

        assert_eq!(FlashLayout::default().max_records(), 10_922);
    }

    #[test]
    fn energy_ledger_is_exact_and_monotone() {
        let start = 1_700_000_000_000;
        let cfg = test_config(start, start + 3_600_000 * 48, 3_600);
        let energy = EnergyModel::default();
        let mut r = Receiver::new(energy, FlashLayout::default());
        let mut last = r.remaining_charge_ah();
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        r.handle_event(ReceiverEvent::Configure(cfg)).unwrap();
        r.handle_event(ReceiverEvent::Unplug).unwrap();
        assert_eq!(r.state(), ReceiverState::Sleep);
        r.run_deployment(|_| good_env()).unwrap();
        assert!(r.remaining_charge_ah() <= last);
        last = r.remaining_charge_ah();
        r.advance_to(start + 3_600_000 * 72);
        assert!(r.remaining_charge_ah() <= last);

        // Oracle: recompute the ledger from the event history. Sleep covers
        // the 60 s from clock sync to the first capture, the 47 hours
        // between the 48 captures, and the final hour before the wake that
        // sees the end time; shutdown covers the 24 h advanced afterwards.
        let sleep_ms = 60_000 + 48 * 3_600_000;
        let shutdown_ms = 24 * 3_600_000;
        let expected = energy.battery_capacity_ah
            - sleep_ms as f64 / 3_600_000.0 * energy.sleep_current_a
            - shutdown_ms as f64 / 3_600_000.0 * energy.shutoff_current_a
            - 48.0 * energy.capture_charge_ah;
        assert_eq!(r.records().len(), 48);
        assert!(
            (r.remaining_charge_ah() - expected).abs() < 1e-18,
            "ledger {} vs oracle {}",
            r.remaining_charge_ah(),
            expected
        );
    }

    #[test]
    fn lifetime_matches_the_budget_arithmetic() {
        let energy = EnergyModel::default();
        let flash = FlashLayout::default();

        let hourly = estimate_lifetime(3_600.0, &energy, &flash);
        assert_eq!(hourly.limiting_factor, LimitingFactor::Memory);
        assert!((hourly.memory_days - 10_922.0 / 24.0).abs() < 1e-9);
        assert!((hourly.days - 455.08).abs() < 0.01);
        // Average draw 1.5 µA + 0.3 µAh/h = 1.8 µA -> 40 mAh lasts ~2.5 y.
        assert!((hourly.energy_days - 0.04 / 1.8e-6 / 24.0).abs() < 1e-6);
        assert!((hourly.energy_days / 365.25 - 2.53).abs() < 0.02);
        assert!(hourly.days > 365.0, "a 40 mAh hourly deployment outlives a year");

        let idle = estimate_lifetime(f64::INFINITY, &energy, &flash);
        assert_eq!(idle.limiting_factor, LimitingFactor::Energy);
        assert!((idle.days - 1_111.1).abs() < 0.05, "40 000 µAh / 1.5 µA, got {}", idle.days);

        let fast = estimate_lifetime(60.0, &energy, &flash);
        assert_eq!(fast.limiting_factor, LimitingFactor::Memory);
        assert!((fast.days - 10_922.0 * 60.0 / 86_400.0).abs() < 1e-9);
    }

    #[test]
    fn energy_model_bands_are_enforced() {
        assert!(EnergyModel::default().validate().is_ok());
        let lazy = EnergyModel { sleep_current_a: 2.5e-6, ..EnergyModel::default() };
        assert!(lazy.validate().is_err());
        let hungry = EnergyModel { capture_charge_ah: 4e-7, ..EnergyModel::default() };
        assert!(hungry.validate().is_err());
    }

    #[test]
    fn status_and_config_round_trip_over_the_protocol() {
        let mut r = Receiver::new(EnergyModel::default(), FlashLayout::default());
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        r.set_battery_mv(3_810);

        let status = r.handle_host_frame(&encode_frame(OP_GET_STATUS, &[]));
        let (op, body) = decode_frame(&status).unwrap();
        assert_eq!(op, OP_GET_STATUS);
        assert_eq!(u16::from_le_bytes(body[0..2].try_into().unwrap()), 3_810);
        assert_eq!(u32::from_le_bytes(body[2..6].try_into().unwrap()), 0);
        assert_eq!(&body[6..9], &[1, 0, 0]);
        assert_eq!(body[9], 0, "connected_unconfigured");

        let cfg = test_config(1_700_000_000_000, 1_700_003_600_000, 300);
        let mut payload = Vec::new();
        payload.extend_from_slice(&cfg.start_unix_ms.to_le_bytes());
        payload.extend_from_slice(&cfg.end_unix_ms.to_le_bytes());
        payload.extend_from_slice(&cfg.interval_s.to_le_bytes());
        payload.extend_from_slice(&cfg.synced_clock_unix_ms.to_le_bytes());
        let ack = r.handle_host_frame(&encode_frame(OP_SET_CONFIG, &payload));
        assert_eq!(decode_frame(&ack).unwrap().0, OP_SET_CONFIG);
        assert_eq!(r.state(), ReceiverState::ConnectedConfigured);
        assert_eq!(r.clock_unix_ms(), cfg.synced_clock_unix_ms, "clock syncs to host time");
        assert_eq!(r.config(), Some(&cfg));

        let status = r.handle_host_frame(&encode_frame(OP_GET_STATUS, &[]));
        let (_, body) = decode_frame(&status).unwrap();
        assert_eq!(body[9], 1, "connected_configured");

        // Reconfiguring without a shutdown command first is not an edge.
        let again = r.handle_host_frame(&encode_frame(OP_SET_CONFIG, &payload));
        let (op, body) = decode_frame(&again).unwrap();
        assert_eq!((op, body[0]), (OP_NAK, NAK_REJECTED));

        let unknown = r.handle_host_frame(&encode_frame(0x66, &[]));
        let (op, body) = decode_frame(&unknown).unwrap();
        assert_eq!((op, body[0]), (OP_NAK, NAK_UNKNOWN_OPCODE));

        let mut corrupt = encode_frame(OP_GET_STATUS, &[]);
        let last = corrupt.len() - 1;
        corrupt[last] ^= 0xFF;
        let response = r.handle_host_frame(&corrupt);
        let (op, body) = decode_frame(&response).unwrap();
        assert_eq!((op, body[0]), (OP_NAK, NAK_BAD_FRAME));
    }

    #[test]
    fn snapshots_stream_in_capture_order() {
        let start = 1_700_000_000_000;
        let cfg = DeploymentConfig {
            start_unix_ms: start,
            end_unix_ms: start + 180_000,
            interval_s: 60,
            synced_clock_unix_ms: start,
        };
        let mut r = Receiver::new(EnergyModel::default(), FlashLayout::default());
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        r.handle_event(ReceiverEvent::Configure(cfg)).unwrap();
        r.handle_event(ReceiverEvent::Unplug).unwrap();
        let mut k = 0u8;
        r.run_deployment(|_| {
            k += 1;
            CaptureEnvironment {
                temperature_centi_c: 100 * i16::from(k),
                battery_mv: 3_600,
                payload: vec![k; SNAPSHOT_PAYLOAD_BYTES],
            }
        })
        .unwrap();
        assert_eq!(r.records().len(), 3);
        r.handle_event(ReceiverEvent::PlugIn).unwrap();

        let response = r.handle_host_frame(&encode_frame(OP_GET_SNAPSHOTS, &[]));
        let (op, body) = decode_frame(&response).unwrap();
        assert_eq!(op, OP_GET_SNAPSHOTS);
        assert_eq!(u32::from_le_bytes(body[0..4].try_into().unwrap()), 3);
        let record_len = 12 + SNAPSHOT_PAYLOAD_BYTES;
        assert_eq!(body.len(), 4 + 3 * record_len);
        for i in 0..3usize {
            let rec = &body[4 + i * record_len..4 + (i + 1) * record_len];
            let ts = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            assert_eq!(ts, (start as u64) + i as u64 * 60_000);
            assert_eq!(rec[12], i as u8 + 1, "payloads preserved in capture order");
        }
    }

    #[test]
    fn firmware_update_verifies_crc_and_applies_on_reboot() {
        let mut r = Receiver::new(EnergyModel::default(), FlashLayout::default());
        r.handle_event(ReceiverEvent::PlugIn).unwrap();
        assert_eq!(r.firmware_version(), [1, 0, 0]);

        let mut image = vec![2u8, 1, 7];
        image.extend_from_slice(b"firmware body bytes");
        let crc = crc32fast::hash(&image);

        let mut corrupted = image.clone();
        corrupted[5] ^= 0x01;
        let mut payload = crc.to_le_bytes().to_vec();
        payload.extend_from_slice(&corrupted);
        let response = r.handle_host_frame(&encode_frame(OP_FIRMWARE_UPDATE, &payload));
        let (op, body) = decode_frame(&response).unwrap();
        assert_eq!((op, body[0]), (OP_NAK, NAK_CRC_MISMATCH));
        r.reboot();
        assert_eq!(r.firmware_version(), [1, 0, 0], "rejected image must not apply");

        let mut payload = crc.to_le_bytes().to_vec();
        payload.extend_from_slice(&image);
        let response = r.handle_host_frame(&encode_frame(OP_FIRMWARE_UPDATE, &payload));
        let (op, body) = decode_frame(&response).unwrap();
        assert_eq!(op, OP_FIRMWARE_UPDATE);
        assert_eq!(u32::from_le_bytes(body.try_into().unwrap()), crc);
        r.reboot();
        assert_eq!(r.firmware_version(), [2, 1, 7]);
        assert_eq!(r.state(), ReceiverState::ConnectedUnconfigured);
    }

    #[test]
    fn host_messages_require_a_connected_state() {
        let mut r = Receiver::new(EnergyModel::default(), FlashLayout::default());
        assert_eq!(r.state(), ReceiverState::Shutdown);
        let response = r.handle_host_frame(&encode_frame(OP_GET_STATUS, &[]));
        let (op, body) = decode_frame(&response).unwrap();
        assert_eq!((op, body[0]), (OP_NAK, NAK_REJECTED));
    }

    #[test]
    fn frames_survive_a_read_write_cycle() {
        let frame = encode_frame(OP_GET_SNAPSHOTS, &[1, 2, 3]);
        let mut cursor = std::io::Cursor::new(frame.clone());
        let read = read_frame(&mut cursor).unwrap();
        assert_eq!(read, frame);
        let (op, payload) = decode_frame(&read).unwrap();
        assert_eq!((op, payload), (OP_GET_SNAPSHOTS, &[1u8, 2, 3][..]));

        assert!(matches!(decode_frame(&frame[..5]), Err(FrameError::Truncated(5))));
        let mut bad = frame.clone();
        bad[0] = 0x00;
        assert!(matches!(decode_frame(&bad), Err(FrameError::BadMagic(0))));
    }
}
