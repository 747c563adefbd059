//! Snapshot GNSS toolkit.
//!
//! Models the full life of a low-power snapshot receiver: 12 ms, 1-bit GPS L1
//! captures are simulated (or pulled from a simulated device), acquired with
//! an FFT correlator, and turned into positions by a coarse-time solver that
//! recovers the millisecond pseudorange ambiguities, with oscillator drift and
//! front-end frequency offset handled by an explicit calibration chain.

pub mod acquisition;
pub mod bits;
pub mod cacode;
pub mod calibration;
pub mod cli;
pub mod constants;
pub mod ephemeris;
pub mod export;
pub mod format;
pub mod geo;
pub mod model;
pub mod navigation;
pub mod pipeline;
pub mod receiver;
pub mod service;
pub mod sim;
pub mod time;
