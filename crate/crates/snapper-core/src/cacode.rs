//! GPS C/A Gold code generation and sampled replica synthesis.
//!
//! The 1023-chip codes come from two 10-stage LFSRs: G1 with feedback taps
//! {3, 10} and G2 with feedback taps {2, 3, 6, 8, 9, 10}, both seeded with
//! all ones. Each PRN selects a pair of G2 stages whose XOR is combined with
//! the G1 output. Chips map bit 0 -> +1 and bit 1 -> -1.

use std::sync::OnceLock;

use num_complex::Complex64;
use thiserror::Error;

use crate::constants::{CODE_LENGTH_CHIPS, SAMPLES_PER_CHIP, SAMPLES_PER_CODE};

pub const PRN_COUNT: usize = 32;

/// G2 output-stage selection pairs for PRN 1..=32, 1-indexed stages.
const G2_PHASE_TAPS: [(usize, usize); PRN_COUNT] = [
    (2, 6),
    (3, 7),
    (4, 8),
    (5, 9),
    (1, 9),
    (2, 10),
    (1, 8),
    (2, 9),
    (3, 10),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (7, 8),
    (8, 9),
    (9, 10),
    (1, 4),
    (2, 5),
    (3, 6),
    (4, 7),
    (5, 8),
    (6, 9),
    (1, 3),
    (4, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 6),
    (2, 7),
    (3, 8),
    (4, 9),
];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("PRN {0} is outside the supported range 1..=32")]
pub struct InvalidPrn(pub u8);

fn generate(prn_index: usize) -> [i8; CODE_LENGTH_CHIPS] {
    let (t1, t2) = G2_PHASE_TAPS[prn_index];
    let mut g1 = [1u8; 10];
    let mut g2 = [1u8; 10];
    let mut chips = [0i8; CODE_LENGTH_CHIPS];
    for chip in chips.iter_mut() {
        let out = g1[9] ^ g2[t1 - 1] ^ g2[t2 - 1];
        *chip = if out == 0 { 1 } else { -1 };
        let f1 = g1[2] ^ g1[9];
        let f2 = g2[1] ^ g2[2] ^ g2[5] ^ g2[7] ^ g2[8] ^ g2[9];
        g1.rotate_right(1);
        g1[0] = f1;
        g2.rotate_right(1);
        g2[0] = f2;
    }
    chips
}

fn code_table() -> &'static [[i8; CODE_LENGTH_CHIPS]; PRN_COUNT] {
    static TABLE: OnceLock<Box<[[i8; CODE_LENGTH_CHIPS]; PRN_COUNT]>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = Box::new([[0i8; CODE_LENGTH_CHIPS]; PRN_COUNT]);
        for (i, code) in table.iter_mut().enumerate() {
            *code = generate(i);
        }
        table
    })
}

/// The +/-1 chip sequence for a PRN.
pub fn ca_code(prn: u8) -> Result<&'static [i8; CODE_LENGTH_CHIPS], InvalidPrn> {
    if !(1..=PRN_COUNT as u8).contains(&prn) {
        return Err(InvalidPrn(prn));
    }
    Ok(&code_table()[prn as usize - 1])
}

/// The code chip seen by sample `k` of a replica at `code_phase`:
/// chip index floor(((k + code_phase) mod 4092) / 4).
#[inline]
fn chip_at(code: &[i8; CODE_LENGTH_CHIPS], k: usize, code_phase: f64) -> i8 {
    let pos = (k as f64 + code_phase).rem_euclid(SAMPLES_PER_CODE as f64);
    code[(pos / SAMPLES_PER_CHIP as f64) as usize]
}

/// Samples the bare code (no carrier) at 4 samples per chip.
pub fn sample_code(prn: u8, code_phase: f64, n: usize) -> Result<Vec<i8>, InvalidPrn> {
    let code = ca_code(prn)?;
    Ok((0..n).map(|k| chip_at(code, k, code_phase)).collect())
}

/// Complex baseband replica: the sampled code mixed with a residual carrier,
/// sample k carrying exp(+j 2 pi doppler_hz k / f_s).
pub fn sample_replica(
    prn: u8,
    code_phase: f64,
    doppler_hz: f64,
    n: usize,
    f_s: f64,
) -> Result<Vec<Complex64>, InvalidPrn> {
    let code = ca_code(prn)?;
    let step = std::f64::consts::TAU * doppler_hz / f_s;
    Ok((0..n)
        .map(|k| {
            let chip = f64::from(chip_at(code, k, code_phase));
            let phase = step * k as f64;
            Complex64::new(chip * phase.cos(), chip * phase.sin())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent construction of the same codes: instead of tapping two G2
    /// stages, delay the plain G2 output by a PRN-specific number of chips.
    /// Delays from the published code-assignment table for PRN 1..=32.
    const G2_DELAY_CHIPS: [usize; PRN_COUNT] = [
        5, 6, 7, 8, 17, 18, 139, 140, 141, 251, 252, 254, 255, 256, 257, 258, 469, 470, 471, 472,
        473, 474, 509, 512, 513, 514, 515, 516, 859, 860, 861, 862,
    ];

    /// First ten chips of each PRN as an octal literal, from the published
    /// code-assignment table; chip bit 1 is the leading digit's MSB side.
    const FIRST_TEN_CHIPS_OCTAL: [u16; PRN_COUNT] = [
        0o1440, 0o1620, 0o1710, 0o1744, 0o1133, 0o1455, 0o1131, 0o1454, 0o1626, 0o1504, 0o1642,
        0o1750, 0o1764, 0o1772, 0o1775, 0o1776, 0o1156, 0o1467, 0o1633, 0o1715, 0o1746, 0o1763,
        0o1063, 0o1706, 0o1743, 0o1761, 0o1770, 0o1774, 0o1127, 0o1453, 0o1625, 0o1712,
    ];

    fn delay_constructed(prn_index: usize) -> Vec<i8> {
        let mut g1 = [1u8; 10];
        let mut g2 = [1u8; 10];
        let mut g1_out = Vec::with_capacity(CODE_LENGTH_CHIPS);
        let mut g2_out = Vec::with_capacity(CODE_LENGTH_CHIPS);
        for _ in 0..CODE_LENGTH_CHIPS {
            g1_out.push(g1[9]);
            g2_out.push(g2[9]);
            let f1 = g1[2] ^ g1[9];
            let f2 = g2[1] ^ g2[2] ^ g2[5] ^ g2[7] ^ g2[8] ^ g2[9];
            g1.rotate_right(1);
            g1[0] = f1;
            g2.rotate_right(1);
            g2[0] = f2;
        }
        let delay = G2_DELAY_CHIPS[prn_index];
        (0..CODE_LENGTH_CHIPS)
            .map(|i| {
                let bit = g1_out[i] ^ g2_out[(i + CODE_LENGTH_CHIPS - delay) % CODE_LENGTH_CHIPS];
                if bit == 0 {
                    1
                } else {
                    -1
                }
            })
            .collect()
    }

    #[test]
    fn matches_delay_table_construction_for_all_prns() {
        for prn in 1..=PRN_COUNT as u8 {
            let tap_selected = ca_code(prn).unwrap();
            let delayed = delay_constructed(prn as usize - 1);
            assert_eq!(tap_selected.as_slice(), delayed.as_slice(), "PRN {prn}");
        }
    }

    #[test]
    fn first_ten_chips_match_published_octal() {
        for prn in 1..=PRN_COUNT as u8 {
            let code = ca_code(prn).unwrap();
            let mut word: u16 = 0;
            for &chip in &code[..10] {
                // Bit 1 transmitted first; -1 carries bit value 1.
                word = (word << 1) | u16::from(chip < 0);
            }
            assert_eq!(word, FIRST_TEN_CHIPS_OCTAL[prn as usize - 1], "PRN {prn}");
        }
    }

    #[test]
    fn rejects_out_of_range_prn() {
        assert_eq!(ca_code(0).unwrap_err(), InvalidPrn(0));
        assert_eq!(ca_code(33).unwrap_err(), InvalidPrn(33));
        assert!(ca_code(1).is_ok() && ca_code(32).is_ok());
    }

    #[test]
    fn codes_are_nearly_balanced() {
        for prn in 1..=PRN_COUNT as u8 {
            let sum: i32 = ca_code(prn).unwrap().iter().map(|&c| i32::from(c)).sum();
            assert_eq!(sum, -1, "PRN {prn}");
        }
    }

    #[test]
    fn autocorrelation_peaks_at_code_length() {
        let code = ca_code(7).unwrap();
        let zero_lag: i32 = code.iter().map(|&c| i32::from(c) * i32::from(c)).sum();
        assert_eq!(zero_lag, 1023);
        for lag in [1usize, 100, 511, 1022] {
            let r: i32 = (0..CODE_LENGTH_CHIPS)
                .map(|i| i32::from(code[i]) * i32::from(code[(i + lag) % CODE_LENGTH_CHIPS]))
                .sum();
            assert!([-65, -1, 63].contains(&r), "PRN 7 lag {lag} gave {r}");
        }
    }

    #[test]
    fn cross_correlations_take_gold_values() {
        for &(a, b) in &[(1u8, 2u8), (5, 17), (9, 30), (31, 32)] {
            let ca = ca_code(a).unwrap();
            let cb = ca_code(b).unwrap();
            for lag in 0..CODE_LENGTH_CHIPS {
                let r: i32 = (0..CODE_LENGTH_CHIPS)
                    .map(|i| i32::from(ca[i]) * i32::from(cb[(i + lag) % CODE_LENGTH_CHIPS]))
                    .sum();
                assert!([-65, -1, 63].contains(&r), "PRN {a}x{b} lag {lag} gave {r}");
            }
        }
    }

    #[test]
    fn sampled_code_repeats_every_millisecond() {
        let two_periods = sample_code(3, 0.0, 2 * SAMPLES_PER_CODE).unwrap();
        assert_eq!(two_periods[..SAMPLES_PER_CODE], two_periods[SAMPLES_PER_CODE..]);
        // Each chip spans exactly four samples.
        let code = ca_code(3).unwrap();
        for (k, &s) in two_periods[..SAMPLES_PER_CODE].iter().enumerate() {
            assert_eq!(s, code[k / SAMPLES_PER_CHIP]);
        }
    }

    #[test]
    fn replica_at_matching_phase_correlates_to_n() {
        let f_s = 4_092_000.0;
        let n = SAMPLES_PER_CODE;
        for &(phase, doppler) in &[(0.0, 0.0), (1234.0, 2500.0), (4091.5, -4000.0)] {
            let a = sample_replica(12, phase, doppler, n, f_s).unwrap();
            let dot: Complex64 = a.iter().zip(&a).map(|(x, y)| x * y.conj()).sum();
            assert!((dot.norm() - n as f64).abs() < 1e-6, "phase {phase} doppler {doppler}");
        }
    }

    #[test]
    fn replica_phase_convention_offsets_chip_index() {
        // With code_phase = 4, sample 0 must carry chip 1 instead of chip 0.
        let code = ca_code(21).unwrap();
        let shifted = sample_code(21, 4.0, 8).unwrap();
        assert_eq!(shifted[0], code[1]);
        // Fractional phases select the chip under floor semantics.
        let frac = sample_code(21, 3.5, 1).unwrap();
        assert_eq!(frac[0], code[0]);
        let frac = sample_code(21, 4.5, 1).unwrap();
        assert_eq!(frac[0], code[1]);
    }
}
