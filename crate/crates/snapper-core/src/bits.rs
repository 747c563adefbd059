//! 1-bit sample packing.
//!
//! Convention, fixed across the whole toolkit and the dataset wire format:
//! a set bit is a positive sample, bits fill each byte LSB-first, and the
//! unused high bits of a trailing partial byte are zero.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitsError {
    #[error("requested {requested} samples but only {available} bits are packed")]
    RangeExceeded { requested: usize, available: usize },
}

/// Packs +/-1 samples into bytes. Positive samples become set bits.
pub fn pack_bits(samples: &[i8]) -> Vec<u8> {
    let mut out = vec![0u8; samples.len().div_ceil(8)];
    for (k, &s) in samples.iter().enumerate() {
        if s > 0 {
            out[k / 8] |= 1 << (k % 8);
        }
    }
    out
}

/// Unpacks `n` +/-1 samples from LSB-first packed bytes.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<i8>, BitsError> {
    if n > bytes.len() * 8 {
        return Err(BitsError::RangeExceeded { requested: n, available: bytes.len() * 8 });
    }
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let bit = (bytes[k / 8] >> (k % 8)) & 1;
        out.push(if bit == 1 { 1 } else { -1 });
    }
    Ok(out)
}
