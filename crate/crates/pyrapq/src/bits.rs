//! Packed little-endian bit streams for code storage.
//!
//! Fields are written LSB-first into a contiguous byte buffer: field bit `i`
//! lands at stream position `pos + i`, which is bit `(pos + i) % 8` of byte
//! `(pos + i) / 8`. A database of `n` codes with `m` fields of `width` bits
//! each therefore occupies exactly `ceil(n*m*width / 8)` bytes.

use crate::error::{Error, Result};

/// Bits needed to store one index in `[0, k)`.
pub fn index_width(k: usize) -> usize {
    debug_assert!(k >= 2);
    (usize::BITS - (k - 1).leading_zeros()) as usize
}

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, value: u64, width: usize) {
        debug_assert!(width > 0 && width <= 64);
        debug_assert!(width == 64 || value < (1u64 << width));
        for i in 0..width {
            let pos = self.bit_len + i;
            if pos / 8 == self.bytes.len() {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                self.bytes[pos / 8] |= 1 << (pos % 8);
            }
        }
        self.bit_len += width;
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read(&mut self, width: usize) -> Result<u64> {
        if self.pos + width > self.bytes.len() * 8 {
            return Err(Error::Truncated(format!(
                "bit stream ends at {} bits, wanted {}",
                self.bytes.len() * 8,
                self.pos + width
            )));
        }
        let mut v = 0u64;
        for i in 0..width {
            let pos = self.pos + i;
            if (self.bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                v |= 1 << i;
            }
        }
        self.pos += width;
        Ok(v)
    }
}

/// Packs `n` codes of `m` indices each (row-major `codes[item*m + sub]`).
pub fn pack_indices(codes: &[u16], width: usize) -> Vec<u8> {
    let mut w = BitWriter::new();
    for &c in codes {
        w.write(c as u64, width);
    }
    w.into_bytes()
}

/// Inverse of [`pack_indices`]; reads `count` fields of `width` bits.
pub fn unpack_indices(bytes: &[u8], count: usize, width: usize) -> Result<Vec<u16>> {
    let mut r = BitReader::new(bytes);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(r.read(width)? as u16);
    }
    Ok(out)
}
