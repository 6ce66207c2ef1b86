//! Little-endian bit packing: bit `j` of a stream lives in byte `j / 8` at
//! position `j % 8`, and multi-bit fields are written least significant bit first.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    len_bits: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            len_bits: 0,
        }
    }

    #[inline]
    pub fn push_bit(&mut self, bit: bool) {
        let pos = self.len_bits % 8;
        if pos == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << pos;
        }
        self.len_bits += 1;
    }

    /// Appends the low `width` bits of `value`.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for b in 0..width {
            self.push_bit((value >> b) & 1 == 1);
        }
    }

    pub fn len_bits(&self) -> usize {
        self.len_bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    #[inline]
    pub fn read_bit(&mut self) -> Result<bool> {
        let byte = self
            .bytes
            .get(self.pos / 8)
            .ok_or_else(|| Error::Decode(format!("bit stream truncated at bit {}", self.pos)))?;
        let bit = (byte >> (self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read_bits(&mut self, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for b in 0..width {
            if self.read_bit()? {
                v |= 1 << b;
            }
        }
        Ok(v)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Bits needed to represent `count` distinct values: `ceil(log2(count))`.
pub fn width_for(count: u64) -> u32 {
    match count {
        0 | 1 => 0,
        c => 64 - (c - 1).leading_zeros(),
    }
}

/// Cursor over a little-endian byte header.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Decode(format!("header truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn widths() {
        assert_eq!(width_for(2), 1);
        assert_eq!(width_for(3), 2);
        assert_eq!(width_for(5), 3);
        assert_eq!(width_for(8), 3);
        assert_eq!(width_for(9), 4);
        assert_eq!(width_for(1), 0);
    }

    #[test]
    fn little_endian_bit_order() {
        let mut w = BitWriter::new();
        w.push_bits(0b101, 3);
        w.push_bits(0b11, 2);
        w.push_bits(0b1, 4);
        // bits: 1,0,1,1,1,1,0,0 | 0
        assert_eq!(w.into_bytes(), vec![0b0011_1101, 0]);
    }

    #[test]
    fn reader_reports_truncation() {
        let mut r = BitReader::new(&[0xFF]);
        assert_eq!(r.read_bits(8).unwrap(), 0xFF);
        assert!(r.read_bit().is_err());
    }

    proptest! {
        #[test]
        fn fields_round_trip(fields in prop::collection::vec((0u64..1 << 20, 1u32..=20), 0..200)) {
            let mut w = BitWriter::new();
            for &(v, width) in &fields {
                w.push_bits(v & ((1 << width) - 1), width);
            }
            let bytes = w.into_bytes();
            let mut r = BitReader::new(&bytes);
            for &(v, width) in &fields {
                prop_assert_eq!(r.read_bits(width).unwrap(), v & ((1 << width) - 1));
            }
        }
    }
}
