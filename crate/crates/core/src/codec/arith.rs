//! Adaptive binary arithmetic coder over a small integer alphabet.
//!
//! 32-bit interval arithmetic carried in `u64`, frequency counts starting at
//! one and halved when their total passes `MAX_TOTAL`.

use super::bits::{BitReader, BitWriter};
use crate::error::Result;

const STATE_BITS: u32 = 32;
const FULL: u64 = (1 << STATE_BITS) - 1;
const HALF: u64 = 1 << (STATE_BITS - 1);
const QUARTER: u64 = 1 << (STATE_BITS - 2);
pub const MAX_TOTAL: u32 = 1 << 16;

/// Adaptive frequency table shared in lockstep by encoder and decoder.
#[derive(Debug, Clone)]
pub struct AdaptiveModel {
    freqs: Vec<u32>,
    total: u32,
}

impl AdaptiveModel {
    pub fn new(alphabet: usize) -> Self {
        Self {
            freqs: vec![1; alphabet],
            total: alphabet as u32,
        }
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    /// `[lo, hi)` cumulative range of `symbol`.
    fn range_of(&self, symbol: usize) -> (u32, u32) {
        let lo: u32 = self.freqs[..symbol].iter().sum();
        (lo, lo + self.freqs[symbol])
    }

    fn find(&self, target: u32) -> (usize, u32, u32) {
        let mut lo = 0;
        for (s, &f) in self.freqs.iter().enumerate() {
            if target < lo + f {
                return (s, lo, lo + f);
            }
            lo += f;
        }
        unreachable!("target below total")
    }

    fn update(&mut self, symbol: usize) {
        self.freqs[symbol] += 1;
        self.total += 1;
        if self.total > MAX_TOTAL {
            self.total = 0;
            for f in &mut self.freqs {
                *f = (*f).div_ceil(2);
                self.total += *f;
            }
        }
    }
}

pub struct Encoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: FULL,
            pending: 0,
            out: BitWriter::new(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push_bit(bit);
        for _ in 0..self.pending {
            self.out.push_bit(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, model: &mut AdaptiveModel, symbol: usize) {
        let (lo, hi) = model.range_of(symbol);
        let total = model.total as u64;
        let range = self.high - self.low + 1;
        self.high = self.low + range * hi as u64 / total - 1;
        self.low += range * lo as u64 / total;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
        model.update(symbol);
    }

    /// Flushes all of `low`, so the decoder never reads past the payload.
    pub fn finish(mut self) -> (Vec<u8>, usize) {
        let low = self.low;
        self.emit(low & HALF != 0);
        for i in (0..STATE_BITS - 1).rev() {
            self.out.push_bit((low >> i) & 1 == 1);
        }
        let bits = self.out.len_bits();
        (self.out.into_bytes(), bits)
    }
}

pub struct Decoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    input: BitReader<'a>,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut input = BitReader::new(bytes);
        let mut value = 0;
        for _ in 0..STATE_BITS {
            value = (value << 1) | input.read_bit()? as u64;
        }
        Ok(Self {
            low: 0,
            high: FULL,
            value,
            input,
        })
    }

    pub fn decode(&mut self, model: &mut AdaptiveModel) -> Result<usize> {
        let total = model.total as u64;
        let range = self.high - self.low + 1;
        let target = ((self.value - self.low + 1) * total - 1) / range;
        let (symbol, lo, hi) = model.find(target as u32);
        self.high = self.low + range * hi as u64 / total - 1;
        self.low += range * lo as u64 / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.value -= HALF;
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < 3 * QUARTER {
                self.value -= QUARTER;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.input.read_bit()? as u64;
        }
        model.update(symbol);
        Ok(symbol)
    }
}
