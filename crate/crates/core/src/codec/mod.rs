//! Bit accounting, empirical entropy and lossless coding of index streams.

pub mod arith;
pub mod bits;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use arith::{AdaptiveModel, Decoder, Encoder};
use bits::{width_for, ByteCursor};

/// Bits of one transmitted scale factor.
pub const SCALE_BITS: u64 = 32;

/// Quantization indices together with their declared alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStream {
    symbols: Vec<i32>,
    alphabet_min: i32,
    alphabet_max: i32,
}

impl IndexStream {
    pub fn new(symbols: Vec<i32>, alphabet_min: i32, alphabet_max: i32) -> Result<Self> {
        if alphabet_max < alphabet_min {
            return Err(invalid!("empty alphabet [{alphabet_min}, {alphabet_max}]"));
        }
        if let Some(s) = symbols.iter().find(|&&s| s < alphabet_min || s > alphabet_max) {
            return Err(invalid!("symbol {s} outside [{alphabet_min}, {alphabet_max}]"));
        }
        Ok(Self {
            symbols,
            alphabet_min,
            alphabet_max,
        })
    }

    /// Symmetric alphabet `{-m..m}` of an `m`-level quantizer.
    pub fn symmetric(symbols: Vec<i32>, m: u32) -> Result<Self> {
        Self::new(symbols, -(m as i32), m as i32)
    }

    pub fn symbols(&self) -> &[i32] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn alphabet_min(&self) -> i32 {
        self.alphabet_min
    }

    pub fn alphabet_max(&self) -> i32 {
        self.alphabet_max
    }

    pub fn alphabet_size(&self) -> usize {
        (self.alphabet_max - self.alphabet_min + 1) as usize
    }
}

/// Ideal fixed-rate bits: `n log2(levels) + 32 K`.
pub fn raw_bits(n: u64, levels: u64, num_partitions: u64) -> f64 {
    n as f64 * (levels as f64).log2() + (SCALE_BITS * num_partitions) as f64
}

/// Physically packed bits: `n ceil(log2 levels) + 32 K`.
pub fn raw_bits_packed(n: u64, levels: u64, num_partitions: u64) -> u64 {
    n * width_for(levels) as u64 + SCALE_BITS * num_partitions
}

/// `n H` with `H` the empirical entropy of the symbol frequencies, in bits.
pub fn empirical_entropy(stream: &IndexStream) -> Result<f64> {
    if stream.is_empty() {
        return Err(invalid!("entropy of an empty stream"));
    }
    let mut counts = BTreeMap::new();
    for &s in stream.symbols() {
        *counts.entry(s).or_insert(0u64) += 1;
    }
    let n = stream.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let c = c as f64;
            -c * (c / n).log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Largest alphabet the coder and frame header support.
pub const MAX_ALPHABET: usize = u8::MAX as usize;

/// Adaptive arithmetic coding of the symbols; returns the payload only.
pub fn aac_encode(stream: &IndexStream) -> Result<Vec<u8>> {
    aac_encode_counted(stream).map(|(bytes, _)| bytes)
}

/// Payload together with its length in bits before byte padding.
pub fn aac_encode_counted(stream: &IndexStream) -> Result<(Vec<u8>, usize)> {
    if stream.alphabet_size() > MAX_ALPHABET {
        return Err(invalid!("alphabet of {} symbols exceeds {MAX_ALPHABET}", stream.alphabet_size()));
    }
    let mut model = AdaptiveModel::new(stream.alphabet_size());
    let mut enc = Encoder::new();
    for &s in stream.symbols() {
        enc.encode(&mut model, (s - stream.alphabet_min) as usize);
    }
    Ok(enc.finish())
}

pub fn aac_decode(bytes: &[u8], n: usize, alphabet_min: i32, alphabet_max: i32) -> Result<IndexStream> {
    if alphabet_max < alphabet_min {
        return Err(invalid!("empty alphabet [{alphabet_min}, {alphabet_max}]"));
    }
    let size = (alphabet_max as i64 - alphabet_min as i64 + 1) as usize;
    if size > MAX_ALPHABET {
        return Err(invalid!("alphabet of {size} symbols exceeds {MAX_ALPHABET}"));
    }
    let mut model = AdaptiveModel::new(size);
    let mut dec = Decoder::new(bytes)?;
    let symbols = (0..n)
        .map(|_| dec.decode(&mut model).map(|s| s as i32 + alphabet_min))
        .collect::<Result<Vec<_>>>()?;
    IndexStream::new(symbols, alphabet_min, alphabet_max)
}

/// `{u32 count, u8 alphabet size, payload}`.
pub fn encode_frame(stream: &IndexStream) -> Result<Vec<u8>> {
    let payload = aac_encode(stream)?;
    let mut out = Vec::with_capacity(payload.len() + 5);
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    out.push(stream.alphabet_size() as u8);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Inverse of [`encode_frame`]; the alphabet offset is known to the receiver.
pub fn decode_frame(bytes: &[u8], alphabet_min: i32) -> Result<IndexStream> {
    let mut cur = ByteCursor::new(bytes);
    let n = cur.u32()? as usize;
    let size = cur.u8()?;
    if size == 0 {
        return Err(Error::Decode("frame declares an empty alphabet".into()));
    }
    aac_decode(cur.rest(), n, alphabet_min, alphabet_min + size as i32 - 1)
}

/// Bit counts of one message under the different accounting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BitReport {
    /// Ideal fractional fixed-rate bits including scale factors.
    pub raw_bits: f64,
    pub packed_bits: u64,
    /// `n H` of the indices plus scale factors.
    pub entropy_bits: f64,
    /// Arithmetic-coded payload plus scale factors; packed bits when the
    /// alphabet is too large for the coder.
    pub coded_bits: u64,
    pub scale_bits: u64,
}

impl BitReport {
    pub fn for_stream(stream: &IndexStream, num_partitions: usize) -> Result<Self> {
        Self::build(stream, num_partitions, true)
    }

    /// Like [`BitReport::for_stream`] but reports packed bits as coded bits
    /// instead of running the coder.
    pub fn for_stream_uncoded(stream: &IndexStream, num_partitions: usize) -> Result<Self> {
        Self::build(stream, num_partitions, false)
    }

    fn build(stream: &IndexStream, num_partitions: usize, code: bool) -> Result<Self> {
        let n = stream.len() as u64;
        let levels = stream.alphabet_size() as u64;
        let k = num_partitions as u64;
        let scale_bits = SCALE_BITS * k;
        let packed_bits = raw_bits_packed(n, levels, k);
        let coded_bits = if !code || stream.alphabet_size() > MAX_ALPHABET {
            packed_bits
        } else {
            aac_encode_counted(stream)?.1 as u64 + scale_bits
        };
        let entropy = if stream.is_empty() { 0.0 } else { empirical_entropy(stream)? };
        Ok(Self {
            raw_bits: raw_bits(n, levels, k),
            packed_bits,
            entropy_bits: entropy + scale_bits as f64,
            coded_bits,
            scale_bits,
        })
    }

    pub fn accumulate(&mut self, other: &BitReport) {
        self.raw_bits += other.raw_bits;
        self.packed_bits += other.packed_bits;
        self.entropy_bits += other.entropy_bits;
        self.coded_bits += other.coded_bits;
        self.scale_bits += other.scale_bits;
    }
}

/// One row of the per-worker raw-bit table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitRow {
    pub scheme: String,
    pub levels: u64,
    pub bits: f64,
}

impl BitRow {
    pub fn kbits(&self) -> f64 {
        self.bits / 1000.0
    }
}

/// Raw bits per worker per round for a fully connected net with the given
/// layer widths, one scale factor per weight and bias tensor.
pub fn bit_table(layers: &[usize]) -> Result<Vec<BitRow>> {
    if layers.len() < 2 {
        return Err(invalid!("need at least two layer widths"));
    }
    let n: u64 = layers.windows(2).map(|w| (w[0] * w[1] + w[1]) as u64).sum();
    let k = 2 * (layers.len() as u64 - 1);
    let row = |scheme: &str, levels: u64, bits: f64| BitRow {
        scheme: scheme.into(),
        levels,
        bits,
    };
    Ok(vec![
        row("baseline_f32", 1 << 32, raw_bits(n, 1 << 32, 0)),
        row("onebit", 2, n as f64 + (2 * SCALE_BITS * k) as f64),
        row("terngrad", 3, raw_bits(n, 3, k)),
        row("qsgd", 3, raw_bits(n, 3, k)),
        row("qsgd", 5, raw_bits(n, 5, k)),
        row("dqsg", 3, raw_bits(n, 3, k)),
        row("dqsg", 5, raw_bits(n, 5, k)),
        row("ndqsg_k3", 3, raw_bits(n, 3, k)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stream_validation() {
        assert!(IndexStream::new(vec![3], -2, 2).is_err());
        assert!(IndexStream::new(vec![], 1, 0).is_err());
        let wide = IndexStream::new(vec![0], 0, 300).unwrap();
        assert!(aac_encode(&wide).is_err());
        assert!(encode_frame(&wide).is_err());
        let r = BitReport::for_stream(&wide, 1).unwrap();
        assert_eq!(r.coded_bits, r.packed_bits);
        assert_eq!(IndexStream::symmetric(vec![1, -1], 2).unwrap().alphabet_size(), 5);
    }

    #[test]
    fn raw_bits_examples() {
        let n = 266_610;
        assert_eq!(raw_bits(n, 1 << 32, 0), 8_531_520.0);
        let three = raw_bits(n, 3, 1) / 1000.0;
        assert!((three - 422.8).abs() / 422.8 < 0.005, "{three}");
        let five = raw_bits(n, 5, 1) / 1000.0;
        assert!((five - 619.2).abs() / 619.2 < 0.005, "{five}");
        assert_eq!(raw_bits_packed(n, 3, 1), 2 * n + 32);
        assert_eq!(raw_bits_packed(n, 5, 1), 3 * n + 32);
        assert!(raw_bits(n, 3, 1) < raw_bits(n, 5, 1));
    }

    #[test]
    fn entropy_examples() {
        let same = IndexStream::new(vec![1; 50], 0, 2).unwrap();
        assert_eq!(empirical_entropy(&same).unwrap(), 0.0);
        let uni = IndexStream::new((0..300).map(|i| i % 3).collect(), 0, 2).unwrap();
        assert_abs_diff_eq!(empirical_entropy(&uni).unwrap(), 300.0 * 3f64.log2(), epsilon = 1e-9);
        let skew = IndexStream::new(vec![0, 0, 1, 2], 0, 2).unwrap();
        assert_abs_diff_eq!(empirical_entropy(&skew).unwrap(), 6.0, epsilon = 1e-12);
        assert!(empirical_entropy(&IndexStream::new(vec![], 0, 2).unwrap()).is_err());
    }

    #[test]
    fn skewed_iid_stream_codes_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let symbols: Vec<i32> = (0..100_000)
            .map(|_| {
                let r: f64 = rng.random();
                if r < 0.9 {
                    0
                } else if r < 0.95 {
                    1
                } else {
                    -1
                }
            })
            .collect();
        let s = IndexStream::symmetric(symbols, 1).unwrap();
        let (bytes, bits) = aac_encode_counted(&s).unwrap();
        let h = empirical_entropy(&s).unwrap();
        assert!((h / 1e5 - 0.569).abs() < 0.01);
        assert!((bits as f64) <= 1.05 * h + 64.0, "{bits} vs {h}");
        assert_eq!(aac_decode(&bytes, s.len(), -1, 1).unwrap(), s);
    }

    #[test]
    fn constant_stream_is_nearly_free() {
        let s = IndexStream::symmetric(vec![0; 10_000], 2).unwrap();
        let (_, bits) = aac_encode_counted(&s).unwrap();
        assert!(bits < 200, "{bits}");
    }

    #[test]
    fn truncated_payload_is_a_decode_error() {
        let s = IndexStream::symmetric((0..2000).map(|i| (i % 5) - 2).collect(), 2).unwrap();
        let bytes = aac_encode(&s).unwrap();
        assert!(matches!(aac_decode(&bytes[..bytes.len() / 2], s.len(), -2, 2), Err(Error::Decode(_))));
        assert!(matches!(aac_decode(&[], 1, -2, 2), Err(Error::Decode(_))));
    }

    #[test]
    fn frame_round_trip() {
        let s = IndexStream::symmetric(vec![2, -1, 0, 0, 1, -2], 2).unwrap();
        let frame = encode_frame(&s).unwrap();
        assert_eq!(&frame[..5], &[6, 0, 0, 0, 5]);
        assert_eq!(decode_frame(&frame, -2).unwrap(), s);
    }

    #[test]
    fn bit_report_fields() {
        let s = IndexStream::symmetric((0..1000).map(|i| (i % 3) - 1).collect(), 1).unwrap();
        let r = BitReport::for_stream(&s, 2).unwrap();
        assert_eq!(r.scale_bits, 64);
        assert_eq!(r.packed_bits, 2064);
        assert!(r.entropy_bits <= r.raw_bits + 1e-9);
        assert!(r.coded_bits as f64 >= r.entropy_bits - 1.0);
    }

    proptest! {
        #[test]
        fn lossless_on_arbitrary_streams(
            m in 1u32..20,
            raw in prop::collection::vec(any::<u32>(), 0..3000),
        ) {
            let span = 2 * m + 1;
            let symbols = raw.iter().map(|&r| (r % span) as i32 - m as i32).collect();
            let s = IndexStream::symmetric(symbols, m).unwrap();
            let bytes = aac_encode(&s).unwrap();
            prop_assert_eq!(aac_decode(&bytes, s.len(), -(m as i32), m as i32).unwrap(), s.clone());
            prop_assert_eq!(decode_frame(&encode_frame(&s).unwrap(), -(m as i32)).unwrap(), s);
        }

        #[test]
        fn lossless_on_runs(runs in prop::collection::vec((0i32..3, 1usize..500), 1..40)) {
            let symbols: Vec<i32> = runs.iter().flat_map(|&(s, n)| std::iter::repeat_n(s - 1, n)).collect();
            let s = IndexStream::symmetric(symbols, 1).unwrap();
            prop_assert_eq!(aac_decode(&aac_encode(&s).unwrap(), s.len(), -1, 1).unwrap(), s);
        }
    }
}
