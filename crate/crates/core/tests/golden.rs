//! Wire formats frozen against checked-in files. Set `GRADQUANT_BLESS=1` to
//! rewrite them after an intentional format change.

use std::path::PathBuf;

use gradquant::codec::{decode_frame, encode_frame, IndexStream};
use gradquant::nested::nested_encode_gradient;
use gradquant::quant::{partition_encode, QuantizedMessage};
use gradquant::{DitherCoordinates, Gradient, NestedConfig, UniformQuantizerCfg};

fn golden(name: &str, bytes: &[u8]) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("GRADQUANT_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(bytes, expected.as_slice(), "{name} drifted");
}

fn gradient(n: usize) -> Gradient<f64> {
    Gradient::from_vec((0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) / 25.0).collect()).unwrap()
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

/// Reads `count` fields of `width` bits, least significant bit first.
fn unpack(bytes: &[u8], width: usize, count: usize) -> Vec<u64> {
    (0..count)
        .map(|j| {
            (0..width).fold(0u64, |acc, b| {
                let bit = j * width + b;
                acc | ((((bytes[bit / 8] >> (bit % 8)) & 1) as u64) << b)
            })
        })
        .collect()
}

#[test]
fn dithered_message_layout() {
    let cfg = UniformQuantizerCfg::normalized(2).unwrap();
    let coords = DitherCoordinates::new(7, 3);
    let g = gradient(41);
    let msg = partition_encode(&g, 2, &cfg, coords).unwrap();
    let bytes = msg.to_bytes();

    assert_eq!(bytes[0], 1);
    assert_eq!(le_u32(&bytes[1..]), 41);
    assert_eq!(le_u32(&bytes[5..]), 2);
    let k0 = f32::from_le_bytes(bytes[9..13].try_into().unwrap());
    let k1 = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let max = |r: std::ops::Range<usize>| g.as_slice()[r].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(k0 as f64 >= max(0..21) && k1 as f64 >= max(21..41));
    assert_eq!(le_u64(&bytes[17..]), 7);
    assert_eq!(le_u64(&bytes[25..]), 3);
    let payload = &bytes[33..];
    assert_eq!(payload.len(), (41 * 3usize).div_ceil(8));
    let fields = unpack(payload, 3, 41);
    let expected: Vec<u64> = msg.indices.iter().map(|&q| (q + 2) as u64).collect();
    assert_eq!(fields, expected);
    assert_eq!(QuantizedMessage::from_bytes(&bytes, cfg).unwrap(), msg);
    golden("dithered_m2_k2.bin", &bytes);
}

#[test]
fn nested_message_layout() {
    let cfg = NestedConfig::new(1.0 / 3.0, 3, 1.0).unwrap();
    let coords = DitherCoordinates::new(9, 0);
    let msg = nested_encode_gradient(&gradient(30), &cfg, coords).unwrap();
    let bytes = msg.to_bytes();
    assert_eq!(bytes[0], 3);
    assert_eq!(le_u32(&bytes[1..]), 30);
    assert_eq!(le_u32(&bytes[5..]), 1);
    assert_eq!(f32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2.0);
    assert_eq!(le_u64(&bytes[13..]), 9);
    assert_eq!(le_u64(&bytes[21..]), 0);
    let fields = unpack(&bytes[29..], 2, 30);
    assert!(fields.iter().all(|&f| f < 3));
    assert_eq!(fields, msg.rel_indices.iter().map(|&s| (s + 1) as u64).collect::<Vec<_>>());
    golden("nested_k3.bin", &bytes);
}

#[test]
fn coded_frame_layout() {
    let symbols: Vec<i32> = (0..2000).map(|i| [0, 0, 0, 1, 0, -1, 0, 0, 2, 0][i % 10] * ((i / 10) % 2) as i32).collect();
    let stream = IndexStream::new(symbols, -2, 2).unwrap();
    let bytes = encode_frame(&stream).unwrap();
    assert_eq!(le_u32(&bytes), 2000);
    assert_eq!(bytes[4], 5);
    assert_eq!(decode_frame(&bytes, -2).unwrap(), stream);
    golden("frame_5sym.bin", &bytes);
}
