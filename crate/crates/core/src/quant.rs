//! Scalar and vector gradient quantizers.
//!
//! Every vector quantizer normalizes by the scale factor `kappa = max_i |g_i|`
//! so that inputs fall in `[-1, 1]`, and uses a step `delta = 1/M`, giving
//! indices in `{-M, ..., M}`. Scale factors travel as 32-bit floats; the
//! encoder rounds `kappa` up to the nearest `f32` and uses that value for
//! normalization and reconstruction, so worker and server agree bit-exactly.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::bits::{width_for, BitReader, BitWriter, ByteCursor};
use crate::dither::DitherCoordinates;
use crate::error::{invalid, Error, Result};
use crate::scalar::{f32_round_up, round_half_away, Scalar};

/// Uniform quantizer with step `delta` and index range `{-M..M}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantizerCfg {
    pub delta: f64,
    pub levels_m: u32,
}

impl UniformQuantizerCfg {
    pub fn new(delta: f64, levels_m: u32) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(invalid!("quantization step must be positive and finite, got {delta}"));
        }
        if levels_m == 0 {
            return Err(invalid!("M must be at least 1"));
        }
        Ok(Self { delta, levels_m })
    }

    /// The `2M+1`-level quantizer on `[-1, 1]` with `delta = 1/M`.
    pub fn normalized(levels_m: u32) -> Result<Self> {
        if levels_m == 0 {
            return Err(invalid!("M must be at least 1"));
        }
        Ok(Self {
            delta: 1.0 / levels_m as f64,
            levels_m,
        })
    }

    /// Normalized quantizer from its step; `1/delta` must be an integer.
    pub fn from_delta(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0 && delta <= 1.0) {
            return Err(invalid!("normalized step must lie in (0, 1], got {delta}"));
        }
        let m = (1.0 / delta).round();
        if (m * delta - 1.0).abs() > 1e-9 || m > u32::MAX as f64 {
            return Err(invalid!("normalized step must be 1/M for an integer M, got {delta}"));
        }
        Self::normalized(m as u32)
    }

    /// Number of reconstruction levels, `2M+1`.
    pub fn levels(&self) -> u64 {
        2 * self.levels_m as u64 + 1
    }

    /// Packed width of one index, `ceil(log2(2M+1))`.
    pub fn index_bits(&self) -> u32 {
        width_for(self.levels())
    }
}

/// Flat gradient values with tensor-shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient<T> {
    values: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Gradient<T> {
    pub fn new(values: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid!("gradient must have at least one element"));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(invalid!("shape {:?} does not match length {}", shape, values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("gradient element {i} is not finite"));
        }
        Ok(Self { values, shape })
    }

    pub fn from_vec(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn inf_norm(&self) -> T {
        inf_norm(&self.values)
    }

    pub fn sq_norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }
}

pub(crate) fn inf_norm<T: Scalar>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

/// `delta * round(v / delta)`, ties away from zero.
pub fn uniform_quantize<T: Scalar>(v: T, delta: T) -> Result<T> {
    if !v.is_finite() {
        return Err(invalid!("quantizer input is not finite"));
    }
    if !(delta.is_finite() && delta > T::zero()) {
        return Err(invalid!("quantization step must be positive"));
    }
    Ok(delta * (v / delta).round())
}

/// `Q(x + u)`: dither enters the quantizer but is not subtracted afterwards.
pub fn half_dithered_quantize<T: Scalar>(x: T, cfg: &UniformQuantizerCfg, u: T) -> Result<T> {
    uniform_quantize(x + u, T::from_f64_lossy(cfg.delta))
}

/// Signed level index `±l` or `±(l+1)` of the M-level stochastic quantizer.
///
/// `rand` is a unit-uniform sample; the lower level is chosen when
/// `rand < l + 1 - M|x|`.
pub fn stochastic_index<T: Scalar>(x: T, m: u32, rand: f64) -> Result<i64> {
    if m == 0 {
        return Err(invalid!("M must be at least 1"));
    }
    let ax = x.abs().to_f64_lossy();
    if !(ax <= 1.0) {
        return Err(invalid!("stochastic quantizer input must satisfy |x| <= 1, got {ax}"));
    }
    let scaled = m as f64 * ax;
    let l = scaled.floor();
    let p_low = l + 1.0 - scaled;
    let level = if rand < p_low { l } else { l + 1.0 } as i64;
    Ok(if x < T::zero() { -level } else { level })
}

/// Stochastic (QSGD) quantization of `x` with `m` levels per sign.
/// TernGrad is `m = 1`.
pub fn stochastic_quantize<T: Scalar>(x: T, m: u32, rand: f64) -> Result<T> {
    let idx = stochastic_index(x, m, rand)?;
    Ok(T::from_f64_lossy(idx as f64 / m as f64))
}

/// Exact variance of [`stochastic_quantize`] at `x`:
/// `(|x| - l/M)((l+1)/M - |x|)` for `|x|` in `[l/M, (l+1)/M]`.
pub fn stochastic_variance(x: f64, m: u32) -> Result<f64> {
    if m == 0 {
        return Err(invalid!("M must be at least 1"));
    }
    let ax = x.abs();
    if !(ax <= 1.0) {
        return Err(invalid!("stochastic quantizer input must satisfy |x| <= 1, got {ax}"));
    }
    let mf = m as f64;
    let l = (mf * ax).floor();
    Ok((ax - l / mf) * ((l + 1.0) / mf - ax))
}

/// Wire tag of a quantized message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum QuantizerKind {
    Dithered = 1,
    Stochastic = 2,
    Nested = 3,
    OneBit = 4,
}

impl QuantizerKind {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Self::Dithered,
            2 => Self::Stochastic,
            3 => Self::Nested,
            4 => Self::OneBit,
            other => return Err(Error::Decode(format!("unknown quantizer kind {other}"))),
        })
    }
}

/// Contiguous partition ranges of `0..n` into `k` parts; the first `n % k`
/// parts get one extra element.
pub fn partition_ranges(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > n {
        return Err(invalid!("partition count must be in 1..={n}, got {k}"));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

/// Indices and scale factors sent from a worker to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMessage {
    pub kind: QuantizerKind,
    pub cfg: UniformQuantizerCfg,
    pub dither: DitherCoordinates,
    /// One scale factor per partition.
    pub kappas: Vec<f32>,
    pub indices: Vec<i32>,
}

impl QuantizedMessage {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_partitions(&self) -> usize {
        self.kappas.len()
    }

    /// `(start, end, kappa)` for every partition.
    pub fn partition_bounds(&self) -> Vec<(usize, usize, f32)> {
        partition_ranges(self.len(), self.num_partitions())
            .expect("message partitions are valid by construction")
            .into_iter()
            .zip(&self.kappas)
            .map(|(r, &k)| (r.start, r.end, k))
            .collect()
    }

    /// Header plus packed indices.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = self.cfg.index_bits();
        let mut out = Vec::with_capacity(25 + 4 * self.kappas.len() + (self.len() * width as usize).div_ceil(8));
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.kappas.len() as u32).to_le_bytes());
        for k in &self.kappas {
            out.extend_from_slice(&k.to_le_bytes());
        }
        out.extend_from_slice(&self.dither.seed.to_le_bytes());
        out.extend_from_slice(&self.dither.round.to_le_bytes());
        let mut w = BitWriter::with_capacity_bits(self.len() * width as usize);
        let m = self.cfg.levels_m as i64;
        for &q in &self.indices {
            w.push_bits((q as i64 + m) as u64, width);
        }
        out.extend_from_slice(&w.into_bytes());
        out
    }

    /// Parses a message; `cfg` is the receiver's copy of the quantizer configuration.
    pub fn from_bytes(bytes: &[u8], cfg: UniformQuantizerCfg) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let kind = QuantizerKind::from_byte(cur.u8()?)?;
        if !matches!(kind, QuantizerKind::Dithered | QuantizerKind::Stochastic) {
            return Err(Error::Decode(format!("{kind:?} is not a uniform-quantizer message")));
        }
        let n = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        if n == 0 || k == 0 || k > n {
            return Err(Error::Decode(format!("bad message dimensions n={n}, K={k}")));
        }
        let kappas = (0..k).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        if kappas.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
            return Err(Error::Decode("scale factor is negative or not finite".into()));
        }
        let dither = DitherCoordinates::new(cur.u64()?, cur.u64()?);
        let width = cfg.index_bits();
        let m = cfg.levels_m as i64;
        let mut r = BitReader::new(cur.rest());
        let indices = (0..n)
            .map(|_| {
                let q = r.read_bits(width)? as i64 - m;
                if q.abs() > m {
                    return Err(Error::Decode(format!("index {q} outside [-{m}, {m}]")));
                }
                Ok(q as i32)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            cfg,
            dither,
            kappas,
            indices,
        })
    }

    /// Fractional bit cost: `n log2(2M+1) + 32 K`.
    pub fn ideal_bits(&self) -> f64 {
        self.len() as f64 * (self.cfg.levels() as f64).log2() + 32.0 * self.num_partitions() as f64
    }

    /// Physical size of the packed indices plus scale factors.
    pub fn packed_bits(&self) -> u64 {
        self.len() as u64 * self.cfg.index_bits() as u64 + 32 * self.num_partitions() as u64
    }
}

/// Scale factor of a slice as transmitted: `max |g_i|` rounded up to `f32`.
pub fn wire_kappa<T: Scalar>(values: &[T]) -> f32 {
    f32_round_up(inf_norm(values).to_f64_lossy())
}

fn encode_partition<T: Scalar>(values: &[T], u: &[T], cfg: &UniformQuantizerCfg, out: &mut Vec<i32>) -> f32 {
    let kappa = wire_kappa(values);
    if kappa == 0.0 {
        out.extend(std::iter::repeat_n(0, values.len()));
        return 0.0;
    }
    let kt = T::from_wire(kappa);
    let delta = T::from_f64_lossy(cfg.delta);
    let m = cfg.levels_m as i64;
    out.extend(values.iter().zip(u).map(|(&g, &ui)| {
        let t = g / kt + ui;
        round_half_away(t / delta).clamp(-m, m) as i32
    }));
    kappa
}

/// Dithered encoding with an explicit dither vector, one partition per range.
pub fn encode_with_dither<T: Scalar>(
    g: &[T],
    cfg: &UniformQuantizerCfg,
    u: &[T],
    partitions: usize,
    kind_coords: DitherCoordinates,
) -> Result<QuantizedMessage> {
    if g.len() != u.len() {
        return Err(invalid!("gradient has {} elements but dither stream has {}", g.len(), u.len()));
    }
    let ranges = partition_ranges(g.len(), partitions)?;
    let mut indices = Vec::with_capacity(g.len());
    let kappas = ranges
        .into_iter()
        .map(|r| encode_partition(&g[r.clone()], &u[r], cfg, &mut indices))
        .collect();
    Ok(QuantizedMessage {
        kind: QuantizerKind::Dithered,
        cfg: *cfg,
        dither: kind_coords,
        kappas,
        indices,
    })
}

/// Subtractively dithered encoding with a single scale factor.
pub fn dithered_encode<T: Scalar>(
    g: &Gradient<T>,
    cfg: &UniformQuantizerCfg,
    dither: DitherCoordinates,
) -> Result<QuantizedMessage> {
    partition_encode(g, 1, cfg, dither)
}

/// Dithered encoding of `k` contiguous sub-vectors, each with its own scale
/// factor. Dither is addressed by the global element index.
pub fn partition_encode<T: Scalar>(
    g: &Gradient<T>,
    k: usize,
    cfg: &UniformQuantizerCfg,
    dither: DitherCoordinates,
) -> Result<QuantizedMessage> {
    let u: Vec<T> = dither.stream(g.len(), cfg.delta);
    encode_with_dither(g.as_slice(), cfg, &u, k, dither)
}

/// `kappa * (delta * q - u)` per partition.
pub fn reconstruct_with_dither<T: Scalar>(msg: &QuantizedMessage, u: &[T]) -> Result<Vec<T>> {
    if u.len() != msg.len() {
        return Err(invalid!("message has {} indices but dither stream has {}", msg.len(), u.len()));
    }
    let delta = T::from_f64_lossy(msg.cfg.delta);
    let mut out = Vec::with_capacity(msg.len());
    for (start, end, kappa) in msg.partition_bounds() {
        let kt = T::from_wire(kappa);
        out.extend((start..end).map(|i| kt * (delta * T::from_i32(msg.indices[i]).unwrap() - u[i])));
    }
    Ok(out)
}

/// Server-side reconstruction. `cfg` and `dither` are the receiver's mirror
/// of the sender's quantizer configuration and coordinates.
pub fn dithered_decode<T: Scalar>(
    msg: &QuantizedMessage,
    cfg: &UniformQuantizerCfg,
    dither: DitherCoordinates,
) -> Result<Gradient<T>> {
    if msg.kind != QuantizerKind::Dithered {
        return Err(Error::Protocol(format!("expected a dithered message, got {:?}", msg.kind)));
    }
    check_protocol(msg, cfg, dither)?;
    let u: Vec<T> = dither.stream(msg.len(), cfg.delta);
    Gradient::from_vec(reconstruct_with_dither(msg, &u)?)
}

fn check_protocol(msg: &QuantizedMessage, cfg: &UniformQuantizerCfg, dither: DitherCoordinates) -> Result<()> {
    if msg.cfg != *cfg {
        return Err(Error::Protocol(format!(
            "quantizer mismatch: message {:?}, receiver {:?}",
            msg.cfg, cfg
        )));
    }
    if msg.dither != dither {
        return Err(Error::Protocol(format!(
            "dither desync: message at {:?}, receiver at {:?}",
            msg.dither, dither
        )));
    }
    Ok(())
}

/// Stochastic (QSGD/TernGrad) encoding normalized by `max |g_i|`.
///
/// The unit-uniform draws come from the worker's counter-based stream, so
/// the message is reproducible, but the receiver does not need them.
pub fn stochastic_encode<T: Scalar>(
    g: &Gradient<T>,
    cfg: &UniformQuantizerCfg,
    dither: DitherCoordinates,
) -> Result<QuantizedMessage> {
    let kappa = wire_kappa(g.as_slice());
    let indices = if kappa == 0.0 {
        vec![0; g.len()]
    } else {
        let kt = T::from_wire(kappa);
        g.as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                // |v| <= kappa, so rounding can only push |v/kappa| below 1.
                let x = (v / kt).max(-T::one()).min(T::one());
                stochastic_index(x, cfg.levels_m, dither.unit_at(i as u64)).map(|q| q as i32)
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(QuantizedMessage {
        kind: QuantizerKind::Stochastic,
        cfg: *cfg,
        dither,
        kappas: vec![kappa],
        indices,
    })
}

/// `kappa * q / M`; no dither is involved.
pub fn stochastic_decode<T: Scalar>(msg: &QuantizedMessage, cfg: &UniformQuantizerCfg) -> Result<Gradient<T>> {
    if msg.kind != QuantizerKind::Stochastic {
        return Err(Error::Protocol(format!("expected a stochastic message, got {:?}", msg.kind)));
    }
    if msg.cfg != *cfg {
        return Err(Error::Protocol("quantizer mismatch".into()));
    }
    let delta = T::from_f64_lossy(cfg.delta);
    let mut out = Vec::with_capacity(msg.len());
    for (start, end, kappa) in msg.partition_bounds() {
        let kt = T::from_wire(kappa);
        out.extend(msg.indices[start..end].iter().map(|&q| kt * delta * T::from_i32(q).unwrap()));
    }
    Gradient::from_vec(out)
}

/// Error-feedback accumulator of the one-bit baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitState<T> {
    residual: Vec<T>,
}

impl<T: Scalar> OneBitState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            residual: vec![T::zero(); n],
        }
    }

    pub fn residual(&self) -> &[T] {
        &self.residual
    }
}

/// Sign bits plus the conditional means used to reconstruct them.
#[derive(Debug, Clone, PartialEq)]
pub struct OneBitMessage {
    /// `true` where the error-compensated value is nonnegative.
    pub bits: Vec<bool>,
    pub mu_pos: f32,
    pub mu_neg: f32,
}

impl OneBitMessage {
    pub fn reconstruct<T: Scalar>(&self) -> Vec<T> {
        let (p, n) = (T::from_wire(self.mu_pos), T::from_wire(self.mu_neg));
        self.bits.iter().map(|&b| if b { p } else { n }).collect()
    }

    /// `{u8 kind, u32 n, f32 mu_pos, f32 mu_neg}` then one bit per element.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![QuantizerKind::OneBit as u8];
        out.extend_from_slice(&(self.bits.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.mu_pos.to_le_bytes());
        out.extend_from_slice(&self.mu_neg.to_le_bytes());
        let mut w = BitWriter::with_capacity_bits(self.bits.len());
        for &b in &self.bits {
            w.push_bit(b);
        }
        out.extend_from_slice(&w.into_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if QuantizerKind::from_byte(cur.u8()?)? != QuantizerKind::OneBit {
            return Err(Error::Decode("not a one-bit message".into()));
        }
        let n = cur.u32()? as usize;
        let mu_pos = cur.f32()?;
        let mu_neg = cur.f32()?;
        let mut r = BitReader::new(cur.rest());
        let bits = (0..n).map(|_| r.read_bit()).collect::<Result<Vec<_>>>()?;
        Ok(Self { bits, mu_pos, mu_neg })
    }

    pub fn ideal_bits(&self) -> f64 {
        self.bits.len() as f64 + 64.0
    }
}

/// Sign quantization with error feedback. Returns the message and the
/// reconstruction the server will compute; `state` absorbs the residual.
pub fn onebit_encode<T: Scalar>(g: &Gradient<T>, state: &mut OneBitState<T>) -> Result<(OneBitMessage, Vec<T>)> {
    if state.residual.len() != g.len() {
        return Err(invalid!(
            "one-bit state has {} elements, gradient has {}",
            state.residual.len(),
            g.len()
        ));
    }
    let v: Vec<T> = g.as_slice().iter().zip(&state.residual).map(|(&a, &r)| a + r).collect();
    let bits: Vec<bool> = v.iter().map(|&x| x >= T::zero()).collect();
    let mean_where = |want: bool| {
        let (sum, count) = v
            .iter()
            .zip(&bits)
            .filter(|(_, &b)| b == want)
            .fold((0.0f64, 0usize), |(s, c), (&x, _)| (s + x.to_f64_lossy(), c + 1));
        if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        }
    };
    let msg = OneBitMessage {
        mu_pos: mean_where(true),
        mu_neg: mean_where(false),
        bits,
    };
    let recon = msg.reconstruct::<T>();
    for ((r, &x), &h) in state.residual.iter_mut().zip(&v).zip(&recon) {
        *r = x - h;
    }
    Ok((msg, recon))
}

/// The three excess-variance bounds of dithered quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExcessVarianceBounds {
    /// `n delta^2 / 12 * E||g||^2`.
    pub general: f64,
    /// Gaussian SG model, single scale factor.
    pub gaussian: f64,
    /// Gaussian SG model with `k` equal partitions.
    pub partitioned: f64,
}

/// Bounds on `E||g~ - grad L||^2 - E||g - grad L||^2`.
///
/// `var_sg` is `E||g - grad L||^2`, `e_g_sq` is `E||g||^2` and
/// `grad_inf_norm` is `||grad L||_inf`.
pub fn excess_variance_bound(
    n: usize,
    delta: f64,
    var_sg: f64,
    e_g_sq: f64,
    grad_inf_norm: f64,
    k: usize,
) -> ExcessVarianceBounds {
    let nf = n as f64;
    let d2 = delta * delta;
    let mu2 = grad_inf_norm * grad_inf_norm;
    let log_term = |parts: f64| (std::f64::consts::SQRT_2 * nf / parts).ln();
    ExcessVarianceBounds {
        general: nf * d2 / 12.0 * e_g_sq,
        gaussian: d2 / 3.0 * log_term(1.0) * var_sg + nf * d2 / 6.0 * mu2,
        partitioned: d2 / 6.0 * (2.0 * log_term(k.max(1) as f64) * var_sg + nf * mu2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg2() -> UniformQuantizerCfg {
        UniformQuantizerCfg::normalized(2).unwrap()
    }

    #[test]
    fn uniform_quantize_examples() {
        assert_eq!(uniform_quantize(0.3, 0.5).unwrap(), 0.5);
        assert_eq!(uniform_quantize(0.0, 0.5).unwrap(), 0.0);
        assert_eq!(uniform_quantize(-0.25, 0.5).unwrap(), -0.5);
        assert!(uniform_quantize(f64::NAN, 0.5).is_err());
        assert!(uniform_quantize(1.0, 0.0).is_err());
        assert!(uniform_quantize(1.0, -0.5).is_err());
    }

    #[test]
    fn cfg_validation() {
        assert!(UniformQuantizerCfg::new(0.0, 2).is_err());
        assert!(UniformQuantizerCfg::new(0.5, 0).is_err());
        assert_eq!(UniformQuantizerCfg::from_delta(0.5).unwrap().levels_m, 2);
        assert_eq!(UniformQuantizerCfg::from_delta(1.0 / 3.0).unwrap().levels_m, 3);
        assert!(UniformQuantizerCfg::from_delta(0.4).is_err());
        assert_eq!(cfg2().index_bits(), 3);
        assert_eq!(UniformQuantizerCfg::normalized(1).unwrap().index_bits(), 2);
    }

    #[test]
    fn gradient_validation() {
        assert!(Gradient::<f64>::from_vec(vec![]).is_err());
        assert!(Gradient::from_vec(vec![1.0, f64::INFINITY]).is_err());
        assert!(Gradient::new(vec![1.0f32; 6], vec![2, 3]).is_ok());
        assert!(Gradient::new(vec![1.0f32; 6], vec![2, 2]).is_err());
    }

    #[test]
    fn dithered_encode_worked_example() {
        let g = [0.6, -0.2];
        let u = [0.1, -0.2];
        let msg = encode_with_dither(&g, &cfg2(), &u, 1, DitherCoordinates::default()).unwrap();
        assert_abs_diff_eq!(msg.kappas[0] as f64, 0.6, epsilon = 1e-7);
        assert_eq!(msg.indices, vec![2, -1]);
        let rec: Vec<f64> = reconstruct_with_dither(&msg, &u).unwrap();
        assert_abs_diff_eq!(rec[0], 0.54, epsilon = 1e-7);
        assert_abs_diff_eq!(rec[1], -0.18, epsilon = 1e-7);
        let kappa = msg.kappas[0] as f64;
        for (r, g) in rec.iter().zip(g) {
            assert!((r - g).abs() <= kappa * 0.25);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_message() {
        let g = Gradient::from_vec(vec![0.0; 3]).unwrap();
        let c = DitherCoordinates::new(1, 2);
        let msg = dithered_encode(&g, &cfg2(), c).unwrap();
        assert_eq!(msg.kappas, vec![0.0]);
        assert_eq!(msg.indices, vec![0, 0, 0]);
        let rec: Gradient<f64> = dithered_decode(&msg, &cfg2(), c).unwrap();
        assert!(rec.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_points_are_fixed_without_dither() {
        // kappa = 1 (max element), delta = 0.25, values on the grid.
        let cfg = UniformQuantizerCfg::normalized(4).unwrap();
        let ks = [-4, -3, 0, 1, 2, 4];
        let g: Vec<f64> = ks.iter().map(|&k| k as f64 * 0.25).collect();
        let u = vec![0.0; g.len()];
        let msg = encode_with_dither(&g, &cfg, &u, 1, DitherCoordinates::default()).unwrap();
        assert_eq!(msg.indices, ks.to_vec());
        assert_eq!(reconstruct_with_dither(&msg, &u).unwrap(), g);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(encode_with_dither(&[1.0, 2.0], &cfg2(), &[0.0], 1, DitherCoordinates::default()).is_err());
    }

    #[test]
    fn decode_detects_protocol_mismatch() {
        let g = Gradient::from_vec(vec![0.3, -0.7, 0.1]).unwrap();
        let c = DitherCoordinates::new(9, 4);
        let msg = dithered_encode(&g, &cfg2(), c).unwrap();
        let other = UniformQuantizerCfg::normalized(3).unwrap();
        assert!(matches!(dithered_decode::<f64>(&msg, &other, c), Err(Error::Protocol(_))));
        assert!(matches!(
            dithered_decode::<f64>(&msg, &cfg2(), c.advance_round().unwrap()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn half_dithered_examples() {
        let c = cfg2();
        assert_abs_diff_eq!(half_dithered_quantize(0.7, &c, 0.1).unwrap(), 1.0);
        assert_abs_diff_eq!(half_dithered_quantize(0.5, &c, 0.0).unwrap(), 0.5);
        assert_abs_diff_eq!(half_dithered_quantize(0.7, &c, -0.15).unwrap(), 0.5);
    }

    #[test]
    fn stochastic_quantize_probabilities() {
        // x = 0.7, M = 2: low level 0.5 with probability 0.6.
        assert_eq!(stochastic_quantize(0.7, 2, 0.59).unwrap(), 0.5);
        assert_eq!(stochastic_quantize(0.7, 2, 0.61).unwrap(), 1.0);
        // Grid point: always itself.
        for r in [0.0, 0.5, 0.999_999] {
            assert_eq!(stochastic_quantize(0.5, 2, r).unwrap(), 0.5);
        }
        // x = -0.25, M = 1: 0 with probability 0.75, -1 otherwise.
        assert_eq!(stochastic_quantize(-0.25, 1, 0.74).unwrap(), 0.0);
        assert_eq!(stochastic_quantize(-0.25, 1, 0.76).unwrap(), -1.0);
        assert!(stochastic_quantize(1.5, 2, 0.3).is_err());
    }

    #[test]
    fn stochastic_variance_examples() {
        assert_abs_diff_eq!(stochastic_variance(0.7, 2).unwrap(), 0.06, epsilon = 1e-12);
        assert_eq!(stochastic_variance(0.5, 2).unwrap(), 0.0);
        assert!(stochastic_variance(-1.01, 2).is_err());
        // Average over U[-1, 1] by midpoint quadrature: 1/(6 M^2).
        let n = 200_000;
        let avg = (0..n)
            .map(|i| stochastic_variance(-1.0 + (i as f64 + 0.5) * 2.0 / n as f64, 2).unwrap())
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(avg, 1.0 / 24.0, epsilon = 1e-9);
    }

    #[test]
    fn onebit_examples() {
        let g = Gradient::from_vec(vec![1.0, -1.0]).unwrap();
        let mut s = OneBitState::new(2);
        let (m, rec) = onebit_encode(&g, &mut s).unwrap();
        assert_eq!(m.bits, vec![true, false]);
        assert_eq!((m.mu_pos, m.mu_neg), (1.0, -1.0));
        assert_eq!(rec, vec![1.0, -1.0]);
        assert_eq!(s.residual(), &[0.0, 0.0]);

        let g = Gradient::from_vec(vec![2.0, 1.0, -1.0]).unwrap();
        let mut s = OneBitState::new(3);
        let (m, rec) = onebit_encode(&g, &mut s).unwrap();
        assert_eq!((m.mu_pos, m.mu_neg), (1.5, -1.0));
        assert_eq!(rec, vec![1.5, 1.5, -1.0]);
        assert_eq!(s.residual(), &[0.5, -0.5, 0.0]);

        let g = Gradient::from_vec(vec![1.0, 2.0]).unwrap();
        let mut s = OneBitState::new(2);
        let (m, rec) = onebit_encode(&g, &mut s).unwrap();
        assert_eq!(m.mu_neg, 0.0);
        assert_eq!(rec, vec![1.5, 1.5]);

        assert!(onebit_encode(&g, &mut OneBitState::new(3)).is_err());
    }

    #[test]
    fn onebit_wire_round_trip() {
        let g = Gradient::from_vec(vec![0.3, -2.0, 0.0, 5.0, -0.1]).unwrap();
        let (m, _) = onebit_encode(&g, &mut OneBitState::new(5)).unwrap();
        assert_eq!(OneBitMessage::from_bytes(&m.to_bytes()).unwrap(), m);
    }

    #[test]
    fn onebit_error_feedback_telescopes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 32;
        let mut s = OneBitState::new(n);
        let mut sum_g = vec![0.0; n];
        let mut sum_hat = vec![0.0; n];
        for _ in 0..500 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, rec) = onebit_encode(&Gradient::from_vec(g.clone()).unwrap(), &mut s).unwrap();
            for i in 0..n {
                sum_g[i] += g[i];
                sum_hat[i] += rec[i];
            }
        }
        for i in 0..n {
            // sum of reconstructions = sum of inputs - final residual
            assert_abs_diff_eq!(sum_hat[i], sum_g[i] - s.residual()[i], epsilon = 1e-6);
            assert!(s.residual()[i].abs() < 4.0);
        }
    }

    #[test]
    fn partition_examples() {
        let g = [0.6, -0.2, 3.0, -1.0];
        let u = [0.1, -0.2, 0.1, -0.2];
        let msg = encode_with_dither(&g, &cfg2(), &u, 2, DitherCoordinates::default()).unwrap();
        assert_abs_diff_eq!(msg.kappas[0] as f64, 0.6, epsilon = 1e-7);
        assert_eq!(msg.kappas[1], 3.0);
        assert_eq!(msg.indices, vec![2, -1, 2, -1]);
        let lens: Vec<usize> = partition_ranges(5, 2).unwrap().iter().map(|r| r.len()).collect();
        assert_eq!(lens, vec![3, 2]);
        assert!(partition_ranges(3, 4).is_err());
        assert!(partition_ranges(3, 0).is_err());
    }

    #[test]
    fn single_partition_equals_plain_encode() {
        let g = Gradient::from_vec(vec![0.25, -1.5, 0.75, 0.1, -0.3]).unwrap();
        let c = DitherCoordinates::new(77, 3);
        assert_eq!(
            partition_encode(&g, 1, &cfg2(), c).unwrap(),
            dithered_encode(&g, &cfg2(), c).unwrap()
        );
    }

    #[test]
    fn wire_layout_of_worked_example() {
        let msg = encode_with_dither(&[0.6, -0.2], &cfg2(), &[0.1, -0.2], 1, DitherCoordinates::new(5, 9)).unwrap();
        let bytes = msg.to_bytes();
        let mut expected = vec![1u8];
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&msg.kappas[0].to_le_bytes());
        expected.extend_from_slice(&5u64.to_le_bytes());
        expected.extend_from_slice(&9u64.to_le_bytes());
        // indices 2, -1 offset by M = 2 -> 4 (100), 1 (001), 3 bits each, LSB first:
        // bits 0,0,1,1,0,0 -> 0b0000_0100 | 0b0000_1000 = 0x0C
        expected.push(0x0C);
        assert_eq!(bytes, expected);
        assert_eq!(QuantizedMessage::from_bytes(&bytes, cfg2()).unwrap(), msg);
        assert!(QuantizedMessage::from_bytes(&bytes[..bytes.len() - 1], cfg2()).is_err());
    }

    #[test]
    fn excess_variance_examples() {
        let b = excess_variance_bound(2, 0.5, 0.0, 1.0, 0.0, 1);
        assert_abs_diff_eq!(b.general, 0.041_666_666_666_666_664, epsilon = 1e-15);
        let z = excess_variance_bound(100, 0.0, 3.0, 4.0, 2.0, 4);
        assert_eq!((z.general, z.gaussian, z.partitioned), (0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn partitioned_bound_at_one_equals_gaussian(
            n in 1usize..10_000, delta in 0.0f64..1.0, var in 0.0f64..10.0, mu in 0.0f64..3.0
        ) {
            let b = excess_variance_bound(n, delta, var, 1.0, mu, 1);
            prop_assert!((b.gaussian - b.partitioned).abs() <= 1e-12 * b.gaussian.max(1.0));
        }

        #[test]
        fn dithered_round_trip_error_is_bounded(
            values in prop::collection::vec(-100.0f64..100.0, 1..64),
            m in 1u32..8, seed in any::<u64>(), round in 0u64..1000, k in 1usize..4
        ) {
            let g = Gradient::from_vec(values).unwrap();
            let k = k.min(g.len());
            let cfg = UniformQuantizerCfg::normalized(m).unwrap();
            let c = DitherCoordinates::new(seed, round);
            let msg = partition_encode(&g, k, &cfg, c).unwrap();
            prop_assert!(msg.indices.iter().all(|q| q.unsigned_abs() <= m));
            let rec: Gradient<f64> = dithered_decode(&msg, &cfg, c).unwrap();
            for (start, end, kappa) in msg.partition_bounds() {
                for i in start..end {
                    let err = (rec.as_slice()[i] - g.as_slice()[i]).abs();
                    prop_assert!(err <= kappa as f64 * cfg.delta / 2.0 * (1.0 + 1e-12));
                }
            }
            let parsed = QuantizedMessage::from_bytes(&msg.to_bytes(), cfg).unwrap();
            prop_assert_eq!(parsed, msg);
        }

        #[test]
        fn f32_and_f64_paths_agree_on_indices(
            values in prop::collection::vec(-1.0f32..1.0, 1..32), seed in any::<u64>()
        ) {
            // f32 inputs embed exactly in f64; indices may only differ at rounding ties.
            let g32 = Gradient::from_vec(values.clone()).unwrap();
            let g64 = Gradient::from_vec(values.iter().map(|&v| v as f64).collect()).unwrap();
            let c = DitherCoordinates::new(seed, 0);
            let a = dithered_encode(&g32, &cfg2(), c).unwrap();
            let b = dithered_encode(&g64, &cfg2(), c).unwrap();
            prop_assert_eq!(a.kappas, b.kappas);
            let diffs = a.indices.iter().zip(&b.indices).filter(|(x, y)| x != y).count();
            prop_assert!(diffs <= 1);
        }
    }
}
