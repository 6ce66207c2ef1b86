//! One-dimensional nested dithered quantization with decoder side information.
//!
//! A fine quantizer `Q1` (step `delta1`) and a coarse quantizer `Q2`
//! (step `delta2 = k * delta1`) are nested: every coarse reconstruction point
//! is a fine one. The encoder sends only the position of the fine bin inside
//! its coarse bin, `s = Q1(t) - Q2(t)` with `t = alpha * x + u`. The decoder
//! resolves which coarse bin was meant using a correlated value `y`.

use serde::{Deserialize, Serialize};

use crate::codec::bits::{width_for, BitReader, BitWriter, ByteCursor};
use crate::dither::DitherCoordinates;
use crate::error::{invalid, Error, Result};
use crate::quant::{wire_kappa, Gradient, QuantizerKind};
use crate::scalar::{round_half_away, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedConfig {
    delta1: f64,
    nesting_k: u32,
    alpha: f64,
}

impl NestedConfig {
    pub fn new(delta1: f64, nesting_k: u32, alpha: f64) -> Result<Self> {
        if !(delta1.is_finite() && delta1 > 0.0) {
            return Err(invalid!("fine step must be positive, got {delta1}"));
        }
        if nesting_k < 2 {
            return Err(invalid!("nesting ratio k must be at least 2, got {nesting_k}"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid!("shrinkage alpha must lie in (0, 1], got {alpha}"));
        }
        Ok(Self {
            delta1,
            nesting_k,
            alpha,
        })
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        Self::new(self.delta1, self.nesting_k, alpha)
    }

    pub fn delta1(&self) -> f64 {
        self.delta1
    }

    pub fn delta2(&self) -> f64 {
        self.nesting_k as f64 * self.delta1
    }

    pub fn nesting_k(&self) -> u32 {
        self.nesting_k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Width of one relative index, `ceil(log2 k)`.
    pub fn index_bits(&self) -> u32 {
        width_for(self.nesting_k as u64)
    }

    /// Offset mapping relative indices onto `0..k`.
    fn half(&self) -> i64 {
        (self.nesting_k / 2) as i64
    }

    /// Inclusive range of relative indices: `{-k/2 .. k-1-k/2}`.
    pub fn rel_range(&self) -> (i32, i32) {
        let h = self.half();
        (-h as i32, (self.nesting_k as i64 - 1 - h) as i32)
    }

    /// Largest `|x - y|` that can never cause a decoding failure.
    pub fn safe_radius(&self) -> f64 {
        (self.delta2() - self.delta1) / (2.0 * self.alpha)
    }
}

/// Statistics of the innovation `z = x - y` between the source and the side information.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SideInfoModel {
    pub sigma_z: f64,
    /// Caller-asserted bound on `|z|`, if any.
    pub z_bound: Option<f64>,
}

impl SideInfoModel {
    pub fn gaussian(sigma_z: f64) -> Self {
        Self { sigma_z, z_bound: None }
    }
}

/// Relative index `(Q1(t) - Q2(t)) / delta1` of `t = alpha x + u`.
///
/// The coarse bin is derived from the fine index, so the result always lies in
/// [`NestedConfig::rel_range`] even when floating point rounding of `t` lands
/// next to a coarse boundary.
pub fn nested_encode<T: Scalar>(x: T, cfg: &NestedConfig, u: T) -> i32 {
    let t = T::from_f64_lossy(cfg.alpha) * x + u;
    let fine = round_half_away(t / T::from_f64_lossy(cfg.delta1));
    let h = cfg.half();
    ((fine + h).rem_euclid(cfg.nesting_k as i64) - h) as i32
}

/// `y + alpha (r - Q2(r))` with `r = s delta1 - u - alpha y`.
pub fn nested_decode<T: Scalar>(s: i32, y: T, cfg: &NestedConfig, u: T) -> T {
    let alpha = T::from_f64_lossy(cfg.alpha);
    let delta1 = T::from_f64_lossy(cfg.delta1);
    let delta2 = T::from_f64_lossy(cfg.delta2());
    let r = T::from_i32(s).unwrap() * delta1 - u - alpha * y;
    let coarse = delta2 * (r / delta2).round();
    y + alpha * (r - coarse)
}

/// Shrinkage `sqrt(1 - delta1^2 / (12 sigma_z^2))` that keeps the
/// reconstruction variance at `delta1^2 / 12`.
pub fn alpha_optimal(delta1: f64, sigma_z: f64) -> Result<f64> {
    let ratio = delta1 * delta1 / (12.0 * sigma_z * sigma_z);
    if !(ratio < 1.0) {
        return Err(invalid!(
            "sigma_z^2 = {} must exceed delta1^2/12 = {}",
            sigma_z * sigma_z,
            delta1 * delta1 / 12.0
        ));
    }
    Ok((1.0 - ratio).sqrt())
}

/// Upper bound on `Pr(|alpha z + u| > delta2 / 2)`, clipped to `[0, 1]`.
pub fn failure_prob_bound(cfg: &NestedConfig, model: &SideInfoModel) -> f64 {
    if let Some(b) = model.z_bound {
        if b <= cfg.safe_radius() {
            return 0.0;
        }
    }
    let d2sq = cfg.delta2() * cfg.delta2();
    let bound = cfg.delta1 * cfg.delta1 / (3.0 * d2sq) + 4.0 * cfg.alpha * cfg.alpha * model.sigma_z * model.sigma_z / d2sq;
    bound.clamp(0.0, 1.0)
}

/// Reconstruction MSE given no decoding failure:
/// `alpha^2 delta1^2 / 12 + (1 - alpha^2)^2 sigma_z^2`.
pub fn nested_mse(cfg: &NestedConfig, model: &SideInfoModel) -> f64 {
    let a2 = cfg.alpha * cfg.alpha;
    a2 * cfg.delta1 * cfg.delta1 / 12.0 + (1.0 - a2) * (1.0 - a2) * model.sigma_z * model.sigma_z
}

/// Relative fine-bin indices of a `kappa`-normalized gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedMessage {
    pub rel_indices: Vec<i32>,
    pub cfg: NestedConfig,
    pub dither: DitherCoordinates,
    pub kappa: f32,
}

impl NestedMessage {
    pub fn len(&self) -> usize {
        self.rel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel_indices.is_empty()
    }

    /// Same header as a uniform-quantizer message with one partition;
    /// indices are stored as residues in `0..k`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = self.cfg.index_bits();
        let mut out = vec![QuantizerKind::Nested as u8];
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&self.kappa.to_le_bytes());
        out.extend_from_slice(&self.dither.seed.to_le_bytes());
        out.extend_from_slice(&self.dither.round.to_le_bytes());
        let h = self.cfg.half();
        let mut w = BitWriter::with_capacity_bits(self.len() * width as usize);
        for &s in &self.rel_indices {
            w.push_bits((s as i64 + h) as u64, width);
        }
        out.extend_from_slice(&w.into_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], cfg: NestedConfig) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if QuantizerKind::from_byte(cur.u8()?)? != QuantizerKind::Nested {
            return Err(Error::Decode("not a nested message".into()));
        }
        let n = cur.u32()? as usize;
        if n == 0 || cur.u32()? != 1 {
            return Err(Error::Decode("nested messages carry n >= 1 and a single scale factor".into()));
        }
        let kappa = cur.f32()?;
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::Decode("scale factor is negative or not finite".into()));
        }
        let dither = DitherCoordinates::new(cur.u64()?, cur.u64()?);
        let width = cfg.index_bits();
        let h = cfg.half();
        let mut r = BitReader::new(cur.rest());
        let rel_indices = (0..n)
            .map(|_| {
                let v = r.read_bits(width)? as i64;
                if v >= cfg.nesting_k as i64 {
                    return Err(Error::Decode(format!("residue {v} outside 0..{}", cfg.nesting_k)));
                }
                Ok((v - h) as i32)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rel_indices,
            cfg,
            dither,
            kappa,
        })
    }

    /// `n log2 k + 32`.
    pub fn ideal_bits(&self) -> f64 {
        self.len() as f64 * (self.cfg.nesting_k as f64).log2() + 32.0
    }

    pub fn packed_bits(&self) -> u64 {
        self.len() as u64 * self.cfg.index_bits() as u64 + 32
    }
}

/// Nested encoding of `g / kappa` with dither of step `delta1`.
pub fn nested_encode_vector<T: Scalar>(
    g: &Gradient<T>,
    kappa: f32,
    cfg: &NestedConfig,
    dither: DitherCoordinates,
) -> Result<NestedMessage> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(invalid!("scale factor must be positive, got {kappa}"));
    }
    let kt = T::from_wire(kappa);
    let rel_indices = g
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| nested_encode(v / kt, cfg, T::from_f64_lossy(dither.dither_at(i as u64, cfg.delta1))))
        .collect();
    Ok(NestedMessage {
        rel_indices,
        cfg: *cfg,
        dither,
        kappa,
    })
}

/// Encodes with the transmitted scale factor `max |g_i|`; an all-zero
/// gradient yields `kappa = 0` and zero indices.
pub fn nested_encode_gradient<T: Scalar>(
    g: &Gradient<T>,
    cfg: &NestedConfig,
    dither: DitherCoordinates,
) -> Result<NestedMessage> {
    let kappa = wire_kappa(g.as_slice());
    if kappa == 0.0 {
        return Ok(NestedMessage {
            rel_indices: vec![0; g.len()],
            cfg: *cfg,
            dither,
            kappa,
        });
    }
    nested_encode_vector(g, kappa, cfg, dither)
}

/// Reconstructs `kappa * x_hat` using the unnormalized side information `y`.
pub fn nested_decode_vector<T: Scalar>(
    msg: &NestedMessage,
    side_info: &[T],
    cfg: &NestedConfig,
    dither: DitherCoordinates,
) -> Result<Vec<T>> {
    if msg.cfg != *cfg {
        return Err(Error::Protocol(format!(
            "nested quantizer mismatch: message {:?}, receiver {:?}",
            msg.cfg, cfg
        )));
    }
    if msg.dither != dither {
        return Err(Error::Protocol(format!(
            "dither desync: message at {:?}, receiver at {:?}",
            msg.dither, dither
        )));
    }
    if side_info.len() != msg.len() {
        return Err(invalid!("side information has {} elements, message {}", side_info.len(), msg.len()));
    }
    if msg.kappa == 0.0 {
        return Ok(vec![T::zero(); msg.len()]);
    }
    let kt = T::from_wire(msg.kappa);
    Ok(msg
        .rel_indices
        .iter()
        .zip(side_info)
        .enumerate()
        .map(|(i, (&s, &y))| {
            let u = T::from_f64_lossy(dither.dither_at(i as u64, cfg.delta1));
            kt * nested_decode(s, y / kt, cfg, u)
        })
        .collect())
}

/// Whether decoding `x` against `y` with dither `u` lands in the wrong coarse
/// bin, i.e. `Q2(alpha (x - y) - e) != 0` where `e = t - Q1(t)`.
pub fn is_decoding_failure(x: f64, y: f64, cfg: &NestedConfig, u: f64) -> bool {
    let t = cfg.alpha * x + u;
    let e = t - cfg.delta1 * (t / cfg.delta1).round();
    let w = cfg.alpha * (x - y) - e;
    (w / cfg.delta2()).round() != 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fig3() -> NestedConfig {
        NestedConfig::new(1.0, 3, 1.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NestedConfig::new(0.0, 3, 1.0).is_err());
        assert!(NestedConfig::new(1.0, 1, 1.0).is_err());
        assert!(NestedConfig::new(1.0, 3, 0.0).is_err());
        assert!(NestedConfig::new(1.0, 3, 1.1).is_err());
        assert_eq!(fig3().delta2(), 3.0);
        assert_eq!(fig3().rel_range(), (-1, 1));
        assert_eq!(NestedConfig::new(0.25, 4, 1.0).unwrap().rel_range(), (-2, 1));
        assert_eq!(fig3().index_bits(), 2);
    }

    #[test]
    fn worked_example_encode_and_decode() {
        let cfg = fig3();
        assert_eq!(nested_encode(-4.2, &cfg, 0.3), -1);
        assert_abs_diff_eq!(nested_decode(-1, -3.4, &cfg, 0.3), -4.3, epsilon = 1e-12);
        assert_eq!(nested_encode(0.0, &cfg, 0.0), 0);
        assert_eq!(nested_encode(2.7, &cfg, 0.3), 0);
        assert_eq!(nested_decode(0, 0.0, &cfg, 0.0), 0.0);
    }

    #[test]
    fn far_side_information_causes_failure() {
        let cfg = fig3();
        let s = nested_encode(2.7, &cfg, 0.3);
        let x_hat = nested_decode(s, -3.4, &cfg, 0.3);
        assert_abs_diff_eq!(x_hat, -3.3, epsilon = 1e-12);
        assert!((2.7f64 - -3.4f64).abs() > cfg.safe_radius());
        assert!(is_decoding_failure(2.7, -3.4, &cfg, 0.3));
        assert!(!is_decoding_failure(-4.2, -3.4, &cfg, 0.3));
    }

    #[test]
    fn alpha_optimal_examples() {
        assert_abs_diff_eq!(alpha_optimal(1.0, (1.0f64 / 6.0).sqrt()).unwrap(), 0.5f64.sqrt(), epsilon = 1e-12);
        assert!(alpha_optimal(1.0, 1e6).unwrap() > 0.999_999);
        assert!(alpha_optimal(1.0, (1.0f64 / 12.0).sqrt()).is_err());
        assert!(alpha_optimal(1.0, 0.0).is_err());
    }

    #[test]
    fn failure_bound_examples() {
        let b = failure_prob_bound(&fig3(), &SideInfoModel::gaussian(0.5));
        assert_abs_diff_eq!(b, 1.0 / 27.0 + 1.0 / 9.0, epsilon = 1e-12);
        // Coarse step fixed at 1 while the fine step shrinks.
        let fine = NestedConfig::new(1.0 / 1001.0, 1001, 1.0).unwrap();
        assert!(failure_prob_bound(&fine, &SideInfoModel::gaussian(0.0)) < 1e-6);
        let bounded = SideInfoModel {
            sigma_z: 0.5,
            z_bound: Some(1.0),
        };
        assert_eq!(failure_prob_bound(&fig3(), &bounded), 0.0);
        assert_eq!(failure_prob_bound(&fig3(), &SideInfoModel::gaussian(100.0)), 1.0);
    }

    #[test]
    fn mse_examples() {
        assert_abs_diff_eq!(nested_mse(&fig3(), &SideInfoModel::gaussian(5.0)), 1.0 / 12.0, epsilon = 1e-15);
        let sigma = (1.0f64 / 6.0).sqrt();
        let cfg = fig3().with_alpha(alpha_optimal(1.0, sigma).unwrap()).unwrap();
        assert_abs_diff_eq!(nested_mse(&cfg, &SideInfoModel::gaussian(sigma)), 1.0 / 12.0, epsilon = 1e-12);
        let zero = NestedConfig::new(1e-300, 3, 1.0).unwrap();
        assert!(nested_mse(&zero, &SideInfoModel::gaussian(1.0)) < 1e-300);
    }

    #[test]
    fn nesting_identity_on_dense_grid() {
        for (d1, k) in [(1.0, 3u32), (1.0 / 3.0, 3), (0.1, 4), (0.25, 5)] {
            let d2 = k as f64 * d1;
            for i in -20_000..=20_000 {
                let x = i as f64 * 1e-3 * d2;
                let coarse_idx = (x / d2).round();
                let q2 = d2 * coarse_idx;
                let fine_idx = (q2 / d1).round();
                assert_eq!(fine_idx, k as f64 * coarse_idx);
                assert!((d1 * fine_idx - q2).abs() <= 1e-12 * q2.abs().max(1.0));
            }
        }
    }

    #[test]
    fn vector_round_trip_with_exact_side_information() {
        // y = g, zero dither is not addressable, so compare against the identity.
        let cfg = NestedConfig::new(1.0 / 3.0, 3, 1.0).unwrap();
        let g = Gradient::from_vec(vec![0.2, -0.9, 1.0, 0.0, -0.45]).unwrap();
        let c = DitherCoordinates::new(8, 1);
        let msg = nested_encode_gradient(&g, &cfg, c).unwrap();
        assert!(msg.rel_indices.iter().all(|s| (-1..=1).contains(s)));
        let rec: Vec<f64> = nested_decode_vector(&msg, g.as_slice(), &cfg, c).unwrap();
        for (r, x) in rec.iter().zip(g.as_slice()) {
            assert!((r - x).abs() <= msg.kappa as f64 * cfg.delta1() / 2.0 + 1e-12);
        }
        assert_eq!(NestedMessage::from_bytes(&msg.to_bytes(), cfg).unwrap(), msg);
    }

    #[test]
    fn zero_innovation_without_dither_is_exact() {
        let cfg = NestedConfig::new(1.0 / 3.0, 3, 1.0).unwrap();
        for j in -3..=3 {
            let x = j as f64 / 3.0;
            let s = nested_encode(x, &cfg, 0.0);
            assert_abs_diff_eq!(nested_decode(s, x, &cfg, 0.0), x, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_vector_rejects_nonpositive_kappa() {
        let g = Gradient::from_vec(vec![1.0]).unwrap();
        assert!(nested_encode_vector(&g, 0.0, &fig3(), DitherCoordinates::default()).is_err());
    }

    proptest! {
        #[test]
        fn decode_identity_without_failure(
            x in -5.0f64..5.0, z in -2.0f64..2.0, uu in -0.5f64..0.5,
            alpha in 0.3f64..=1.0, k in 2u32..7, d1 in 0.1f64..1.0
        ) {
            let cfg = NestedConfig::new(d1, k, alpha).unwrap();
            let u = uu * d1;
            let y = x - z;
            let t = alpha * x + u;
            let e = t - d1 * (t / d1).round();
            let s = nested_encode(x, &cfg, u);
            prop_assert!(s >= cfg.rel_range().0 && s <= cfg.rel_range().1);
            let x_hat = nested_decode(s, y, &cfg, u);
            let w = alpha * z - e;
            let frac = (w / cfg.delta2()).abs().fract();
            // Skip measure-zero neighborhoods of coarse-bin ties.
            prop_assume!((frac - 0.5).abs() > 1e-9);
            if (w / cfg.delta2()).round() == 0.0 {
                let expected = x - (alpha * e + (1.0 - alpha * alpha) * z);
                prop_assert!((x_hat - expected).abs() < 1e-9, "{} vs {}", x_hat, expected);
                prop_assert!(!is_decoding_failure(x, y, &cfg, u));
            } else {
                prop_assert!(is_decoding_failure(x, y, &cfg, u));
            }
        }

        #[test]
        fn bounded_innovation_never_fails(
            x in -3.0f64..3.0, zf in -0.999f64..0.999, uu in -0.5f64..0.5, alpha in 0.2f64..=1.0
        ) {
            let cfg = NestedConfig::new(1.0 / 3.0, 3, alpha).unwrap();
            let z = zf * cfg.safe_radius();
            prop_assert!(!is_decoding_failure(x, x - z, &cfg, uu * cfg.delta1()));
        }

        #[test]
        fn nested_wire_round_trip(
            values in prop::collection::vec(-10.0f64..10.0, 1..40), k in 2u32..9, seed in any::<u64>()
        ) {
            let cfg = NestedConfig::new(1.0 / k as f64, k, 1.0).unwrap();
            let g = Gradient::from_vec(values).unwrap();
            let msg = nested_encode_gradient(&g, &cfg, DitherCoordinates::new(seed, 2)).unwrap();
            let (lo, hi) = cfg.rel_range();
            prop_assert!(msg.rel_indices.iter().all(|s| *s >= lo && *s <= hi));
            prop_assert_eq!(NestedMessage::from_bytes(&msg.to_bytes(), cfg).unwrap(), msg);
        }
    }
}
