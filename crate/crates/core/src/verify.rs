//! Statistical verification suite: every distributional property of the
//! quantizers checked by Monte Carlo, with a JSON-serializable report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{aac_encode_counted, empirical_entropy, IndexStream};
use crate::dither::{DitherCoordinates, DitherGenerator};
use crate::error::Result;
use crate::nested::{
    failure_prob_bound, is_decoding_failure, nested_decode, nested_encode, nested_mse, NestedConfig, SideInfoModel,
};
use crate::quant::{
    encode_with_dither, excess_variance_bound, reconstruct_with_dither, stochastic_index, stochastic_variance,
    UniformQuantizerCfg,
};
use crate::simnet::experiment::VERSION;
use crate::stats::{independence_check, ks_uniform, mean_estimate, pearson, raw_moment, tv_distance};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn below(name: &str, statistic: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            statistic,
            threshold,
            pass: statistic < threshold,
            detail: detail.into(),
        }
    }

    fn at_most(name: &str, statistic: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            pass: statistic <= threshold,
            ..Self::below(name, statistic, threshold, detail)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub version: String,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Dither source; replace to inject a faulty generator.
    pub generator: DitherGenerator,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            generator: DitherGenerator::STANDARD,
        }
    }
}

const N_DIST: usize = 1_000_000;
const N_GRID: usize = 100_000;
const VEC_LEN: usize = 100;

fn grid() -> impl Iterator<Item = f64> {
    (0..=100).map(|j| (j as f64 - 50.0) / 50.0)
}

fn dither_vec(gen: &DitherGenerator, coords: DitherCoordinates, n: usize, delta: f64) -> Vec<f64> {
    (0..n as u64).map(|i| gen.dither(coords, i, delta)).collect()
}

/// Normalized errors `(g - g_tilde) / kappa` and inputs `g / kappa` over
/// Gaussian test vectors.
fn dithered_errors(opts: &VerifyOptions, delta: f64, vectors: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = UniformQuantizerCfg::from_delta(delta)?;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..vectors)
        .into_par_iter()
        .map(|v| {
            let coords = DitherCoordinates::new(opts.seed, v as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (v as u64) << 20);
            let g: Vec<f64> = (0..VEC_LEN).map(|_| StandardNormal.sample(&mut rng)).collect();
            let u = dither_vec(&opts.generator, coords, VEC_LEN, delta);
            let msg = encode_with_dither(&g, &cfg, &u, 1, coords)?;
            let rec = reconstruct_with_dither(&msg, &u)?;
            let kappa = msg.kappas[0] as f64;
            Ok((
                g.iter().zip(&rec).map(|(a, b)| (a - b) / kappa).collect(),
                g.iter().map(|a| a / kappa).collect(),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold((Vec::new(), Vec::new()), |(mut e, mut x), (pe, px)| {
        e.extend(pe);
        x.extend(px);
        (e, x)
    }))
}

fn check_dither_uniformity(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let delta = 0.5;
    let coords = DitherCoordinates::new(opts.seed, 0);
    let samples = dither_vec(&opts.generator, coords, N_DIST, delta);
    let ks = ks_uniform(&samples, -delta / 2.0, delta / 2.0)?;
    let next = dither_vec(&opts.generator, DitherCoordinates::new(opts.seed, 1), N_DIST, delta);
    let r = pearson(&samples, &next)?;
    Ok(vec![
        Check::below("dither_uniformity", ks.statistic, ks.threshold, "KS of 1e6 dither samples vs U[-d/2, d/2)"),
        Check::below(
            "dither_round_decorrelation",
            if r.degenerate { 1.0 } else { r.r.abs() },
            0.01,
            "|corr| between the streams of consecutive rounds",
        ),
    ])
}

fn check_dithered_errors(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let delta = 0.25;
    let (errors, inputs) = dithered_errors(opts, delta, N_DIST / VEC_LEN)?;
    let ks = ks_uniform(&errors, -delta / 2.0, delta / 2.0)?;
    let r = independence_check(&errors, &inputs)?;
    let mean = mean_estimate(&errors)?;
    let second = raw_moment(&errors, 2)?;
    Ok(vec![
        Check::below("error_uniformity", ks.statistic, ks.threshold, "KS of normalized dithered errors"),
        Check::below("error_independence", r.r.abs(), 0.01, "|corr(error, input)|"),
        Check::at_most(
            "dithered_unbiased",
            mean.value.abs(),
            4.0 * (delta / 2.0) / (errors.len() as f64).sqrt(),
            "mean normalized error vs 4 (d/2)/sqrt(N)",
        ),
        Check::at_most(
            "dithered_second_moment",
            (second.value - delta * delta / 12.0).abs(),
            3.0 * second.std_error,
            "E[e^2] vs d^2/12 within 3 SE",
        ),
    ])
}

fn check_half_dithered_ks_rejects(opts: &VerifyOptions) -> Result<Check> {
    let delta = 0.5;
    let x = 0.3;
    let coords = DitherCoordinates::new(opts.seed ^ 0x4844, 0);
    let errors: Vec<f64> = (0..N_DIST as u64)
        .map(|i| {
            let u = opts.generator.dither(coords, i, delta);
            delta * ((x + u) / delta).round() - x
        })
        .collect();
    let ks = ks_uniform(&errors, -delta / 2.0, delta / 2.0)?;
    Ok(Check {
        name: "half_dithered_not_uniform".into(),
        statistic: ks.statistic,
        threshold: ks.threshold,
        pass: !ks.pass,
        detail: "KS must reject uniformity of half-dithered errors at x = 0.3".into(),
    })
}

/// Half-dithered and stochastic output distributions on the 101-point grid, `M = 2`.
fn check_half_dithered_matches_stochastic(opts: &VerifyOptions) -> Result<Check> {
    let m = 2u32;
    let delta = 1.0 / m as f64;
    let worst = grid()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(j, x)| {
            let mut half = vec![0.0; 2 * m as usize + 1];
            let mut stoch = vec![0.0; 2 * m as usize + 1];
            let dc = DitherCoordinates::new(opts.seed ^ 0x4c31, j as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4c32 ^ (j as u64) << 16);
            for i in 0..N_GRID as u64 {
                let u = opts.generator.dither(dc, i, delta);
                let q = ((x + u) / delta).round() as i64;
                half[(q + m as i64).clamp(0, 2 * m as i64) as usize] += 1.0 / N_GRID as f64;
                let s = stochastic_index(x, m, rng.random::<f64>()).unwrap();
                stoch[(s + m as i64) as usize] += 1.0 / N_GRID as f64;
            }
            tv_distance(&half, &stoch).unwrap()
        })
        .reduce(|| 0.0, f64::max);
    Ok(Check::below(
        "half_dithered_matches_stochastic",
        worst,
        0.01,
        "max TV between half-dithered and stochastic outputs over 101 inputs",
    ))
}

fn check_stochastic_variance(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let m = 2u32;
    let per_point: Vec<(f64, f64, f64)> = grid()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(j, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5356 ^ (j as u64) << 16);
            let sq: Vec<f64> = (0..N_GRID)
                .map(|_| {
                    let q = stochastic_index(x, m, rng.random::<f64>()).unwrap() as f64 / m as f64;
                    (q - x) * (q - x)
                })
                .collect();
            let est = mean_estimate(&sq).unwrap();
            (est.value, stochastic_variance(x, m).unwrap(), est.std_error)
        })
        .collect();
    let grid_worst = per_point
        .iter()
        .map(|(v, t, se)| (v - t).abs() - (3.0 * se + 1e-12))
        .fold(f64::NEG_INFINITY, f64::max);
    let emp: Vec<f64> = per_point.iter().map(|p| p.0).collect();
    let formula: Vec<f64> = per_point.iter().map(|p| p.1).collect();
    let binned = pearson(&emp, &formula)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5357);
    let avg_samples: Vec<f64> = (0..N_DIST)
        .map(|_| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let q = stochastic_index(x, m, rng.random::<f64>()).unwrap() as f64 / m as f64;
            (q - x) * (q - x)
        })
        .collect();
    let avg = mean_estimate(&avg_samples)?.value;
    let target = 1.0 / (6.0 * (m * m) as f64);
    Ok(vec![
        Check::at_most(
            "stochastic_variance_grid",
            grid_worst,
            0.0,
            "max over the grid of |emp var - formula| - 3 SE",
        ),
        Check::below(
            "stochastic_variance_shape",
            1.0 - binned.r,
            0.01,
            "1 - corr(binned empirical variance, formula)",
        ),
        Check::below(
            "stochastic_average_variance",
            (avg - target).abs() / target,
            0.02,
            "relative gap of the average variance to 1/(6M^2)",
        ),
    ])
}

/// Second moment of `Q(x + u) - x` with `k` summed uniform dithers.
fn half_dithered_moment(opts: &VerifyOptions, x: f64, k: u32, delta: f64, n: usize, salt: u64) -> (f64, f64) {
    let base = DitherCoordinates::new(opts.seed ^ salt, 0);
    let sq: Vec<f64> = (0..n as u64)
        .map(|i| {
            let u: f64 = (0..k).map(|l| opts.generator.dither(base.lane(l), i, delta)).sum();
            let e = delta * ((x + u) / delta).round() - x;
            e * e
        })
        .collect();
    let est = mean_estimate(&sq).unwrap();
    (est.value, est.std_error)
}

fn check_half_dithered_moments(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let delta = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4844_4d31);
    let coords = DitherCoordinates::new(opts.seed ^ 0x4844_4d32, 0);
    let sq: Vec<f64> = (0..N_DIST as u64)
        .map(|i| {
            let x: f64 = rng.random_range(-1.0..1.0);
            let u = opts.generator.dither(coords, i, delta);
            let e = delta * ((x + u) / delta).round() - x;
            e * e
        })
        .collect();
    let avg = mean_estimate(&sq)?;
    let target1 = delta * delta / 6.0;
    let target2 = delta * delta / 4.0;
    let tri_worst = grid()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(j, x)| {
            let (v, se) = half_dithered_moment(opts, x, 2, delta, N_GRID, 0x5452 ^ (j as u64) << 8);
            (v - target2).abs() - 4.0 * se
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    Ok(vec![
        Check::at_most(
            "half_dithered_average_moment",
            (avg.value - target1).abs(),
            3.0 * avg.std_error,
            "E[e^2] over x ~ U[-1, 1] with uniform dither vs d^2/6",
        ),
        Check::at_most(
            "half_dithered_triangular_moment",
            tri_worst,
            0.0,
            "max over the grid of |E[e^2|x] - d^2/4| - 4 SE (Bonferroni, 101 points) with two summed dithers",
        ),
    ])
}

fn check_excess_variance(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let vectors = 20_000;
    let mean_sq = |delta: f64| -> Result<(f64, f64)> {
        let cfg = UniformQuantizerCfg::from_delta(delta)?;
        let (excess, norms) = (0..vectors)
            .into_par_iter()
            .map(|v| {
                let coords = DitherCoordinates::new(opts.seed ^ 0x4556, v as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4557 ^ (v as u64) << 20);
                let g: Vec<f64> = (0..VEC_LEN).map(|_| StandardNormal.sample(&mut rng)).collect();
                let u = dither_vec(&opts.generator, coords, VEC_LEN, delta);
                let msg = encode_with_dither(&g, &cfg, &u, 1, coords).unwrap();
                let rec = reconstruct_with_dither(&msg, &u).unwrap();
                let ex: f64 = g.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum();
                (ex, g.iter().map(|a| a * a).sum::<f64>())
            })
            .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        Ok((excess / vectors as f64, norms / vectors as f64))
    };
    let (coarse, e_g_sq) = mean_sq(0.5)?;
    let (fine, _) = mean_sq(0.25)?;
    let bound = excess_variance_bound(VEC_LEN, 0.5, 1.0, e_g_sq, 0.0, 1).general;
    Ok(vec![
        Check::below(
            "excess_variance_halving",
            (coarse / fine - 4.0).abs() / 4.0,
            0.10,
            "relative gap of the excess-variance ratio to 4 when halving the step",
        ),
        Check::at_most(
            "excess_variance_bound",
            coarse,
            bound,
            "E||g_tilde - g||^2 vs n d^2/12 E||g||^2",
        ),
    ])
}

fn check_nested(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let cfg = NestedConfig::new(1.0 / 3.0, 3, 0.9)?;
    let sigma = 0.2;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4e51);
    let coords = DitherCoordinates::new(opts.seed ^ 0x4e52, 0);
    let mut sq = 0.0;
    let mut ok = 0usize;
    let mut failures = 0usize;
    for i in 0..N_DIST as u64 {
        let x: f64 = rng.random_range(-1.0..1.0);
        let z: f64 = sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let y = x - z;
        let u = opts.generator.dither(coords, i, cfg.delta1());
        let s = nested_encode(x, &cfg, u);
        let xh = nested_decode(s, y, &cfg, u);
        if is_decoding_failure(x, y, &cfg, u) {
            failures += 1;
        } else {
            sq += (xh - x) * (xh - x);
            ok += 1;
        }
    }
    let mse = sq / ok as f64;
    let model = SideInfoModel::gaussian(sigma);
    let target = nested_mse(&cfg, &model);
    let rate = failures as f64 / N_DIST as f64;
    let mut bounded_failures = 0u64;
    let radius = cfg.safe_radius();
    for i in 0..N_GRID as u64 {
        let x: f64 = rng.random_range(-1.0..1.0);
        let z = rng.random_range(-radius..radius) * 0.999;
        let u = opts.generator.dither(coords, N_DIST as u64 + i, cfg.delta1());
        let xh = nested_decode(nested_encode(x, &cfg, u), x - z, &cfg, u);
        if is_decoding_failure(x, x - z, &cfg, u) || (xh - x).abs() > cfg.delta2() / 2.0 {
            bounded_failures += 1;
        }
    }
    Ok(vec![
        Check::below("nested_mse", (mse - target).abs() / target, 0.02, "relative gap of conditional MSE"),
        Check::at_most("nested_failure_rate", rate, failure_prob_bound(&cfg, &model), "empirical failure rate vs bound"),
        Check::at_most(
            "nested_bounded_innovation",
            bounded_failures as f64,
            0.0,
            "failures with |z| below the safe radius",
        ),
    ])
}

fn check_entropy_coder(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4141);
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
    let stream = IndexStream::symmetric(symbols, 1)?;
    let h = empirical_entropy(&stream)?;
    let (_, bits) = aac_encode_counted(&stream)?;
    Ok(Check::at_most(
        "aac_within_5pct",
        bits as f64,
        1.05 * h + 64.0,
        "coded bits vs 1.05 n H + 64",
    ))
}

fn check_ks_harness(opts: &VerifyOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4b53);
    let gauss: Vec<f64> = (0..10_000).map(|_| 0.2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
    let ks = ks_uniform(&gauss, -0.5, 0.5)?;
    Ok(Check {
        name: "ks_harness_rejects_gaussian".into(),
        statistic: ks.statistic,
        threshold: ks.threshold,
        pass: !ks.pass,
        detail: "the KS harness must reject a Gaussian sample".into(),
    })
}

/// Runs every check; never short-circuits on a failed check.
pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = vec![check_ks_harness(opts)?];
    checks.extend(check_dither_uniformity(opts)?);
    checks.extend(check_dithered_errors(opts)?);
    checks.push(check_half_dithered_ks_rejects(opts)?);
    checks.push(check_half_dithered_matches_stochastic(opts)?);
    checks.extend(check_stochastic_variance(opts)?);
    checks.extend(check_half_dithered_moments(opts)?);
    checks.extend(check_excess_variance(opts)?);
    checks.extend(check_nested(opts)?);
    checks.push(check_entropy_coder(opts)?);
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        version: VERSION.to_string(),
        seed: opts.seed,
        checks,
        pass,
    })
}
