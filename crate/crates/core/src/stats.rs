//! Statistical checks used to validate the quantizers: Kolmogorov–Smirnov
//! uniformity, Pearson correlation, moment estimates with standard errors,
//! total-variation distance and the Mann–Whitney rank test.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};

/// Asymptotic Kolmogorov critical coefficient at significance 0.01.
pub const KS_C_001: f64 = 1.628;

/// Default significance level for every distributional check.
pub const ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    /// `|value - target| <= sigmas * std_error`.
    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.value - target).abs() <= sigmas * self.std_error
    }
}

/// Count, mean and central moments of a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSummary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub m3: f64,
    pub m4: f64,
}

impl SampleSummary {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(invalid!("need at least 2 samples, got {n}"));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in samples {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let nf = n as f64;
        Ok(Self {
            count: n,
            mean,
            variance: m2 / (nf - 1.0),
            m3: m3 / nf,
            m4: m4 / nf,
        })
    }

    pub fn std_error_of_mean(&self) -> f64 {
        (self.variance / self.count as f64).sqrt()
    }
}

/// Mean with its standard error.
pub fn mean_estimate(samples: &[f64]) -> Result<Estimate> {
    let s = SampleSummary::from_samples(samples)?;
    Ok(Estimate {
        value: s.mean,
        std_error: s.std_error_of_mean(),
    })
}

/// `E[x^k]` about zero, with the standard error of the sample average of `x^k`.
pub fn raw_moment(samples: &[f64], k: u32) -> Result<Estimate> {
    let powered: Vec<f64> = samples.iter().map(|x| x.powi(k as i32)).collect();
    mean_estimate(&powered)
}

/// k-th central moment (k in 1..=4) with a delta-method standard error.
pub fn moment_estimate(samples: &[f64], k: u32) -> Result<Estimate> {
    if !(1..=4).contains(&k) {
        return Err(invalid!("moment order must be in 1..=4, got {k}"));
    }
    if samples.len() < 100 {
        return Err(invalid!("need at least 100 samples, got {}", samples.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let central = |p: i32| samples.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let mk = central(k as i32);
    let m2k = central(2 * k as i32);
    // The first central moment is identically zero; report the mean's SE.
    let std_error = if k == 1 {
        (central(2) / n).sqrt()
    } else {
        ((m2k - mk * mk).max(0.0) / n).sqrt()
    };
    Ok(Estimate { value: mk, std_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// One-sample KS test against `U[lo, hi]` at significance 0.01.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> Result<KsResult> {
    ks_test(samples, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0), hi > lo)
}

/// One-sample KS test against an arbitrary continuous CDF at significance 0.01.
pub fn ks_cdf(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    ks_test(samples, cdf, true)
}

fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64, valid_range: bool) -> Result<KsResult> {
    if !valid_range {
        return Err(invalid!("KS reference interval is empty"));
    }
    if samples.len() < 100 {
        return Err(invalid!("KS test needs at least 100 samples, got {}", samples.len()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let threshold = KS_C_001 / n.sqrt();
    Ok(KsResult {
        statistic,
        threshold,
        pass: statistic < threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    /// One of the series has zero variance; `r` is reported as 0.
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(invalid!("series lengths differ: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(invalid!("need at least 2 pairs"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    Ok(Correlation {
        r: sab / (saa * sbb).sqrt(),
        degenerate: false,
    })
}

/// Correlation between quantization errors and the quantizer inputs.
pub fn independence_check(errors: &[f64], inputs: &[f64]) -> Result<Correlation> {
    if errors.len() < 100 {
        return Err(invalid!("independence check needs at least 100 pairs"));
    }
    pearson(errors, inputs)
}

/// Total-variation distance between two probability vectors on the same support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid!("support sizes differ: {} vs {}", p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    pub u: f64,
    pub z: f64,
    pub p_value: f64,
}

impl MannWhitney {
    /// True when the two samples are not distinguishable at level `alpha`.
    pub fn indistinguishable(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Two-sided Mann–Whitney U test, normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(invalid!("Mann-Whitney needs two nonempty samples"));
    }
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).chain(b.iter().map(|&x| (x, false))).collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let n = (n1 + n2) as f64;
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        rank_sum_a += avg_rank * pooled[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (f1, f2) = (n1 as f64, n2 as f64);
    let u = rank_sum_a - f1 * (f1 + 1.0) / 2.0;
    let mean_u = f1 * f2 / 2.0;
    let var_u = f1 * f2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var_u <= 0.0 {
        return Ok(MannWhitney { u, z: 0.0, p_value: 1.0 });
    }
    let diff = u - mean_u;
    let corrected = (diff.abs() - 0.5).max(0.0) * diff.signum();
    let z = corrected / var_u.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0);
    Ok(MannWhitney { u, z, p_value })
}
