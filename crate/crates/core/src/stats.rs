//! Accuracy and clinimetric statistics: median absolute joint error,
//! normalized IQR, root translation error, intraclass correlation,
//! correlation coefficients, rank and t tests, and the standardized
//! response mean with jackknife intervals.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::Trajectory;
use crate::geometry::Vec3;
use crate::skeleton::{SkeletonDefinition, JOINT_GROUPS};

/// IQR of a standard normal is 1.349, so IQR·0.7413 estimates σ.
pub const NIQR_FACTOR: f64 = 0.7413;

/// Largest per-group size for which Mann-Whitney uses the exact null.
pub const EXACT_MANN_WHITNEY_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("standard deviation is zero, statistic undefined")]
    ZeroVariance,
    #[error("confidence level must lie in (0, 1)")]
    InvalidLevel,
    #[error("reference times must be increasing and cover the estimate")]
    BadTimes,
    #[error("model lacks a reported joint coordinate")]
    MissingCoordinate,
}

fn check_finite(x: &[f64]) -> Result<(), StatsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn need(n: usize, got: usize) -> Result<(), StatsError> {
    if got < n {
        Err(StatsError::TooFew { need: n, got })
    } else {
        Ok(())
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(x: &[f64]) -> f64 {
    let m = mean(x);
    libm::sqrt(x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0))
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Linearly interpolated quantile of sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let h = (s.len() - 1) as f64 * q;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

pub fn median(x: &[f64]) -> Result<f64, StatsError> {
    need(1, x.len())?;
    check_finite(x)?;
    Ok(quantile_sorted(&sorted(x), 0.5))
}

/// Estimated and reference samples of one joint angle on shared timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub times: Vec<f64>,
    pub estimate: Vec<f64>,
    pub reference: Vec<f64>,
}

impl PairedSeries {
    pub fn new(times: Vec<f64>, estimate: Vec<f64>, reference: Vec<f64>) -> Result<Self, StatsError> {
        if estimate.len() != reference.len() || times.len() != estimate.len() {
            return Err(StatsError::LengthMismatch(estimate.len(), reference.len()));
        }
        need(1, times.len())?;
        check_finite(&times)?;
        check_finite(&estimate)?;
        check_finite(&reference)?;
        Ok(Self { times, estimate, reference })
    }

    /// Pairs an estimate with a reference sampled at other times, linearly
    /// interpolating the reference at each estimate timestamp.
    pub fn aligned(times: &[f64], estimate: &[f64], ref_times: &[f64], reference: &[f64]) -> Result<Self, StatsError> {
        if ref_times.len() != reference.len() {
            return Err(StatsError::LengthMismatch(ref_times.len(), reference.len()));
        }
        need(1, ref_times.len())?;
        if ref_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(StatsError::BadTimes);
        }
        let (first, last) = (ref_times[0], ref_times[ref_times.len() - 1]);
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            if !(t >= first && t <= last) {
                return Err(StatsError::BadTimes);
            }
            let i = ref_times.partition_point(|&r| r <= t).clamp(1, ref_times.len().max(2) - 1);
            if ref_times.len() == 1 {
                out.push(reference[0]);
                continue;
            }
            let (t0, t1) = (ref_times[i - 1], ref_times[i]);
            let f = (t - t0) / (t1 - t0);
            out.push(reference[i - 1] + f * (reference[i] - reference[i - 1]));
        }
        Self::new(times.to_vec(), estimate.to_vec(), out)
    }
}

/// Median absolute difference between estimate and reference.
pub fn mjae(series: &PairedSeries) -> Result<f64, StatsError> {
    let d: Vec<f64> = series.estimate.iter().zip(&series.reference).map(|(e, r)| libm::fabs(e - r)).collect();
    median(&d)
}

/// Median of per-joint (or per-trial) MJAE values.
pub fn mjae_aggregate(per_joint: &[f64]) -> Result<f64, StatsError> {
    median(per_joint)
}

/// MJAE of each reported joint group in degrees: per group, the median
/// absolute error pooled over its coordinates (both sides) and over the
/// estimate's timestamps, with the reference interpolated onto them.
pub fn joint_group_mjae(def: &SkeletonDefinition, estimate: &Trajectory, reference: &Trajectory) -> Result<Vec<f64>, StatsError> {
    let mut out = Vec::with_capacity(JOINT_GROUPS.len());
    for (_, coords) in JOINT_GROUPS.iter() {
        let mut errors = Vec::new();
        for name in coords.iter() {
            let c = def.coord_index(name).ok_or(StatsError::MissingCoordinate)?;
            let est: Vec<f64> = estimate.poses.iter().map(|p| p.0[c].to_degrees()).collect();
            let reference_deg: Vec<f64> = reference.poses.iter().map(|p| p.0[c].to_degrees()).collect();
            let s = PairedSeries::aligned(&estimate.times, &est, &reference.times, &reference_deg)?;
            errors.extend(s.estimate.iter().zip(&s.reference).map(|(e, r)| libm::fabs(e - r)));
        }
        out.push(median(&errors)?);
    }
    Ok(out)
}

/// Interquartile range scaled to estimate a normal standard deviation.
pub fn niqr(values: &[f64]) -> Result<f64, StatsError> {
    need(4, values.len())?;
    check_finite(values)?;
    let s = sorted(values);
    Ok((quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)) * NIQR_FACTOR)
}

/// Mean per-frame Euclidean distance between two pelvis trajectories,
/// meters in, centimeters out. No registration is applied.
pub fn rte(estimate: &[Vec3], reference: &[Vec3]) -> Result<f64, StatsError> {
    if estimate.len() != reference.len() {
        return Err(StatsError::LengthMismatch(estimate.len(), reference.len()));
    }
    need(1, estimate.len())?;
    let mut sum = 0.0;
    for (e, r) in estimate.iter().zip(reference) {
        let d = libm::sqrt((0..3).map(|a| (e[a] - r[a]) * (e[a] - r[a])).sum::<f64>());
        if !d.is_finite() {
            return Err(StatsError::NonFinite);
        }
        sum += d;
    }
    Ok(100.0 * sum / estimate.len() as f64)
}

/// Rigid transform `x ↦ R x + t` minimizing the squared distance from the
/// transformed `source` points to `target` (Kabsch).
pub fn rigid_align(source: &[Vec3], target: &[Vec3]) -> Result<(Matrix3<f64>, Vector3<f64>), StatsError> {
    if source.len() != target.len() {
        return Err(StatsError::LengthMismatch(source.len(), target.len()));
    }
    need(1, source.len())?;
    let n = source.len() as f64;
    let v = |p: &Vec3| Vector3::new(p[0], p[1], p[2]);
    let cs = source.iter().map(v).sum::<Vector3<f64>>() / n;
    let ct = target.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (v(s) - cs) * (v(t) - ct).transpose();
    }
    if !h.iter().all(|x| x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * fix * u.transpose();
    Ok((r, ct - r * cs))
}

/// RTE after rigidly registering the estimate onto the reference.
pub fn rte_aligned(estimate: &[Vec3], reference: &[Vec3]) -> Result<f64, StatsError> {
    let (r, t) = rigid_align(estimate, reference)?;
    let moved: Vec<Vec3> = estimate
        .iter()
        .map(|p| {
            let q = r * Vector3::new(p[0], p[1], p[2]) + t;
            [q.x, q.y, q.z]
        })
        .collect();
    rte(&moved, reference)
}

// Special functions.

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(b, a, 1.0 - x);
    }
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..10_000 {
        let m = m as f64;
        let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        for (k, numer) in [num, -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0))].into_iter().enumerate() {
            d = 1.0 + numer * d;
            if libm::fabs(d) < TINY {
                d = TINY;
            }
            c = 1.0 + numer / c;
            if libm::fabs(c) < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if k == 1 && libm::fabs(delta - 1.0) < 1e-15 {
                return libm::exp(ln_front) * f / a;
            }
        }
    }
    libm::exp(ln_front) * f / a
}

/// Student t CDF with `df` degrees of freedom.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// F distribution CDF.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    inc_beta(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))
}

/// Inverts a monotone increasing CDF by bisection on `[lo, hi]`, growing
/// `hi` until it brackets `p`.
fn invert(cdf: impl Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    while cdf(hi) < p && hi < 1e300 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn t_quantile(p: f64, df: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        return -t_quantile(1.0 - p, df);
    }
    invert(|t| t_cdf(t, df), p, 0.0, 1.0)
}

pub fn f_quantile(p: f64, d1: f64, d2: f64) -> f64 {
    invert(|x| f_cdf(x, d1, d2), p, 0.0, 1.0)
}

// Intraclass correlation.

/// Per-subject repeated observations of one metric; repeat counts may differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedMeasures {
    pub subjects: Vec<Vec<f64>>,
}

impl RepeatedMeasures {
    /// Balanced table with every subject cut to the smallest repeat count.
    /// Subjects with extra repeats keep a seeded random subset, in order.
    pub fn balanced(&self, seed: u64) -> Result<Vec<Vec<f64>>, StatsError> {
        need(2, self.subjects.len())?;
        let k = self.subjects.iter().map(Vec::len).min().unwrap_or(0);
        need(2, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Vec::with_capacity(self.subjects.len());
        for s in &self.subjects {
            check_finite(s)?;
            if s.len() == k {
                table.push(s.clone());
            } else {
                let mut idx = sample(&mut rng, s.len(), k).into_vec();
                idx.sort_unstable();
                table.push(idx.into_iter().map(|i| s[i]).collect());
            }
        }
        Ok(table)
    }
}

/// Two-way ANOVA mean squares of a subjects × repeats table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSquares {
    pub subjects: f64,
    pub repeats: f64,
    pub error: f64,
    pub n: usize,
    pub k: usize,
}

pub fn mean_squares(table: &[Vec<f64>]) -> Result<MeanSquares, StatsError> {
    let n = table.len();
    need(2, n)?;
    let k = table[0].len();
    need(2, k)?;
    if let Some(r) = table.iter().find(|r| r.len() != k) {
        return Err(StatsError::LengthMismatch(k, r.len()));
    }
    for r in table {
        check_finite(r)?;
    }
    let grand = table.iter().flatten().sum::<f64>() / (n * k) as f64;
    let row_means: Vec<f64> = table.iter().map(|r| mean(r)).collect();
    let col_means: Vec<f64> = (0..k).map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ss_rows = k as f64 * row_means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
    let ss_cols = n as f64 * col_means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
    let ss_total: f64 = table.iter().flatten().map(|x| (x - grand) * (x - grand)).sum();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    Ok(MeanSquares {
        subjects: ss_rows / (n - 1) as f64,
        repeats: ss_cols / (k - 1) as f64,
        error: ss_err / ((n - 1) * (k - 1)) as f64,
        n,
        k,
    })
}

/// A coefficient with its 95% confidence bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Two-way random-effects, absolute-agreement ICC for single (`single`)
/// and averaged (`average`) measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub single: Interval,
    pub average: Interval,
}

pub fn icc(table: &[Vec<f64>]) -> Result<Icc, StatsError> {
    let ms = mean_squares(table)?;
    let (n, k) = (ms.n as f64, ms.k as f64);
    let (msr, msc, mse) = (ms.subjects, ms.repeats, ms.error);
    let zero = Interval { value: 0.0, lo: 0.0, hi: 0.0 };
    if msr == 0.0 {
        return Ok(Icc { single: zero, average: zero });
    }
    let single = (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n);
    let average = (msr - mse) / (msr + (msc - mse) / n);
    if mse == 0.0 {
        let one = |v: f64| Interval { value: v, lo: v, hi: v };
        return Ok(Icc { single: one(single), average: one(average) });
    }
    let a = k * single / (n * (1.0 - single));
    let b = 1.0 + k * single * (n - 1.0) / (n * (1.0 - single));
    let v = (a * msc + b * mse) * (a * msc + b * mse)
        / ((a * msc) * (a * msc) / (k - 1.0) + (b * mse) * (b * mse) / ((n - 1.0) * (k - 1.0)));
    let fu = f_quantile(0.975, n - 1.0, v);
    let fl = f_quantile(0.975, v, n - 1.0);
    let lo = n * (msr - fu * mse) / (fu * (k * msc + (k * n - k - n) * mse) + n * msr);
    let hi = n * (fl * msr - mse) / (k * msc + (k * n - k - n) * mse + n * fl * msr);
    let avg = |x: f64| x * k / (1.0 + x * (k - 1.0));
    Ok(Icc {
        single: Interval { value: single, lo, hi },
        average: Interval { value: average, lo: avg(lo), hi: avg(hi) },
    })
}

pub fn icc2(table: &[Vec<f64>]) -> Result<Interval, StatsError> {
    icc(table).map(|i| i.single)
}

pub fn icc2k(table: &[Vec<f64>]) -> Result<Interval, StatsError> {
    icc(table).map(|i| i.average)
}

// Responsiveness.

/// Standardized response mean: mean over sample standard deviation.
pub fn srm(diffs: &[f64]) -> Result<f64, StatsError> {
    need(2, diffs.len())?;
    check_finite(diffs)?;
    let sd = sample_std(diffs);
    if !(sd > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    Ok(mean(diffs) / sd)
}

/// Jackknife SRM: mean pseudo-value and a t interval at `level`.
pub fn srm_jackknife_ci(diffs: &[f64], level: f64) -> Result<Interval, StatsError> {
    need(3, diffs.len())?;
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidLevel);
    }
    let n = diffs.len();
    let full = srm(diffs)?;
    let mut pseudo = Vec::with_capacity(n);
    let mut rest = Vec::with_capacity(n - 1);
    for i in 0..n {
        rest.clear();
        rest.extend(diffs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| *d));
        pseudo.push(n as f64 * full - (n - 1) as f64 * srm(&rest)?);
    }
    let point = mean(&pseudo);
    let se = sample_std(&pseudo) / libm::sqrt(n as f64);
    let half = t_quantile(0.5 + level / 2.0, (n - 1) as f64) * se;
    Ok(Interval { value: point, lo: point - half, hi: point + half })
}

// Correlation.

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    need(2, x.len())?;
    check_finite(x)?;
    check_finite(y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    check_finite(x)?;
    check_finite(y)?;
    pearson(&ranks(x), &ranks(y))
}

// Hypothesis tests.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Mann-Whitney U of `a` against `b` (pairs with a > b, ties counting one
/// half). Exact null distribution when both groups have at most
/// [`EXACT_MANN_WHITNEY_MAX`] values, otherwise the tie-corrected normal
/// approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    need(1, a.len())?;
    need(1, b.len())?;
    check_finite(a)?;
    check_finite(b)?;
    let (n1, n2) = (a.len(), b.len());
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let r = ranks(&all);
    let r1: f64 = r[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let p = if n1 <= EXACT_MANN_WHITNEY_MAX && n2 <= EXACT_MANN_WHITNEY_MAX {
        exact_rank_sum_p(&r, n1, r1)
    } else {
        let nn = (n1 + n2) as f64;
        let mut ties = 0.0;
        let s = sorted(&r);
        let mut i = 0;
        while i < s.len() {
            let j = s[i..].iter().take_while(|&&v| v == s[i]).count();
            ties += (j * j * j - j) as f64;
            i += j;
        }
        let var = (n1 * n2) as f64 / 12.0 * ((nn + 1.0) - ties / (nn * (nn - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let mu = (n1 * n2) as f64 / 2.0;
            let z = ((libm::fabs(u - mu) - 0.5).max(0.0)) / libm::sqrt(var);
            (2.0 * (1.0 - normal_cdf(z))).min(1.0)
        }
    };
    Ok(TestResult { statistic: u, p })
}

/// Two-sided permutation p-value of the first group's rank sum: counts the
/// `n1`-subsets of the pooled (mid)ranks by size and doubled rank sum.
fn exact_rank_sum_p(ranks: &[f64], n1: usize, r1: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| libm::round(2.0 * r) as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[j][s]: number of j-subsets with doubled rank sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1.0;
    for &d in &doubled {
        for j in (1..=n1).rev() {
            let (lower, upper) = counts.split_at_mut(j);
            let (src, dst) = (&lower[j - 1], &mut upper[0]);
            for s in (d..=max_sum).rev() {
                dst[s] += src[s - d];
            }
        }
    }
    let obs = libm::round(2.0 * r1) as usize;
    let total: f64 = counts[n1].iter().sum();
    let le: f64 = counts[n1][..=obs].iter().sum();
    let ge: f64 = counts[n1][obs..].iter().sum();
    (2.0 * le.min(ge) / total).min(1.0)
}

/// Student t test, paired on differences or unpaired with pooled variance.
pub fn t_test(a: &[f64], b: &[f64], paired: bool) -> Result<TestResult, StatsError> {
    check_finite(a)?;
    check_finite(b)?;
    let (t, df) = if paired {
        if a.len() != b.len() {
            return Err(StatsError::LengthMismatch(a.len(), b.len()));
        }
        need(2, a.len())?;
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let sd = sample_std(&d);
        if !(sd > 0.0) {
            return Err(StatsError::ZeroVariance);
        }
        (mean(&d) / (sd / libm::sqrt(d.len() as f64)), (d.len() - 1) as f64)
    } else {
        need(2, a.len())?;
        need(2, b.len())?;
        let (n1, n2) = (a.len() as f64, b.len() as f64);
        let (s1, s2) = (sample_std(a), sample_std(b));
        let pooled = ((n1 - 1.0) * s1 * s1 + (n2 - 1.0) * s2 * s2) / (n1 + n2 - 2.0);
        if !(pooled > 0.0) {
            return Err(StatsError::ZeroVariance);
        }
        ((mean(a) - mean(b)) / libm::sqrt(pooled * (1.0 / n1 + 1.0 / n2)), n1 + n2 - 2.0)
    };
    let p = 2.0 * (1.0 - t_cdf(libm::fabs(t), df));
    Ok(TestResult { statistic: t, p: p.min(1.0) })
}
