//! Model comparison statistics: paired Wilcoxon signed-rank test, F test
//! for a change in variance, Friedman test with the Iman–Davenport
//! correction, Nemenyi critical difference and summary statistics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Smallest number of non-zero paired differences for the normal
/// approximation of the signed-rank statistic.
pub const WILCOXON_MIN_PAIRS: usize = 10;

/// Upper-tail studentized range quantiles divided by √2, `k = 2..=10`.
const Q_05: [f64; 9] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
];
const Q_10: [f64; 9] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
];

// ---------------------------------------------------------------- special functions

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction of the incomplete beta function, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 / clamp(1.0 + num * d);
        c = clamp(1.0 + num / c);
        h *= d * c;
        // odd step
        let num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 / clamp(1.0 + num * d);
        c = clamp(1.0 + num / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!(
            "incomplete beta needs a, b > 0 and 0 ≤ x ≤ 1, got ({a}, {b}, {x})"
        )));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    // the fraction converges fast below the mean; use symmetry above it
    Ok(if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    })
}

/// CDF of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_cdf(f: f64, d1: f64, d2: f64) -> Result<f64> {
    if f <= 0.0 {
        return Ok(0.0);
    }
    if f.is_infinite() {
        return Ok(1.0);
    }
    incomplete_beta(d1 / 2.0, d2 / 2.0, d1 * f / (d1 * f + d2))
}

/// Upper tail of the F distribution, computed without cancellation.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> Result<f64> {
    if f <= 0.0 {
        return Ok(1.0);
    }
    if f.is_infinite() {
        return Ok(0.0);
    }
    incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d1 * f + d2))
}

// ---------------------------------------------------------------- ranks

/// 1-based ranks of `values` in ascending order, ties sharing their
/// average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

// ---------------------------------------------------------------- Wilcoxon

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// Rank sum of pairs with `a > b`.
    pub r_plus: f64,
    pub r_minus: f64,
    /// `min(R₊, R₋)`.
    pub w: f64,
    pub z: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Normal approximation from the two rank sums.
pub fn wilcoxon_from_rank_sums(n: usize, r_plus: f64, r_minus: f64) -> Result<WilcoxonResult> {
    if n < WILCOXON_MIN_PAIRS {
        return Err(Error::invalid(format!(
            "the normal approximation needs at least {WILCOXON_MIN_PAIRS} non-zero differences, got {n}"
        )));
    }
    let nf = n as f64;
    let total = nf * (nf + 1.0) / 2.0;
    if (r_plus + r_minus - total).abs() > 1e-9 * total {
        return Err(Error::invalid(format!(
            "rank sums {r_plus} + {r_minus} must add up to {total} for n = {n}"
        )));
    }
    let w = r_plus.min(r_minus);
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0).sqrt();
    let z = (w - total / 2.0) / sd;
    let p_value = (2.0 * normal_cdf(z)).min(1.0);
    Ok(WilcoxonResult {
        n,
        r_plus,
        r_minus,
        w,
        z,
        p_value,
    })
}

/// Paired signed-rank test of `a` against `b`. Zero differences are
/// dropped, tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::invalid(
            "all paired differences are zero; the samples are identical",
        ));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("paired samples contain non-finite values"));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let r_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = diffs.len();
    // the rank sum is exact in binary, so R₋ as the complement is exact too
    let r_minus = (n * (n + 1)) as f64 / 2.0 - r_plus;
    wilcoxon_from_rank_sums(n, r_plus, r_minus)
}

// ---------------------------------------------------------------- F test

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FTestResult {
    /// `var(a) / var(b)`.
    pub f: f64,
    pub df1: usize,
    pub df2: usize,
    /// Two-sided: `2 · min(P(F ≤ f), P(F ≥ f))`.
    pub p_value: f64,
}

/// F test from sample variances and sizes.
pub fn f_test_from_variances(
    var_a: f64,
    n_a: usize,
    var_b: f64,
    n_b: usize,
) -> Result<FTestResult> {
    if n_a < 2 || n_b < 2 {
        return Err(Error::invalid(
            "the F test needs at least two values per sample",
        ));
    }
    if !(var_b > 0.0) || !var_b.is_finite() {
        return Err(Error::invalid("the second sample has zero variance"));
    }
    if !(var_a >= 0.0) || !var_a.is_finite() {
        return Err(Error::invalid(format!("invalid variance {var_a}")));
    }
    let f = var_a / var_b;
    let (d1, d2) = ((n_a - 1) as f64, (n_b - 1) as f64);
    let lower = f_cdf(f, d1, d2)?;
    let upper = f_sf(f, d1, d2)?;
    Ok(FTestResult {
        f,
        df1: n_a - 1,
        df2: n_b - 1,
        p_value: (2.0 * lower.min(upper)).min(1.0),
    })
}

/// F test for a change in variance; `a` is the baseline, so `F > 1` means
/// `b` varies less.
pub fn f_variance_test(a: &[f64], b: &[f64]) -> Result<FTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "the F test needs at least two values per sample",
        ));
    }
    f_test_from_variances(sample_variance(a), a.len(), sample_variance(b), b.len())
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

// ---------------------------------------------------------------- comparison tables

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
    /// Lower magnitude is better, as for a bias.
    LowerAbsIsBetter,
}

impl Orientation {
    /// Maps a score to a value where lower is better.
    fn cost(self, v: f64) -> f64 {
        match self {
            Orientation::LowerIsBetter => v,
            Orientation::HigherIsBetter => -v,
            Orientation::LowerAbsIsBetter => v.abs(),
        }
    }
}

/// Scores of `k` strategies over `N` blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub strategies: Vec<String>,
    /// `N` rows of `k` scores.
    pub rows: Vec<Vec<f64>>,
    pub orientation: Orientation,
}

impl ComparisonTable {
    pub fn new(
        metric: impl Into<String>,
        strategies: Vec<String>,
        rows: Vec<Vec<f64>>,
        orientation: Orientation,
    ) -> Result<Self> {
        let metric = metric.into();
        let k = strategies.len();
        if k < 2 {
            return Err(Error::invalid(format!(
                "comparison table {metric} needs at least 2 strategies, got {k}"
            )));
        }
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "comparison table {metric} needs at least 2 rows, got {}",
                rows.len()
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::data(format!(
                    "row {} of {metric} has {} scores, expected {k}",
                    i + 1,
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "row {} of {metric} has a missing score",
                    i + 1
                )));
            }
        }
        Ok(Self {
            metric,
            strategies,
            rows,
            orientation,
        })
    }

    pub fn blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Column `j` mapped so that lower is better.
    pub fn cost_column(&self, j: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| self.orientation.cost(r[j]))
            .collect()
    }

    /// Per-row ranks, 1 = best.
    pub fn ranks(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                average_ranks(
                    &r.iter()
                        .map(|v| self.orientation.cost(*v))
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    }

    pub fn average_ranks(&self) -> Vec<f64> {
        let n = self.blocks() as f64;
        let mut sums = vec![0.0; self.strategies.len()];
        for r in self.ranks() {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Reads a CSV with a header of strategy names and one row per block.
    pub fn read_csv(reader: impl Read, metric: &str, orientation: Orientation) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let strategies: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::data(format!("{metric}: bad header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::data(format!("{metric}: row {}: {e}", i + 1)))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::data(format!("{metric}: row {}: not a number: {f:?}", i + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(metric, strategies, rows, orientation)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::invalid(format!("cannot write table: {e}"));
        w.write_record(&self.strategies).map_err(err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v:?}")))
                .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::invalid(format!("cannot write table: {e}")))
    }
}

// ---------------------------------------------------------------- Friedman

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub average_ranks: Vec<f64>,
    pub chi_square: f64,
    /// Iman–Davenport statistic; `+∞` when every block ranks identically.
    pub f: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

/// Friedman and Iman–Davenport statistics from average ranks over `n`
/// blocks.
pub fn iman_davenport_from_ranks(average_ranks: &[f64], n: usize) -> Result<FriedmanResult> {
    let k = average_ranks.len();
    if k < 2 || n < 2 {
        return Err(Error::invalid(format!(
            "the Friedman test needs k ≥ 2 and N ≥ 2, got k = {k}, N = {n}"
        )));
    }
    let (kf, nf) = (k as f64, n as f64);
    let sum_sq: f64 = average_ranks.iter().map(|r| r * r).sum();
    let chi = (12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let denom = nf * (kf - 1.0) - chi;
    let (df1, df2) = (k - 1, (k - 1) * (n - 1));
    let (f, p_value) = if denom <= 1e-9 * nf * kf {
        (f64::INFINITY, 0.0)
    } else {
        let f = (nf - 1.0) * chi / denom;
        (f, f_sf(f, df1 as f64, df2 as f64)?)
    };
    Ok(FriedmanResult {
        average_ranks: average_ranks.to_vec(),
        chi_square: chi,
        f,
        df1,
        df2,
        p_value,
    })
}

pub fn friedman_iman_davenport(table: &ComparisonTable) -> Result<FriedmanResult> {
    iman_davenport_from_ranks(&table.average_ranks(), table.blocks())
}

// ---------------------------------------------------------------- Nemenyi

/// Tabulated `q_α` for `k` strategies.
pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(Error::invalid(format!(
            "Nemenyi quantiles are tabulated for alpha 0.05 and 0.10, not {alpha}"
        )));
    };
    if !(2..=10).contains(&k) {
        return Err(Error::invalid(format!(
            "Nemenyi quantiles are tabulated for 2 to 10 strategies, not {k}"
        )));
    }
    Ok(table[k - 2])
}

/// Critical difference of average ranks, `q_α · √(k(k+1)/(6N))`.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("the critical difference needs N ≥ 1"));
    }
    let kf = k as f64;
    Ok(nemenyi_q(k, alpha)? * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt())
}

/// Splits strategies into groups of statistically indistinguishable
/// average rank. Strategies are taken best first; a group starts at the
/// best unassigned one and takes every following strategy whose rank is
/// less than `cd` above it, so members are pairwise within `cd`. Returns
/// indices into `average_ranks`.
pub fn rank_groups(average_ranks: &[f64], cd: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..average_ranks.len()).collect();
    order.sort_by(|&i, &j| average_ranks[i].total_cmp(&average_ranks[j]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if average_ranks[i] - average_ranks[g[0]] < cd => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

// ---------------------------------------------------------------- summaries

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 when `n = 1`.
    pub std: f64,
    /// False when `n = 1` and the standard deviation is undefined.
    pub std_defined: bool,
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics of a sorted
/// slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summary_stats(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("summary statistics of an empty sample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("summary statistics of non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_defined = n > 1;
    Ok(Summary {
        n,
        mean,
        std: if std_defined {
            sample_variance(values).sqrt()
        } else {
            0.0
        },
        std_defined,
        min: sorted[0],
        q25: quantile_sorted(&sorted, 0.25),
        q50: quantile_sorted(&sorted, 0.5),
        q75: quantile_sorted(&sorted, 0.75),
        max: sorted[n - 1],
    })
}
