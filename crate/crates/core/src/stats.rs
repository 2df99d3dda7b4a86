//! Two-sample nonparametric inference: exact Mann-Whitney U, rank-biserial
//! effect size, Student-t confidence intervals and box-plot summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::metrics::{CohortAggregate, ForceMetric};
use crate::model::{Cohort, PoseCondition};

/// Largest combined sample size for which the exact null distribution is
/// enumerated.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MannWhitneyMethod {
    ExactEnumeration,
    NormalApproxTieCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// min(U_a, U_b).
    pub u: f64,
    /// U counted for sample a: pairs with a > b plus half of the ties.
    pub u_a: f64,
    pub p_two_sided: f64,
    pub method: MannWhitneyMethod,
    pub n1: usize,
    pub n2: usize,
    /// Number of values involved in ties across the pooled sample.
    pub tie_count: usize,
}

/// Mid-ranks (1-based) of the pooled values and the sizes of each tie group.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut groups = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        groups.push(j - i);
        i = j;
    }
    (ranks, groups)
}

/// Visits every n1-subset of {0..n} and counts those whose U statistic (rank
/// sum minus its minimum) is at most `u_max`.
fn enumerate_lower_tail(n: usize, n1: usize, u_max: usize) -> (u64, u64) {
    fn walk(next: usize, n: usize, left: usize, sum: usize, base: usize, u_max: usize, hits: &mut u64, total: &mut u64) {
        if left == 0 {
            *total += 1;
            if sum - base <= u_max {
                *hits += 1;
            }
            return;
        }
        for r in next..=n - left {
            walk(r + 1, n, left - 1, sum + r, base, u_max, hits, total);
        }
    }
    let base = n1 * (n1 - 1) / 2;
    let (mut hits, mut total) = (0, 0);
    walk(0, n, n1, 0, base, u_max, &mut hits, &mut total);
    (hits, total)
}

/// Exact two-sided p for `u` (min-of-two convention) without ties.
pub fn exact_p_value(u: usize, n1: usize, n2: usize) -> f64 {
    let (hits, total) = enumerate_lower_tail(n1 + n2, n1.min(n2), u);
    (2.0 * hits as f64 / total as f64).min(1.0)
}

pub fn mann_whitney(sample_a: &[f64], sample_b: &[f64]) -> Result<MannWhitneyResult> {
    let (n1, n2) = (sample_a.len(), sample_b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InsufficientData("Mann-Whitney needs two non-empty samples".into()));
    }
    if sample_a.iter().chain(sample_b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("Mann-Whitney samples must be finite".into()));
    }
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let (ranks, groups) = mid_ranks(&pooled);
    let r_a: f64 = ranks[..n1].iter().sum();
    let u_a = r_a - (n1 * (n1 + 1)) as f64 / 2.0;
    let nn = (n1 * n2) as f64;
    let u = u_a.min(nn - u_a);
    let tie_count: usize = groups.iter().filter(|&&g| g > 1).sum();
    let n = n1 + n2;

    let (p, method) = if n <= EXACT_MAX_N && tie_count == 0 {
        (exact_p_value(u as usize, n1, n2), MannWhitneyMethod::ExactEnumeration)
    } else {
        let tie_term: f64 = groups.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
        let nf = n as f64;
        let var = nn / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        let p = if var <= 0.0 {
            1.0
        } else {
            let z = ((nn / 2.0 - u).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        };
        (p, MannWhitneyMethod::NormalApproxTieCorrected)
    };
    Ok(MannWhitneyResult {
        u,
        u_a,
        p_two_sided: p,
        method,
        n1,
        n2,
        tie_count,
    })
}

pub fn rank_biserial(u: f64, n1: usize, n2: usize) -> f64 {
    1.0 - 2.0 * u / (n1 * n2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCI {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn mean_ci95(sample: &[f64]) -> Result<MeanCI> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "a confidence interval needs at least 2 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?
        .inverse_cdf(0.975);
    let half = t * sd / nf.sqrt();
    Ok(MeanCI {
        mean,
        lower: mean - half,
        upper: mean + half,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Tukey box summary: whiskers reach the most extreme values within 1.5 IQR.
pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::InsufficientData("box statistics of an empty sample".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile(&s, 0.25);
    let q3 = quantile(&s, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = s.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v)).collect();
    Ok(BoxStats {
        n: s.len(),
        median: quantile(&s, 0.5),
        q1,
        q3,
        whisker_low: inside.first().copied().unwrap_or(q1),
        whisker_high: inside.last().copied().unwrap_or(q3),
        outliers: s.iter().copied().filter(|v| !(lo_fence..=hi_fence).contains(v)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortComparison {
    pub metric: ForceMetric,
    pub condition: PoseCondition,
    pub n_post_stroke: usize,
    pub n_healthy: usize,
    pub u: f64,
    pub p_two_sided: f64,
    pub method: MannWhitneyMethod,
    pub r: f64,
    pub post_stroke: Option<MeanCI>,
    pub healthy: Option<MeanCI>,
}

/// Post-stroke versus healthy on per-participant task means, per metric and
/// condition. Groups with a single participant get no interval.
pub fn compare_cohorts(aggregate: &CohortAggregate) -> Result<Vec<CohortComparison>> {
    let mut rows = Vec::new();
    for condition in aggregate.conditions() {
        for metric in ForceMetric::ALL {
            let a = aggregate.means(metric, Cohort::PostStroke, condition);
            let b = aggregate.means(metric, Cohort::Healthy, condition);
            if a.is_empty() || b.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "condition {condition} needs participants from both cohorts"
                )));
            }
            let mw = mann_whitney(&a, &b)?;
            rows.push(CohortComparison {
                metric,
                condition,
                n_post_stroke: a.len(),
                n_healthy: b.len(),
                u: mw.u,
                p_two_sided: mw.p_two_sided,
                method: mw.method,
                r: rank_biserial(mw.u, mw.n1, mw.n2),
                post_stroke: mean_ci95(&a).ok(),
                healthy: mean_ci95(&b).ok(),
            });
        }
    }
    Ok(rows)
}
