//! Empirical ROC curves, AUC estimators, bootstrap intervals and a moment
//! binormal fit.

use std::cmp::Ordering;

use num_rational::Ratio;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_N_BOOT: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpf, tpf)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_boot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinormalFit {
    pub a: f64,
    pub b: f64,
    pub auc: f64,
}

fn check_nonempty<T>(tp: &[T], ta: &[T]) -> Result<()> {
    if tp.is_empty() || ta.is_empty() {
        return Err(Error::Parameter(format!(
            "ROC analysis needs both classes (got {} present, {} absent)",
            tp.len(),
            ta.len()
        )));
    }
    Ok(())
}

fn finite(tp: &[f64], ta: &[f64]) -> Result<()> {
    if tp.iter().chain(ta).any(|t| !t.is_finite()) {
        return Err(Error::Domain("test statistics must be finite".into()));
    }
    Ok(())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Operating points from sweeping the decision threshold over every distinct
/// statistic value (call positive when `t >= threshold`).
fn roc_counts<T: PartialOrd + Copy>(tp: &[T], ta: &[T]) -> Vec<(usize, usize)> {
    let mut all: Vec<(T, bool)> = tp.iter().map(|&t| (t, true)).chain(ta.iter().map(|&t| (t, false))).collect();
    all.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal));
    let mut pts = vec![(0, 0)];
    let (mut fp, mut tpc) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tpc += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp, tpc));
    }
    pts
}

pub fn empirical_roc(tp: &[f64], ta: &[f64]) -> Result<RocCurve> {
    check_nonempty(tp, ta)?;
    finite(tp, ta)?;
    let (np, na) = (tp.len() as f64, ta.len() as f64);
    let points: Vec<(f64, f64)> = roc_counts(tp, ta)
        .into_iter()
        .map(|(f, t)| (f as f64 / na, t as f64 / np))
        .collect();
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Trapezoidal ROC area in exact rational arithmetic.
pub fn empirical_roc_auc_exact<T: PartialOrd + Copy>(tp: &[T], ta: &[T]) -> Result<Ratio<i64>> {
    check_nonempty(tp, ta)?;
    let (np, na) = (tp.len() as i64, ta.len() as i64);
    let pts = roc_counts(tp, ta);
    let mut area = Ratio::from_integer(0);
    for w in pts.windows(2) {
        let dx = Ratio::new((w[1].0 - w[0].0) as i64, na);
        let ysum = Ratio::new((w[1].1 + w[0].1) as i64, np);
        area += dx * ysum / 2;
    }
    Ok(area)
}

/// Mann–Whitney count in exact arithmetic by enumerating every pair.
pub fn auc_mann_whitney_exact<T: PartialOrd + Copy>(tp: &[T], ta: &[T]) -> Result<Ratio<i64>> {
    check_nonempty(tp, ta)?;
    let mut half_credits = 0i64;
    for p in tp {
        for a in ta {
            half_credits += match p.partial_cmp(a) {
                Some(Ordering::Greater) => 2,
                Some(Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(Ratio::new(half_credits, 2 * tp.len() as i64 * ta.len() as i64))
}

/// Fraction of (present, absent) pairs ranked correctly, ties counting 1/2.
pub fn auc_mann_whitney(tp: &[f64], ta: &[f64]) -> Result<f64> {
    check_nonempty(tp, ta)?;
    finite(tp, ta)?;
    Ok(mann_whitney_sorted(tp, &sorted(ta)))
}

fn mann_whitney_sorted(tp: &[f64], ta_sorted: &[f64]) -> f64 {
    let mut half_credits: u64 = 0;
    for &p in tp {
        let below = ta_sorted.partition_point(|&a| a < p);
        let not_above = ta_sorted.partition_point(|&a| a <= p);
        half_credits += 2 * below as u64 + (not_above - below) as u64;
    }
    half_credits as f64 / (2 * tp.len() * ta_sorted.len()) as f64
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stratified percentile bootstrap of the Mann–Whitney AUC. Replicate `r`
/// draws from the substream `derive_seed(seed, r)`.
pub fn bootstrap_ci(tp: &[f64], ta: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<AucEstimate> {
    if tp.len() < 2 || ta.len() < 2 {
        return Err(Error::Parameter("bootstrap needs at least 2 cases per class".into()));
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("invalid bootstrap settings n_boot={n_boot}, level={level}")));
    }
    let auc = auc_mann_whitney(tp, ta)?;
    let mut reps: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(derive_seed(seed, r as u64));
            let p: Vec<f64> = (0..tp.len()).map(|_| tp[rng.random_range(0..tp.len())]).collect();
            let mut a: Vec<f64> = (0..ta.len()).map(|_| ta[rng.random_range(0..ta.len())]).collect();
            a.sort_by(f64::total_cmp);
            mann_whitney_sorted(&p, &a)
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(AucEstimate {
        auc,
        ci_low: quantile(&reps, tail).min(auc),
        ci_high: quantile(&reps, 1.0 - tail).max(auc),
        level,
        n_boot,
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Moment-based binormal ROC parameters.
pub fn binormal_fit(tp: &[f64], ta: &[f64]) -> Result<BinormalFit> {
    if tp.len() < 2 || ta.len() < 2 {
        return Err(Error::Parameter("binormal fit needs at least 2 cases per class".into()));
    }
    finite(tp, ta)?;
    let (mp, sp) = mean_sd(tp);
    let (ma, sa) = mean_sd(ta);
    if !(sp > 0.0 && sa > 0.0) {
        return Err(Error::Numerical("binormal fit needs nonzero variance in both classes".into()));
    }
    let a = (mp - ma) / sp;
    let b = sa / sp;
    Ok(BinormalFit {
        a,
        b,
        auc: std_normal_cdf(a / (1.0 + b * b).sqrt()),
    })
}
