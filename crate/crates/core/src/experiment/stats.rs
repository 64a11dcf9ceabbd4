//! Box-plot summaries.
//!
//! Quartiles use linear interpolation between order statistics at position
//! `p·(n−1)` (the "inclusive" convention). Whiskers reach the most extreme
//! observations within 1.5·IQR of the box; everything beyond is an outlier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WHISKER_IQR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile `p ∈ [0, 1]` of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Precondition("box statistics of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Precondition("box statistics of NaN values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&s, 0.25);
    let median = quantile_sorted(&s, 0.5);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - WHISKER_IQR * iqr, q3 + WHISKER_IQR * iqr);
    let first_in = s.partition_point(|&v| v < lo_fence);
    let end_in = s.partition_point(|&v| v <= hi_fence);
    let outliers = s[..first_in].iter().chain(&s[end_in..]).copied().collect();
    Ok(BoxStats {
        count: s.len(),
        q1,
        median,
        q3,
        whisker_low: s[first_in],
        whisker_high: s[end_in - 1],
        outliers,
    })
}
