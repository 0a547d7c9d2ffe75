//! Two-sided Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Largest number of non-zero differences handled by the exact null distribution.
pub const EXACT_LIMIT: usize = 25;
pub const MIN_PAIRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `b - a`.
    pub statistic: f64,
    pub nonzero: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`, plus the sizes of tied groups.
pub(crate) fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of sign assignments reaching each doubled rank sum.
fn exact_counts(doubled: &[usize]) -> Vec<f64> {
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(arg_err(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < MIN_PAIRS {
        return Err(arg_err(format!("need at least {MIN_PAIRS} pairs, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(arg_err("samples must be finite"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = diffs.len();
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&magnitudes);
    let statistic: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_LIMIT {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let counts = exact_counts(&doubled);
        let observed = (2.0 * statistic).round() as usize;
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=observed].iter().sum::<f64>() / all;
        let upper: f64 = counts[observed..].iter().sum::<f64>() / all;
        let p_value = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult { statistic, nonzero: n, p_value, method: WilcoxonMethod::Exact });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult { statistic, nonzero: n, p_value, method: WilcoxonMethod::Normal })
}
