//! Shapiro–Wilk normality test, paired t-test and Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::metrics::average_ranks;
use super::MetricError;

/// Exact Wilcoxon null distribution is used up to this many non-zero pairs.
pub const WILCOXON_EXACT_MAX: usize = 30;
pub const SHAPIRO_MAX_N: usize = 5000;

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapiroWilk {
    pub w: f64,
    pub p_value: f64,
}

/// Shapiro–Wilk W and its p-value (Royston's approximation, 3 ≤ n ≤ 5000).
pub fn shapiro_wilk(sample: &[f64]) -> Result<ShapiroWilk, MetricError> {
    const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
    const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
    const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
    const G: [f64; 2] = [-2.273, 0.459];

    let n = sample.len();
    if n < 3 {
        return Err(MetricError::TooFewPairs(n));
    }
    if n > SHAPIRO_MAX_N {
        return Err(MetricError::OutOfRange(format!("Shapiro–Wilk supports n ≤ {SHAPIRO_MAX_N}, got {n}")));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    if x[n - 1] - x[0] <= 0.0 {
        return Err(MetricError::OutOfRange("sample has zero range".into()));
    }

    let nf = n as f64;
    let half = n / 2;
    let mut a = vec![0.0; half];
    if n == 3 {
        a[0] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let norm = std_normal();
        let m: Vec<f64> = (1..=half).map(|i| norm.inverse_cdf((i as f64 - 0.375) / (nf + 0.25))).collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2)).sqrt();
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (1, fac)
        };
        a[0] = a1;
        for i in first..half {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / nf;
    let ssq: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let b: f64 = (0..half).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (b * b / ssq).min(1.0);

    let p_value = if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - std::f64::consts::FRAC_PI_3);
        p.clamp(0.0, 1.0)
    } else if w >= 1.0 {
        1.0
    } else {
        let w1 = (1.0 - w).ln();
        let (y, m, s) = if n <= 11 {
            let gamma = poly(&G, nf);
            if w1 >= gamma {
                return Ok(ShapiroWilk { w, p_value: 0.0 });
            }
            (-(gamma - w1).ln(), poly(&C3, nf), poly(&C4, nf).exp())
        } else {
            let ln_n = nf.ln();
            (w1, poly(&C5, ln_n), poly(&C6, ln_n).exp())
        };
        std_normal().sf((y - m) / s)
    };
    Ok(ShapiroWilk { w, p_value })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided one-sample t-test of `d` against zero.
pub fn paired_t_p(d: &[f64]) -> Result<f64, MetricError> {
    let n = d.len();
    if n < 2 {
        return Err(MetricError::TooFewPairs(n));
    }
    let m = mean(d);
    let var = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if m == 0.0 { 1.0 } else { 0.0 });
    }
    let t = m / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Two-sided Wilcoxon signed-rank p-value. Zero differences are dropped and
/// tied magnitudes share average ranks; up to [`WILCOXON_EXACT_MAX`] pairs the
/// exact null distribution is enumerated, beyond it a continuity-corrected
/// normal approximation is used.
pub fn wilcoxon_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return 1.0;
    }
    let ranks = average_ranks(&nz.iter().map(|x| x.abs()).collect::<Vec<_>>());
    if n <= WILCOXON_EXACT_MAX {
        // average ranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let w_plus: usize = doubled.iter().zip(&nz).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        let mut reach = 0;
        for &r in &doubled {
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let lower: f64 = counts[..=w_plus].iter().sum::<f64>() / all;
        let upper: f64 = counts[w_plus..].iter().sum::<f64>() / all;
        return (2.0 * lower.min(upper)).min(1.0);
    }
    let w_plus: f64 = ranks.iter().zip(&nz).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut abs_sorted: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    abs_sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let j = abs_sorted[i..].iter().take_while(|&&v| v == abs_sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let sigma = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0).sqrt();
    let z = (((w_plus - mu).abs() - 0.5).max(0.0)) / sigma;
    (2.0 * std_normal().sf(z)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestUsed {
    PairedT,
    Wilcoxon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
    pub normality_p: f64,
    pub test_used: TestUsed,
    pub p_value: f64,
    pub n: usize,
}

/// Compares paired scores on d = b − a. A paired t-test is used when the
/// Shapiro–Wilk p-value of d exceeds `alpha`, else the Wilcoxon test.
///
/// Constant differences get a normality p of 1.
pub fn paired_compare(a: &[f64], b: &[f64], alpha: f64) -> Result<ComparisonResult, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 3 {
        return Err(MetricError::TooFewPairs(n));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(MetricError::OutOfRange("scores must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let constant = d.iter().all(|&v| v == d[0]);
    let normality_p = if constant { 1.0 } else { shapiro_wilk(&d)?.p_value };
    let (test_used, p_value) = if normality_p > alpha {
        (TestUsed::PairedT, paired_t_p(&d)?)
    } else {
        (TestUsed::Wilcoxon, wilcoxon_p(&d))
    };
    let (mean_a, mean_b) = (mean(a), mean(b));
    Ok(ComparisonResult {
        mean_a,
        mean_b,
        delta: mean_b - mean_a,
        normality_p,
        test_used,
        p_value,
        n,
    })
}
