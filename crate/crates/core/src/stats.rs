//! Small statistics helpers shared by the Monte Carlo code.

use serde::Serialize;

/// Pairwise (cascade) summation. The result depends only on the order of
/// `xs`, never on how the values were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateWithCi {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl EstimateWithCi {
    /// Mean and standard error (`sample stddev / sqrt(n)`, with the n-1
    /// denominator). A single sample has zero standard error.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return EstimateWithCi {
                mean: 0.0,
                std_error: 0.0,
                trials: 0,
            };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = if n > 1 {
            pairwise_sum(&sq) / (n as f64 - 1.0)
        } else {
            0.0
        };
        EstimateWithCi {
            mean,
            std_error: (var / n as f64).sqrt(),
            trials: n,
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample KS critical value at significance `alpha`
/// (`c(alpha) * sqrt((n + m) / (n m))`, `c(alpha) = sqrt(-ln(alpha / 2) / 2)`).
pub fn ks_critical_value(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    let (n, m) = (n as f64, m as f64);
    c * ((n + m) / (n * m)).sqrt()
}

/// One-sample KS statistic of `xs` against a continuous CDF.
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Binomial three-sigma slack `3 sqrt(p (1 - p) / n)`.
pub fn binomial_three_sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}
