//! Convergence diagnostics for MCMC draws: Geweke window-mean tests,
//! effective sample size, and a Kolmogorov-Smirnov helper.

use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

/// Geweke diagnostic and effective sample size for one parameter's chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiagnostic {
    pub geweke_z: f64,
    pub geweke_p: f64,
    pub ess: f64,
    /// Chain was numerically constant; z is reported as 0 and ess as the
    /// draw count.
    pub constant: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Autocovariance at lag `l` (biased normalization by n).
fn autocov(x: &[f64], m: f64, l: usize) -> f64 {
    let n = x.len();
    (0..n - l).map(|i| (x[i] - m) * (x[i + l] - m)).sum::<f64>() / n as f64
}

/// Spectral density at frequency zero estimated by the initial positive
/// sequence: `gamma_0 + 2 sum gamma_l`, truncated at the first lag pair with
/// nonpositive sum.
fn spectral_density_zero(x: &[f64]) -> f64 {
    let n = x.len();
    let m = mean(x);
    let g0 = autocov(x, m, 0);
    if g0 <= 0.0 {
        return 0.0;
    }
    let mut s = g0;
    let mut l = 1;
    while l + 1 < n {
        let pair = autocov(x, m, l) + autocov(x, m, l + 1);
        if pair <= 0.0 {
            break;
        }
        s += 2.0 * pair;
        l += 2;
    }
    s
}

/// Geweke convergence test comparing the means of the first and last
/// fractions of the chain (defaults 25% / 25%), with window variances from
/// spectral densities at zero.
pub fn geweke(x: &[f64], first: f64, last: f64) -> (f64, f64) {
    let n = x.len();
    let na = ((n as f64) * first).floor() as usize;
    let nb = ((n as f64) * last).floor() as usize;
    let a = &x[..na.max(2)];
    let b = &x[n - nb.max(2)..];
    let sa = spectral_density_zero(a);
    let sb = spectral_density_zero(b);
    let denom = (sa / a.len() as f64 + sb / b.len() as f64).sqrt();
    if denom == 0.0 {
        return (0.0, 1.0);
    }
    let z = (mean(a) - mean(b)) / denom;
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    (z, p)
}

/// Effective sample size `n / (1 + 2 sum rho_l)` with the autocorrelation sum
/// truncated at the first nonpositive lag pair.
pub fn ess(x: &[f64]) -> f64 {
    let n = x.len();
    let m = mean(x);
    let g0 = autocov(x, m, 0);
    if g0 <= 0.0 {
        return n as f64;
    }
    let s = spectral_density_zero(x);
    (n as f64 * g0 / s).min(n as f64)
}

/// Full diagnostic for one chain, using the Geweke 25%/25% windows.
pub fn diagnose_chain(x: &[f64]) -> ChainDiagnostic {
    let m = mean(x);
    let var = autocov(x, m, 0);
    if var <= 0.0 || !var.is_finite() {
        return ChainDiagnostic { geweke_z: 0.0, geweke_p: 1.0, ess: x.len() as f64, constant: true };
    }
    let (z, p) = geweke(x, 0.25, 0.25);
    ChainDiagnostic { geweke_z: z, geweke_p: p, ess: ess(x), constant: false }
}

/// Two-sided Kolmogorov-Smirnov test of a sample against an analytic CDF.
/// Returns (statistic, asymptotic p-value).
pub fn ks_test<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> (f64, f64) {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    let sqrt_n = (n as f64).sqrt();
    let t = d * (sqrt_n + 0.12 + 0.11 / sqrt_n);
    let mut p = 0.0;
    for j in 1..=100 {
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        p += 2.0 * sign * (-2.0 * (j as f64) * (j as f64) * t * t).exp();
    }
    (d, p.clamp(0.0, 1.0))
}
