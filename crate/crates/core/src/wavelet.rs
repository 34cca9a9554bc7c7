//! 1D orthogonal wavelet filter banks with the two boundary handlings used by
//! the tensor surface transform: half-point symmetric reflection (expansive)
//! and periodic wraparound (orthonormal).
//!
//! Level sizes are deterministic functions of the input length:
//! reflection gives `floor((n + filter_len - 1) / 2)` coefficients per band,
//! periodic gives `ceil(n / 2)`. Odd-length periodic stages split the last
//! sample across two slots with weight `1/sqrt(2)` so that every stage is an
//! isometry and Parseval holds exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveletError {
    #[error("signal_too_short: signal length {n} is below filter length {filter_len}")]
    SignalTooShort { n: usize, filter_len: usize },
    #[error("too_many_levels: level {level} input length {n} is below filter length {filter_len}")]
    TooManyLevels { level: usize, n: usize, filter_len: usize },
    #[error("non-finite input sample at index {0}")]
    NonFiniteInput(usize),
    #[error("coefficient vector length {got} does not match plan total {expected}")]
    CoefficientLength { got: usize, expected: usize },
    #[error("unknown wavelet filter {0:?}")]
    UnknownFilter(String),
}

/// Boundary handling for one transform axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Half-point symmetric extension; expansive (redundant) representation.
    Reflection,
    /// Circular wraparound; orthonormal representation.
    Periodic,
}

/// Named orthogonal Daubechies filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Db1,
    Db2,
    Db3,
    Db4,
    Db5,
}

impl FilterKind {
    pub fn parse(name: &str) -> Result<Self, WaveletError> {
        match name {
            "db1" | "haar" => Ok(FilterKind::Db1),
            "db2" => Ok(FilterKind::Db2),
            "db3" => Ok(FilterKind::Db3),
            "db4" => Ok(FilterKind::Db4),
            "db5" => Ok(FilterKind::Db5),
            other => Err(WaveletError::UnknownFilter(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Db1 => "db1",
            FilterKind::Db2 => "db2",
            FilterKind::Db3 => "db3",
            FilterKind::Db4 => "db4",
            FilterKind::Db5 => "db5",
        }
    }

    pub fn vanishing_moments(&self) -> usize {
        match self {
            FilterKind::Db1 => 1,
            FilterKind::Db2 => 2,
            FilterKind::Db3 => 3,
            FilterKind::Db4 => 4,
            FilterKind::Db5 => 5,
        }
    }

    /// Orthonormal scaling (synthesis low-pass) coefficients, sum = sqrt(2).
    fn scaling_coeffs(&self) -> &'static [f64] {
        match self {
            FilterKind::Db1 => &[0.7071067811865476, 0.7071067811865476],
            FilterKind::Db2 => &[
                0.48296291314453416,
                0.8365163037378079,
                0.2241438680420134,
                -0.12940952255126037,
            ],
            FilterKind::Db3 => &[
                0.33267055295008263,
                0.8068915093110925,
                0.45987750211849154,
                -0.13501102001025458,
                -0.08544127388202666,
                0.03522629188570953,
            ],
            FilterKind::Db4 => &[
                0.2303778133088965,
                0.7148465705529157,
                0.6308807679298589,
                -0.027983769416859854,
                -0.18703481171909309,
                0.030841381835560764,
                0.0328830116668852,
                -0.010597401785069032,
            ],
            FilterKind::Db5 => &[
                0.16010239797419293,
                0.6038292697971896,
                0.7243085284377729,
                0.13842814590132074,
                -0.24229488706638203,
                -0.032244869584638375,
                0.07757149384004572,
                -0.006241490212798274,
                -0.012580751999081999,
                0.0033357252854737712,
            ],
        }
    }
}

/// Analysis/synthesis filter pair derived from the scaling coefficients via
/// the quadrature-mirror relation `g[j] = (-1)^j h[L-1-j]`.
#[derive(Debug, Clone)]
pub struct Filter {
    pub kind: FilterKind,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
}

impl Filter {
    pub fn new(kind: FilterKind) -> Self {
        let h = kind.scaling_coeffs();
        let l = h.len();
        let rec_lo = h.to_vec();
        let rec_hi: Vec<f64> = (0..l).map(|j| sign(j) * h[l - 1 - j]).collect();
        let dec_lo: Vec<f64> = rec_lo.iter().rev().copied().collect();
        let dec_hi: Vec<f64> = rec_hi.iter().rev().copied().collect();
        Filter { kind, rec_lo, rec_hi, dec_lo, dec_hi }
    }

    pub fn len(&self) -> usize {
        self.rec_lo.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn sign(j: usize) -> f64 {
    if j % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Per-band coefficient count of one analysis stage.
pub fn stage_len(n: usize, filter_len: usize, boundary: Boundary) -> usize {
    match boundary {
        Boundary::Reflection => (n + filter_len - 1) / 2,
        Boundary::Periodic => n.div_ceil(2),
    }
}

/// Multilevel decomposition bookkeeping for one axis: the input length per
/// level and the flat layout `[approx_L, detail_L, detail_{L-1}, ..., detail_1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompPlan {
    pub kind: FilterKind,
    pub boundary: Boundary,
    pub levels: usize,
    /// Signal length fed into level `l` (index 0 = original input).
    pub input_lens: Vec<usize>,
    /// Band length produced by level `l` (index 0 = level 1).
    pub band_lens: Vec<usize>,
}

impl DecompPlan {
    pub fn new(
        n: usize,
        kind: FilterKind,
        levels: usize,
        boundary: Boundary,
    ) -> Result<Self, WaveletError> {
        let filter_len = kind.scaling_coeffs().len();
        if n < filter_len {
            return Err(WaveletError::SignalTooShort { n, filter_len });
        }
        assert!(levels >= 1, "levels must be >= 1");
        let mut input_lens = Vec::with_capacity(levels);
        let mut band_lens = Vec::with_capacity(levels);
        let mut len = n;
        for level in 1..=levels {
            if len < filter_len {
                return Err(WaveletError::TooManyLevels { level, n: len, filter_len });
            }
            input_lens.push(len);
            len = stage_len(len, filter_len, boundary);
            band_lens.push(len);
        }
        Ok(DecompPlan { kind, boundary, levels, input_lens, band_lens })
    }

    pub fn input_len(&self) -> usize {
        self.input_lens[0]
    }

    pub fn approx_len(&self) -> usize {
        self.band_lens[self.levels - 1]
    }

    /// Total coefficient count across the approximation and all detail bands.
    pub fn total_len(&self) -> usize {
        self.approx_len() + self.band_lens.iter().sum::<usize>()
    }

    /// Scale index per flat coefficient: 0 for the approximation band, then
    /// 1 (coarsest detail) up to `levels` (finest detail).
    pub fn scales(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend(std::iter::repeat(0).take(self.approx_len()));
        for level in (1..=self.levels).rev() {
            let scale = self.levels + 1 - level;
            out.extend(std::iter::repeat(scale).take(self.band_lens[level - 1]));
        }
        out
    }

    /// Within-band location index per flat coefficient.
    pub fn locations(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_len());
        out.extend(0..self.approx_len());
        for level in (1..=self.levels).rev() {
            out.extend(0..self.band_lens[level - 1]);
        }
        out
    }
}

fn check_finite(x: &[f64]) -> Result<(), WaveletError> {
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(WaveletError::NonFiniteInput(i));
        }
    }
    Ok(())
}

/// Reflect an out-of-range index into `[0, n)` (half-point symmetry).
fn sym_index(mut m: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if m < 0 {
            m = -m - 1;
        } else if m >= n {
            m = 2 * n - 1 - m;
        } else {
            return m as usize;
        }
    }
}

fn dwt_step_reflection(x: &[f64], f: &Filter) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let l = f.len();
    let out_len = stage_len(n, l, Boundary::Reflection);
    let mut a = vec![0.0; out_len];
    let mut d = vec![0.0; out_len];
    for i in 0..out_len {
        let base = 2 * i as isize + 1;
        let mut sa = 0.0;
        let mut sd = 0.0;
        for j in 0..l {
            let xv = x[sym_index(base - j as isize, n)];
            sa += f.dec_lo[j] * xv;
            sd += f.dec_hi[j] * xv;
        }
        a[i] = sa;
        d[i] = sd;
    }
    (a, d)
}

fn idwt_step_reflection(a: &[f64], d: &[f64], f: &Filter, n_out: usize) -> Vec<f64> {
    let c = a.len();
    let l = f.len();
    debug_assert_eq!(d.len(), c);
    let mut x = vec![0.0; n_out];
    for (m, slot) in x.iter_mut().enumerate() {
        // filter tap j = m + l - 2 - 2i must lie in [0, l)
        let i_min = m / 2;
        let i_max = ((m + l - 2) / 2).min(c - 1);
        let mut s = 0.0;
        for i in i_min..=i_max {
            let j = m + l - 2 - 2 * i;
            s += a[i] * f.rec_lo[j] + d[i] * f.rec_hi[j];
        }
        *slot = s;
    }
    x
}

/// Split the last sample of an odd-length signal into two `1/sqrt(2)` slots,
/// giving an even-length signal with the same Euclidean norm.
fn periodize_odd(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut y = Vec::with_capacity(n + 1);
    y.extend_from_slice(&x[..n - 1]);
    let half = x[n - 1] / std::f64::consts::SQRT_2;
    y.push(half);
    y.push(half);
    y
}

fn unperiodize_odd(y: &[f64]) -> Vec<f64> {
    let n = y.len() - 1;
    let mut x = Vec::with_capacity(n);
    x.extend_from_slice(&y[..n - 1]);
    x.push((y[n - 1] + y[n]) / std::f64::consts::SQRT_2);
    x
}

fn dwt_step_periodic(x: &[f64], f: &Filter) -> (Vec<f64>, Vec<f64>) {
    if x.len() % 2 == 1 {
        let even = periodize_odd(x);
        return dwt_step_periodic_even(&even, f);
    }
    dwt_step_periodic_even(x, f)
}

fn dwt_step_periodic_even(x: &[f64], f: &Filter) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    debug_assert_eq!(n % 2, 0);
    let l = f.len();
    let out_len = n / 2;
    let mut a = vec![0.0; out_len];
    let mut d = vec![0.0; out_len];
    for i in 0..out_len {
        let base = 2 * i as isize + 1;
        let mut sa = 0.0;
        let mut sd = 0.0;
        for j in 0..l {
            let xv = x[(base - j as isize).rem_euclid(n as isize) as usize];
            sa += f.dec_lo[j] * xv;
            sd += f.dec_hi[j] * xv;
        }
        a[i] = sa;
        d[i] = sd;
    }
    (a, d)
}

fn idwt_step_periodic(a: &[f64], d: &[f64], f: &Filter, n_out: usize) -> Vec<f64> {
    let even_len = if n_out % 2 == 1 { n_out + 1 } else { n_out };
    let c = a.len();
    let l = f.len();
    debug_assert_eq!(even_len, 2 * c);
    let mut x = vec![0.0; even_len];
    // Adjoint of the (orthonormal) forward circulant map.
    for i in 0..c {
        let base = 2 * i as isize + 1;
        for j in 0..l {
            let m = (base - j as isize).rem_euclid(even_len as isize) as usize;
            x[m] += a[i] * f.dec_lo[j] + d[i] * f.dec_hi[j];
        }
    }
    if n_out % 2 == 1 {
        unperiodize_odd(&x)
    } else {
        x
    }
}

/// One analysis stage on `x`, dispatching on the boundary mode.
pub fn dwt_step(x: &[f64], f: &Filter, boundary: Boundary) -> (Vec<f64>, Vec<f64>) {
    match boundary {
        Boundary::Reflection => dwt_step_reflection(x, f),
        Boundary::Periodic => dwt_step_periodic(x, f),
    }
}

/// One synthesis stage, producing a signal of length `n_out`.
pub fn idwt_step(a: &[f64], d: &[f64], f: &Filter, boundary: Boundary, n_out: usize) -> Vec<f64> {
    match boundary {
        Boundary::Reflection => idwt_step_reflection(a, d, f, n_out),
        Boundary::Periodic => idwt_step_periodic(a, d, f, n_out),
    }
}

/// Multilevel forward transform. Output layout follows `DecompPlan`:
/// `[approx_L, detail_L, ..., detail_1]`.
pub fn dwt1d(x: &[f64], plan: &DecompPlan) -> Result<Vec<f64>, WaveletError> {
    if x.len() != plan.input_len() {
        return Err(WaveletError::CoefficientLength { got: x.len(), expected: plan.input_len() });
    }
    check_finite(x)?;
    let f = Filter::new(plan.kind);
    let mut details: Vec<Vec<f64>> = Vec::with_capacity(plan.levels);
    let mut approx = x.to_vec();
    for _ in 0..plan.levels {
        let (a, d) = dwt_step(&approx, &f, plan.boundary);
        details.push(d);
        approx = a;
    }
    let mut out = Vec::with_capacity(plan.total_len());
    out.extend_from_slice(&approx);
    for d in details.iter().rev() {
        out.extend_from_slice(d);
    }
    debug_assert_eq!(out.len(), plan.total_len());
    Ok(out)
}

/// Multilevel inverse transform of a flat coefficient vector.
pub fn idwt1d(coeffs: &[f64], plan: &DecompPlan) -> Result<Vec<f64>, WaveletError> {
    if coeffs.len() != plan.total_len() {
        return Err(WaveletError::CoefficientLength {
            got: coeffs.len(),
            expected: plan.total_len(),
        });
    }
    let f = Filter::new(plan.kind);
    let mut approx = coeffs[..plan.approx_len()].to_vec();
    let mut offset = plan.approx_len();
    for level in (1..=plan.levels).rev() {
        let blen = plan.band_lens[level - 1];
        let d = &coeffs[offset..offset + blen];
        offset += blen;
        let n_out = plan.input_lens[level - 1];
        approx = idwt_step(&approx, d, &f, plan.boundary, n_out);
    }
    Ok(approx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn filter_orthogonality_and_moments() {
        for kind in [FilterKind::Db1, FilterKind::Db2, FilterKind::Db3, FilterKind::Db4, FilterKind::Db5] {
            let f = Filter::new(kind);
            let l = f.len();
            let h = &f.rec_lo;
            // sum h = sqrt(2), sum h^2 = 1
            let s: f64 = h.iter().sum();
            assert!((s - std::f64::consts::SQRT_2).abs() < 1e-10, "{kind:?} sum");
            let e: f64 = h.iter().map(|v| v * v).sum();
            assert!((e - 1.0).abs() < 1e-10, "{kind:?} energy");
            // even-shift orthogonality
            for m in 1..l / 2 {
                let dot: f64 = (0..l - 2 * m).map(|j| h[j] * h[j + 2 * m]).sum();
                assert!(dot.abs() < 1e-10, "{kind:?} shift {m}: {dot}");
            }
            // vanishing moments of the high-pass filter
            for q in 0..kind.vanishing_moments() {
                let mom: f64 = f.rec_hi.iter().enumerate().map(|(j, g)| g * (j as f64).powi(q as i32)).sum();
                assert!(mom.abs() < 1e-10, "{kind:?} moment {q}: {mom}");
            }
        }
    }

    #[test]
    fn constant_signal_annihilated() {
        for boundary in [Boundary::Reflection, Boundary::Periodic] {
            let plan = DecompPlan::new(16, FilterKind::Db3, 1, boundary).unwrap();
            let x = vec![3.25; 16];
            let coeffs = dwt1d(&x, &plan).unwrap();
            let approx_len = plan.approx_len();
            for (k, v) in coeffs.iter().enumerate() {
                if k < approx_len {
                    assert!((v - 3.25 * std::f64::consts::SQRT_2).abs() < 1e-12, "approx {k}: {v}");
                } else {
                    assert!(v.abs() < 1e-12, "detail {k}: {v}");
                }
            }
        }
    }

    #[test]
    fn round_trip_many_lengths() {
        for boundary in [Boundary::Reflection, Boundary::Periodic] {
            for n in [6usize, 7, 8, 9, 11, 15, 16, 19, 30, 32, 33, 120] {
                for levels in 1..=3 {
                    let plan = match DecompPlan::new(n, FilterKind::Db3, levels, boundary) {
                        Ok(p) => p,
                        Err(_) => continue,
                    };
                    let x = rand_signal(n, 41 * n as u64 + levels as u64);
                    let coeffs = dwt1d(&x, &plan).unwrap();
                    let back = idwt1d(&coeffs, &plan).unwrap();
                    let err = x
                        .iter()
                        .zip(&back)
                        .map(|(u, v)| (u - v).abs())
                        .fold(0.0f64, f64::max);
                    assert!(err < 1e-10, "{boundary:?} n={n} levels={levels}: err={err}");
                }
            }
        }
    }

    #[test]
    fn periodic_counts_n120_five_levels() {
        let plan = DecompPlan::new(120, FilterKind::Db3, 5, Boundary::Periodic).unwrap();
        assert_eq!(plan.band_lens, vec![60, 30, 15, 8, 4]);
        assert_eq!(plan.approx_len(), 4);
        assert_eq!(plan.total_len(), 121);
    }

    #[test]
    fn reflection_counts_n120_five_levels() {
        let plan = DecompPlan::new(120, FilterKind::Db3, 5, Boundary::Reflection).unwrap();
        assert_eq!(plan.band_lens, vec![62, 33, 19, 12, 8]);
        assert_eq!(plan.approx_len(), 8);
        assert_eq!(plan.total_len(), 142);
    }

    #[test]
    fn periodic_parseval_exact() {
        // includes an odd intermediate stage (120 -> 60 -> 30 -> 15 -> 8 -> 4)
        let plan = DecompPlan::new(120, FilterKind::Db3, 5, Boundary::Periodic).unwrap();
        let x = rand_signal(120, 7);
        let coeffs = dwt1d(&x, &plan).unwrap();
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((ex - ec).abs() / ex < 1e-12, "ex={ex} ec={ec}");
    }

    #[test]
    fn reflection_energy_bounded() {
        // Expansive representation: band counts shrink slower than n/2 per
        // level, so coefficient energy exceeds signal energy. The inflation
        // is bounded by the deepest-band count ratio, e.g. 8 approximation
        // slots instead of 120/2^5 = 3.75 at 5 levels on n = 120, giving a
        // worst-case factor of about 8/3.75 ~ 2.14.
        let plan = DecompPlan::new(120, FilterKind::Db3, 5, Boundary::Reflection).unwrap();
        for seed in 0..10 {
            let x = rand_signal(120, 100 + seed);
            let coeffs = dwt1d(&x, &plan).unwrap();
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let ec: f64 = coeffs.iter().map(|v| v * v).sum();
            let ratio = ec / ex;
            assert!((0.8..=2.3).contains(&ratio), "ratio {ratio}");
        }
        // One level on a constant: 62 slots of c*sqrt(2) vs 120 samples of c,
        // ratio exactly 124/120.
        let plan1 = DecompPlan::new(120, FilterKind::Db3, 1, Boundary::Reflection).unwrap();
        let x = vec![0.7; 120];
        let coeffs = dwt1d(&x, &plan1).unwrap();
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ec: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((ec / ex - 124.0 / 120.0).abs() < 1e-12, "one-level ratio {}", ec / ex);
    }

    #[test]
    fn errors_for_short_and_nonfinite() {
        assert!(matches!(
            DecompPlan::new(4, FilterKind::Db3, 1, Boundary::Periodic),
            Err(WaveletError::SignalTooShort { .. })
        ));
        let plan = DecompPlan::new(16, FilterKind::Db3, 1, Boundary::Periodic).unwrap();
        let mut x = vec![0.0; 16];
        x[3] = f64::NAN;
        assert!(matches!(dwt1d(&x, &plan), Err(WaveletError::NonFiniteInput(3))));
    }

    #[test]
    fn scales_and_locations_layout() {
        let plan = DecompPlan::new(120, FilterKind::Db3, 5, Boundary::Periodic).unwrap();
        let scales = plan.scales();
        let locs = plan.locations();
        assert_eq!(scales.len(), 121);
        assert_eq!(&scales[..4], &[0, 0, 0, 0]);
        assert_eq!(scales[4], 1); // coarsest detail right after approx
        assert_eq!(*scales.last().unwrap(), 5); // finest detail last
        assert_eq!(locs[4], 0);
        assert_eq!(*locs.last().unwrap(), 59);
    }
}
