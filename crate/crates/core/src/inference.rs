//! Data-space posterior inference: back-projection of basis-space draws,
//! nonparametric effect surfaces, pointwise and joint credible bands, serial
//! AUC summaries and their age derivatives, degrees-of-freedom maps, regional
//! aggregation, and posterior-predictive pseudo-data generation.

use crate::basis::{BasisError, BasisSystem};
use crate::design::{DesignBundle, DesignError, SerialBasis};
use crate::grid::{FunctionalDataset, SurfaceGrid};
use crate::lmm::{CovStructure, FitError};
use crate::mcmc::CoefficientPosterior;
use crate::spline::{df_lambda, SplineError};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("posterior draw counts differ across coefficients ({0} vs {1})")]
    DrawMismatch(usize, usize),
    #[error("need at least {need} draws, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("coefficient count {got} does not match basis size {expected}")]
    CoefficientCount { got: usize, expected: usize },
    #[error("empty aggregation region")]
    EmptyRegion,
    #[error("location index {0} outside grid of size {1}")]
    BadLocation(usize, usize),
    #[error("fixed-effect column {0} out of range")]
    BadFixedColumn(usize),
    #[error("posterior has no spline block {0}")]
    BadSplineBlock(usize),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("missing parameters for coefficient {0}")]
    MissingParams(usize),
}

/// Draws of one scalar quantity over a list of evaluation points.
#[derive(Debug, Clone)]
pub struct PosteriorSurface {
    pub label: String,
    /// G x L matrix: row g is draw g over the evaluation points.
    pub draws: DMatrix<f64>,
}

impl PosteriorSurface {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.draws.ncols()
    }

    pub fn mean(&self) -> Vec<f64> {
        let g = self.n_draws() as f64;
        (0..self.n_points()).map(|t| self.draws.column(t).sum() / g).collect()
    }
}

/// Pointwise and simultaneous credible bands for one posterior surface.
#[derive(Debug, Clone)]
pub struct BandSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub pointwise_lo: Vec<f64>,
    pub pointwise_hi: Vec<f64>,
    pub joint_lo: Vec<f64>,
    pub joint_hi: Vec<f64>,
    /// Multiplier of sd used by the joint band.
    pub joint_multiplier: f64,
    /// Points where the posterior sd is zero (bands collapse to the mean).
    pub collapsed: Vec<usize>,
}

/// Stack draws of fixed effect `a` across coefficients into a G x K matrix.
pub fn stack_fixed(
    posteriors: &[CoefficientPosterior],
    a: usize,
) -> Result<DMatrix<f64>, InferenceError> {
    let g = check_aligned(posteriors)?;
    if posteriors.iter().any(|p| a >= p.fixed.ncols()) {
        return Err(InferenceError::BadFixedColumn(a));
    }
    let mut out = DMatrix::zeros(g, posteriors.len());
    for (k, p) in posteriors.iter().enumerate() {
        for row in 0..g {
            out[(row, k)] = p.fixed[(row, a)];
        }
    }
    Ok(out)
}

/// Stack draws of variance component `h` into a G x K matrix.
pub fn stack_vc(
    posteriors: &[CoefficientPosterior],
    h: usize,
) -> Result<DMatrix<f64>, InferenceError> {
    let g = check_aligned(posteriors)?;
    let mut out = DMatrix::zeros(g, posteriors.len());
    for (k, p) in posteriors.iter().enumerate() {
        for row in 0..g {
            out[(row, k)] = p.vc[(row, h)];
        }
    }
    Ok(out)
}

fn check_aligned(posteriors: &[CoefficientPosterior]) -> Result<usize, InferenceError> {
    let g = posteriors.first().map(|p| p.n_draws()).unwrap_or(0);
    for p in posteriors {
        if p.n_draws() != g {
            return Err(InferenceError::DrawMismatch(g, p.n_draws()));
        }
    }
    Ok(g)
}

/// Back-project basis-space draws to the data space at the requested grid
/// locations: `draw_g(t) = sum_k draws[(g, k)] psi_k(t)`.
pub fn back_project(
    coeff_draws: &DMatrix<f64>,
    basis: &BasisSystem,
    targets: &[usize],
    label: impl Into<String>,
) -> Result<PosteriorSurface, InferenceError> {
    if coeff_draws.ncols() != basis.k() {
        return Err(InferenceError::CoefficientCount {
            got: coeff_draws.ncols(),
            expected: basis.k(),
        });
    }
    let total = basis.grid.total();
    for &t in targets {
        if t >= total {
            return Err(InferenceError::BadLocation(t, total));
        }
    }
    let psi = basis.synthesis_rows();
    let mut sub = DMatrix::zeros(basis.k(), targets.len());
    for (c, &t) in targets.iter().enumerate() {
        for k in 0..basis.k() {
            sub[(k, c)] = psi[(k, t)];
        }
    }
    Ok(PosteriorSurface { label: label.into(), draws: coeff_draws * sub })
}

/// All grid locations, row-major.
pub fn full_grid(grid: &SurfaceGrid) -> Vec<usize> {
    (0..grid.total()).collect()
}

/// Back-project draws against regional aggregation weights instead of grid
/// points (exact per-draw commutation of aggregating and back-projecting).
pub fn back_project_weighted(
    coeff_draws: &DMatrix<f64>,
    basis: &BasisSystem,
    weight_sets: &[Vec<f64>],
    label: impl Into<String>,
) -> Result<PosteriorSurface, InferenceError> {
    if coeff_draws.ncols() != basis.k() {
        return Err(InferenceError::CoefficientCount {
            got: coeff_draws.ncols(),
            expected: basis.k(),
        });
    }
    let sub = projection_weighted(basis, weight_sets)?;
    Ok(PosteriorSurface { label: label.into(), draws: coeff_draws * sub })
}

/// Posterior draws of a nonparametric effect surface f(x, t) on an
/// `ages x locations` product grid (flattened age-major: index
/// `ai * n_locations + li`). The effect is `x_c * b + Z_B(x) u` per basis
/// coefficient with `x_c` the centered covariate, optionally re-centered so
/// each draw integrates to zero over the age grid at every location.
#[allow(clippy::too_many_arguments)]
pub fn np_surface(
    posteriors: &[CoefficientPosterior],
    bundle: &DesignBundle,
    term_idx: usize,
    basis: &BasisSystem,
    ages: &[f64],
    locations: &[usize],
    center: bool,
) -> Result<PosteriorSurface, InferenceError> {
    let sub = projection_at(basis, locations)?;
    np_surface_proj(posteriors, bundle, term_idx, &sub, ages, center)
}

/// Synthesis submatrix K x L at explicit grid locations.
pub fn projection_at(
    basis: &BasisSystem,
    locations: &[usize],
) -> Result<DMatrix<f64>, InferenceError> {
    let total = basis.grid.total();
    for &t in locations {
        if t >= total {
            return Err(InferenceError::BadLocation(t, total));
        }
    }
    let psi = basis.synthesis_rows();
    let mut sub = DMatrix::zeros(basis.k(), locations.len());
    for (c, &t) in locations.iter().enumerate() {
        for k in 0..basis.k() {
            sub[(k, c)] = psi[(k, t)];
        }
    }
    Ok(sub)
}

/// Aggregated synthesis columns: column r is `sum_t w_rt psi_k(t)` for the
/// r-th weight vector (aggregation commutes with back-projection).
pub fn projection_weighted(
    basis: &BasisSystem,
    weight_sets: &[Vec<f64>],
) -> Result<DMatrix<f64>, InferenceError> {
    let total = basis.grid.total();
    let psi = basis.synthesis_rows();
    let mut sub = DMatrix::zeros(basis.k(), weight_sets.len());
    for (c, w) in weight_sets.iter().enumerate() {
        assert_eq!(w.len(), total, "one weight per grid point");
        for k in 0..basis.k() {
            let mut s = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                if wt != 0.0 {
                    s += wt * psi[(k, t)];
                }
            }
            sub[(k, c)] = s;
        }
    }
    Ok(sub)
}

/// Normalized aggregation weights over the full grid for a region.
pub fn region_weights(
    grid: &SurfaceGrid,
    theta_lo: f64,
    theta_hi: f64,
    flat: bool,
) -> Result<Vec<f64>, InferenceError> {
    let mut w = vec![0.0; grid.total()];
    let mut sum = 0.0;
    for t in 0..grid.total() {
        let (r, _) = grid.unflat(t);
        let th = grid.theta_at(r);
        if th >= theta_lo && th <= theta_hi {
            let wt = if flat { 1.0 } else { th.to_radians().sin() };
            w[t] = wt;
            sum += wt;
        }
    }
    if sum <= 0.0 {
        return Err(InferenceError::EmptyRegion);
    }
    for wt in w.iter_mut() {
        *wt /= sum;
    }
    Ok(w)
}

/// Draws of `f(x, .)` against arbitrary projection columns (grid points or
/// regional aggregates), flattened age-major.
pub fn np_surface_proj(
    posteriors: &[CoefficientPosterior],
    bundle: &DesignBundle,
    term_idx: usize,
    sub: &DMatrix<f64>,
    ages: &[f64],
    center: bool,
) -> Result<PosteriorSurface, InferenceError> {
    let term = &bundle.np_terms[term_idx];
    let g = check_aligned(posteriors)?;
    let k_count = posteriors.len();
    if k_count != sub.nrows() {
        return Err(InferenceError::CoefficientCount { got: k_count, expected: sub.nrows() });
    }
    let spline_block_pos = spline_position(bundle, term.z_block)?;
    let m = term.dr.n_random();
    let x_mean = term.x_values.iter().sum::<f64>() / term.x_values.len() as f64;
    // Z_B rows for the age grid
    let zb = term.dr.z_design(ages)?;
    let n_l = sub.ncols();
    let n_a = ages.len();
    let mut draws = DMatrix::zeros(g, n_a * n_l);
    let mut fstar = DMatrix::zeros(n_a, k_count);
    for gi in 0..g {
        // basis-space f*_k(x) for every k at once
        for (k, p) in posteriors.iter().enumerate() {
            let b3 = p.fixed[(gi, term.x_col)];
            for (ai, &x) in ages.iter().enumerate() {
                let mut v = (x - x_mean) * b3;
                let u = &p.spline[spline_block_pos];
                for mm in 0..m {
                    v += zb[(ai, mm)] * u[(gi, mm)];
                }
                fstar[(ai, k)] = v;
            }
        }
        let surf = &fstar * sub; // n_a x n_l
        if center {
            for li in 0..n_l {
                let mean_over_age: f64 =
                    (0..n_a).map(|ai| surf[(ai, li)]).sum::<f64>() / n_a as f64;
                for ai in 0..n_a {
                    draws[(gi, ai * n_l + li)] = surf[(ai, li)] - mean_over_age;
                }
            }
        } else {
            for ai in 0..n_a {
                for li in 0..n_l {
                    draws[(gi, ai * n_l + li)] = surf[(ai, li)];
                }
            }
        }
    }
    Ok(PosteriorSurface { label: format!("f({})", term.covariate), draws })
}

fn spline_position(bundle: &DesignBundle, z_block: usize) -> Result<usize, InferenceError> {
    // position of this z-block among the spline blocks, in design order
    let mut pos = 0;
    for (i, z) in bundle.z_blocks.iter().enumerate() {
        if matches!(z.kind, crate::design::ZBlockKind::Spline { .. }) {
            if i == z_block {
                return Ok(pos);
            }
            pos += 1;
        }
    }
    Err(InferenceError::BadSplineBlock(z_block))
}

/// Empirical quantile by the ceiling order statistic.
fn order_stat_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let idx = ((level * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Pointwise and joint credible bands at level `1 - alpha`. Both bands take
/// the form `mean +- c * sd`: pointwise uses the per-point empirical
/// `(1 - alpha)` quantile of |standardized deviation|, joint the same
/// quantile of the maximum over points, so the joint band contains the
/// pointwise band everywhere by construction.
pub fn joint_band(surface: &PosteriorSurface, alpha: f64) -> Result<BandSummary, InferenceError> {
    let g = surface.n_draws();
    if g < 100 {
        return Err(InferenceError::TooFewDraws { need: 100, got: g });
    }
    let l = surface.n_points();
    let mean = surface.mean();
    let mut sd = vec![0.0; l];
    for t in 0..l {
        let var: f64 = (0..g)
            .map(|gi| {
                let d = surface.draws[(gi, t)] - mean[t];
                d * d
            })
            .sum::<f64>()
            / (g as f64 - 1.0);
        sd[t] = var.sqrt();
    }
    let collapsed: Vec<usize> = (0..l).filter(|&t| sd[t] == 0.0).collect();
    if !collapsed.is_empty() {
        log::warn!("{} locations have zero posterior sd; bands collapse to the mean", collapsed.len());
    }
    let mut max_std = vec![0.0f64; g];
    let mut pw_mult = vec![0.0f64; l];
    let mut buf = vec![0.0f64; g];
    for t in 0..l {
        if sd[t] == 0.0 {
            continue;
        }
        for gi in 0..g {
            let z = (surface.draws[(gi, t)] - mean[t]).abs() / sd[t];
            buf[gi] = z;
            if z > max_std[gi] {
                max_std[gi] = z;
            }
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pw_mult[t] = order_stat_quantile(&buf, 1.0 - alpha);
    }
    max_std.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = order_stat_quantile(&max_std, 1.0 - alpha);
    let mut pointwise_lo = vec![0.0; l];
    let mut pointwise_hi = vec![0.0; l];
    let mut joint_lo = vec![0.0; l];
    let mut joint_hi = vec![0.0; l];
    for t in 0..l {
        pointwise_lo[t] = mean[t] - pw_mult[t] * sd[t];
        pointwise_hi[t] = mean[t] + pw_mult[t] * sd[t];
        joint_lo[t] = mean[t] - q * sd[t];
        joint_hi[t] = mean[t] + q * sd[t];
    }
    Ok(BandSummary {
        mean,
        sd,
        pointwise_lo,
        pointwise_hi,
        joint_lo,
        joint_hi,
        joint_multiplier: q,
        collapsed,
    })
}

/// Numerical integrals of the serial basis functions G1, G2 over
/// `[lo, hi]`, composite 5-point Gauss-Legendre (the integrands are affine
/// images of p and 1/p, so this is exact to machine precision).
pub fn integrate_serial(basis: &SerialBasis, lo: f64, hi: f64) -> (f64, f64) {
    let nodes = [
        -0.906179845938664,
        -0.5384693101056831,
        0.0,
        0.5384693101056831,
        0.906179845938664,
    ];
    let weights = [
        0.23692688505618908,
        0.47862867049936647,
        0.5688888888888889,
        0.47862867049936647,
        0.23692688505618908,
    ];
    let panels = 64;
    let h = (hi - lo) / panels as f64;
    let mut i1 = 0.0;
    let mut i2 = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * h;
        let mid = a + 0.5 * h;
        for (x, w) in nodes.iter().zip(weights.iter()) {
            let pt = mid + 0.5 * h * x;
            let wt = w * 0.5 * h;
            i1 += wt * basis.g1(pt);
            i2 += wt * basis.g2(pt);
        }
    }
    (i1, i2)
}

/// Posterior draws of the serial-aggregated effect
/// `AUC(x, t) = f(x, t) + Integral of B1(t) G1(p) + B2(t) G2(p) over [lo, hi]`.
/// `f_surface` must be laid out age-major over the same locations as the
/// fixed-effect surfaces.
#[allow(clippy::too_many_arguments)]
pub fn auc(
    f_surface: &PosteriorSurface,
    b1: &PosteriorSurface,
    b2: &PosteriorSurface,
    serial: &SerialBasis,
    range: (f64, f64),
    n_ages: usize,
) -> Result<PosteriorSurface, InferenceError> {
    let g = f_surface.n_draws();
    if b1.n_draws() != g || b2.n_draws() != g {
        return Err(InferenceError::DrawMismatch(g, b1.n_draws().min(b2.n_draws())));
    }
    let n_l = b1.n_points();
    assert_eq!(f_surface.n_points(), n_ages * n_l, "f surface layout mismatch");
    let (i1, i2) = integrate_serial(serial, range.0, range.1);
    let mut draws = f_surface.draws.clone();
    for gi in 0..g {
        for li in 0..n_l {
            let add = i1 * b1.draws[(gi, li)] + i2 * b2.draws[(gi, li)];
            for ai in 0..n_ages {
                draws[(gi, ai * n_l + li)] += add;
            }
        }
    }
    Ok(PosteriorSurface { label: "auc".into(), draws })
}

/// Posterior draws of the age derivative of the aggregated effect:
/// `b3(t) + dZ_B(x)/dx u_S(t)` on the same age x location grid.
pub fn auc_derivative(
    posteriors: &[CoefficientPosterior],
    bundle: &DesignBundle,
    term_idx: usize,
    basis: &BasisSystem,
    ages: &[f64],
    locations: &[usize],
) -> Result<PosteriorSurface, InferenceError> {
    let sub = projection_at(basis, locations)?;
    auc_derivative_proj(posteriors, bundle, term_idx, &sub, ages)
}

/// Derivative draws against arbitrary projection columns.
pub fn auc_derivative_proj(
    posteriors: &[CoefficientPosterior],
    bundle: &DesignBundle,
    term_idx: usize,
    sub: &DMatrix<f64>,
    ages: &[f64],
) -> Result<PosteriorSurface, InferenceError> {
    let term = &bundle.np_terms[term_idx];
    let g = check_aligned(posteriors)?;
    let k_count = posteriors.len();
    let spline_block_pos = spline_position(bundle, term.z_block)?;
    let m = term.dr.n_random();
    let dzb = term.dr.z_design_deriv(ages)?;
    let n_l = sub.ncols();
    let n_a = ages.len();
    let mut draws = DMatrix::zeros(g, n_a * n_l);
    let mut dstar = DMatrix::zeros(n_a, k_count);
    for gi in 0..g {
        for (k, p) in posteriors.iter().enumerate() {
            let b3 = p.fixed[(gi, term.x_col)];
            let u = &p.spline[spline_block_pos];
            for (ai, _) in ages.iter().enumerate() {
                let mut v = b3;
                for mm in 0..m {
                    v += dzb[(ai, mm)] * u[(gi, mm)];
                }
                dstar[(ai, k)] = v;
            }
        }
        let surf = &dstar * sub;
        for ai in 0..n_a {
            for li in 0..n_l {
                draws[(gi, ai * n_l + li)] = surf[(ai, li)];
            }
        }
    }
    Ok(PosteriorSurface { label: "d_auc_d_age".into(), draws })
}

/// Posterior draws of the degrees-of-freedom function at the requested grid
/// locations: per draw, `lambda(t) = s(t)/q_S(t)` from the induced variance
/// surfaces and DF from the weighted smoother trace, where the weight is the
/// inverse marginal covariance of the non-spline random structure.
pub fn df_map(
    posteriors: &[CoefficientPosterior],
    bundle: &DesignBundle,
    term_idx: usize,
    basis: &BasisSystem,
    locations: &[usize],
) -> Result<PosteriorSurface, InferenceError> {
    let term = &bundle.np_terms[term_idx];
    let g = check_aligned(posteriors)?;
    let k_count = posteriors.len();
    if k_count != basis.k() {
        return Err(InferenceError::CoefficientCount { got: k_count, expected: basis.k() });
    }
    let h_blocks = bundle.z_blocks.len();
    let spline_design = {
        let mut d = term.dr.def.design(&term.x_values)?;
        if let Some(left) = &term.left {
            for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    d[(r, c)] *= left[r];
                }
            }
        }
        d
    };
    let blocks: Vec<&DMatrix<f64>> = bundle.z_blocks.iter().map(|z| &z.columns).collect();
    let structure = CovStructure::new(bundle.n(), &blocks)?;
    // per-location psi_k(t)^2 for variance surfaces
    let psi = basis.synthesis_rows();
    let mut psi2 = DMatrix::zeros(k_count, locations.len());
    for (c, &t) in locations.iter().enumerate() {
        for k in 0..k_count {
            let v = psi[(k, t)];
            psi2[(k, c)] = v * v;
        }
    }
    let m_upper = term.dr.def.n_basis() as f64;
    let mut draws = DMatrix::zeros(g, locations.len());
    for gi in 0..g {
        for (c, _) in locations.iter().enumerate() {
            // induced variance surfaces at this location
            let mut q_t = vec![0.0; h_blocks];
            let mut s_t = 0.0;
            for (k, p) in posteriors.iter().enumerate() {
                let w = psi2[(k, c)];
                for h in 0..h_blocks {
                    q_t[h] += w * p.vc[(gi, h)];
                }
                s_t += w * p.vc[(gi, h_blocks)];
            }
            let q_s = q_t[term.z_block];
            if !(q_s > 0.0) || !(s_t > 0.0) {
                draws[(gi, c)] = 2.0;
                continue;
            }
            let lambda = s_t / q_s;
            q_t[term.z_block] = 0.0;
            let weight = if q_t.iter().all(|&q| q == 0.0) {
                None
            } else {
                let factor = structure.factor(&q_t, s_t)?;
                let sigma = factor.dense_sigma();
                Some(
                    nalgebra::Cholesky::new(sigma)
                        .ok_or(InferenceError::Fit(FitError::SingularFixedEffects))?
                        .inverse(),
                )
            };
            let df = df_lambda(&spline_design, &term.dr.omega, lambda, weight.as_ref())?;
            draws[(gi, c)] = df.clamp(2.0, m_upper);
        }
    }
    Ok(PosteriorSurface { label: "df".into(), draws })
}

/// Aggregation region over the surface grid.
#[derive(Debug, Clone)]
pub enum Region {
    /// Area-weighted mean over all locations with theta in the band
    /// (degrees, inclusive).
    MeridionalBand { theta_lo: f64, theta_hi: f64 },
    /// Area-weighted mean over each meridional row (output has one point per
    /// row): averages out the circumferential direction.
    CircumferentialAverage,
    /// Explicit weights per grid point (need not be normalized).
    Custom(Vec<f64>),
}

/// Aggregate a full-grid posterior surface over a region. Weights follow the
/// spherical area element sin(theta) unless `flat_weights` is set.
pub fn aggregate(
    surface: &PosteriorSurface,
    grid: &SurfaceGrid,
    region: &Region,
    flat_weights: bool,
) -> Result<PosteriorSurface, InferenceError> {
    assert_eq!(surface.n_points(), grid.total(), "aggregate expects a full-grid surface");
    let area = |t: usize| -> f64 {
        if flat_weights {
            1.0
        } else {
            let (r, _) = grid.unflat(t);
            grid.theta_at(r).to_radians().sin()
        }
    };
    let g = surface.n_draws();
    match region {
        Region::MeridionalBand { theta_lo, theta_hi } => {
            let pts: Vec<usize> = (0..grid.total())
                .filter(|&t| {
                    let (r, _) = grid.unflat(t);
                    let th = grid.theta_at(r);
                    th >= *theta_lo && th <= *theta_hi
                })
                .collect();
            if pts.is_empty() {
                return Err(InferenceError::EmptyRegion);
            }
            let wsum: f64 = pts.iter().map(|&t| area(t)).sum();
            let mut draws = DMatrix::zeros(g, 1);
            for gi in 0..g {
                let s: f64 = pts.iter().map(|&t| area(t) * surface.draws[(gi, t)]).sum();
                draws[(gi, 0)] = s / wsum;
            }
            Ok(PosteriorSurface { label: format!("{}|band", surface.label), draws })
        }
        Region::CircumferentialAverage => {
            let rows = grid.n_meridional;
            let cols = grid.n_circumferential;
            let mut draws = DMatrix::zeros(g, rows);
            for r in 0..rows {
                // sin(theta) is constant along a row: plain mean
                for gi in 0..g {
                    let s: f64 = (0..cols).map(|c| surface.draws[(gi, grid.flat(r, c))]).sum();
                    draws[(gi, r)] = s / cols as f64;
                }
            }
            Ok(PosteriorSurface { label: format!("{}|circavg", surface.label), draws })
        }
        Region::Custom(weights) => {
            assert_eq!(weights.len(), grid.total());
            let wsum: f64 = weights.iter().map(|w| w.abs()).sum();
            if wsum == 0.0 {
                return Err(InferenceError::EmptyRegion);
            }
            let norm: f64 = weights.iter().sum();
            if norm == 0.0 {
                return Err(InferenceError::EmptyRegion);
            }
            let mut draws = DMatrix::zeros(g, 1);
            for gi in 0..g {
                let s: f64 =
                    (0..grid.total()).map(|t| weights[t] * surface.draws[(gi, t)]).sum();
                draws[(gi, 0)] = s / norm;
            }
            Ok(PosteriorSurface { label: format!("{}|custom", surface.label), draws })
        }
    }
}

/// Induced serial correlation matrix over the observed level grid from one
/// draw's variance components (unit-level blocks only).
pub fn serial_correlation(
    serial: &SerialBasis,
    q: &[f64],
    s: f64,
) -> Result<DMatrix<f64>, InferenceError> {
    let levels = serial.levels.clone();
    let n = levels.len();
    let mut cov = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            cov[(a, b)] = crate::design::serial_covariance(serial, q, levels[a], levels[b])?;
            if a == b {
                cov[(a, b)] += s;
            }
        }
    }
    Ok(crate::basis::correlation_from_covariance(&cov))
}

/// Per-coefficient true parameters for pseudo-data generation.
#[derive(Debug, Clone)]
pub struct PseudoParams {
    /// Fixed effects, A x K.
    pub fixed: DMatrix<f64>,
    /// Variance components per z-block, H x K.
    pub vc: DMatrix<f64>,
    /// Residual variances per coefficient.
    pub s: Vec<f64>,
}

/// Draw per-coefficient responses `y*_k = X b_k + sum_h Z_h u_hk + e_k` for
/// every coefficient; rows are observations, columns coefficients.
pub fn simulate_coefficients(
    bundle: &DesignBundle,
    params: &PseudoParams,
    seed: u64,
) -> Result<DMatrix<f64>, InferenceError> {
    let n = bundle.n();
    let k_count = params.s.len();
    if params.fixed.ncols() != k_count || params.vc.ncols() != k_count {
        return Err(InferenceError::MissingParams(
            params.fixed.ncols().min(params.vc.ncols()).min(params.s.len()),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut coeffs = DMatrix::zeros(n, k_count);
    for k in 0..k_count {
        let mut y = DVector::zeros(n);
        // fixed part
        for a in 0..bundle.n_fixed() {
            let b = params.fixed[(a, k)];
            if b != 0.0 {
                for i in 0..n {
                    y[i] += bundle.x[(i, a)] * b;
                }
            }
        }
        // random levels
        for (h, z) in bundle.z_blocks.iter().enumerate() {
            let q = params.vc[(h, k)];
            if q > 0.0 {
                let sd = q.sqrt();
                for c in 0..z.columns.ncols() {
                    let u = sd * rng.sample::<f64, _>(StandardNormal);
                    for i in 0..n {
                        let zv = z.columns[(i, c)];
                        if zv != 0.0 {
                            y[i] += zv * u;
                        }
                    }
                }
            }
        }
        // residuals
        let sd = params.s[k].max(0.0).sqrt();
        if sd > 0.0 {
            for i in 0..n {
                y[i] += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for i in 0..n {
            coeffs[(i, k)] = y[i];
        }
    }
    Ok(coeffs)
}

fn surfaces_from_flat(
    template: &FunctionalDataset,
    grid: &SurfaceGrid,
    flats: Vec<Vec<f64>>,
) -> FunctionalDataset {
    let mut functions = Vec::with_capacity(flats.len());
    for (i, flat) in flats.into_iter().enumerate() {
        let mut values = DMatrix::zeros(grid.n_meridional, grid.n_circumferential);
        for r in 0..grid.n_meridional {
            for c in 0..grid.n_circumferential {
                values[(r, c)] = flat[grid.flat(r, c)];
            }
        }
        let mut rec = template.functions[i].clone();
        rec.values = values;
        functions.push(rec);
    }
    FunctionalDataset { grid: grid.clone(), functions }
}

/// Simulate a dataset from per-coefficient mixed models in basis space and
/// back-transform to surfaces, reusing the template's metadata (subjects,
/// units, serial levels, covariates). Parameters are indexed by the retained
/// basis columns.
pub fn simulate_pseudo(
    template: &FunctionalDataset,
    bundle: &DesignBundle,
    basis: &BasisSystem,
    params: &PseudoParams,
    seed: u64,
) -> Result<FunctionalDataset, InferenceError> {
    if params.s.len() != basis.k() {
        return Err(InferenceError::MissingParams(params.s.len()));
    }
    assert_eq!(template.n(), bundle.n(), "template rows must match the design");
    let coeffs = simulate_coefficients(bundle, params, seed)?;
    let mut flats = Vec::with_capacity(coeffs.nrows());
    for i in 0..coeffs.nrows() {
        let row: Vec<f64> = (0..basis.k()).map(|k| coeffs[(i, k)]).collect();
        flats.push(basis.synthesize_flat(&row)?);
    }
    Ok(surfaces_from_flat(template, &basis.grid, flats))
}

/// Like `simulate_pseudo`, but with parameters over the complete tensor
/// coefficient space and synthesis through the fast transform (no basis
/// materialization; suits production-scale grids).
pub fn simulate_pseudo_full(
    template: &FunctionalDataset,
    bundle: &DesignBundle,
    transform: &crate::basis::TensorTransform,
    params: &PseudoParams,
    seed: u64,
) -> Result<FunctionalDataset, InferenceError> {
    if params.s.len() != transform.k_full() {
        return Err(InferenceError::MissingParams(params.s.len()));
    }
    assert_eq!(template.n(), bundle.n(), "template rows must match the design");
    let coeffs = simulate_coefficients(bundle, params, seed)?;
    let grid = transform.grid.clone();
    let mut flats = Vec::with_capacity(coeffs.nrows());
    let mut row = vec![0.0; transform.k_full()];
    for i in 0..coeffs.nrows() {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = coeffs[(i, k)];
        }
        let surf = transform.synthesize(&row)?;
        let mut flat = vec![0.0; grid.total()];
        for r in 0..grid.n_meridional {
            for c in 0..grid.n_circumferential {
                flat[grid.flat(r, c)] = surf[(r, c)];
            }
        }
        flats.push(flat);
    }
    Ok(surfaces_from_flat(template, &grid, flats))
}

/// Summary of convergence diagnostics across coefficients.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticsSummary {
    pub n_parameters: usize,
    pub fraction_p_below_05: f64,
    pub median_ess: f64,
    pub geweke_z_quantiles: [f64; 3],
    pub accept_rate_range: (f64, f64),
}

/// Aggregate the per-parameter Geweke/ESS fields of many posteriors.
pub fn diagnostics_summary(posteriors: &[CoefficientPosterior]) -> DiagnosticsSummary {
    let mut ps = Vec::new();
    let mut zs = Vec::new();
    let mut esss = Vec::new();
    let mut acc_lo = f64::INFINITY;
    let mut acc_hi = f64::NEG_INFINITY;
    for p in posteriors {
        ps.extend_from_slice(&p.geweke_p);
        zs.extend_from_slice(&p.geweke_z);
        esss.extend_from_slice(&p.ess);
        for &r in &p.accept_rate {
            acc_lo = acc_lo.min(r);
            acc_hi = acc_hi.max(r);
        }
    }
    let n = ps.len();
    let below: usize = ps.iter().filter(|&&p| p < 0.05).count();
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    esss.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quant = |v: &[f64], q: f64| -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        let idx = ((q * v.len() as f64).floor() as usize).min(v.len() - 1);
        v[idx]
    };
    DiagnosticsSummary {
        n_parameters: n,
        fraction_p_below_05: if n > 0 { below as f64 / n as f64 } else { 0.0 },
        median_ess: quant(&esss, 0.5),
        geweke_z_quantiles: [quant(&zs, 0.025), quant(&zs, 0.5), quant(&zs, 0.975)],
        accept_rate_range: (acc_lo, acc_hi),
    }
}

#[cfg(test)]
mod tests;
