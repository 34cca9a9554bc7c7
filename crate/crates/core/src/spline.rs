//! Cubic penalized splines in mixed-model form: clamped B-spline designs, the
//! exact curvature penalty, its spectral split into an unpenalized linear part
//! plus independent penalized random effects, derivatives, and the
//! degrees-of-freedom function.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("boundary knots must satisfy a < b, got a={0}, b={1}")]
    BadBoundary(f64, f64),
    #[error("need at least 1 interior knot, got {0}")]
    NoInteriorKnots(usize),
    #[error("interior knots must be strictly increasing inside (a, b)")]
    BadInteriorKnots,
    #[error("evaluation point {0} outside [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
    #[error("penalty null space dimension {0}, expected 2")]
    BadNullSpace(usize),
    #[error("singular system in degrees-of-freedom computation")]
    SingularSystem,
    #[error("smoothing parameter must be positive, got {0}")]
    BadLambda(f64),
}

const ORDER: usize = 4; // cubic

/// Cubic spline basis: M interior knots inside [a, b], 4-fold knots at each
/// boundary, M + 4 basis functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasisDef {
    pub a: f64,
    pub b: f64,
    pub interior: Vec<f64>,
}

impl SplineBasisDef {
    /// Equally spaced interior knots (the default placement).
    pub fn equally_spaced(a: f64, b: f64, m: usize) -> Result<Self, SplineError> {
        if !(a < b) {
            return Err(SplineError::BadBoundary(a, b));
        }
        if m == 0 {
            return Err(SplineError::NoInteriorKnots(0));
        }
        let interior: Vec<f64> =
            (1..=m).map(|i| a + (b - a) * i as f64 / (m + 1) as f64).collect();
        Ok(SplineBasisDef { a, b, interior })
    }

    pub fn with_knots(a: f64, b: f64, interior: Vec<f64>) -> Result<Self, SplineError> {
        if !(a < b) {
            return Err(SplineError::BadBoundary(a, b));
        }
        if interior.is_empty() {
            return Err(SplineError::NoInteriorKnots(0));
        }
        let mut prev = a;
        for &k in &interior {
            if !(k > prev) || !(k < b) {
                return Err(SplineError::BadInteriorKnots);
            }
            prev = k;
        }
        Ok(SplineBasisDef { a, b, interior })
    }

    pub fn m(&self) -> usize {
        self.interior.len()
    }

    /// Number of basis functions, M + 4.
    pub fn n_basis(&self) -> usize {
        self.m() + ORDER
    }

    /// Full clamped knot vector of length M + 8.
    pub fn knots(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.m() + 2 * ORDER);
        t.extend(std::iter::repeat(self.a).take(ORDER));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat(self.b).take(ORDER));
        t
    }

    fn check_range(&self, x: f64) -> Result<(), SplineError> {
        if x < self.a || x > self.b || !x.is_finite() {
            return Err(SplineError::OutOfRange(x, self.a, self.b));
        }
        Ok(())
    }

    /// Knot span index for x: largest i with knots[i] <= x < knots[i+1],
    /// clamped so that x = b falls in the last nonempty interval.
    fn span(&self, knots: &[f64], x: f64) -> usize {
        let n_basis = self.n_basis();
        // valid spans are ORDER-1 ..= n_basis-1
        let hi = n_basis - 1;
        if x >= knots[hi] {
            return hi;
        }
        let mut lo = ORDER - 1;
        let mut hi_s = hi;
        while lo < hi_s {
            let mid = (lo + hi_s + 1) / 2;
            if knots[mid] <= x {
                lo = mid;
            } else {
                hi_s = mid - 1;
            }
        }
        lo
    }

    /// Values of all basis functions and derivatives up to `max_deriv` at x.
    /// Row d of the result holds the d-th derivatives.
    pub fn eval_all(&self, x: f64, max_deriv: usize) -> Result<DMatrix<f64>, SplineError> {
        self.check_range(x)?;
        let knots = self.knots();
        let n_basis = self.n_basis();
        let span = self.span(&knots, x);
        let mut out = DMatrix::zeros(max_deriv + 1, n_basis);

        // Nonzero degree-p basis values at x for p = 0..3 (de Boor triangle):
        // tri[p][r] = N_{span-p+r, p}(x). Scatter form: N_{i,p-1} feeds
        // N_{i,p} with weight (x - t_i)/(t_{i+p} - t_i) and N_{i-1,p} with
        // weight (t_{i+p} - x)/(t_{i+p} - t_i).
        let mut tri: Vec<Vec<f64>> = Vec::with_capacity(ORDER);
        tri.push(vec![1.0]);
        for p in 1..ORDER {
            let prev = tri[p - 1].clone();
            let mut cur = vec![0.0; p + 1];
            for (r, &val) in prev.iter().enumerate() {
                let i = span - (p - 1) + r;
                let denom = knots[i + p] - knots[i];
                if denom > 0.0 {
                    cur[r + 1] += val * (x - knots[i]) / denom;
                    cur[r] += val * (knots[i + p] - x) / denom;
                }
            }
            tri.push(cur);
        }
        for (r, &v) in tri[ORDER - 1].iter().enumerate() {
            out[(0, span - (ORDER - 1) + r)] = v;
        }

        // Derivatives via N'_{i,p} = p [ N_{i,p-1}/(t_{i+p}-t_i) - N_{i+1,p-1}/(t_{i+p+1}-t_{i+1}) ].
        // d-th derivative of the cubic uses degree 3-d values.
        for d in 1..=max_deriv.min(3) {
            let p_low = ORDER - 1 - d; // degree of the underlying values
            // full-length vector of degree-p_low values
            let mut low = vec![0.0; knots.len() - 1 - p_low];
            for (r, &v) in tri[p_low].iter().enumerate() {
                low[span - p_low + r] = v;
            }
            // lift back up d times, differentiating at each step
            let mut cur = low;
            for step in 1..=d {
                let p = p_low + step;
                let mut next = vec![0.0; knots.len() - 1 - p];
                for (i, slot) in next.iter_mut().enumerate() {
                    let mut s = 0.0;
                    let dl = knots[i + p] - knots[i];
                    if dl > 0.0 {
                        s += cur[i] / dl;
                    }
                    let dr = knots[i + p + 1] - knots[i + 1];
                    if dr > 0.0 {
                        s -= cur[i + 1] / dr;
                    }
                    *slot = p as f64 * s;
                }
                cur = next;
            }
            for (i, &v) in cur.iter().enumerate() {
                if i < n_basis {
                    out[(d, i)] = v;
                }
            }
        }
        Ok(out)
    }

    /// N x (M+4) design matrix of basis values.
    pub fn design(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        let mut out = DMatrix::zeros(x.len(), self.n_basis());
        for (i, &xi) in x.iter().enumerate() {
            let vals = self.eval_all(xi, 0)?;
            out.row_mut(i).copy_from(&vals.row(0));
        }
        Ok(out)
    }

    /// Design matrix of first derivatives.
    pub fn design_deriv(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        let mut out = DMatrix::zeros(x.len(), self.n_basis());
        for (i, &xi) in x.iter().enumerate() {
            let vals = self.eval_all(xi, 1)?;
            out.row_mut(i).copy_from(&vals.row(1));
        }
        Ok(out)
    }

    /// Curvature penalty `Omega[m, m'] = integral of B''_m B''_m' over [a, b]`,
    /// integrated exactly with 3-point Gauss-Legendre per knot interval (the
    /// integrand is piecewise quadratic).
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let n_basis = self.n_basis();
        let mut omega = DMatrix::zeros(n_basis, n_basis);
        let mut nodes = vec![self.a];
        nodes.extend_from_slice(&self.interior);
        nodes.push(self.b);
        // 3-point Gauss-Legendre on [-1, 1]
        let gl_x = [-(0.6f64.sqrt()), 0.0, 0.6f64.sqrt()];
        let gl_w = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        for w in nodes.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (xi, wi) in gl_x.iter().zip(gl_w.iter()) {
                let x = mid + half * xi;
                let vals = self.eval_all(x, 2).expect("in range");
                let w_scaled = wi * half;
                for m in 0..n_basis {
                    let bm = vals[(2, m)];
                    if bm == 0.0 {
                        continue;
                    }
                    for m2 in m..n_basis {
                        let v = w_scaled * bm * vals[(2, m2)];
                        omega[(m, m2)] += v;
                        if m2 != m {
                            omega[(m2, m)] += v;
                        }
                    }
                }
            }
        }
        omega
    }
}

/// Spectral split of the curvature penalty: `nu = x_null * beta + z_map * u`
/// reproduces any coefficient vector, with `beta` unpenalized (spanning the
/// straight lines through the design) and `u` exchangeable random effects.
#[derive(Debug, Clone)]
pub struct DemmlerReinsch {
    pub def: SplineBasisDef,
    pub omega: DMatrix<f64>,
    /// (M+4) x 2 penalty null-space basis.
    pub x_null: DMatrix<f64>,
    /// (M+4) x (M+2) map `Z_omega diag(d^{-1/2})`.
    pub z_map: DMatrix<f64>,
    /// Positive penalty eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
}

impl DemmlerReinsch {
    pub fn new(def: SplineBasisDef) -> Result<Self, SplineError> {
        let omega = def.penalty_matrix();
        Self::from_penalty(def, omega)
    }

    pub fn from_penalty(def: SplineBasisDef, omega: DMatrix<f64>) -> Result<Self, SplineError> {
        let n = omega.nrows();
        let eig = SymmetricEigen::new(omega.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let tol = 1e-10 * max_ev;
        let null_count = order.iter().filter(|&&i| eig.eigenvalues[i] <= tol).count();
        if null_count != 2 {
            return Err(SplineError::BadNullSpace(null_count));
        }
        let column = |i: usize| -> DVector<f64> {
            let mut v: DVector<f64> = eig.eigenvectors.column(i).into();
            // canonical sign: largest-magnitude entry positive
            let mut imax = 0;
            for j in 0..v.len() {
                if v[j].abs() > v[imax].abs() {
                    imax = j;
                }
            }
            if v[imax] < 0.0 {
                v.neg_mut();
            }
            v
        };
        let mut x_null = DMatrix::zeros(n, 2);
        x_null.set_column(0, &column(order[0]));
        x_null.set_column(1, &column(order[1]));
        let m_pen = n - 2;
        let mut z_map = DMatrix::zeros(n, m_pen);
        let mut eigenvalues = Vec::with_capacity(m_pen);
        for (j, &idx) in order[2..].iter().enumerate() {
            let d = eig.eigenvalues[idx];
            eigenvalues.push(d);
            let v = column(idx) / d.sqrt();
            z_map.set_column(j, &v);
        }
        Ok(DemmlerReinsch { def, omega, x_null, z_map, eigenvalues })
    }

    /// Unpenalized design `B(x) X_omega` (N x 2); spans {1, x} evaluations.
    pub fn x_design(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        Ok(self.def.design(x)? * &self.x_null)
    }

    /// Penalized random-effect design `Z_B(x)` (N x (M+2)).
    pub fn z_design(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        Ok(self.def.design(x)? * &self.z_map)
    }

    pub fn x_design_deriv(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        Ok(self.def.design_deriv(x)? * &self.x_null)
    }

    pub fn z_design_deriv(&self, x: &[f64]) -> Result<DMatrix<f64>, SplineError> {
        Ok(self.def.design_deriv(x)? * &self.z_map)
    }

    /// Number of penalized random effects, M + 2.
    pub fn n_random(&self) -> usize {
        self.z_map.ncols()
    }
}

/// Degrees of freedom `trace{ B (B' W B + lambda Omega)^-1 B' W }`, computed
/// through the generalized eigenvalues of (Omega, B'WB) for stability at
/// extreme lambda: DF = sum_m 1 / (1 + lambda mu_m).
pub fn df_lambda(
    design: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    lambda: f64,
    weight: Option<&DMatrix<f64>>,
) -> Result<f64, SplineError> {
    if !(lambda > 0.0) {
        return Err(SplineError::BadLambda(lambda));
    }
    let gram = match weight {
        Some(w) => design.transpose() * w * design,
        None => design.transpose() * design,
    };
    let chol = Cholesky::new(gram).ok_or(SplineError::SingularSystem)?;
    // C = L^-1 Omega L^-T
    let l = chol.l();
    let li_omega = l
        .clone()
        .solve_lower_triangular(omega)
        .ok_or(SplineError::SingularSystem)?;
    let c = l
        .solve_lower_triangular(&li_omega.transpose())
        .ok_or(SplineError::SingularSystem)?;
    let c_sym = 0.5 * (&c + c.transpose());
    let eig = SymmetricEigen::new(c_sym);
    let mut df = 0.0;
    for mu in eig.eigenvalues.iter() {
        let mu = mu.max(0.0);
        df += 1.0 / (1.0 + lambda * mu);
    }
    Ok(df)
}
