//! Tensor wavelet transform of surface functions, robust spike filtering,
//! joint compression, energy weights, and the retained-basis system used by
//! the per-coefficient models.

use crate::grid::{FunctionalDataset, SurfaceGrid};
use crate::wavelet::{dwt1d, idwt1d, Boundary, DecompPlan, FilterKind, WaveletError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error("matrix is {rows} x {cols}, grid expects {grid_rows} x {grid_cols}")]
    DimensionMismatch { rows: usize, cols: usize, grid_rows: usize, grid_cols: usize },
    #[error("coefficient matrix has no nonzero entries")]
    AllZero,
    #[error("negative variance {0} at coefficient {1}")]
    NegativeVariance(f64, usize),
    #[error("compression threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("energy threshold {threshold} infeasible: function {worst_id} retains only {worst_fraction:.6} with all available coefficients")]
    InfeasibleThreshold { threshold: f64, worst_id: String, worst_fraction: f64 },
    #[error("retained index {0} out of range (full basis size {1})")]
    RetainedIndexOutOfRange(usize, usize),
    #[error("principal components need at least 2 functions, got {0}")]
    TooFewFunctions(usize),
    #[error("degenerate coefficient matrix (rank 0)")]
    DegenerateInput,
    #[error("coefficient vector length {got}, expected {expected}")]
    CoefficientLength { got: usize, expected: usize },
}

/// Tensor wavelet configuration: one filter, per-axis boundary handling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletSpec {
    pub filter: FilterKind,
    pub levels: usize,
    pub boundary_meridional: Boundary,
    pub boundary_circumferential: Boundary,
}

impl Default for WaveletSpec {
    fn default() -> Self {
        WaveletSpec {
            filter: FilterKind::Db3,
            levels: 5,
            boundary_meridional: Boundary::Reflection,
            boundary_circumferential: Boundary::Periodic,
        }
    }
}

/// Scale pair and within-band location of one tensor coefficient. Scale 0 is
/// the approximation (father) band; scales 1..=levels index detail bands from
/// coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub scale_meridional: u8,
    pub scale_circumferential: u8,
    pub loc_meridional: u32,
    pub loc_circumferential: u32,
}

/// Fast separable analysis/synthesis between surface matrices and flat tensor
/// coefficient vectors. Coefficients are laid out column-stacked: flat index
/// `k = k1 + K1 * k2` with `k1` the meridional and `k2` the circumferential
/// 1D coefficient index.
#[derive(Debug, Clone)]
pub struct TensorTransform {
    pub grid: SurfaceGrid,
    pub spec: WaveletSpec,
    plan_meridional: DecompPlan,
    plan_circumferential: DecompPlan,
    index_map: Vec<TensorIndex>,
}

impl TensorTransform {
    pub fn new(grid: SurfaceGrid, spec: WaveletSpec) -> Result<Self, BasisError> {
        let plan_meridional =
            DecompPlan::new(grid.n_meridional, spec.filter, spec.levels, spec.boundary_meridional)?;
        let plan_circumferential = DecompPlan::new(
            grid.n_circumferential,
            spec.filter,
            spec.levels,
            spec.boundary_circumferential,
        )?;
        let s1 = plan_meridional.scales();
        let l1 = plan_meridional.locations();
        let s2 = plan_circumferential.scales();
        let l2 = plan_circumferential.locations();
        let k1 = plan_meridional.total_len();
        let k2 = plan_circumferential.total_len();
        let mut index_map = Vec::with_capacity(k1 * k2);
        for j2 in 0..k2 {
            for j1 in 0..k1 {
                index_map.push(TensorIndex {
                    scale_meridional: s1[j1] as u8,
                    scale_circumferential: s2[j2] as u8,
                    loc_meridional: l1[j1] as u32,
                    loc_circumferential: l2[j2] as u32,
                });
            }
        }
        Ok(TensorTransform { grid, spec, plan_meridional, plan_circumferential, index_map })
    }

    pub fn k1(&self) -> usize {
        self.plan_meridional.total_len()
    }

    pub fn k2(&self) -> usize {
        self.plan_circumferential.total_len()
    }

    /// Total coefficient count of the full tensor basis.
    pub fn k_full(&self) -> usize {
        self.k1() * self.k2()
    }

    pub fn index_map(&self) -> &[TensorIndex] {
        &self.index_map
    }

    /// Forward transform: meridional 1D transforms down each column, then
    /// circumferential transforms along each resulting row.
    pub fn analyze(&self, values: &DMatrix<f64>) -> Result<DVector<f64>, BasisError> {
        let (t1, t2) = (self.grid.n_meridional, self.grid.n_circumferential);
        if values.nrows() != t1 || values.ncols() != t2 {
            return Err(BasisError::DimensionMismatch {
                rows: values.nrows(),
                cols: values.ncols(),
                grid_rows: t1,
                grid_cols: t2,
            });
        }
        let k1 = self.k1();
        let k2 = self.k2();
        let mut mid = DMatrix::zeros(k1, t2);
        let mut col = vec![0.0; t1];
        for c in 0..t2 {
            for r in 0..t1 {
                col[r] = values[(r, c)];
            }
            let coeffs = dwt1d(&col, &self.plan_meridional)?;
            for (r, v) in coeffs.iter().enumerate() {
                mid[(r, c)] = *v;
            }
        }
        let mut out = DMatrix::zeros(k1, k2);
        let mut row = vec![0.0; t2];
        for r in 0..k1 {
            for c in 0..t2 {
                row[c] = mid[(r, c)];
            }
            let coeffs = dwt1d(&row, &self.plan_circumferential)?;
            for (c, v) in coeffs.iter().enumerate() {
                out[(r, c)] = *v;
            }
        }
        // column-stacked flat layout
        let mut flat = DVector::zeros(k1 * k2);
        for c in 0..k2 {
            for r in 0..k1 {
                flat[r + k1 * c] = out[(r, c)];
            }
        }
        Ok(flat)
    }

    /// Inverse transform of a full flat coefficient vector back to a surface.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<DMatrix<f64>, BasisError> {
        let k1 = self.k1();
        let k2 = self.k2();
        if coeffs.len() != k1 * k2 {
            return Err(BasisError::CoefficientLength { got: coeffs.len(), expected: k1 * k2 });
        }
        let (t1, t2) = (self.grid.n_meridional, self.grid.n_circumferential);
        let mut mid = DMatrix::zeros(k1, t2);
        let mut row = vec![0.0; k2];
        for r in 0..k1 {
            for c in 0..k2 {
                row[c] = coeffs[r + k1 * c];
            }
            let sig = idwt1d(&row, &self.plan_circumferential)?;
            for (c, v) in sig.iter().enumerate() {
                mid[(r, c)] = *v;
            }
        }
        let mut out = DMatrix::zeros(t1, t2);
        let mut col = vec![0.0; k1];
        for c in 0..t2 {
            for r in 0..k1 {
                col[r] = mid[(r, c)];
            }
            let sig = idwt1d(&col, &self.plan_meridional)?;
            for (r, v) in sig.iter().enumerate() {
                out[(r, c)] = *v;
            }
        }
        Ok(out)
    }

    /// Transform every function of a dataset; rows of the result are flat
    /// coefficient vectors.
    pub fn analyze_dataset(&self, ds: &FunctionalDataset) -> Result<DMatrix<f64>, BasisError> {
        let k = self.k_full();
        let mut out = DMatrix::zeros(ds.n(), k);
        for (i, f) in ds.functions.iter().enumerate() {
            let coeffs = self.analyze(&f.values)?;
            out.row_mut(i).copy_from(&coeffs.transpose());
        }
        Ok(out)
    }
}

/// Indices of coefficients surviving the robust artifact filter: coefficient
/// `k` is dropped iff `mean_i |Y*_ik| > ratio * median_i |Y*_ik|`.
/// Returns (retained, dropped).
pub fn spike_filter(coeffs: &DMatrix<f64>, ratio_threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let n = coeffs.nrows();
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    let mut abs = vec![0.0f64; n];
    for k in 0..coeffs.ncols() {
        for i in 0..n {
            abs[i] = coeffs[(i, k)].abs();
        }
        let mean = abs.iter().sum::<f64>() / n as f64;
        let median = median_of(&mut abs.clone());
        if mean > ratio_threshold * median {
            dropped.push(k);
        } else {
            retained.push(k);
        }
    }
    if retained.is_empty() {
        log::warn!("spike filter removed every coefficient (ratio threshold {ratio_threshold})");
    }
    (retained, dropped)
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Result of joint energy compression.
#[derive(Debug, Clone)]
pub struct Compression {
    /// Retained coefficient indices (into the columns of the input matrix),
    /// ascending.
    pub retained: Vec<usize>,
    /// Per-function retained energy fraction.
    pub per_function_fraction: Vec<f64>,
    /// Full basis size divided by retained count, measured against the
    /// complete tensor basis when supplied via `full_k`.
    pub compression_ratio: f64,
}

/// Smallest coefficient set, greedy by total energy with per-function repair,
/// such that every function retains at least `energy_threshold` of its own
/// coefficient energy. `function_ids` are used in error reports; `full_k` is
/// the size of the complete basis for the compression-ratio report.
pub fn compress(
    coeffs: &DMatrix<f64>,
    energy_threshold: f64,
    function_ids: &[String],
    full_k: usize,
) -> Result<Compression, BasisError> {
    if !(energy_threshold > 0.0 && energy_threshold <= 1.0) {
        return Err(BasisError::BadThreshold(energy_threshold));
    }
    let n = coeffs.nrows();
    let k = coeffs.ncols();
    let totals: Vec<f64> = (0..n).map(|i| coeffs.row(i).iter().map(|v| v * v).sum()).collect();
    let col_energy: Vec<f64> = (0..k).map(|j| coeffs.column(j).iter().map(|v| v * v).sum()).collect();
    let grand_total: f64 = col_energy.iter().sum();
    if grand_total == 0.0 {
        return Err(BasisError::AllZero);
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| col_energy[b].partial_cmp(&col_energy[a]).unwrap().then(a.cmp(&b)));

    let mut in_set = vec![false; k];
    let mut retained_energy = vec![0.0f64; n];
    let mut cursor = 0usize;
    let fraction = |re: &[f64], i: usize| -> f64 {
        if totals[i] == 0.0 {
            1.0
        } else {
            re[i] / totals[i]
        }
    };
    let add = |j: usize, in_set: &mut [bool], retained_energy: &mut [f64]| {
        in_set[j] = true;
        for i in 0..n {
            let v = coeffs[(i, j)];
            retained_energy[i] += v * v;
        }
    };

    // Fraction recomputed in fixed index order, skipping non-retained terms;
    // dropping exact zeros leaves the float accumulation unchanged, so a
    // threshold of 1.0 is attained exactly once all nonzero columns are in.
    let exact_fractions = |in_set: &[bool]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                if totals[i] == 0.0 {
                    return 1.0;
                }
                let mut kept = 0.0;
                let mut total = 0.0;
                for j in 0..k {
                    let e = coeffs[(i, j)] * coeffs[(i, j)];
                    total += e;
                    if in_set[j] {
                        kept += e;
                    }
                }
                kept / total
            })
            .collect()
    };

    if energy_threshold >= 1.0 {
        for j in 0..k {
            if col_energy[j] > 0.0 {
                in_set[j] = true;
            }
        }
    } else {
        // Phase 1: global greedy until the joint energy constraint holds.
        let mut joint = 0.0;
        while cursor < k && joint / grand_total < energy_threshold {
            let j = order[cursor];
            cursor += 1;
            if col_energy[j] == 0.0 {
                break;
            }
            joint += col_energy[j];
            add(j, &mut in_set, &mut retained_energy);
        }

        // Phase 2: repair per-function deficits, worst function first, adding
        // its largest missing coefficient. Running sums steer the loop; the
        // exact recomputation below settles borderline cases.
        loop {
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let fr = fraction(&retained_energy, i);
                if fr < energy_threshold {
                    match worst {
                        Some((_, w)) if fr >= w => {}
                        _ => worst = Some((i, fr)),
                    }
                }
            }
            let Some((wi, _)) = worst else { break };
            if !add_largest_missing(coeffs, wi, &mut in_set, &mut retained_energy) {
                let fr = fraction(&retained_energy, wi);
                return Err(BasisError::InfeasibleThreshold {
                    threshold: energy_threshold,
                    worst_id: function_ids
                        .get(wi)
                        .cloned()
                        .unwrap_or_else(|| format!("function {wi}")),
                    worst_fraction: fr,
                });
            }
        }
    }

    // Phase 3: verify against exactly-recomputed fractions and top up any
    // rounding stragglers.
    let mut per_function_fraction = exact_fractions(&in_set);
    loop {
        let mut worst: Option<usize> = None;
        for i in 0..n {
            if per_function_fraction[i] < energy_threshold
                && worst.map_or(true, |w| per_function_fraction[i] < per_function_fraction[w])
            {
                worst = Some(i);
            }
        }
        let Some(wi) = worst else { break };
        if !add_largest_missing(coeffs, wi, &mut in_set, &mut retained_energy) {
            return Err(BasisError::InfeasibleThreshold {
                threshold: energy_threshold,
                worst_id: function_ids.get(wi).cloned().unwrap_or_else(|| format!("function {wi}")),
                worst_fraction: per_function_fraction[wi],
            });
        }
        per_function_fraction = exact_fractions(&in_set);
    }

    let retained: Vec<usize> = (0..k).filter(|&j| in_set[j]).collect();
    let compression_ratio = full_k as f64 / retained.len().max(1) as f64;
    Ok(Compression { retained, per_function_fraction, compression_ratio })
}

/// Add the largest not-yet-retained coefficient (by that function's energy);
/// false if none remains.
fn add_largest_missing(
    coeffs: &DMatrix<f64>,
    func: usize,
    in_set: &mut [bool],
    retained_energy: &mut [f64],
) -> bool {
    let k = coeffs.ncols();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..k {
        if in_set[j] {
            continue;
        }
        let e = coeffs[(func, j)] * coeffs[(func, j)];
        if e > 0.0 && best.map_or(true, |(_, be)| e > be) {
            best = Some((j, e));
        }
    }
    match best {
        Some((j, _)) => {
            in_set[j] = true;
            for i in 0..coeffs.nrows() {
                let v = coeffs[(i, j)];
                retained_energy[i] += v * v;
            }
            true
        }
        None => false,
    }
}

/// Relative energy weights `w_k = sum_i Y*_ik^2 / sum_ik Y*_ik^2`.
pub fn energy_weights(coeffs: &DMatrix<f64>) -> Result<Vec<f64>, BasisError> {
    let col_energy: Vec<f64> =
        (0..coeffs.ncols()).map(|j| coeffs.column(j).iter().map(|v| v * v).sum()).collect();
    let total: f64 = col_energy.iter().sum();
    if total == 0.0 {
        return Err(BasisError::AllZero);
    }
    Ok(col_energy.into_iter().map(|e| e / total).collect())
}

/// Which family of basis functions a `BasisSystem` holds.
#[derive(Debug, Clone)]
pub enum BasisKind {
    /// Retained tensor wavelet coefficients.
    Wavelet,
    /// Principal components of the retained wavelet coefficients; `loadings`
    /// maps retained-wavelet space to component space (columns orthonormal).
    PrincipalComponents { loadings: DMatrix<f64> },
}

/// A retained basis: synthesis rows on the grid, fast analysis through the
/// filter bank restricted to the retained set, scale-pair index map, and
/// energy weights.
pub struct BasisSystem {
    pub grid: SurfaceGrid,
    pub spec: WaveletSpec,
    pub kind: BasisKind,
    /// Indices into the full tensor coefficient space that survive filtering
    /// and compression.
    pub retained: Vec<usize>,
    /// Scale pairs of the retained wavelet coefficients (one per retained
    /// index; for PC bases this describes the underlying wavelet set).
    pub index_map: Vec<TensorIndex>,
    /// Energy weights per basis column, summing to one.
    pub weights: Vec<f64>,
    /// K x T matrix of basis functions evaluated on the grid (row k is
    /// psi_k flattened row-major).
    synthesis: DMatrix<f64>,
    transform: TensorTransform,
}

impl BasisSystem {
    /// Build the retained-wavelet basis system: synthesis rows are inverse
    /// transforms of unit coefficient vectors; analysis runs the fast
    /// filter-bank transform and keeps the retained coefficients.
    pub fn from_wavelet(
        transform: &TensorTransform,
        retained: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Self, BasisError> {
        let k_full = transform.k_full();
        for &j in &retained {
            if j >= k_full {
                return Err(BasisError::RetainedIndexOutOfRange(j, k_full));
            }
        }
        assert_eq!(weights.len(), retained.len(), "one weight per retained coefficient");
        let t = transform.grid.total();
        let kr = retained.len();
        let mut synthesis = DMatrix::zeros(kr, t);
        let mut unit = vec![0.0; k_full];
        for (row, &j) in retained.iter().enumerate() {
            unit[j] = 1.0;
            let surf = transform.synthesize(&unit)?;
            unit[j] = 0.0;
            for r in 0..surf.nrows() {
                for c in 0..surf.ncols() {
                    synthesis[(row, transform.grid.flat(r, c))] = surf[(r, c)];
                }
            }
        }
        let index_map: Vec<TensorIndex> =
            retained.iter().map(|&j| transform.index_map()[j]).collect();
        Ok(BasisSystem {
            grid: transform.grid.clone(),
            spec: transform.spec,
            kind: BasisKind::Wavelet,
            retained,
            index_map,
            weights,
            synthesis,
            transform: transform.clone(),
        })
    }

    pub fn k(&self) -> usize {
        self.synthesis.nrows()
    }

    /// Basis functions evaluated on the grid; row k is psi_k, row-major.
    pub fn synthesis_rows(&self) -> &DMatrix<f64> {
        &self.synthesis
    }

    /// Coefficients of a flattened surface via the fast transform restricted
    /// to the retained set (principal-component bases additionally project
    /// through their loadings).
    pub fn analyze_flat(&self, values: &[f64]) -> Result<DVector<f64>, BasisError> {
        if values.len() != self.grid.total() {
            return Err(BasisError::CoefficientLength {
                got: values.len(),
                expected: self.grid.total(),
            });
        }
        let mut m = DMatrix::zeros(self.grid.n_meridional, self.grid.n_circumferential);
        for r in 0..self.grid.n_meridional {
            for c in 0..self.grid.n_circumferential {
                m[(r, c)] = values[self.grid.flat(r, c)];
            }
        }
        let full = self.transform.analyze(&m)?;
        let sub = DVector::from_fn(self.retained.len(), |i, _| full[self.retained[i]]);
        match &self.kind {
            BasisKind::Wavelet => Ok(sub),
            BasisKind::PrincipalComponents { loadings } => Ok(loadings.transpose() * sub),
        }
    }

    /// Reconstruct a flattened surface from retained coefficients.
    pub fn synthesize_flat(&self, coeffs: &[f64]) -> Result<Vec<f64>, BasisError> {
        if coeffs.len() != self.k() {
            return Err(BasisError::CoefficientLength { got: coeffs.len(), expected: self.k() });
        }
        let c = DVector::from_column_slice(coeffs);
        let y = self.synthesis.transpose() * c;
        Ok(y.as_slice().to_vec())
    }

    /// Coefficient matrix (N x K) for a dataset via the analysis operator.
    pub fn analyze_dataset(&self, ds: &FunctionalDataset) -> Result<DMatrix<f64>, BasisError> {
        let mut out = DMatrix::zeros(ds.n(), self.k());
        for i in 0..ds.n() {
            let flat = ds.flat_values(i);
            let coeffs = self.analyze_flat(&flat)?;
            out.row_mut(i).copy_from(&coeffs.transpose());
        }
        Ok(out)
    }

    /// Induced covariance over the requested grid locations:
    /// `S[a, b] = sum_k v_k psi_k(t_a) psi_k(t_b)`.
    pub fn induced_covariance(
        &self,
        variances: &[f64],
        locations: &[usize],
    ) -> Result<DMatrix<f64>, BasisError> {
        if variances.len() != self.k() {
            return Err(BasisError::CoefficientLength { got: variances.len(), expected: self.k() });
        }
        for (k, &v) in variances.iter().enumerate() {
            if v < 0.0 {
                return Err(BasisError::NegativeVariance(v, k));
            }
        }
        let l = locations.len();
        let mut sub = DMatrix::zeros(self.k(), l);
        for (col, &t) in locations.iter().enumerate() {
            for k in 0..self.k() {
                sub[(k, col)] = self.synthesis[(k, t)];
            }
        }
        let mut out = DMatrix::zeros(l, l);
        for a in 0..l {
            for b in a..l {
                let mut s = 0.0;
                for k in 0..self.k() {
                    s += variances[k] * sub[(k, a)] * sub[(k, b)];
                }
                out[(a, b)] = s;
                out[(b, a)] = s;
            }
        }
        Ok(out)
    }

    /// Variance surface `sum_k v_k psi_k(t)^2` at every grid point.
    pub fn induced_variance_surface(&self, variances: &[f64]) -> Result<Vec<f64>, BasisError> {
        if variances.len() != self.k() {
            return Err(BasisError::CoefficientLength { got: variances.len(), expected: self.k() });
        }
        let t = self.grid.total();
        let mut out = vec![0.0; t];
        for k in 0..self.k() {
            let v = variances[k];
            if v == 0.0 {
                continue;
            }
            for (ti, o) in out.iter_mut().enumerate() {
                let p = self.synthesis[(k, ti)];
                *o += v * p * p;
            }
        }
        Ok(out)
    }

    /// Principal-component basis over this system's coefficient space:
    /// right singular vectors of the (uncentered) coefficient matrix, keeping
    /// leading components until their squared singular values explain at
    /// least `scree_threshold` of the total.
    pub fn pc_basis(
        &self,
        coeffs: &DMatrix<f64>,
        scree_threshold: f64,
    ) -> Result<(BasisSystem, DMatrix<f64>), BasisError> {
        if coeffs.nrows() < 2 {
            return Err(BasisError::TooFewFunctions(coeffs.nrows()));
        }
        if coeffs.ncols() != self.k() {
            return Err(BasisError::CoefficientLength { got: coeffs.ncols(), expected: self.k() });
        }
        let svd = coeffs.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^t");
        let sv = &svd.singular_values;
        let total: f64 = sv.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return Err(BasisError::DegenerateInput);
        }
        let mut keep = 0usize;
        let mut acc = 0.0;
        for s in sv.iter() {
            acc += s * s;
            keep += 1;
            if acc / total >= scree_threshold {
                break;
            }
        }
        // drop numerically null trailing components
        while keep > 1 && sv[keep - 1] <= 1e-12 * sv[0] {
            keep -= 1;
        }
        let loadings = v_t.rows(0, keep).transpose(); // K x keep, orthonormal columns
        let scores = coeffs * &loadings; // N x keep
        let weights = energy_weights(&scores)?;
        let system = self.with_loadings(loadings, weights)?;
        Ok((system, scores))
    }

    /// Principal-component basis from explicit loadings over this system's
    /// coefficient space (used when reloading a serialized basis).
    pub fn with_loadings(
        &self,
        loadings: DMatrix<f64>,
        weights: Vec<f64>,
    ) -> Result<BasisSystem, BasisError> {
        if loadings.nrows() != self.k() {
            return Err(BasisError::CoefficientLength {
                got: loadings.nrows(),
                expected: self.k(),
            });
        }
        assert_eq!(weights.len(), loadings.ncols(), "one weight per component");
        let pc_synthesis = loadings.transpose() * &self.synthesis; // keep x T
        Ok(BasisSystem {
            grid: self.grid.clone(),
            spec: self.spec,
            kind: BasisKind::PrincipalComponents { loadings },
            retained: self.retained.clone(),
            index_map: self.index_map.clone(),
            weights,
            synthesis: pc_synthesis,
            transform: self.transform.clone(),
        })
    }
}

/// Correlation matrix from a covariance matrix; zero-variance rows flagged by
/// returning 0 correlation off-diagonal and 1 on the diagonal.
pub fn correlation_from_covariance(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let mut out = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            if a == b {
                out[(a, b)] = 1.0;
            } else {
                let d = (cov[(a, a)] * cov[(b, b)]).sqrt();
                out[(a, b)] = if d > 0.0 { cov[(a, b)] / d } else { 0.0 };
            }
        }
    }
    out
}

/// Per-function relative L2 reconstruction error of a dataset through a
/// retained basis; the near-lossless verification of Eq a basis must satisfy.
pub fn reconstruction_errors(
    ds: &FunctionalDataset,
    basis: &BasisSystem,
) -> Result<Vec<f64>, BasisError> {
    let mut out = Vec::with_capacity(ds.n());
    for i in 0..ds.n() {
        let flat = ds.flat_values(i);
        let coeffs = basis.analyze_flat(&flat)?;
        let back = basis.synthesize_flat(coeffs.as_slice())?;
        let num: f64 = flat.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = flat.iter().map(|a| a * a).sum();
        out.push(if den > 0.0 { (num / den).sqrt() } else { 0.0 });
    }
    Ok(out)
}
