//! Per-basis-coefficient Bayesian sampler on the marginalized model: all
//! random effects integrated out, spike-slab Gibbs updates for fixed effects,
//! component-wise truncated-normal Metropolis-Hastings for variance
//! components, and post-hoc conjugate draws of the spline random effects.

pub mod shrinkage;
pub mod store;

use crate::design::{DesignBundle, ZBlockKind};
use crate::diagnostics::diagnose_chain;
use crate::lmm::LmmFit;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use thiserror::Error;

pub use shrinkage::{empirical_bayes, regularization_sets, ShrinkageHyper};

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("chain for coefficient {k}: {msg} (sweep {sweep})")]
    ChainFailure { k: usize, sweep: usize, msg: String },
    #[error("starting variance components must be positive after flooring")]
    BadStart,
    #[error("design has no observations")]
    EmptyDesign,
    #[error("thin must divide n_keep and be >= 1")]
    BadThinning,
}

/// Chain length and behavior configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_burn: usize,
    pub n_keep: usize,
    pub thin: usize,
    pub seed: u64,
    /// Disable the data likelihood everywhere; the chain then samples from
    /// the prior (a correctness harness, not a modeling mode).
    pub likelihood_off: bool,
    /// Also redraw spline random effects within each sweep instead of only
    /// post hoc on kept draws.
    pub spline_within_sweep: bool,
    /// Consecutive-rejection count that triggers a stall warning.
    pub stall_limit: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_burn: 5000,
            n_keep: 10_000,
            thin: 10,
            seed: 0,
            likelihood_off: false,
            spline_within_sweep: false,
            stall_limit: 500,
        }
    }
}

impl ChainConfig {
    pub fn kept_draws(&self) -> usize {
        self.n_keep / self.thin
    }
}

/// Inverse-gamma prior for one variance component, parameterized so the mode
/// `b / (a + 1)` sits at the starting value with prior weight of two
/// observations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGammaPrior {
    pub fn from_start(start: f64, floor: f64) -> Self {
        InverseGammaPrior { shape: 2.0, scale: 3.0 * start.max(floor) }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln()
            - statrs::function::gamma::ln_gamma(self.shape)
            - (self.shape + 1.0) * x.ln()
            - self.scale / x
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        // X ~ InvGamma(a, b)  <=>  1/X ~ Gamma(a, rate b)
        1.0 - statrs::function::gamma::gamma_lr(self.shape, self.scale / x)
    }

    pub fn mode(&self) -> f64 {
        self.scale / (self.shape + 1.0)
    }
}

/// Posterior draws for one basis coefficient.
#[derive(Debug, Clone)]
pub struct CoefficientPosterior {
    pub k: usize,
    /// Kept draws of the fixed effects, G x A, with exact zeros.
    pub fixed: DMatrix<f64>,
    /// Inclusion indicators, G x A.
    pub gamma: DMatrix<u8>,
    /// Variance components in design-block order plus the residual last,
    /// G x (H + 1).
    pub vc: DMatrix<f64>,
    /// Spline random-effect draws per spline block, each G x m.
    pub spline: Vec<DMatrix<f64>>,
    /// Post-burn-in acceptance rate per variance component.
    pub accept_rate: Vec<f64>,
    pub param_names: Vec<String>,
    pub geweke_z: Vec<f64>,
    pub geweke_p: Vec<f64>,
    pub ess: Vec<f64>,
}

impl CoefficientPosterior {
    pub fn n_draws(&self) -> usize {
        self.fixed.nrows()
    }
}

/// Preprocessed design for fast repeated factorizations: grouped blocks form
/// small diagonal blocks over row components, spline blocks a global low-rank
/// correction.
pub struct McmcDesign {
    pub x: DMatrix<f64>,
    n: usize,
    /// Row sets of the block-diagonal components.
    comps: Vec<Vec<usize>>,
    /// Per grouped z-block (design order): per-row column value and group id.
    grouped: Vec<GroupedBlock>,
    /// Concatenated spline columns.
    lowrank: DMatrix<f64>,
    /// Column ranges of each spline block within `lowrank`.
    lowrank_ranges: Vec<(usize, usize)>,
    /// For variance component h (z-block order): Class::Grouped(i) or
    /// Class::LowRank(i).
    classes: Vec<Class>,
    pub vc_names: Vec<String>,
}

struct GroupedBlock {
    value: Vec<f64>,
    group: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Class {
    Grouped(usize),
    LowRank(usize),
}

impl McmcDesign {
    pub fn new(bundle: &DesignBundle) -> Result<Self, McmcError> {
        let n = bundle.n();
        if n == 0 {
            return Err(McmcError::EmptyDesign);
        }
        let mut grouped = Vec::new();
        let mut lowrank_cols: Vec<DMatrix<f64>> = Vec::new();
        let mut lowrank_ranges = Vec::new();
        let mut classes = Vec::new();
        let mut vc_names = Vec::new();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut root = i;
            while parent[root] != root {
                root = parent[root];
            }
            let mut cur = i;
            while parent[cur] != root {
                let next = parent[cur];
                parent[cur] = root;
                cur = next;
            }
            root
        }
        let mut off = 0usize;
        for z in &bundle.z_blocks {
            match &z.kind {
                ZBlockKind::Grouped { of_row, .. } => {
                    let of_row = of_row.clone();
                    let value: Vec<f64> =
                        (0..n).map(|i| z.columns[(i, of_row[i])]).collect();
                    // link rows sharing a group
                    let mut first_of_group: std::collections::BTreeMap<usize, usize> =
                        std::collections::BTreeMap::new();
                    for i in 0..n {
                        if let Some(&j) = first_of_group.get(&of_row[i]) {
                            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                            if a != b {
                                parent[a] = b;
                            }
                        } else {
                            first_of_group.insert(of_row[i], i);
                        }
                    }
                    classes.push(Class::Grouped(grouped.len()));
                    grouped.push(GroupedBlock { value, group: of_row.clone() });
                }
                ZBlockKind::Spline { .. } => {
                    classes.push(Class::LowRank(lowrank_ranges.len()));
                    lowrank_ranges.push((off, z.columns.ncols()));
                    off += z.columns.ncols();
                    lowrank_cols.push(z.columns.clone());
                }
            }
            vc_names.push(format!("q[{}]", z.name));
        }
        vc_names.push("s".to_string());
        let mut lowrank = DMatrix::zeros(n, off);
        {
            let mut c = 0;
            for cols in &lowrank_cols {
                lowrank.columns_mut(c, cols.ncols()).copy_from(cols);
                c += cols.ncols();
            }
        }
        let mut comp_map: std::collections::BTreeMap<usize, Vec<usize>> =
            std::collections::BTreeMap::new();
        for i in 0..n {
            let root = find(&mut parent, i);
            comp_map.entry(root).or_default().push(i);
        }
        let comps: Vec<Vec<usize>> = comp_map.into_values().collect();
        Ok(McmcDesign {
            x: bundle.x.clone(),
            n,
            comps,
            grouped,
            lowrank,
            lowrank_ranges,
            classes,
            vc_names,
        })
    }

    pub fn n_vc(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Factor `Sigma = s I + sum_grouped q_h (unit blocks) + sum_spline q_t Z_t Z_t'`.
    pub fn factor(&self, vc: &[f64], s: f64) -> Option<SigmaFactor<'_>> {
        debug_assert_eq!(vc.len(), self.classes.len());
        if !(s > 0.0) || vc.iter().any(|&q| q < 0.0) {
            return None;
        }
        let mut logdet = 0.0;
        let mut comp_chols = Vec::with_capacity(self.comps.len());
        for rows in &self.comps {
            let nc = rows.len();
            let mut block = DMatrix::zeros(nc, nc);
            for a in 0..nc {
                block[(a, a)] = s;
            }
            for (h, class) in self.classes.iter().enumerate() {
                let Class::Grouped(gi) = *class else { continue };
                let q = vc[h];
                if q == 0.0 {
                    continue;
                }
                let g = &self.grouped[gi];
                for a in 0..nc {
                    let (ia, va) = (rows[a], g.value[rows[a]]);
                    if va == 0.0 {
                        continue;
                    }
                    for b in a..nc {
                        let ib = rows[b];
                        if g.group[ia] == g.group[ib] {
                            let v = q * va * g.value[ib];
                            block[(a, b)] += v;
                            if a != b {
                                block[(b, a)] += v;
                            }
                        }
                    }
                }
            }
            let chol = Cholesky::new(block)?;
            for i in 0..nc {
                logdet += 2.0 * chol.l_dirty()[(i, i)].ln();
            }
            comp_chols.push(chol);
        }
        // scaled spline columns with q > 0
        let active_cols: Vec<(usize, f64)> = self
            .classes
            .iter()
            .enumerate()
            .filter_map(|(h, c)| match c {
                Class::LowRank(t) if vc[h] > 0.0 => Some((*t, vc[h])),
                _ => None,
            })
            .flat_map(|(t, q)| {
                let (off, len) = self.lowrank_ranges[t];
                (off..off + len).map(move |c| (c, q.sqrt()))
            })
            .collect();
        let (dinv_z, m_chol, z_scaled) = if active_cols.is_empty() {
            (None, None, None)
        } else {
            let r = active_cols.len();
            let mut z_scaled = DMatrix::zeros(self.n, r);
            for (j, &(c, sq)) in active_cols.iter().enumerate() {
                for i in 0..self.n {
                    z_scaled[(i, j)] = self.lowrank[(i, c)] * sq;
                }
            }
            let dinv_z = self.solve_diag_mat(&comp_chols, &z_scaled);
            let mut m = z_scaled.transpose() * &dinv_z;
            for i in 0..r {
                m[(i, i)] += 1.0;
            }
            let mc = Cholesky::new(m)?;
            for i in 0..r {
                logdet += 2.0 * mc.l_dirty()[(i, i)].ln();
            }
            (Some(dinv_z), Some(mc), Some(z_scaled))
        };
        Some(SigmaFactor { design: self, comp_chols, dinv_z, m_chol, z_scaled, logdet })
    }

    fn solve_diag_mat(&self, comp_chols: &[Cholesky<f64, Dyn>], b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (rows, chol) in self.comps.iter().zip(comp_chols) {
            let nc = rows.len();
            let mut sub = DMatrix::zeros(nc, b.ncols());
            for (a, &i) in rows.iter().enumerate() {
                for j in 0..b.ncols() {
                    sub[(a, j)] = b[(i, j)];
                }
            }
            let solved = chol.solve(&sub);
            for (a, &i) in rows.iter().enumerate() {
                for j in 0..b.ncols() {
                    out[(i, j)] = solved[(a, j)];
                }
            }
        }
        out
    }
}

/// A factored marginal covariance.
pub struct SigmaFactor<'a> {
    design: &'a McmcDesign,
    comp_chols: Vec<Cholesky<f64, Dyn>>,
    dinv_z: Option<DMatrix<f64>>,
    m_chol: Option<Cholesky<f64, Dyn>>,
    z_scaled: Option<DMatrix<f64>>,
    logdet: f64,
}

impl SigmaFactor<'_> {
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = self.design.solve_diag_mat(&self.comp_chols, b);
        if let (Some(dinv_z), Some(m_chol), Some(z_scaled)) =
            (&self.dinv_z, &self.m_chol, &self.z_scaled)
        {
            let ztw = z_scaled.transpose() * &w;
            let corr = m_chol.solve(&ztw);
            w -= dinv_z * corr;
        }
        w
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        DVector::from_column_slice(self.solve_mat(&m).as_slice())
    }

    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve_vec(v))
    }

    /// Dense Sigma for oracle comparisons.
    pub fn dense_sigma(&self, vc: &[f64], s: f64) -> DMatrix<f64> {
        let d = self.design;
        let n = d.n;
        let mut sig = DMatrix::identity(n, n) * s;
        for (h, class) in d.classes.iter().enumerate() {
            match class {
                Class::Grouped(gi) => {
                    let g = &d.grouped[*gi];
                    for i in 0..n {
                        for j in 0..n {
                            if g.group[i] == g.group[j] {
                                sig[(i, j)] += vc[h] * g.value[i] * g.value[j];
                            }
                        }
                    }
                }
                Class::LowRank(t) => {
                    let (off, len) = d.lowrank_ranges[*t];
                    for c in off..off + len {
                        for i in 0..n {
                            for j in 0..n {
                                sig[(i, j)] += vc[h] * d.lowrank[(i, c)] * d.lowrank[(j, c)];
                            }
                        }
                    }
                }
            }
        }
        sig
    }
}

/// Everything a single-coefficient chain needs.
pub struct ChainInputs<'a> {
    pub k: usize,
    pub y: DVector<f64>,
    pub design: &'a McmcDesign,
    /// (pi, tau) per fixed effect for this coefficient.
    pub slab: Vec<(f64, f64)>,
    /// Starting values: variance components per z-block and residual.
    pub vc_start: Vec<f64>,
    pub s_start: f64,
    pub priors: Vec<InverseGammaPrior>,
}

/// Build chain inputs from a REML fit and shrinkage hyperparameters.
pub fn chain_inputs<'a>(
    k: usize,
    y: DVector<f64>,
    design: &'a McmcDesign,
    hyper: &ShrinkageHyper,
    start: &LmmFit,
) -> ChainInputs<'a> {
    let a_count = design.x.ncols();
    let slab: Vec<(f64, f64)> = (0..a_count).map(|a| hyper.params(a, k)).collect();
    let var_y = {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
    };
    let s_floor = (1e-10 * var_y).max(1e-300);
    let s_start = start.s_hat.max(s_floor);
    let vc_floor = 1e-8 * s_start;
    let vc_start: Vec<f64> = start.vc_hat.iter().map(|&q| q.max(vc_floor)).collect();
    let mut priors: Vec<InverseGammaPrior> =
        vc_start.iter().map(|&q| InverseGammaPrior::from_start(q, vc_floor)).collect();
    priors.push(InverseGammaPrior::from_start(s_start, s_floor));
    ChainInputs { k, y, design, slab, vc_start, s_start, priors }
}

struct VcSampler {
    scale: Vec<f64>,
    accepted: Vec<usize>,
    attempted: Vec<usize>,
    // burn-in adaptation bookkeeping
    window_accepted: Vec<usize>,
    window_attempted: Vec<usize>,
    consecutive_rejects: Vec<usize>,
    stall_limit: usize,
    stalled_warned: Vec<bool>,
}

impl VcSampler {
    fn new(scales: Vec<f64>, stall_limit: usize) -> Self {
        let h = scales.len();
        VcSampler {
            scale: scales,
            accepted: vec![0; h],
            attempted: vec![0; h],
            window_accepted: vec![0; h],
            window_attempted: vec![0; h],
            consecutive_rejects: vec![0; h],
            stall_limit,
            stalled_warned: vec![false; h],
        }
    }

    fn adapt_window(&mut self) {
        for h in 0..self.scale.len() {
            if self.window_attempted[h] >= 50 {
                let rate = self.window_accepted[h] as f64 / self.window_attempted[h] as f64;
                if rate < 0.25 {
                    self.scale[h] *= 0.5;
                } else if rate > 0.55 {
                    self.scale[h] *= 2.0;
                }
                self.window_accepted[h] = 0;
                self.window_attempted[h] = 0;
            }
        }
    }

    fn record(&mut self, h: usize, accepted: bool, in_burn: bool, k: usize) {
        if in_burn {
            self.window_attempted[h] += 1;
            if accepted {
                self.window_accepted[h] += 1;
            }
        } else {
            self.attempted[h] += 1;
            if accepted {
                self.accepted[h] += 1;
            }
        }
        if accepted {
            self.consecutive_rejects[h] = 0;
        } else {
            self.consecutive_rejects[h] += 1;
            if self.consecutive_rejects[h] >= self.stall_limit {
                if in_burn {
                    self.scale[h] *= 0.5;
                    log::warn!(
                        "chain k={k}: variance component {h} stalled for {} proposals; halving proposal scale",
                        self.stall_limit
                    );
                } else if !self.stalled_warned[h] {
                    log::warn!(
                        "chain k={k}: variance component {h} stalled for {} proposals after burn-in",
                        self.stall_limit
                    );
                    self.stalled_warned[h] = true;
                }
                self.consecutive_rejects[h] = 0;
            }
        }
    }

    fn rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .zip(&self.attempted)
            .map(|(&a, &t)| if t > 0 { a as f64 / t as f64 } else { 0.0 })
            .collect()
    }
}

/// Numeric curvature-based initial proposal scales: `1/sqrt(-d2 loglik/dvc2)`
/// at the starting values, with fallbacks to half the start.
fn initial_scales(inputs: &ChainInputs<'_>) -> Vec<f64> {
    let h_all = inputs.design.n_vc();
    let mut scales = Vec::with_capacity(h_all);
    let loglik = |vc: &[f64], s: f64| -> Option<f64> {
        let f = inputs.design.factor(vc, s)?;
        Some(-0.5 * (f.logdet() + f.quad_form(&inputs.y)))
    };
    let mut vc = inputs.vc_start.clone();
    let s = inputs.s_start;
    for h in 0..h_all {
        let (cur, fallback) = if h < vc.len() {
            (vc[h], 0.5 * vc[h].max(1e-12))
        } else {
            (s, 0.5 * s)
        };
        let d = 0.05 * cur.max(1e-12);
        let mut eval = |delta: f64| -> Option<f64> {
            if h < vc.len() {
                let old = vc[h];
                vc[h] = (cur + delta).max(1e-300);
                let r = loglik(&vc, s);
                vc[h] = old;
                r
            } else {
                loglik(&vc, (cur + delta).max(1e-300))
            }
        };
        let scale = match (eval(-d), eval(0.0), eval(d)) {
            (Some(fm), Some(f0), Some(fp)) => {
                let second = (fp - 2.0 * f0 + fm) / (d * d);
                if second < 0.0 {
                    (1.0 / (-second)).sqrt()
                } else {
                    fallback
                }
            }
            _ => fallback,
        };
        scales.push(scale.clamp(1e-12, 1e12));
    }
    scales
}

fn sample_truncated_normal(rng: &mut ChaCha12Rng, mean: f64, sd: f64) -> f64 {
    // inverse-CDF sampling on (0, inf)
    let normal = StatNormal::new(0.0, 1.0).unwrap();
    let lo = normal.cdf(-mean / sd);
    let u: f64 = rng.gen::<f64>() * (1.0 - lo) + lo;
    let u = u.clamp(1e-16, 1.0 - 1e-16);
    mean + sd * normal.inverse_cdf(u)
}

fn ln_phi(x: f64) -> f64 {
    let normal = StatNormal::new(0.0, 1.0).unwrap();
    normal.cdf(x).max(1e-300).ln()
}

/// Log acceptance-ratio correction for the zero-truncated Gaussian proposal:
/// `ln Phi(current/sd) - ln Phi(proposal/sd)`. Far from zero this vanishes
/// and the ratio reduces to the plain target ratio.
pub fn truncation_correction(current: f64, proposal: f64, sd: f64) -> f64 {
    ln_phi(current / sd) - ln_phi(proposal / sd)
}

/// Run the sampler for one basis coefficient.
pub fn run_chain(
    inputs: &ChainInputs<'_>,
    config: &ChainConfig,
) -> Result<CoefficientPosterior, McmcError> {
    if config.thin == 0 || config.n_keep % config.thin != 0 {
        return Err(McmcError::BadThinning);
    }
    let design = inputs.design;
    let n = design.n();
    let a_count = design.x.ncols();
    let h_blocks = design.classes.len();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let mut vc = inputs.vc_start.clone();
    let mut s = inputs.s_start;
    if vc.iter().any(|&q| !(q > 0.0)) || !(s > 0.0) {
        return Err(McmcError::BadStart);
    }
    let mut b = vec![0.0; a_count];
    let mut gamma = vec![true; a_count];
    let mut resid = inputs.y.clone();

    let fail = |sweep: usize, msg: &str| McmcError::ChainFailure {
        k: inputs.k,
        sweep,
        msg: format!("{msg}; state vc={vc:?} s={s}", vc = inputs.vc_start, s = inputs.s_start),
    };

    let mut factor = design.factor(&vc, s).ok_or_else(|| fail(0, "initial factorization"))?;
    let mut six = factor.solve_mat(&design.x);
    let mut xtsx_diag: Vec<f64> =
        (0..a_count).map(|a| design.x.column(a).dot(&six.column(a).into_owned())).collect();

    let mut sampler = VcSampler::new(initial_scales(inputs), config.stall_limit);

    let g_keep = config.kept_draws();
    let mut fixed_draws = DMatrix::zeros(g_keep, a_count);
    let mut gamma_draws = DMatrix::zeros(g_keep, a_count);
    let mut vc_draws = DMatrix::zeros(g_keep, h_blocks + 1);
    let mut kept = 0usize;

    let total_sweeps = config.n_burn + config.n_keep;
    for sweep in 0..total_sweeps {
        let in_burn = sweep < config.n_burn;
        // Step 1: spike-slab update of each fixed effect
        for a in 0..a_count {
            let (pi, tau) = inputs.slab[a];
            let (b_new, g_new) = if config.likelihood_off {
                let include = pi >= 1.0 || rng.gen::<f64>() < pi;
                if include {
                    (tau.sqrt() * rng.sample::<f64, _>(StandardNormal), true)
                } else {
                    (0.0, false)
                }
            } else {
                // partial residual: y - X_{-a} b_{-a}
                let mut num = 0.0;
                for i in 0..n {
                    num += six[(i, a)] * (resid[i] + design.x[(i, a)] * b[a]);
                }
                let den = xtsx_diag[a];
                if !(den > 0.0) {
                    return Err(fail(sweep, "degenerate fixed-effect precision"));
                }
                let bhat = num / den;
                let v = 1.0 / den;
                let include = if pi >= 1.0 {
                    true
                } else if pi <= 0.0 {
                    false
                } else {
                    let zeta2 = bhat * bhat / v;
                    let log_alpha = pi.ln() - (1.0 - pi).ln() - 0.5 * (1.0 + tau / v).ln()
                        + 0.5 * zeta2 / (1.0 + v / tau);
                    let p_incl = 1.0 / (1.0 + (-log_alpha).exp());
                    rng.gen::<f64>() < p_incl
                };
                if include {
                    let shrink = 1.0 / (1.0 + v / tau);
                    let mean = bhat * shrink;
                    let sd = (v * shrink).sqrt();
                    (mean + sd * rng.sample::<f64, _>(StandardNormal), true)
                } else {
                    (0.0, false)
                }
            };
            if b_new != b[a] {
                for i in 0..n {
                    resid[i] += design.x[(i, a)] * (b[a] - b_new);
                }
                b[a] = b_new;
            }
            gamma[a] = g_new;
        }

        // Step 2: component-wise truncated-normal random-walk MH on variances
        let mut cur_target = if config.likelihood_off {
            0.0
        } else {
            -0.5 * (factor.logdet() + factor.quad_form(&resid))
        };
        let mut dirty = false;
        for h in 0..h_blocks + 1 {
            let cur = if h < h_blocks { vc[h] } else { s };
            let sd = sampler.scale[h];
            let proposal = sample_truncated_normal(&mut rng, cur, sd);
            let prior_diff = inputs.priors[h].log_pdf(proposal) - inputs.priors[h].log_pdf(cur);
            let corr = truncation_correction(cur, proposal, sd);
            let (accept, new_target, new_factor) = if config.likelihood_off {
                let log_ratio = prior_diff + corr;
                (rng.gen::<f64>().ln() < log_ratio, 0.0, None)
            } else {
                let (mut vc_p, mut s_p) = (vc.clone(), s);
                if h < h_blocks {
                    vc_p[h] = proposal;
                } else {
                    s_p = proposal;
                }
                match design.factor(&vc_p, s_p) {
                    Some(fp) => {
                        let target = -0.5 * (fp.logdet() + fp.quad_form(&resid));
                        let log_ratio = target - cur_target + prior_diff + corr;
                        (rng.gen::<f64>().ln() < log_ratio, target, Some(fp))
                    }
                    None => (false, cur_target, None),
                }
            };
            if accept {
                if h < h_blocks {
                    vc[h] = proposal;
                } else {
                    s = proposal;
                }
                if let Some(fp) = new_factor {
                    factor = fp;
                    cur_target = new_target;
                    dirty = true;
                }
            }
            sampler.record(h, accept, in_burn, inputs.k);
        }
        if dirty {
            six = factor.solve_mat(&design.x);
            for (a, slot) in xtsx_diag.iter_mut().enumerate() {
                *slot = design.x.column(a).dot(&six.column(a).into_owned());
            }
        }
        if in_burn && sweep % 50 == 49 {
            sampler.adapt_window();
        }

        if !in_burn {
            let idx = sweep - config.n_burn;
            if (idx + 1) % config.thin == 0 {
                for a in 0..a_count {
                    fixed_draws[(kept, a)] = b[a];
                    gamma_draws[(kept, a)] = if gamma[a] { 1 } else { 0 };
                }
                for h in 0..h_blocks {
                    vc_draws[(kept, h)] = vc[h];
                }
                vc_draws[(kept, h_blocks)] = s;
                kept += 1;
            }
        }
    }
    debug_assert_eq!(kept, g_keep);

    // Step 3: post-hoc conjugate draws of each spline block on kept draws
    let spline_blocks: Vec<(usize, usize, usize)> = design
        .classes
        .iter()
        .enumerate()
        .filter_map(|(h, c)| match c {
            Class::LowRank(t) => {
                let (off, len) = design.lowrank_ranges[*t];
                Some((h, off, len))
            }
            _ => None,
        })
        .collect();
    let mut spline_draws: Vec<DMatrix<f64>> =
        spline_blocks.iter().map(|&(_, _, len)| DMatrix::zeros(g_keep, len)).collect();
    for g in 0..g_keep {
        for (bi, &(h, _, len)) in spline_blocks.iter().enumerate() {
            let q_s = vc_draws[(g, h)];
            if config.likelihood_off {
                for m in 0..len {
                    spline_draws[bi][(g, m)] =
                        q_s.sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
                continue;
            }
            let vc_g: Vec<f64> = (0..h_blocks).map(|hh| vc_draws[(g, hh)]).collect();
            let s_g = vc_draws[(g, h_blocks)];
            let fixed_g: Vec<f64> = (0..a_count).map(|a| fixed_draws[(g, a)]).collect();
            let (mean, prec_chol) =
                spline_conditional(design, &inputs.y, &fixed_g, &vc_g, s_g, h)
                    .ok_or_else(|| fail(g, "spline conditional factorization"))?;
            let zvec = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
            let draw = &mean + prec_chol.l().transpose().solve_upper_triangular(&zvec).unwrap();
            for m in 0..len {
                spline_draws[bi][(g, m)] = draw[m];
            }
        }
    }

    // diagnostics per parameter (fixed effects and variance components)
    let mut param_names = Vec::new();
    for a in 0..a_count {
        param_names.push(format!("b[{a}]"));
    }
    param_names.extend(design.vc_names.iter().cloned());
    let mut geweke_z = Vec::new();
    let mut geweke_p = Vec::new();
    let mut ess_v = Vec::new();
    let mut chain_buf = vec![0.0; g_keep];
    for a in 0..a_count {
        for g in 0..g_keep {
            chain_buf[g] = fixed_draws[(g, a)];
        }
        let d = diagnose_chain(&chain_buf);
        geweke_z.push(d.geweke_z);
        geweke_p.push(d.geweke_p);
        ess_v.push(d.ess);
    }
    for h in 0..h_blocks + 1 {
        for g in 0..g_keep {
            chain_buf[g] = vc_draws[(g, h)];
        }
        let d = diagnose_chain(&chain_buf);
        geweke_z.push(d.geweke_z);
        geweke_p.push(d.geweke_p);
        ess_v.push(d.ess);
    }

    Ok(CoefficientPosterior {
        k: inputs.k,
        fixed: fixed_draws,
        gamma: gamma_draws,
        vc: vc_draws,
        spline: spline_draws,
        accept_rate: sampler.rates(),
        param_names,
        geweke_z,
        geweke_p,
        ess: ess_v,
    })
}

/// Complete conditional of the spline random effects in block `block_h`
/// (an index into the design's z-blocks), with all other random effects
/// integrated out: mean and precision Cholesky of
/// `u | y, b, vc ~ N(V Z' A^-1 (y - Xb), V)` where
/// `A = sum_{h != block} q_h Z_h Z_h' + s I` and `V = (Z'A^-1 Z + I/q)^-1`.
pub fn spline_conditional(
    design: &McmcDesign,
    y: &DVector<f64>,
    fixed: &[f64],
    vc: &[f64],
    s: f64,
    block_h: usize,
) -> Option<(DVector<f64>, Cholesky<f64, Dyn>)> {
    let Class::LowRank(t) = design.classes[block_h] else {
        return None;
    };
    let (off, len) = design.lowrank_ranges[t];
    let q_s = vc[block_h];
    if !(q_s > 0.0) {
        return None;
    }
    let mut vc_other = vc.to_vec();
    vc_other[block_h] = 0.0;
    let fa = design.factor(&vc_other, s)?;
    let z = design.lowrank.columns(off, len).into_owned();
    let ainv_z = fa.solve_mat(&z);
    let mut prec = z.transpose() * &ainv_z;
    for m in 0..len {
        prec[(m, m)] += 1.0 / q_s;
    }
    let prec_chol = Cholesky::new(prec)?;
    let mut r = y.clone();
    for (a, &ba) in fixed.iter().enumerate() {
        if ba != 0.0 {
            for i in 0..design.n {
                r[i] -= design.x[(i, a)] * ba;
            }
        }
    }
    let rhs = ainv_z.transpose() * &r;
    let mean = prec_chol.solve(&rhs);
    Some((mean, prec_chol))
}

/// Deterministic per-coefficient seed derivation (splitmix-style mixing).
pub fn derive_seed(master: u64, k: usize) -> u64 {
    let mut z = master ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run chains for every coefficient column; the per-coefficient seeds are
/// derived from the master seed, so results are identical for any worker
/// count. Per-coefficient failures are collected without aborting the rest.
pub fn run_all(
    ys: &DMatrix<f64>,
    design: &McmcDesign,
    hyper: &ShrinkageHyper,
    starts: &[LmmFit],
    config: &ChainConfig,
    n_workers: usize,
) -> Vec<Result<CoefficientPosterior, McmcError>> {
    use rayon::prelude::*;
    let k_count = ys.ncols();
    assert_eq!(starts.len(), k_count, "one starting fit per coefficient");
    let run_one = |k: usize| -> Result<CoefficientPosterior, McmcError> {
        let y = DVector::from_fn(ys.nrows(), |i, _| ys[(i, k)]);
        let inputs = chain_inputs(k, y, design, hyper, &starts[k]);
        let mut cfg = config.clone();
        cfg.seed = derive_seed(config.seed, k);
        run_chain(&inputs, &cfg)
    };
    if n_workers <= 1 {
        (0..k_count).map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n_workers)
            .build()
            .expect("rayon pool");
        pool.install(|| (0..k_count).into_par_iter().map(run_one).collect())
    }
}

#[cfg(test)]
mod tests;
