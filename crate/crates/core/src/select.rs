//! Model-structure selection: per-coefficient information criteria over
//! candidate models, energy-weighted voting, the two-step fixed-then-random
//! procedure, and the common-versus-varying smoothness comparison.

use crate::design::{assemble, DesignBundle, DesignError, ModelSpec, RandomTerm};
use crate::grid::FunctionalDataset;
use crate::lmm::{effective_df_np, fit_bundle, FitError, FitOptions, LmmFit};
use crate::spline::df_lambda;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no candidate models supplied")]
    NoCandidates,
    #[error("weights length {got} does not match coefficient count {expected}")]
    WeightCount { got: usize, expected: usize },
    #[error("every coefficient failed to fit for every candidate")]
    AllFitsFailed,
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Spline(#[from] crate::spline::SplineError),
    #[error("whitening matrix not positive definite at lambda {0}")]
    BadWhitening(f64),
    #[error("lambda grid must be positive")]
    BadLambdaGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoCriterion {
    Abic,
    Aaic,
}

impl InfoCriterion {
    /// Penalized score from a marginal ML log-likelihood.
    pub fn score(&self, loglik: f64, n_par: f64, n_obs: usize) -> f64 {
        match self {
            InfoCriterion::Abic => -2.0 * loglik + n_par * (n_obs as f64).ln(),
            InfoCriterion::Aaic => -2.0 * loglik + 2.0 * n_par,
        }
    }
}

/// A model structure under comparison.
#[derive(Debug, Clone)]
pub struct CandidateModel {
    pub id: String,
    pub spec: ModelSpec,
}

impl CandidateModel {
    pub fn new(id: impl Into<String>, spec: ModelSpec) -> Self {
        CandidateModel { id: id.into(), spec }
    }
}

/// Fit of one candidate to one basis coefficient.
#[derive(Debug)]
pub struct CandidateFit {
    pub fit: LmmFit,
    /// Fixed effects + variance components + estimated DF per nonparametric
    /// term.
    pub n_par: f64,
    pub abic: f64,
    pub aaic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Joint,
    Fixed,
    Random,
    Smoothness,
}

/// Outcome of a weighted vote across candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub stage: Stage,
    pub criterion: InfoCriterion,
    pub candidate_ids: Vec<String>,
    /// Energy-weighted win probability per candidate; sums to one.
    pub p_scores: Vec<f64>,
    /// Index of the candidate with the highest score.
    pub winner: usize,
    /// Per-coefficient winning candidate (usize::MAX where no fit succeeded).
    pub per_coefficient_winner: Vec<usize>,
    /// Coefficients excluded because no candidate fit them.
    pub excluded: Vec<usize>,
}

/// Per-candidate, per-coefficient score table used by `vote`.
pub struct ScoreTable {
    /// scores[c][k]: None marks a failed fit.
    pub scores: Vec<Vec<Option<f64>>>,
    /// n_par[c][k] for tie-breaking.
    pub n_par: Vec<Vec<f64>>,
}

/// Fit every candidate to every coefficient column and score it.
pub fn fit_candidates(
    ds: &FunctionalDataset,
    coeffs: &DMatrix<f64>,
    candidates: &[CandidateModel],
    opts: &FitOptions,
) -> Result<(ScoreTable, ScoreTable), SelectError> {
    if candidates.is_empty() {
        return Err(SelectError::NoCandidates);
    }
    let k = coeffs.ncols();
    let n = coeffs.nrows();
    let mut abic = ScoreTable {
        scores: vec![vec![None; k]; candidates.len()],
        n_par: vec![vec![0.0; k]; candidates.len()],
    };
    let mut aaic = ScoreTable {
        scores: vec![vec![None; k]; candidates.len()],
        n_par: vec![vec![0.0; k]; candidates.len()],
    };
    for (c, cand) in candidates.iter().enumerate() {
        let bundle = assemble(ds, &cand.spec)?;
        for j in 0..k {
            let y = DVector::from_fn(n, |i, _| coeffs[(i, j)]);
            match score_one(&y, &bundle, opts) {
                Ok((ll, n_par)) => {
                    abic.scores[c][j] = Some(InfoCriterion::Abic.score(ll, n_par, n));
                    abic.n_par[c][j] = n_par;
                    aaic.scores[c][j] = Some(InfoCriterion::Aaic.score(ll, n_par, n));
                    aaic.n_par[c][j] = n_par;
                }
                Err(e) => {
                    log::warn!("candidate {:?} failed on coefficient {j}: {e}", cand.id);
                }
            }
        }
    }
    Ok((abic, aaic))
}

fn score_one(
    y: &DVector<f64>,
    bundle: &DesignBundle,
    opts: &FitOptions,
) -> Result<(f64, f64), FitError> {
    let fit = fit_bundle(y, bundle, opts)?;
    let mut n_par = bundle.n_fixed() as f64 + bundle.n_variance_components() as f64;
    for t in 0..bundle.np_terms.len() {
        n_par += effective_df_np(&fit, bundle, t)?;
    }
    Ok((fit.loglik_ml, n_par))
}

/// Energy-weighted voting over a score table. Ties at the per-coefficient
/// argmin break toward the smaller parameter count, then the lexicographically
/// smaller candidate id.
pub fn vote(
    candidate_ids: &[String],
    table: &ScoreTable,
    weights: &[f64],
    stage: Stage,
    criterion: InfoCriterion,
) -> Result<SelectionReport, SelectError> {
    let c_count = table.scores.len();
    if c_count == 0 {
        return Err(SelectError::NoCandidates);
    }
    let k = table.scores[0].len();
    if weights.len() != k {
        return Err(SelectError::WeightCount { got: weights.len(), expected: k });
    }
    // Weights are accumulated per candidate in sorted order so the reported
    // scores are exactly invariant to reordering candidates or coefficients.
    let mut won: Vec<Vec<f64>> = vec![Vec::new(); c_count];
    let mut winners = vec![usize::MAX; k];
    let mut excluded = Vec::new();
    for j in 0..k {
        let mut best: Option<usize> = None;
        for c in 0..c_count {
            let Some(score) = table.scores[c][j] else { continue };
            best = match best {
                None => Some(c),
                Some(b) => {
                    let sb = table.scores[b][j].unwrap();
                    if score < sb {
                        Some(c)
                    } else if score == sb {
                        // tie-break: smaller n_par, then smaller id
                        let (nb, nc) = (table.n_par[b][j], table.n_par[c][j]);
                        if nc < nb || (nc == nb && candidate_ids[c] < candidate_ids[b]) {
                            Some(c)
                        } else {
                            Some(b)
                        }
                    } else {
                        Some(b)
                    }
                }
            };
        }
        match best {
            Some(c) => {
                winners[j] = c;
                won[c].push(weights[j]);
            }
            None => excluded.push(j),
        }
    }
    let mut p = vec![0.0; c_count];
    for (c, ws) in won.iter_mut().enumerate() {
        ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        p[c] = ws.iter().sum();
    }
    let mut all: Vec<f64> = won.iter().flatten().copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total_weight: f64 = all.iter().sum();
    if total_weight <= 0.0 {
        return Err(SelectError::AllFitsFailed);
    }
    for v in p.iter_mut() {
        *v /= total_weight;
    }
    let mut winner = 0;
    for c in 1..c_count {
        if p[c] > p[winner] {
            winner = c;
        }
    }
    Ok(SelectionReport {
        stage,
        criterion,
        candidate_ids: candidate_ids.to_vec(),
        p_scores: p,
        winner,
        per_coefficient_winner: winners,
        excluded,
    })
}

/// One-stage selection: fit all candidates, vote with the given criterion.
pub fn select(
    ds: &FunctionalDataset,
    coeffs: &DMatrix<f64>,
    weights: &[f64],
    candidates: &[CandidateModel],
    criterion: InfoCriterion,
    opts: &FitOptions,
) -> Result<SelectionReport, SelectError> {
    let (abic, aaic) = fit_candidates(ds, coeffs, candidates, opts)?;
    let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
    let table = match criterion {
        InfoCriterion::Abic => &abic,
        InfoCriterion::Aaic => &aaic,
    };
    vote(&ids, table, weights, Stage::Joint, criterion)
}

/// Two-step selection: fixed structures first under a common baseline random
/// structure (the richest candidate one, which sidesteps the nonparametric
/// against random-intercept identifiability trap), then random structures
/// conditional on the winning fixed part.
pub fn two_step_select(
    ds: &FunctionalDataset,
    coeffs: &DMatrix<f64>,
    weights: &[f64],
    fixed_candidates: &[CandidateModel],
    random_candidates: &[(String, Vec<RandomTerm>)],
    criterion: InfoCriterion,
    opts: &FitOptions,
) -> Result<(SelectionReport, SelectionReport), SelectError> {
    if fixed_candidates.is_empty() || random_candidates.is_empty() {
        return Err(SelectError::NoCandidates);
    }
    // richest random structure: most expanded variance components
    let richness = |terms: &[RandomTerm]| -> usize {
        terms
            .iter()
            .map(|t| crate::design::SerialBasis::new(t.kind, &[7.0, 10.0, 15.0]).map(|b| b.n_functions()).unwrap_or(1))
            .sum()
    };
    let mut baseline = 0;
    for (i, (_, terms)) in random_candidates.iter().enumerate() {
        if richness(terms) > richness(&random_candidates[baseline].1) {
            baseline = i;
        }
    }
    let stage1: Vec<CandidateModel> = fixed_candidates
        .iter()
        .map(|c| {
            let mut spec = c.spec.clone();
            spec.random = random_candidates[baseline].1.clone();
            CandidateModel::new(c.id.clone(), spec)
        })
        .collect();
    let mut report1 = select(ds, coeffs, weights, &stage1, criterion, opts)?;
    report1.stage = Stage::Fixed;
    let best_fixed = &fixed_candidates[report1.winner];

    let stage2: Vec<CandidateModel> = random_candidates
        .iter()
        .map(|(id, terms)| {
            let mut spec = best_fixed.spec.clone();
            spec.random = terms.clone();
            CandidateModel::new(id.clone(), spec)
        })
        .collect();
    let mut report2 = select(ds, coeffs, weights, &stage2, criterion, opts)?;
    report2.stage = Stage::Random;
    Ok((report1, report2))
}

/// Result of the varying-versus-common smoothness comparison at one common
/// lambda value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub lambda: f64,
    /// P score for the varying-smoothness model.
    pub p_varying: f64,
    pub p_common: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessWinner {
    Varying,
    Common,
    Undecided,
}

/// Compare the per-coefficient varying-smoothness spline model against a
/// common-smoothness model over a grid of common lambda values. The varying
/// model wins overall if it carries the vote at every lambda; the common
/// model wins if it carries the vote at some lambda.
pub fn smoothness_compare(
    ds: &FunctionalDataset,
    coeffs: &DMatrix<f64>,
    weights: &[f64],
    np_model: &ModelSpec,
    lambda_grid: &[f64],
    criterion: InfoCriterion,
    opts: &FitOptions,
) -> Result<(Vec<SmoothnessReport>, SmoothnessWinner), SelectError> {
    if lambda_grid.is_empty() || lambda_grid.iter().any(|&l| !(l > 0.0)) {
        return Err(SelectError::BadLambdaGrid);
    }
    let bundle = assemble(ds, np_model)?;
    assert_eq!(bundle.np_terms.len(), 1, "smoothness comparison expects one nonparametric term");
    let term = &bundle.np_terms[0];
    let zb = &bundle.z_blocks[term.z_block].columns;
    let n = bundle.n();
    let k = coeffs.ncols();
    if weights.len() != k {
        return Err(SelectError::WeightCount { got: weights.len(), expected: k });
    }
    let spline_design = term.dr.def.design(&term.x_values)?;

    // varying-smoothness score per coefficient
    let mut varying: Vec<Option<f64>> = vec![None; k];
    let mut varying_npar = vec![0.0; k];
    for j in 0..k {
        let y = DVector::from_fn(n, |i, _| coeffs[(i, j)]);
        if let Ok((ll, n_par)) = score_one(&y, &bundle, opts) {
            varying[j] = Some(match criterion {
                InfoCriterion::Abic => InfoCriterion::Abic.score(ll, n_par, n),
                InfoCriterion::Aaic => InfoCriterion::Aaic.score(ll, n_par, n),
            });
            varying_npar[j] = n_par;
        }
    }

    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut reports = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        // A = Z_B Z_B' + lambda I; whiten by A^{-1/2}
        let a_mat = zb * zb.transpose() + DMatrix::identity(n, n) * lambda;
        let eig = SymmetricEigen::new(a_mat);
        let mut logdet_a = 0.0;
        for ev in eig.eigenvalues.iter() {
            if *ev <= 0.0 {
                return Err(SelectError::BadWhitening(lambda));
            }
            logdet_a += ev.ln();
        }
        let inv_sqrt = {
            let mut d = DMatrix::zeros(n, n);
            for i in 0..n {
                d[(i, i)] = 1.0 / eig.eigenvalues[i].sqrt();
            }
            &eig.eigenvectors * d * eig.eigenvectors.transpose()
        };
        let xw = &inv_sqrt * &bundle.x;
        let gram = xw.transpose() * &xw;
        let chol = nalgebra::Cholesky::new(gram).ok_or(SelectError::BadWhitening(lambda))?;
        let df_common = df_lambda(&spline_design, &term.dr.omega, lambda, None)?;
        let n_par_common = bundle.n_fixed() as f64 + 1.0 + df_common;

        let mut table = ScoreTable {
            scores: vec![vec![None; k], vec![None; k]],
            n_par: vec![vec![0.0; k], vec![0.0; k]],
        };
        for j in 0..k {
            table.scores[0][j] = varying[j];
            table.n_par[0][j] = varying_npar[j];
            let y = DVector::from_fn(n, |i, _| coeffs[(i, j)]);
            let yw = &inv_sqrt * &y;
            let beta = chol.solve(&(xw.transpose() * &yw));
            let resid = &yw - &xw * beta;
            let rss: f64 = resid.iter().map(|v| v * v).sum();
            let sigma2 = rss / n as f64;
            if sigma2 > 0.0 {
                let ll = -0.5 * (n as f64 * (ln2pi + sigma2.ln()) + logdet_a + n as f64);
                table.scores[1][j] = Some(criterion.score(ll, n_par_common, n));
                table.n_par[1][j] = n_par_common;
            }
        }
        let ids = vec!["varying".to_string(), "common".to_string()];
        let report = vote(&ids, &table, weights, Stage::Smoothness, criterion)?;
        reports.push(SmoothnessReport {
            lambda,
            p_varying: report.p_scores[0],
            p_common: report.p_scores[1],
        });
    }
    let winner = if reports.iter().all(|r| r.p_varying > 0.5) {
        SmoothnessWinner::Varying
    } else if reports.iter().any(|r| r.p_common >= 0.5) {
        SmoothnessWinner::Common
    } else {
        SmoothnessWinner::Undecided
    };
    Ok((reports, winner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criterion_formulas() {
        // equal likelihood, n_par differing by one, N = 306: the score gap is
        // exactly ln 306
        let a = InfoCriterion::Abic.score(-100.0, 5.0, 306);
        let b = InfoCriterion::Abic.score(-100.0, 6.0, 306);
        assert!((b - a - 306f64.ln()).abs() < 1e-12);
        let a = InfoCriterion::Aaic.score(-100.0, 5.0, 306);
        let b = InfoCriterion::Aaic.score(-100.0, 6.0, 306);
        assert!((b - a - 2.0).abs() < 1e-12);
        // the penalty gap grows with N for fixed likelihoods
        let gap_small = InfoCriterion::Abic.score(0.0, 6.0, 100) - InfoCriterion::Abic.score(0.0, 5.0, 100);
        let gap_large = InfoCriterion::Abic.score(0.0, 6.0, 1000) - InfoCriterion::Abic.score(0.0, 5.0, 1000);
        assert!(gap_large > gap_small);
    }

    fn table(scores: Vec<Vec<Option<f64>>>) -> ScoreTable {
        let n_par = scores.iter().map(|row| vec![1.0; row.len()]).collect();
        ScoreTable { scores, n_par }
    }

    #[test]
    fn vote_single_candidate_and_sweep() {
        let ids = vec!["only".to_string()];
        let t = table(vec![vec![Some(1.0), Some(2.0), Some(3.0)]]);
        let r = vote(&ids, &t, &[0.5, 0.3, 0.2], Stage::Joint, InfoCriterion::Abic).unwrap();
        assert_eq!(r.p_scores, vec![1.0]);

        // candidate winning every coefficient scores one regardless of weights
        let ids = vec!["a".to_string(), "b".to_string()];
        let t = table(vec![
            vec![Some(1.0), Some(5.0), Some(2.0)],
            vec![Some(2.0), Some(6.0), Some(3.0)],
        ]);
        let r = vote(&ids, &t, &[0.1, 0.1, 0.8], Stage::Joint, InfoCriterion::Abic).unwrap();
        assert_eq!(r.p_scores, vec![1.0, 0.0]);
        assert_eq!(r.winner, 0);
    }

    #[test]
    fn vote_scores_sum_to_one_and_permutation_invariant() {
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let t = table(vec![
            vec![Some(1.0), Some(9.0), Some(4.0), None],
            vec![Some(2.0), Some(3.0), Some(5.0), Some(1.0)],
            vec![Some(3.0), Some(4.0), Some(3.0), Some(2.0)],
        ]);
        let w = [0.4, 0.3, 0.2, 0.1];
        let r = vote(&ids, &t, &w, Stage::Joint, InfoCriterion::Abic).unwrap();
        let s: f64 = r.p_scores.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // permute candidates: scores follow the permutation
        let ids_p = vec!["b".to_string(), "c".to_string(), "a".to_string()];
        let t_p = table(vec![
            vec![Some(2.0), Some(3.0), Some(5.0), Some(1.0)],
            vec![Some(3.0), Some(4.0), Some(3.0), Some(2.0)],
            vec![Some(1.0), Some(9.0), Some(4.0), None],
        ]);
        let r_p = vote(&ids_p, &t_p, &w, Stage::Joint, InfoCriterion::Abic).unwrap();
        assert!((r.p_scores[0] - r_p.p_scores[2]).abs() < 1e-12);
        assert!((r.p_scores[1] - r_p.p_scores[0]).abs() < 1e-12);
        assert!((r.p_scores[2] - r_p.p_scores[1]).abs() < 1e-12);
        // permute coefficients (and weights): scores unchanged
        let t_k = table(vec![
            vec![None, Some(4.0), Some(9.0), Some(1.0)],
            vec![Some(1.0), Some(5.0), Some(3.0), Some(2.0)],
            vec![Some(2.0), Some(3.0), Some(4.0), Some(3.0)],
        ]);
        let w_k = [0.1, 0.2, 0.3, 0.4];
        let r_k = vote(&ids, &t_k, &w_k, Stage::Joint, InfoCriterion::Abic).unwrap();
        assert_eq!(r.p_scores, r_k.p_scores);
    }

    #[test]
    fn vote_ties_break_toward_smaller_n_par_then_id() {
        let ids = vec!["big".to_string(), "small".to_string()];
        let scores = vec![vec![Some(1.0)], vec![Some(1.0)]];
        let n_par = vec![vec![7.0], vec![3.0]];
        let t = ScoreTable { scores, n_par };
        let r = vote(&ids, &t, &[1.0], Stage::Joint, InfoCriterion::Abic).unwrap();
        assert_eq!(r.winner, 1);
        // equal n_par: lexicographic id
        let t2 = ScoreTable {
            scores: vec![vec![Some(1.0)], vec![Some(1.0)]],
            n_par: vec![vec![3.0], vec![3.0]],
        };
        let r2 = vote(&ids, &t2, &[1.0], Stage::Joint, InfoCriterion::Abic).unwrap();
        assert_eq!(r2.candidate_ids[r2.winner], "big");
    }

    #[test]
    fn vote_renormalizes_when_coefficients_fail_everywhere() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let t = table(vec![vec![Some(1.0), None], vec![Some(2.0), None]]);
        let r = vote(&ids, &t, &[0.25, 0.75], Stage::Joint, InfoCriterion::Abic).unwrap();
        assert_eq!(r.p_scores, vec![1.0, 0.0]);
        assert_eq!(r.excluded, vec![1]);
    }
}
