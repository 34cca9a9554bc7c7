//! Empirical-Bayes spike-slab hyperparameters: per predictor and
//! regularization set, maximize the marginal likelihood of the MLE fixed
//! effects under the two-group model
//! `bhat ~ pi N(0, tau + V) + (1 - pi) N(0, V)`.

use crate::basis::TensorIndex;
use crate::optim::nelder_mead;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShrinkageError {
    #[error("no coefficients to estimate from")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Spike-slab regularization hyperparameters per (predictor, set).
#[derive(Debug, Clone)]
pub struct ShrinkageHyper {
    /// pi[a][j]: slab inclusion probability.
    pub pi: Vec<Vec<f64>>,
    /// tau[a][j]: slab variance.
    pub tau: Vec<Vec<f64>>,
    /// Coefficient column -> merged set index.
    pub set_of_coeff: Vec<usize>,
    /// Representative scale pair per merged set.
    pub set_labels: Vec<(u8, u8)>,
}

impl ShrinkageHyper {
    pub fn n_sets(&self) -> usize {
        self.set_labels.len()
    }

    pub fn params(&self, a: usize, k: usize) -> (f64, f64) {
        let j = self.set_of_coeff[k];
        (self.pi[a][j], self.tau[a][j])
    }

    /// The no-shrinkage configuration: slab always on, essentially flat.
    pub fn no_shrinkage(n_predictors: usize, n_coeffs: usize) -> Self {
        ShrinkageHyper {
            pi: vec![vec![1.0]; n_predictors],
            tau: vec![vec![1e6]; n_predictors],
            set_of_coeff: vec![0; n_coeffs],
            set_labels: vec![(0, 0)],
        }
    }
}

/// Group retained coefficients into regularization sets by scale pair,
/// merging sets smaller than `min_size` into the nearest coarser one
/// (largest scale sum below theirs, closest in scale distance; if none is
/// coarser, the nearest finer set absorbs them).
pub fn regularization_sets(
    index_map: &[TensorIndex],
    min_size: usize,
) -> (Vec<usize>, Vec<(u8, u8)>) {
    let mut labels: Vec<(u8, u8)> = Vec::new();
    let mut of_coeff = Vec::with_capacity(index_map.len());
    for idx in index_map {
        let pair = (idx.scale_meridional, idx.scale_circumferential);
        let j = match labels.iter().position(|&l| l == pair) {
            Some(j) => j,
            None => {
                labels.push(pair);
                labels.len() - 1
            }
        };
        of_coeff.push(j);
    }
    // merge undersized sets, finest first
    loop {
        let mut counts = vec![0usize; labels.len()];
        for &j in &of_coeff {
            counts[j] += 1;
        }
        let live: Vec<usize> = (0..labels.len()).filter(|&j| counts[j] > 0).collect();
        if live.len() <= 1 {
            break;
        }
        let mut small: Vec<usize> = live
            .iter()
            .copied()
            .filter(|&j| counts[j] < min_size)
            .collect();
        if small.is_empty() {
            break;
        }
        // handle the finest undersized set first
        small.sort_by_key(|&j| {
            let (a, b) = labels[j];
            (a as usize + b as usize, a as usize)
        });
        let victim = *small.last().unwrap();
        let (vj1, vj2) = labels[victim];
        let vsum = vj1 as usize + vj2 as usize;
        let dist = |j: usize| {
            let (a, b) = labels[j];
            (a as i32 - vj1 as i32).abs() + (b as i32 - vj2 as i32).abs()
        };
        let coarser: Vec<usize> = live
            .iter()
            .copied()
            .filter(|&j| j != victim && (labels[j].0 as usize + labels[j].1 as usize) < vsum)
            .collect();
        let target = if !coarser.is_empty() {
            *coarser
                .iter()
                .max_by_key(|&&j| {
                    let (a, b) = labels[j];
                    (a as usize + b as usize, std::cmp::Reverse(dist(j)))
                })
                .unwrap()
        } else {
            *live
                .iter()
                .filter(|&&j| j != victim)
                .min_by_key(|&&j| (dist(j), labels[j].0 as usize + labels[j].1 as usize))
                .unwrap()
        };
        for j in of_coeff.iter_mut() {
            if *j == victim {
                *j = target;
            }
        }
    }
    // compact the set indices
    let mut remap = vec![usize::MAX; labels.len()];
    let mut out_labels = Vec::new();
    for &j in &of_coeff {
        if remap[j] == usize::MAX {
            remap[j] = out_labels.len();
            out_labels.push(labels[j]);
        }
    }
    let compact: Vec<usize> = of_coeff.iter().map(|&j| remap[j]).collect();
    (compact, out_labels)
}

fn log_normal_pdf(x: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + x * x / var)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Marginal log-likelihood of one set's estimates under (pi, tau).
fn set_loglik(bhat: &[f64], v: &[f64], pi: f64, tau: f64) -> f64 {
    let mut ll = 0.0;
    for (b, vk) in bhat.iter().zip(v) {
        let slab = pi.ln() + log_normal_pdf(*b, tau + vk);
        let spike = if pi >= 1.0 { f64::NEG_INFINITY } else { (1.0 - pi).ln() + log_normal_pdf(*b, *vk) };
        ll += log_sum_exp(slab, spike);
    }
    ll
}

/// Estimate `(pi, tau)` per predictor and regularization set from MLE fixed
/// effects `bhat[(a, k)]` and their sampling variances `v[(a, k)]`.
/// `pi` is clamped to `[1/K, 1]` and `tau` floored at `1e-8 * median(V)`.
pub fn empirical_bayes(
    bhat: &DMatrix<f64>,
    v: &DMatrix<f64>,
    set_of_coeff: &[usize],
    set_labels: &[(u8, u8)],
) -> Result<ShrinkageHyper, ShrinkageError> {
    let a_count = bhat.nrows();
    let k_count = bhat.ncols();
    if k_count == 0 {
        return Err(ShrinkageError::Empty);
    }
    if v.nrows() != a_count || v.ncols() != k_count || set_of_coeff.len() != k_count {
        return Err(ShrinkageError::Dimension(format!(
            "bhat {}x{}, v {}x{}, sets {}",
            a_count,
            k_count,
            v.nrows(),
            v.ncols(),
            set_of_coeff.len()
        )));
    }
    let n_sets = set_labels.len();
    let pi_floor = 1.0 / k_count as f64;
    let mut pi = vec![vec![1.0; n_sets]; a_count];
    let mut tau = vec![vec![1.0; n_sets]; a_count];
    for a in 0..a_count {
        for j in 0..n_sets {
            let ks: Vec<usize> = (0..k_count).filter(|&k| set_of_coeff[k] == j).collect();
            if ks.is_empty() {
                continue;
            }
            let bh: Vec<f64> = ks.iter().map(|&k| bhat[(a, k)]).collect();
            let vv: Vec<f64> = ks.iter().map(|&k| v[(a, k)].max(1e-300)).collect();
            let mut vs = vv.clone();
            vs.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let med_v = vs[vs.len() / 2];
            let tau_floor = 1e-8 * med_v;

            let mean_b2 = bh.iter().map(|b| b * b).sum::<f64>() / bh.len() as f64;
            let mean_v = vv.iter().sum::<f64>() / vv.len() as f64;
            let tau0 = (mean_b2 - mean_v).max(med_v);
            // Optimize over (logit pi, log tau). The tiny pi term breaks the
            // flat ridge at tau -> floor (slab indistinguishable from spike)
            // toward the sparser configuration.
            let obj = |t: &[f64]| -> f64 {
                let p = logistic(t[0]).clamp(pi_floor, 1.0);
                let tv = t[1].exp().max(tau_floor);
                -set_loglik(&bh, &vv, p, tv) + 1e-6 * p
            };
            // coarse grid start, then simplex polish
            let mut start = (1.5, tau0.ln());
            let mut best_val = obj(&[start.0, start.1]);
            for pg in [-6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0] {
                for tg in [-3.0_f64, 0.0, 1.5, 3.0] {
                    let cand = [pg, tau0.ln() + tg];
                    let v = obj(&cand);
                    if v < best_val {
                        best_val = v;
                        start = (cand[0], cand[1]);
                    }
                }
            }
            let (best, _, _) = nelder_mead(obj, &[start.0, start.1], 0.8, 1e-10, 400);
            let p_hat = logistic(best[0]).clamp(pi_floor, 1.0);
            let t_hat = best[1].exp().max(tau_floor);
            pi[a][j] = p_hat;
            tau[a][j] = t_hat;
        }
    }
    Ok(ShrinkageHyper {
        pi,
        tau,
        set_of_coeff: set_of_coeff.to_vec(),
        set_labels: set_labels.to_vec(),
    })
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_estimates_drive_pi_to_floor() {
        let k = 200;
        let bhat = DMatrix::zeros(1, k);
        let v = DMatrix::from_element(1, k, 1.0);
        let sets = vec![0usize; k];
        let hyper = empirical_bayes(&bhat, &v, &sets, &[(0, 0)]).unwrap();
        assert!(
            hyper.pi[0][0] <= 1.0 / k as f64 + 1e-6,
            "pi {} not at floor",
            hyper.pi[0][0]
        );
    }

    #[test]
    fn recovers_slab_variance() {
        // bhat ~ N(0, tau0 + V) with pi0 = 1, V = 1, tau0 = 4
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let k = 500;
        let tau0 = 4.0;
        let bhat = DMatrix::from_fn(1, k, |_, _| {
            (tau0 + 1.0_f64).sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        let v = DMatrix::from_element(1, k, 1.0);
        let sets = vec![0usize; k];
        let hyper = empirical_bayes(&bhat, &v, &sets, &[(0, 0)]).unwrap();
        let t = hyper.tau[0][0];
        assert!((t - tau0).abs() / tau0 < 0.25, "tau {t} vs {tau0}");
        assert!(hyper.pi[0][0] > 0.5, "pi {}", hyper.pi[0][0]);
    }

    #[test]
    fn identical_sets_get_identical_hyperparameters() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let k = 60;
        let half: Vec<f64> = (0..k / 2).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut bh = half.clone();
        bh.extend_from_slice(&half);
        let bhat = DMatrix::from_fn(1, k, |_, j| bh[j]);
        let v = DMatrix::from_element(1, k, 0.5);
        let sets: Vec<usize> = (0..k).map(|j| if j < k / 2 { 0 } else { 1 }).collect();
        let hyper = empirical_bayes(&bhat, &v, &sets, &[(0, 0), (1, 1)]).unwrap();
        assert!((hyper.pi[0][0] - hyper.pi[0][1]).abs() < 1e-6);
        assert!((hyper.tau[0][0] - hyper.tau[0][1]).abs() < 1e-6 * hyper.tau[0][0].abs().max(1.0));
    }

    #[test]
    fn merging_respects_min_size_and_prefers_coarser() {
        // two big coarse sets and one tiny fine set
        let mut index_map = Vec::new();
        for loc in 0..8 {
            index_map.push(TensorIndex {
                scale_meridional: 0,
                scale_circumferential: 0,
                loc_meridional: loc,
                loc_circumferential: 0,
            });
        }
        for loc in 0..6 {
            index_map.push(TensorIndex {
                scale_meridional: 1,
                scale_circumferential: 0,
                loc_meridional: loc,
                loc_circumferential: 0,
            });
        }
        for loc in 0..2 {
            index_map.push(TensorIndex {
                scale_meridional: 2,
                scale_circumferential: 1,
                loc_meridional: loc,
                loc_circumferential: 0,
            });
        }
        let (sets, labels) = regularization_sets(&index_map, 5);
        assert_eq!(labels.len(), 2);
        // the tiny (2,1) set merged into the nearest coarser, which is (1,0)
        let fine_set = sets[14];
        let one_zero = labels.iter().position(|&l| l == (1, 0)).unwrap();
        assert_eq!(fine_set, one_zero);
        // every coefficient mapped
        assert_eq!(sets.len(), 16);
    }
}
