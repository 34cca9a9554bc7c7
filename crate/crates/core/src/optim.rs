//! Small derivative-free and quasi-Newton minimizers used by the restricted
//! likelihood fitter and the shrinkage hyperparameter estimator.

/// Nelder-Mead simplex minimization. Returns (argmin, min value, converged).
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    initial_step: f64,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    if n == 0 {
        let v = f(x0);
        return (x0.to_vec(), v, true);
    }
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += initial_step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let reordered: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let revalues: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        simplex = reordered;
        values = revalues;

        if (values[n] - values[0]).abs() <= tol * (values[0].abs() + tol) {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let reflect: Vec<f64> =
            (0..n).map(|j| centroid[j] + alpha * (centroid[j] - simplex[n][j])).collect();
        let fr = f(&reflect);
        if fr < values[0] {
            let expand: Vec<f64> =
                (0..n).map(|j| centroid[j] + gamma * (reflect[j] - centroid[j])).collect();
            let fe = f(&expand);
            if fe < fr {
                simplex[n] = expand;
                values[n] = fe;
            } else {
                simplex[n] = reflect;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = reflect;
            values[n] = fr;
        } else {
            let contract: Vec<f64> =
                (0..n).map(|j| centroid[j] + rho * (simplex[n][j] - centroid[j])).collect();
            let fc = f(&contract);
            if fc < values[n] {
                simplex[n] = contract;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    for j in 0..n {
                        simplex[i][j] = simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best], converged)
}

/// BFGS with central-difference gradients; refines a near-optimal point.
/// Returns (argmin, min value, gradient_norm).
pub fn bfgs_numeric<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    tol_grad: f64,
    max_iter: usize,
) -> (Vec<f64>, f64, f64) {
    let n = x0.len();
    let h = 1e-5;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if n == 0 {
        return (x, fx, 0.0);
    }
    let grad = |f: &mut F, x: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    };
    let mut g = grad(&mut f, &x);
    // inverse Hessian approximation
    let mut hinv = vec![vec![0.0; n]; n];
    for (i, row) in hinv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..max_iter {
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < tol_grad {
            break;
        }
        // direction d = -Hinv g
        let mut d = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                d[i] -= hinv[i][j] * g[j];
            }
        }
        // backtracking line search
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // reset to steepest descent
            for i in 0..n {
                d[i] = -g[i];
                for (j, row) in hinv.iter_mut().enumerate() {
                    for (k, v) in row.iter_mut().enumerate() {
                        *v = if j == k { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        let mut step = 1.0;
        let mut xn = x.clone();
        let mut fn_ = fx;
        let mut ok = false;
        for _ in 0..40 {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            fn_ = f(&xn);
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope.min(0.0) {
                ok = true;
                break;
            }
            step *= 0.5;
        }
        if !ok || (fx - fn_).abs() <= 1e-14 * (fx.abs() + 1e-14) {
            break;
        }
        let gn = grad(&mut f, &xn);
        // BFGS update
        let sk: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let yk: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy: f64 = sk.iter().zip(&yk).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            // Hinv = (I - rho s y') Hinv (I - rho y s') + rho s s'
            let mut hy = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    hy[i] += hinv[i][j] * yk[j];
                }
            }
            let yhy: f64 = yk.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    hinv[i][j] += rho * rho * yhy * sk[i] * sk[j]
                        - rho * (hy[i] * sk[j] + sk[i] * hy[j])
                        + rho * sk[i] * sk[j];
                }
            }
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    (x, fx, gnorm)
}
