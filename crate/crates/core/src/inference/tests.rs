use super::*;
use crate::basis::{TensorTransform, WaveletSpec};
use crate::design::{assemble, ModelSpec};
use crate::grid::FunctionRecord;
use crate::wavelet::Boundary;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

const IOP: [f64; 9] = [7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0];

fn toy_basis(k_retain: usize) -> BasisSystem {
    let grid = SurfaceGrid::new(8, 8).unwrap();
    let spec = WaveletSpec {
        levels: 1,
        boundary_meridional: Boundary::Periodic,
        ..WaveletSpec::default()
    };
    let tr = TensorTransform::new(grid, spec).unwrap();
    let retained: Vec<usize> = (0..k_retain).collect();
    BasisSystem::from_wavelet(&tr, retained, vec![1.0 / k_retain as f64; k_retain]).unwrap()
}

fn toy_dataset(n_units: usize, seed: u64) -> FunctionalDataset {
    let grid = SurfaceGrid::new(8, 8).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut functions = Vec::new();
    for u in 0..n_units {
        let age = 25.0 + 60.0 * rng.gen::<f64>();
        for &p in &IOP {
            functions.push(FunctionRecord {
                id: format!("u{u}_p{p}"),
                subject_id: format!("s{u}"),
                unit_id: format!("u{u}"),
                serial_level: p,
                covariates: BTreeMap::from([("age".to_string(), age)]),
                values: DMatrix::zeros(8, 8),
            });
        }
    }
    FunctionalDataset { grid, functions }
}

/// Fabricated posteriors with known draws for a glaucoma-style bundle:
/// fixed columns {intercept, age_lin, g1, g2}, one spline block, three unit
/// blocks.
fn fake_posteriors(
    bundle: &DesignBundle,
    k_count: usize,
    g: usize,
    seed: u64,
) -> Vec<CoefficientPosterior> {
    let a = bundle.n_fixed();
    let m = bundle.np_terms[0].dr.n_random();
    let h1 = bundle.z_blocks.len() + 1;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..k_count)
        .map(|k| CoefficientPosterior {
            k,
            fixed: DMatrix::from_fn(g, a, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal)),
            gamma: DMatrix::from_element(g, a, 1),
            vc: DMatrix::from_fn(g, h1, |_, _| 0.1 + 0.05 * rng.gen::<f64>()),
            spline: vec![DMatrix::from_fn(g, m, |_, _| {
                0.2 * rng.sample::<f64, _>(StandardNormal)
            })],
            accept_rate: vec![0.4; h1],
            param_names: vec![],
            geweke_z: vec![],
            geweke_p: vec![],
            ess: vec![],
        })
        .collect()
}

#[test]
fn back_project_basics_and_oracle() {
    let basis = toy_basis(20);
    let g = 12;
    // zero draws -> zero surface
    let zeros = DMatrix::zeros(g, 20);
    let surf = back_project(&zeros, &basis, &[0, 5, 17], "z").unwrap();
    assert_eq!(surf.draws, DMatrix::zeros(g, 3));
    // single nonzero coefficient -> scaled basis row
    let mut single = DMatrix::zeros(g, 20);
    for gi in 0..g {
        single[(gi, 7)] = 2.0 + gi as f64;
    }
    let targets: Vec<usize> = (0..64).collect();
    let surf = back_project(&single, &basis, &targets, "one").unwrap();
    let psi = basis.synthesis_rows();
    for gi in 0..g {
        for t in 0..64 {
            let expect = (2.0 + gi as f64) * psi[(7, t)];
            assert!((surf.draws[(gi, t)] - expect).abs() < 1e-12);
        }
    }
    // dense matrix oracle on random draws
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let draws = DMatrix::from_fn(g, 20, |_, _| rng.sample::<f64, _>(StandardNormal));
    let surf = back_project(&draws, &basis, &targets, "rand").unwrap();
    let dense = &draws * psi;
    assert!((&surf.draws - &dense).amax() < 1e-12);
}

#[test]
fn joint_band_contains_pointwise_everywhere() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    // heterogeneous, skewed draws
    let g = 500;
    let l = 40;
    let draws = DMatrix::from_fn(g, l, |_, t| {
        let base: f64 = rng.sample(StandardNormal);
        (base * (1.0 + t as f64 / 10.0)).powi(if t % 3 == 0 { 3 } else { 1 })
    });
    let surf = PosteriorSurface { label: "x".into(), draws };
    let band = joint_band(&surf, 0.05).unwrap();
    for t in 0..l {
        assert!(band.joint_lo[t] <= band.pointwise_lo[t] + 1e-12, "t={t}");
        assert!(band.joint_hi[t] >= band.pointwise_hi[t] - 1e-12, "t={t}");
        assert!(band.pointwise_lo[t] <= band.mean[t] && band.mean[t] <= band.pointwise_hi[t]);
    }
}

#[test]
fn joint_band_single_point_gaussian() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let g = 20_000;
    let draws = DMatrix::from_fn(g, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let surf = PosteriorSurface { label: "g".into(), draws };
    let band = joint_band(&surf, 0.05).unwrap();
    // single point: joint equals pointwise; half width ~ 1.96
    assert!((band.joint_multiplier - 1.96).abs() < 0.08, "q {}", band.joint_multiplier);
    assert!((band.joint_hi[0] - band.pointwise_hi[0]).abs() < 1e-12);
    // constant draws: zero-width bands, flagged
    let surf = PosteriorSurface { label: "c".into(), draws: DMatrix::from_element(200, 3, 7.0) };
    let band = joint_band(&surf, 0.05).unwrap();
    assert_eq!(band.collapsed, vec![0, 1, 2]);
    for t in 0..3 {
        assert_eq!(band.joint_lo[t], 7.0);
        assert_eq!(band.joint_hi[t], 7.0);
    }
}

#[test]
fn serial_integrals_match_closed_form() {
    let serial = SerialBasis::hyperbolic(&IOP).unwrap();
    let (i1, i2) = integrate_serial(&serial, 7.0, 45.0);
    // {1, G1, G2} spans {1, p, 1/p}: solve for the representation of p and
    // of 1/p on three levels, then compare against the exact integrals.
    let solve_rep = |f: &dyn Fn(f64) -> f64| -> (f64, f64, f64) {
        let ps = [7.0, 20.0, 45.0];
        let mut m = DMatrix::zeros(3, 3);
        let mut rhs = DVector::zeros(3);
        for (i, &p) in ps.iter().enumerate() {
            m[(i, 0)] = 1.0;
            m[(i, 1)] = serial.g1(p);
            m[(i, 2)] = serial.g2(p);
            rhs[i] = f(p);
        }
        let c = m.lu().solve(&rhs).unwrap();
        (c[0], c[1], c[2])
    };
    // f(p) = p: integral (45^2 - 7^2)/2
    let (c0, c1, c2) = solve_rep(&|p| p);
    let approx = c0 * 38.0 + c1 * i1 + c2 * i2;
    let exact = (45.0f64 * 45.0 - 49.0) / 2.0;
    assert!((approx - exact).abs() / exact < 1e-10, "{approx} vs {exact}");
    // f(p) = 1/p: integral ln(45/7)
    let (c0, c1, c2) = solve_rep(&|p| 1.0 / p);
    let approx = c0 * 38.0 + c1 * i1 + c2 * i2;
    let exact = (45.0f64 / 7.0).ln();
    assert!((approx - exact).abs() / exact < 1e-10, "{approx} vs {exact}");
    // general hyperbolic integrand c1 p + c2/p
    let (a0, a1, a2) = solve_rep(&|p| 0.7 * p + 1.3 / p);
    let approx = a0 * 38.0 + a1 * i1 + a2 * i2;
    let exact = 0.7 * (45.0f64 * 45.0 - 49.0) / 2.0 + 1.3 * (45.0f64 / 7.0).ln();
    assert!((approx - exact).abs() / exact.abs() < 1e-8);
}

#[test]
fn np_surface_and_auc_pipeline() {
    let ds = toy_dataset(6, 2);
    let spec = ModelSpec::parse("value ~ np(age) + hyper(iop) + (hyper(iop) | unit)").unwrap();
    let bundle = assemble(&ds, &spec).unwrap();
    let basis = toy_basis(10);
    let g = 150;
    let posteriors = fake_posteriors(&bundle, 10, g, 3);
    let ages: Vec<f64> = {
        let xs = &bundle.np_terms[0].x_values;
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0..11).map(|i| lo + (hi - lo) * i as f64 / 10.0).collect()
    };
    let locations: Vec<usize> = vec![0, 9, 33];

    // zero spline draws: f is linear in age per location
    let mut lin_post = posteriors.clone();
    for p in lin_post.iter_mut() {
        p.spline[0].fill(0.0);
    }
    let f = np_surface(&lin_post, &bundle, 0, &basis, &ages, &locations, false).unwrap();
    for gi in 0..g {
        for li in 0..locations.len() {
            // second differences vanish for a linear function
            for ai in 1..ages.len() - 1 {
                let y0 = f.draws[(gi, (ai - 1) * locations.len() + li)];
                let y1 = f.draws[(gi, ai * locations.len() + li)];
                let y2 = f.draws[(gi, (ai + 1) * locations.len() + li)];
                assert!((y2 - 2.0 * y1 + y0).abs() < 1e-10);
            }
        }
    }

    // direct spot check of the construction
    let f = np_surface(&posteriors, &bundle, 0, &basis, &ages, &locations, false).unwrap();
    let term = &bundle.np_terms[0];
    let x_mean =
        term.x_values.iter().sum::<f64>() / term.x_values.len() as f64;
    let zb = term.dr.z_design(&ages).unwrap();
    let psi = basis.synthesis_rows();
    for &(gi, ai, li) in &[(0usize, 0usize, 0usize), (7, 5, 2), (149, 10, 1)] {
        let mut expect = 0.0;
        for k in 0..10 {
            let mut fstar = (ages[ai] - x_mean) * posteriors[k].fixed[(gi, term.x_col)];
            for mm in 0..term.dr.n_random() {
                fstar += zb[(ai, mm)] * posteriors[k].spline[0][(gi, mm)];
            }
            expect += fstar * psi[(k, locations[li])];
        }
        let got = f.draws[(gi, ai * locations.len() + li)];
        assert!((got - expect).abs() < 1e-10, "({gi},{ai},{li}): {got} vs {expect}");
    }

    // centered surface integrates to ~0 over ages at every location
    let fc = np_surface(&posteriors, &bundle, 0, &basis, &ages, &locations, true).unwrap();
    for gi in 0..g {
        for li in 0..locations.len() {
            let s: f64 =
                (0..ages.len()).map(|ai| fc.draws[(gi, ai * locations.len() + li)]).sum();
            assert!(s.abs() < 1e-9);
        }
    }

    // AUC with zero B1, B2 equals f
    let zero_b = PosteriorSurface {
        label: "b".into(),
        draws: DMatrix::zeros(g, locations.len()),
    };
    let a = auc(&f, &zero_b, &zero_b, &bundle.serial_basis, (7.0, 45.0), ages.len()).unwrap();
    assert!((&a.draws - &f.draws).amax() < 1e-12);

    // AUC with nonzero B shifts every age by the same location constant
    let b1 = back_project(&stack_fixed(&posteriors, 2).unwrap(), &basis, &locations, "b1")
        .unwrap();
    let b2 = back_project(&stack_fixed(&posteriors, 3).unwrap(), &basis, &locations, "b2")
        .unwrap();
    let a = auc(&f, &b1, &b2, &bundle.serial_basis, (7.0, 45.0), ages.len()).unwrap();
    let (i1, i2) = integrate_serial(&bundle.serial_basis, 7.0, 45.0);
    for gi in 0..20 {
        for li in 0..locations.len() {
            let shift = i1 * b1.draws[(gi, li)] + i2 * b2.draws[(gi, li)];
            for ai in 0..ages.len() {
                let idx = ai * locations.len() + li;
                assert!((a.draws[(gi, idx)] - f.draws[(gi, idx)] - shift).abs() < 1e-12);
            }
        }
    }

    // derivative: finite differences of the uncentered surface
    let d = auc_derivative(&posteriors, &bundle, 0, &basis, &ages, &locations).unwrap();
    let h = 1e-4;
    for &(gi, ai, li) in &[(0usize, 3usize, 0usize), (11, 7, 2)] {
        let x = ages[ai];
        let fp = np_surface(&posteriors, &bundle, 0, &basis, &[x + h], &locations, false).unwrap();
        let fm = np_surface(&posteriors, &bundle, 0, &basis, &[x - h], &locations, false).unwrap();
        let fd = (fp.draws[(gi, li)] - fm.draws[(gi, li)]) / (2.0 * h);
        let got = d.draws[(gi, ai * locations.len() + li)];
        assert!(
            (got - fd).abs() / fd.abs().max(1e-6) < 1e-4,
            "({gi},{ai},{li}): {got} vs {fd}"
        );
    }

    // zero spline draws: derivative equals back-projected slope coefficient
    let d0 = auc_derivative(&lin_post, &bundle, 0, &basis, &ages, &locations).unwrap();
    let b3 = back_project(&stack_fixed(&lin_post, 1).unwrap(), &basis, &locations, "b3").unwrap();
    for gi in 0..20 {
        for ai in 0..ages.len() {
            for li in 0..locations.len() {
                let got = d0.draws[(gi, ai * locations.len() + li)];
                assert!((got - b3.draws[(gi, li)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn df_map_bounds_and_constant_case() {
    // enough units for 9+ distinct ages, else the spline cross-product is
    // genuinely singular
    let ds = toy_dataset(12, 9);
    let spec = ModelSpec::parse("value ~ np(age) + hyper(iop) + (hyper(iop) | unit)").unwrap();
    let bundle = assemble(&ds, &spec).unwrap();
    let basis = toy_basis(10);
    let g = 100;
    let posteriors = fake_posteriors(&bundle, 10, g, 7);
    let locations = vec![0usize, 20, 55];
    let d = df_map(&posteriors, &bundle, 0, &basis, &locations).unwrap();
    for gi in 0..g {
        for c in 0..locations.len() {
            let v = d.draws[(gi, c)];
            assert!((2.0..=9.0).contains(&v), "df {v}");
        }
    }
    // homogeneous variance surfaces: with the complete orthonormal basis,
    // sum_k psi_k(t)^2 = 1 everywhere, so equal per-coefficient variances
    // induce flat q(t), s(t) and a constant DF map
    let basis_full = toy_basis(64);
    let mut posteriors = fake_posteriors(&bundle, 64, g, 8);
    for p in posteriors.iter_mut() {
        let h1 = p.vc.ncols();
        for gi in 0..g {
            for h in 0..h1 - 1 {
                p.vc[(gi, h)] = 0.4;
            }
            p.vc[(gi, h1 - 1)] = 0.2;
        }
    }
    let d = df_map(&posteriors, &bundle, 0, &basis_full, &locations).unwrap();
    for gi in 0..5 {
        let v0 = d.draws[(gi, 0)];
        for c in 1..locations.len() {
            assert!(
                (d.draws[(gi, c)] - v0).abs() < 1e-8,
                "row {gi}: {} vs {v0}",
                d.draws[(gi, c)]
            );
        }
    }
}

#[test]
fn aggregation_weights_and_regions() {
    let grid = SurfaceGrid::new(8, 8).unwrap();
    let g = 120;
    // constant surface: any aggregation returns the constant
    let c = 3.3;
    let surf = PosteriorSurface {
        label: "c".into(),
        draws: DMatrix::from_element(g, grid.total(), c),
    };
    let whole = aggregate(
        &surf,
        &grid,
        &Region::MeridionalBand { theta_lo: 0.0, theta_hi: 90.0 },
        false,
    )
    .unwrap();
    for gi in 0..g {
        assert!((whole.draws[(gi, 0)] - c).abs() < 1e-12);
    }
    // linear-in-theta surface: flat vs area weighting differ by the exact
    // discrete sin-theta ratio
    let mut draws = DMatrix::zeros(g, grid.total());
    for t in 0..grid.total() {
        let (r, _) = grid.unflat(t);
        let th = grid.theta_at(r);
        for gi in 0..g {
            draws[(gi, t)] = th;
        }
    }
    let surf = PosteriorSurface { label: "lin".into(), draws };
    let region = Region::MeridionalBand { theta_lo: 9.0, theta_hi: 24.0 };
    let area = aggregate(&surf, &grid, &region, false).unwrap();
    let flat = aggregate(&surf, &grid, &region, true).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut flat_num = 0.0;
    let mut flat_den = 0.0;
    for r in 0..grid.n_meridional {
        let th = grid.theta_at(r);
        let w = th.to_radians().sin() * grid.n_circumferential as f64;
        num += w * th;
        den += w;
        flat_num += grid.n_circumferential as f64 * th;
        flat_den += grid.n_circumferential as f64;
    }
    assert!((area.draws[(0, 0)] - num / den).abs() < 1e-12);
    assert!((flat.draws[(0, 0)] - flat_num / flat_den).abs() < 1e-12);
    assert!(area.draws[(0, 0)] != flat.draws[(0, 0)]);

    // disjoint bands partition the full band area (weight sums add)
    let pts_in = |lo: f64, hi: f64| -> f64 {
        (0..grid.total())
            .filter(|&t| {
                let (r, _) = grid.unflat(t);
                let th = grid.theta_at(r);
                th >= lo && th <= hi
            })
            .map(|t| {
                let (r, _) = grid.unflat(t);
                grid.theta_at(r).to_radians().sin()
            })
            .sum()
    };
    let pp: f64 = pts_in(9.0, 16.9);
    let mp: f64 = pts_in(17.0, 24.0);
    let all: f64 = pts_in(9.0, 24.0);
    assert!((pp + mp - all).abs() < 1e-12);

    // empty region errors
    assert!(matches!(
        aggregate(&surf, &grid, &Region::MeridionalBand { theta_lo: 30.0, theta_hi: 40.0 }, false),
        Err(InferenceError::EmptyRegion)
    ));

    // circumferential average has one point per meridional row
    let ca = aggregate(&surf, &grid, &Region::CircumferentialAverage, false).unwrap();
    assert_eq!(ca.n_points(), grid.n_meridional);
    for r in 0..grid.n_meridional {
        assert!((ca.draws[(0, r)] - grid.theta_at(r)).abs() < 1e-12);
    }
}

#[test]
fn serial_correlation_is_valid() {
    let serial = SerialBasis::hyperbolic(&IOP).unwrap();
    let corr = serial_correlation(&serial, &[0.6, 0.25, 0.1], 0.05).unwrap();
    let n = corr.nrows();
    for a in 0..n {
        assert!((corr[(a, a)] - 1.0).abs() < 1e-12);
        for b in 0..n {
            assert!(corr[(a, b)].abs() <= 1.0 + 1e-12);
            assert!((corr[(a, b)] - corr[(b, a)]).abs() < 1e-12);
        }
    }
    let eig = nalgebra::SymmetricEigen::new(corr);
    for ev in eig.eigenvalues.iter() {
        assert!(*ev >= -1e-8, "eigenvalue {ev}");
    }
}

#[test]
fn pseudo_data_variances_and_determinism() {
    let ds = toy_dataset(300, 11);
    let spec = ModelSpec::parse("value ~ np(age) + hyper(iop) + (hyper(iop) | unit)").unwrap();
    let bundle = assemble(&ds, &spec).unwrap();
    let basis = toy_basis(6);
    let k = basis.k();
    let h = bundle.z_blocks.len();
    let mut fixed = DMatrix::zeros(bundle.n_fixed(), k);
    for kk in 0..k {
        fixed[(0, kk)] = 1.0 + kk as f64 * 0.3;
    }
    // zero variances: surfaces equal the fixed-effect surface exactly
    let params0 = PseudoParams { fixed: fixed.clone(), vc: DMatrix::zeros(h, k), s: vec![0.0; k] };
    let sim0 = simulate_pseudo(&ds, &bundle, &basis, &params0, 5).unwrap();
    let expect: Vec<f64> = {
        let row: Vec<f64> = (0..k).map(|kk| fixed[(0, kk)]).collect();
        basis.synthesize_flat(&row).unwrap()
    };
    for f in &sim0.functions {
        for r in 0..8 {
            for c in 0..8 {
                assert!((f.values[(r, c)] - expect[sim0.grid.flat(r, c)]).abs() < 1e-10);
            }
        }
    }
    // determinism
    let sim0b = simulate_pseudo(&ds, &bundle, &basis, &params0, 5).unwrap();
    assert_eq!(sim0.functions[3].values, sim0b.functions[3].values);

    // unit-intercept variance + residual: per-coefficient variance over units
    // matches q + s within Monte Carlo tolerance
    let mut vc = DMatrix::zeros(h, k);
    // find the unit intercept block
    let unit_block = bundle
        .z_blocks
        .iter()
        .position(|z| z.name == "unit:1")
        .expect("unit intercept block");
    let (q_true, s_true) = (0.8, 0.4);
    for kk in 0..k {
        vc[(unit_block, kk)] = q_true;
    }
    let params =
        PseudoParams { fixed: DMatrix::zeros(bundle.n_fixed(), k), vc, s: vec![s_true; k] };
    let sim = simulate_pseudo(&ds, &bundle, &basis, &params, 99).unwrap();
    // transform back to coefficients and compute per-coefficient variance
    let tr = TensorTransform::new(
        sim.grid.clone(),
        WaveletSpec {
            levels: 1,
            boundary_meridional: Boundary::Periodic,
            ..WaveletSpec::default()
        },
    )
    .unwrap();
    let coeffs = tr.analyze_dataset(&sim).unwrap();
    let expect = q_true + s_true;
    let mut vars = Vec::with_capacity(k);
    for kk in 0..k {
        let col: Vec<f64> = (0..sim.n()).map(|i| coeffs[(i, kk)]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!((var - expect).abs() / expect < 0.3, "k={kk}: var {var} vs {expect}");
        vars.push(var);
    }
    let mean_var = vars.iter().sum::<f64>() / vars.len() as f64;
    assert!(
        (mean_var - expect).abs() / expect < 0.1,
        "mean var {mean_var} vs {expect}"
    );
}
