//! Posterior inference stage: band CSVs for fixed-effect surfaces, the
//! nonparametric age effect, serial-aggregated (AUC) summaries and their
//! derivatives, degrees-of-freedom maps, variance surfaces, regional
//! aggregates, serial correlations, and a diagnostics summary.

use super::{numerical, validation, CmdResult, Options, Stages};
use crate::config::RunConfig;
use crate::heatmap::write_heatmap;
use crate::manifest::{verify_stage, StageWriter};
use anyhow::Context;
use nalgebra::DMatrix;
use spfmm::design::assemble;
use spfmm::grid::SurfaceGrid;
use spfmm::inference::{
    auc, auc_derivative, auc_derivative_proj, back_project, back_project_weighted,
    diagnostics_summary, df_map, joint_band, np_surface, np_surface_proj, projection_weighted,
    region_weights, serial_correlation, stack_fixed, BandSummary,
};
use spfmm::io::{read_basis, read_dataset, write_atomic};
use spfmm::mcmc::{store, CoefficientPosterior};
use std::fmt::Write as _;
use std::path::Path;

fn strided_locations(grid: &SurfaceGrid, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for r in (0..grid.n_meridional).step_by(stride) {
        for c in (0..grid.n_circumferential).step_by(stride) {
            out.push(grid.flat(r, c));
        }
    }
    out
}

fn write_surface_csv(
    path: &Path,
    grid: &SurfaceGrid,
    locations: &[usize],
    band: &BandSummary,
) -> anyhow::Result<()> {
    let mut text = String::from("theta,phi,mean,sd,pw_lo,pw_hi,joint_lo,joint_hi\n");
    for (i, &t) in locations.iter().enumerate() {
        let (r, c) = grid.unflat(t);
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            grid.theta_at(r),
            grid.phi_at(c),
            band.mean[i],
            band.sd[i],
            band.pointwise_lo[i],
            band.pointwise_hi[i],
            band.joint_lo[i],
            band.joint_hi[i]
        );
    }
    write_atomic(path, text.as_bytes()).context("writing surface csv")?;
    Ok(())
}

fn write_age_surface_csv(
    path: &Path,
    grid: &SurfaceGrid,
    ages: &[f64],
    locations: &[usize],
    band: &BandSummary,
) -> anyhow::Result<()> {
    let mut text = String::from("age,theta,phi,mean,sd,pw_lo,pw_hi,joint_lo,joint_hi\n");
    for (ai, age) in ages.iter().enumerate() {
        for (li, &t) in locations.iter().enumerate() {
            let i = ai * locations.len() + li;
            let (r, c) = grid.unflat(t);
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{},{},{}",
                age,
                grid.theta_at(r),
                grid.phi_at(c),
                band.mean[i],
                band.sd[i],
                band.pointwise_lo[i],
                band.pointwise_hi[i],
                band.joint_lo[i],
                band.joint_hi[i]
            );
        }
    }
    write_atomic(path, text.as_bytes()).context("writing age surface csv")?;
    Ok(())
}

fn write_age_series_csv(path: &Path, ages: &[f64], band: &BandSummary) -> anyhow::Result<()> {
    let mut text = String::from("age,mean,sd,pw_lo,pw_hi,joint_lo,joint_hi\n");
    for (ai, age) in ages.iter().enumerate() {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            age,
            band.mean[ai],
            band.sd[ai],
            band.pointwise_lo[ai],
            band.pointwise_hi[ai],
            band.joint_lo[ai],
            band.joint_hi[ai]
        );
    }
    write_atomic(path, text.as_bytes()).context("writing age series csv")?;
    Ok(())
}

/// Evenly subsample the kept draws of each posterior (for the DF map).
fn subsample_draws(posteriors: &[CoefficientPosterior], target: usize) -> Vec<CoefficientPosterior> {
    let g = posteriors.first().map(|p| p.n_draws()).unwrap_or(0);
    if g <= target {
        return posteriors.to_vec();
    }
    let idx: Vec<usize> = (0..target).map(|i| i * g / target).collect();
    posteriors
        .iter()
        .map(|p| {
            let pick = |m: &DMatrix<f64>| -> DMatrix<f64> {
                DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
            };
            CoefficientPosterior {
                k: p.k,
                fixed: pick(&p.fixed),
                gamma: DMatrix::from_fn(idx.len(), p.gamma.ncols(), |r, c| p.gamma[(idx[r], c)]),
                vc: pick(&p.vc),
                spline: p.spline.iter().map(&pick).collect(),
                accept_rate: p.accept_rate.clone(),
                param_names: p.param_names.clone(),
                geweke_z: p.geweke_z.clone(),
                geweke_p: p.geweke_p.clone(),
                ess: p.ess.clone(),
            }
        })
        .collect()
}

pub fn run(cfg: &RunConfig, _opts: &Options) -> CmdResult {
    let dir = Stages::infer(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| validation(anyhow::Error::from(e)))?;
    let mut stage =
        StageWriter::new(&cfg.run.output_dir, "infer", &cfg.content_hash(), cfg.run.seed);

    let tdir = Stages::transform(cfg);
    let fdir = Stages::fit(cfg);
    verify_stage(&cfg.run.output_dir, &tdir).map_err(validation)?;
    verify_stage(&cfg.run.output_dir, &fdir).map_err(validation)?;
    let ds = read_dataset(&Stages::dataset_manifest(cfg))
        .map_err(|e| validation(anyhow::Error::from(e)))?;
    let basis =
        read_basis(&tdir.join("basis.bin")).map_err(|e| validation(anyhow::Error::from(e)))?;
    let model = cfg.model.to_spec().map_err(validation)?;
    let bundle = assemble(&ds, &model).map_err(|e| validation(anyhow::Error::from(e)))?;

    // load all posteriors in coefficient order
    let mut posteriors = Vec::with_capacity(basis.k());
    for k in 0..basis.k() {
        let path = super::fit::posterior_path(&fdir, k);
        let post = store::read_posterior(&path).map_err(|e| validation(anyhow::Error::from(e)))?;
        posteriors.push(post);
    }
    let grid = &ds.grid;
    let inf = &cfg.inference;
    let locations = strided_locations(grid, inf.location_stride);
    let mut outputs: Vec<std::path::PathBuf> = Vec::new();

    // fixed-effect surfaces
    for a in 0..bundle.n_fixed() {
        let draws = stack_fixed(&posteriors, a).map_err(|e| numerical(anyhow::Error::from(e)))?;
        let name = bundle.x_names[a].replace([':', '(', ')'], "_");
        let surf = back_project(&draws, &basis, &locations, format!("B[{name}]"))
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        let band = joint_band(&surf, inf.alpha).map_err(|e| numerical(anyhow::Error::from(e)))?;
        let path = dir.join(format!("b_{name}.csv"));
        write_surface_csv(&path, grid, &locations, &band).map_err(numerical)?;
        outputs.push(path);
        if inf.heatmaps {
            // posterior-mean surface on the full grid from mean coefficients
            let g = draws.nrows() as f64;
            let mean_coeffs =
                DMatrix::from_fn(1, basis.k(), |_, k| draws.column(k).sum() / g);
            let full = back_project(
                &mean_coeffs,
                &basis,
                &spfmm::inference::full_grid(grid),
                "mean",
            )
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let vals: Vec<f64> = (0..grid.total()).map(|t| full.draws[(0, t)]).collect();
            let hpath = dir.join(format!("b_{name}.png"));
            write_heatmap(&hpath, grid, &vals, 4).map_err(numerical)?;
            outputs.push(hpath);
        }
    }

    // nonparametric term summaries
    if !bundle.np_terms.is_empty() {
        let term = &bundle.np_terms[0];
        let xs = &term.x_values;
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ages: Vec<f64> = (0..inf.n_ages)
            .map(|i| lo + (hi - lo) * i as f64 / (inf.n_ages.max(2) - 1) as f64)
            .collect();
        let age_locations = strided_locations(grid, inf.age_location_stride);

        let f = np_surface(&posteriors, &bundle, 0, &basis, &ages, &age_locations, true)
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        let band = joint_band(&f, inf.alpha).map_err(|e| numerical(anyhow::Error::from(e)))?;
        let path = dir.join("f_age.csv");
        write_age_surface_csv(&path, grid, &ages, &age_locations, &band).map_err(numerical)?;
        outputs.push(path);

        // serial-aggregated summaries need the hyperbolic columns
        let g1_col = bundle.x_names.iter().position(|n| n.ends_with("_g1"));
        let g2_col = bundle.x_names.iter().position(|n| n.ends_with("_g2"));
        if let (Some(a1), Some(a2)) = (g1_col, g2_col) {
            let b1d = stack_fixed(&posteriors, a1).map_err(|e| numerical(anyhow::Error::from(e)))?;
            let b2d = stack_fixed(&posteriors, a2).map_err(|e| numerical(anyhow::Error::from(e)))?;
            let b1 = back_project(&b1d, &basis, &age_locations, "b1")
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let b2 = back_project(&b2d, &basis, &age_locations, "b2")
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let auc_surf = auc(&f, &b1, &b2, &bundle.serial_basis, inf.serial_range, ages.len())
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let band =
                joint_band(&auc_surf, inf.alpha).map_err(|e| numerical(anyhow::Error::from(e)))?;
            let path = dir.join("auc.csv");
            write_age_surface_csv(&path, grid, &ages, &age_locations, &band).map_err(numerical)?;
            outputs.push(path);

            let deriv = auc_derivative(&posteriors, &bundle, 0, &basis, &ages, &age_locations)
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let band =
                joint_band(&deriv, inf.alpha).map_err(|e| numerical(anyhow::Error::from(e)))?;
            let path = dir.join("auc_derivative.csv");
            write_age_surface_csv(&path, grid, &ages, &age_locations, &band).map_err(numerical)?;
            outputs.push(path);

            // regional aggregates of AUC and its derivative
            for region in &inf.regions {
                let w = region_weights(grid, region.theta_lo, region.theta_hi, inf.flat_weights)
                    .map_err(|e| validation(anyhow::Error::from(e)))?;
                let proj = projection_weighted(&basis, std::slice::from_ref(&w))
                    .map_err(|e| numerical(anyhow::Error::from(e)))?;
                let f_r = np_surface_proj(&posteriors, &bundle, 0, &proj, &ages, true)
                    .map_err(|e| numerical(anyhow::Error::from(e)))?;
                let b1_r = back_project_weighted(&b1d, &basis, std::slice::from_ref(&w), "b1")
                    .map_err(|e| numerical(anyhow::Error::from(e)))?;
                let b2_r = back_project_weighted(&b2d, &basis, std::slice::from_ref(&w), "b2")
                    .map_err(|e| numerical(anyhow::Error::from(e)))?;
                let auc_r = auc(&f_r, &b1_r, &b2_r, &bundle.serial_basis, inf.serial_range, ages.len())
                    .map_err(|e| numerical(anyhow::Error::from(e)))?;
                let band =
                    joint_band(&auc_r, inf.alpha).map_err(|e| numerical(anyhow::Error::from(e)))?;
                let path = dir.join(format!("region_{}_auc.csv", region.label));
                write_age_series_csv(&path, &ages, &band).map_err(numerical)?;
                outputs.push(path);

                let d_r = auc_derivative_proj(&posteriors, &bundle, 0, &proj, &ages)
                    .map_err(|e| numerical(anyhow::Error::from(e)))?;
                let band =
                    joint_band(&d_r, inf.alpha).map_err(|e| numerical(anyhow::Error::from(e)))?;
                let path = dir.join(format!("region_{}_auc_derivative.csv", region.label));
                write_age_series_csv(&path, &ages, &band).map_err(numerical)?;
                outputs.push(path);
            }
        }

        // degrees-of-freedom map on a coarse grid, subsampled draws
        let df_stride_m = (grid.n_meridional / inf.df_locations.max(1)).max(1);
        let df_stride = df_stride_m.max(grid.n_circumferential / inf.df_locations.max(1)).max(1);
        let df_locs = strided_locations(grid, df_stride);
        let sub = subsample_draws(&posteriors, inf.df_draws.max(1));
        let df = df_map(&sub, &bundle, 0, &basis, &df_locs)
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        let mean = df.mean();
        let mut text = String::from("theta,phi,df_mean\n");
        for (i, &t) in df_locs.iter().enumerate() {
            let (r, c) = grid.unflat(t);
            let _ = writeln!(text, "{},{},{}", grid.theta_at(r), grid.phi_at(c), mean[i]);
        }
        let path = dir.join("df.csv");
        write_atomic(&path, text.as_bytes()).map_err(|e| numerical(anyhow::Error::from(e)))?;
        outputs.push(path);
    }

    // induced variance surfaces at posterior-mean variance components
    let g = posteriors[0].n_draws() as f64;
    let h_blocks = bundle.z_blocks.len();
    for h in 0..=h_blocks {
        let name = if h < h_blocks {
            bundle.z_blocks[h].name.replace([':', '(', ')'], "_")
        } else {
            "residual".to_string()
        };
        let mean_vc: Vec<f64> = posteriors
            .iter()
            .map(|p| (0..p.n_draws()).map(|gi| p.vc[(gi, h)]).sum::<f64>() / g)
            .collect();
        let surface = basis
            .induced_variance_surface(&mean_vc)
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        let mut text = String::from("theta,phi,variance\n");
        for t in (0..grid.total()).step_by(inf.location_stride.max(1)) {
            let (r, c) = grid.unflat(t);
            let _ = writeln!(text, "{},{},{}", grid.theta_at(r), grid.phi_at(c), surface[t]);
        }
        let path = dir.join(format!("variance_{name}.csv"));
        write_atomic(&path, text.as_bytes()).map_err(|e| numerical(anyhow::Error::from(e)))?;
        outputs.push(path);
        if inf.heatmaps {
            let hpath = dir.join(format!("variance_{name}.png"));
            write_heatmap(&hpath, grid, &surface, 4).map_err(numerical)?;
            outputs.push(hpath);
        }
    }

    // induced serial correlation at sample locations (posterior-mean vc)
    {
        let unit_blocks: Vec<usize> = (0..h_blocks)
            .filter(|&h| {
                matches!(bundle.z_blocks[h].kind, spfmm::design::ZBlockKind::Grouped { .. })
            })
            .collect();
        if !unit_blocks.is_empty() {
            let sample_locs =
                [grid.flat(0, 0), grid.flat(grid.n_meridional / 2, grid.n_circumferential / 2)];
            let mut text = String::from("theta,phi,p1,p2,correlation\n");
            for &t in &sample_locs {
                // variance surfaces per block at this location
                let q_t: Vec<f64> = unit_blocks
                    .iter()
                    .map(|&h| {
                        let mean_vc: Vec<f64> = posteriors
                            .iter()
                            .map(|p| (0..p.n_draws()).map(|gi| p.vc[(gi, h)]).sum::<f64>() / g)
                            .collect();
                        basis
                            .induced_variance_surface(&mean_vc)
                            .map(|s| s[t])
                            .unwrap_or(0.0)
                    })
                    .collect();
                let s_t = {
                    let mean_vc: Vec<f64> = posteriors
                        .iter()
                        .map(|p| {
                            (0..p.n_draws()).map(|gi| p.vc[(gi, h_blocks)]).sum::<f64>() / g
                        })
                        .collect();
                    basis.induced_variance_surface(&mean_vc).map(|s| s[t]).unwrap_or(0.0)
                };
                // q in the serial-basis function order {1, g1, g2}
                let mut q_serial = vec![0.0; bundle.serial_basis.n_functions()];
                for (i, &h) in unit_blocks.iter().enumerate() {
                    if i < q_serial.len() {
                        q_serial[i] = q_t[i].max(0.0);
                    }
                    let _ = h;
                }
                if let Ok(corr) = serial_correlation(&bundle.serial_basis, &q_serial, s_t) {
                    let (r, c) = grid.unflat(t);
                    let levels = &bundle.serial_basis.levels;
                    for (i, &p1) in levels.iter().enumerate() {
                        for (j, &p2) in levels.iter().enumerate() {
                            let _ = writeln!(
                                text,
                                "{},{},{},{},{}",
                                grid.theta_at(r),
                                grid.phi_at(c),
                                p1,
                                p2,
                                corr[(i, j)]
                            );
                        }
                    }
                }
            }
            let path = dir.join("serial_correlation.csv");
            write_atomic(&path, text.as_bytes()).map_err(|e| numerical(anyhow::Error::from(e)))?;
            outputs.push(path);
        }
    }

    // diagnostics summary
    let diag = diagnostics_summary(&posteriors);
    let path = dir.join("diagnostics.json");
    write_atomic(&path, serde_json::to_string_pretty(&diag).unwrap().as_bytes())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    outputs.push(path);

    for p in &outputs {
        stage.record_output(p).map_err(numerical)?;
    }
    stage.finish(&dir).map_err(numerical)?;
    println!(
        "infer: wrote {} artifacts; Geweke p<0.05 fraction {:.3}, acceptance in [{:.3}, {:.3}]",
        outputs.len(),
        diag.fraction_p_below_05,
        diag.accept_rate_range.0,
        diag.accept_rate_range.1
    );
    Ok(())
}
