//! Pseudo-data generation: smooth analytic fixed-effect surfaces projected
//! into the tensor basis, random-effect and residual variances concentrated
//! on the active coefficient set, broadband low-level noise elsewhere.

use super::{numerical, validation, CmdResult, Options, Stages, TruthFile};
use crate::config::RunConfig;
use crate::manifest::StageWriter;
use nalgebra::DMatrix;
use spfmm::basis::TensorTransform;
use spfmm::design::assemble;
use spfmm::grid::{FunctionRecord, FunctionalDataset, SurfaceGrid};
use spfmm::inference::{simulate_pseudo_full, PseudoParams};
use std::collections::BTreeMap;

/// Template metadata: deterministic ages over the configured range, two units
/// per subject except the last `single_unit_subjects`, all serial levels.
pub fn build_template(cfg: &RunConfig) -> anyhow::Result<FunctionalDataset> {
    let sim = &cfg.simulate;
    let grid = SurfaceGrid::new(sim.n_meridional, sim.n_circumferential)?;
    let (age_lo, age_hi) = sim.age_range;
    let mut functions = Vec::new();
    for si in 0..sim.subjects {
        let age = if sim.subjects > 1 {
            age_lo + (age_hi - age_lo) * si as f64 / (sim.subjects - 1) as f64
        } else {
            0.5 * (age_lo + age_hi)
        };
        let units = if si >= sim.subjects.saturating_sub(sim.single_unit_subjects) { 1 } else { 2 };
        for u in 0..units {
            for &p in &sim.serial_levels {
                functions.push(FunctionRecord {
                    id: format!("s{si:02}_e{u}_p{p:.0}"),
                    subject_id: format!("s{si:02}"),
                    unit_id: format!("s{si:02}_e{u}"),
                    serial_level: p,
                    covariates: BTreeMap::from([("age".to_string(), age)]),
                    values: DMatrix::zeros(grid.n_meridional, grid.n_circumferential),
                });
            }
        }
    }
    Ok(FunctionalDataset { grid, functions })
}

/// Analytic fixed-effect surfaces evaluated on the grid, one per design
/// column of the default model {intercept, G1, G2, age}.
fn analytic_surface(grid: &SurfaceGrid, which: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.total()];
    let (th_lo, th_hi) = grid.theta_range;
    for r in 0..grid.n_meridional {
        let th = (grid.theta_at(r) - th_lo) / (th_hi - th_lo); // 0 at the inner edge
        for c in 0..grid.n_circumferential {
            let ph = grid.phi_at(c).to_radians();
            let v = match which {
                // baseline: higher near the inner edge, gentle ripple
                0 => 3.0 + 1.4 * (-2.0 * th).exp() + 0.25 * ph.sin() * (1.0 - th),
                // first serial column
                1 => 0.9 * (1.0 - th) * (1.0 - th) + 0.2 * (2.0 * ph).cos(),
                // second serial column
                2 => 0.5 + 0.3 * th + 0.15 * (ph + 0.7).sin(),
                // age slope: negative, strongest near the inner edge
                _ => -0.030 * (1.0 + (-3.0 * th).exp()) * (1.0 + 0.3 * (ph + 1.1).sin()),
            };
            out[grid.flat(r, c)] = v;
        }
    }
    out
}

/// Build basis-space truth for the default glaucoma-style model over the
/// full tensor space.
pub fn build_truth(
    cfg: &RunConfig,
    transform: &TensorTransform,
    bundle: &spfmm::design::DesignBundle,
) -> anyhow::Result<TruthFile> {
    let sim = &cfg.simulate;
    let grid = &transform.grid;
    let k_full = transform.k_full();
    let a_count = bundle.n_fixed();
    let h_count = bundle.z_blocks.len();

    // project the analytic surfaces; column a of the design maps to surface a
    let mut fixed = DMatrix::zeros(a_count, k_full);
    for a in 0..a_count {
        let flat = analytic_surface(grid, a.min(3));
        let mut values = DMatrix::zeros(grid.n_meridional, grid.n_circumferential);
        for r in 0..grid.n_meridional {
            for c in 0..grid.n_circumferential {
                values[(r, c)] = flat[grid.flat(r, c)];
            }
        }
        let coeffs = transform.analyze(&values)?;
        for k in 0..k_full {
            fixed[(a, k)] = coeffs[k];
        }
    }
    // restrict to the top-energy active set
    let mut energy: Vec<(usize, f64)> = (0..k_full)
        .map(|k| (k, (0..a_count).map(|a| fixed[(a, k)] * fixed[(a, k)]).sum()))
        .collect();
    energy.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    let k_active = sim.k_active.min(k_full);
    let active: Vec<usize> = energy[..k_active].iter().map(|&(k, _)| k).collect();
    let active_set: std::collections::BTreeSet<usize> = active.iter().copied().collect();
    let total_energy: f64 = energy.iter().map(|&(_, e)| e).sum();
    for k in 0..k_full {
        if !active_set.contains(&k) {
            for a in 0..a_count {
                fixed[(a, k)] = 0.0;
            }
        }
    }

    // variance components proportional to the per-coefficient fixed energy;
    // serial-level shares mirror the study's ordering (intercept largest)
    let mut vc = DMatrix::zeros(h_count, k_full);
    let mut s = vec![0.0; k_full];
    let share = |name: &str| -> f64 {
        if name.starts_with("spline") {
            0.15
        } else if name.ends_with(":1") {
            0.40
        } else if name.ends_with(":g1") {
            0.10
        } else {
            0.05
        }
    };
    for &k in &active {
        let e: f64 = (0..a_count).map(|a| fixed[(a, k)] * fixed[(a, k)]).sum();
        for (h, z) in bundle.z_blocks.iter().enumerate() {
            vc[(h, k)] = sim.re_scale * share(&z.name) * e;
        }
        s[k] = 0.01 * e + 1e-12;
    }
    // broadband noise on the inactive set
    let k_off = k_full - k_active;
    if k_off > 0 && sim.noise_fraction > 0.0 {
        let s_off = sim.noise_fraction * total_energy / k_off as f64;
        for k in 0..k_full {
            if !active_set.contains(&k) {
                s[k] = s_off;
            }
        }
    }
    Ok(TruthFile { fixed, vc, s })
}

pub fn run(cfg: &RunConfig, _opts: &Options) -> CmdResult {
    let dir = Stages::simulate(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| validation(anyhow::Error::from(e)))?;
    let mut stage = StageWriter::new(&cfg.run.output_dir, "simulate", &cfg.content_hash(), cfg.run.seed);

    let template = build_template(cfg).map_err(validation)?;
    let spec = cfg.wavelet.to_spec().map_err(validation)?;
    let transform =
        TensorTransform::new(template.grid.clone(), spec).map_err(|e| validation(anyhow::Error::from(e)))?;
    let model = cfg.model.to_spec().map_err(validation)?;
    let bundle = assemble(&template, &model).map_err(|e| validation(anyhow::Error::from(e)))?;
    let truth = build_truth(cfg, &transform, &bundle).map_err(numerical)?;
    let params = PseudoParams { fixed: truth.fixed.clone(), vc: truth.vc.clone(), s: truth.s.clone() };
    let ds = simulate_pseudo_full(&template, &bundle, &transform, &params, cfg.run.seed)
        .map_err(|e| numerical(anyhow::Error::from(e)))?;

    spfmm::io::write_dataset(&dir, &ds).map_err(|e| numerical(anyhow::Error::from(e)))?;
    super::write_truth(&dir.join("truth.bin"), &truth).map_err(numerical)?;
    let summary = serde_json::json!({
        "functions": ds.n(),
        "grid": [ds.grid.n_meridional, ds.grid.n_circumferential],
        "k_full": transform.k_full(),
        "k_active": cfg.simulate.k_active.min(transform.k_full()),
        "noise_fraction": cfg.simulate.noise_fraction,
        "seed": cfg.run.seed,
    });
    spfmm::io::write_atomic(
        &dir.join("truth_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )
    .map_err(|e| numerical(anyhow::Error::from(e)))?;

    for name in ["manifest.json", "data.bin", "truth.bin", "truth_summary.json"] {
        stage.record_output(&dir.join(name)).map_err(numerical)?;
    }
    stage.finish(&dir).map_err(numerical)?;
    log::info!("simulate: wrote {} functions to {}", ds.n(), dir.display());
    println!("simulate: {} functions on a {}x{} grid", ds.n(), ds.grid.n_meridional, ds.grid.n_circumferential);
    Ok(())
}
