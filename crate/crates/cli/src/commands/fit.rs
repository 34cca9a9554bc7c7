//! Fit stage: REML starting values, shrinkage hyperparameters, and one
//! sampler per coefficient. Completed coefficients are detected by their
//! posterior files and skipped on rerun, so interrupted runs resume.

use super::{numerical, validation, CmdResult, Failure, Options, Stages};
use crate::config::RunConfig;
use crate::manifest::{verify_stage, StageWriter};
use nalgebra::{DMatrix, DVector};
use spfmm::basis::BasisKind;
use spfmm::design::assemble;
use spfmm::io::{read_basis, read_dataset, write_atomic};
use spfmm::lmm::{fit_bundle, FitOptions, LmmFit};
use spfmm::mcmc::{
    chain_inputs, derive_seed, empirical_bayes, regularization_sets, run_chain, store,
    ChainConfig, McmcDesign, ShrinkageHyper,
};

pub fn posterior_path(dir: &std::path::Path, k: usize) -> std::path::PathBuf {
    dir.join("posterior").join(format!("k_{k:05}.post"))
}

pub fn run(cfg: &RunConfig, opts: &Options) -> CmdResult {
    let dir = Stages::fit(cfg);
    std::fs::create_dir_all(dir.join("posterior")).map_err(|e| validation(anyhow::Error::from(e)))?;
    let mut stage = StageWriter::new(&cfg.run.output_dir, "fit", &cfg.content_hash(), cfg.run.seed);

    let tdir = Stages::transform(cfg);
    verify_stage(&cfg.run.output_dir, &tdir).map_err(validation)?;
    let ds = read_dataset(&Stages::dataset_manifest(cfg))
        .map_err(|e| validation(anyhow::Error::from(e)))?;
    let basis =
        read_basis(&tdir.join("basis.bin")).map_err(|e| validation(anyhow::Error::from(e)))?;
    let coeffs = super::read_coeffs(&tdir.join("coeffs.bin")).map_err(validation)?;
    stage.record_input(&tdir.join("basis.bin")).map_err(validation)?;
    stage.record_input(&tdir.join("coeffs.bin")).map_err(validation)?;

    let model = cfg.model.to_spec().map_err(validation)?;
    let bundle = assemble(&ds, &model).map_err(|e| validation(anyhow::Error::from(e)))?;
    let design = McmcDesign::new(&bundle).map_err(|e| validation(anyhow::Error::from(e)))?;
    let k_count = coeffs.ncols();
    let n = coeffs.nrows();

    // REML starting values per coefficient
    println!("fit: REML starting values for {k_count} coefficients");
    let fit_opts = FitOptions::default();
    let mut starts: Vec<LmmFit> = Vec::with_capacity(k_count);
    let mut unconverged = 0usize;
    for k in 0..k_count {
        let y = DVector::from_fn(n, |i, _| coeffs[(i, k)]);
        let fit = fit_bundle(&y, &bundle, &fit_opts).map_err(|e| numerical(anyhow::Error::from(e)))?;
        if !fit.converged {
            unconverged += 1;
        }
        starts.push(fit);
    }
    if unconverged > 0 {
        let msg = format!("{unconverged}/{k_count} REML starts did not converge");
        if opts.strict_convergence {
            return Err(Failure::NonConvergence(msg));
        }
        log::warn!("{msg}");
    }

    // shrinkage hyperparameters
    let a_count = bundle.n_fixed();
    let hyper = match cfg.chain.shrinkage.as_str() {
        "none" => ShrinkageHyper::no_shrinkage(a_count, k_count),
        _ => {
            let (sets, labels) = match &basis.kind {
                BasisKind::Wavelet => {
                    regularization_sets(&basis.index_map, cfg.chain.min_set_size)
                }
                // principal components have no scale structure: one set
                BasisKind::PrincipalComponents { .. } => (vec![0usize; k_count], vec![(0u8, 0u8)]),
            };
            let bhat = DMatrix::from_fn(a_count, k_count, |a, k| starts[k].beta_hat[a]);
            let bvar = DMatrix::from_fn(a_count, k_count, |a, k| starts[k].beta_var[a]);
            empirical_bayes(&bhat, &bvar, &sets, &labels)
                .map_err(|e| numerical(anyhow::Error::from(e)))?
        }
    };

    let chain_cfg = ChainConfig {
        n_burn: cfg.chain.n_burn,
        n_keep: cfg.chain.n_keep,
        thin: cfg.chain.thin,
        seed: cfg.run.seed,
        ..ChainConfig::default()
    };

    // resume: keep completed coefficients whose files exist
    let todo: Vec<usize> =
        (0..k_count).filter(|&k| !posterior_path(&dir, k).exists()).collect();
    println!(
        "fit: running {} chains ({} already present), {} sweeps each, {} worker(s)",
        todo.len(),
        k_count - todo.len(),
        chain_cfg.n_burn + chain_cfg.n_keep,
        cfg.chain.workers
    );
    let run_one = |k: usize| -> Result<(), Failure> {
        let y = DVector::from_fn(n, |i, _| coeffs[(i, k)]);
        let inputs = chain_inputs(k, y, &design, &hyper, &starts[k]);
        let mut one_cfg = chain_cfg.clone();
        one_cfg.seed = derive_seed(cfg.run.seed, k);
        let post = run_chain(&inputs, &one_cfg).map_err(|e| numerical(anyhow::Error::from(e)))?;
        store::write_posterior(&posterior_path(&dir, k), &post)
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        Ok(())
    };
    if cfg.chain.workers <= 1 {
        for &k in &todo {
            run_one(k)?;
        }
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.chain.workers)
            .build()
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        let results: Vec<Result<(), Failure>> =
            pool.install(|| todo.par_iter().map(|&k| run_one(k)).collect());
        for r in results {
            r?;
        }
    }

    // gather acceptance-rate summary
    let mut acc_lo = f64::INFINITY;
    let mut acc_hi = f64::NEG_INFINITY;
    for k in 0..k_count {
        let post = store::read_posterior(&posterior_path(&dir, k))
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
        for &r in &post.accept_rate {
            acc_lo = acc_lo.min(r);
            acc_hi = acc_hi.max(r);
        }
    }
    let manifest = serde_json::json!({
        "coefficients": k_count,
        "sweeps": chain_cfg.n_burn + chain_cfg.n_keep,
        "kept_draws": chain_cfg.kept_draws(),
        "seed": cfg.run.seed,
        "acceptance_rate_range": [acc_lo, acc_hi],
        "shrinkage": cfg.chain.shrinkage,
        "unconverged_starts": unconverged,
    });
    write_atomic(&dir.join("fit_manifest.json"), serde_json::to_string_pretty(&manifest).unwrap().as_bytes())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    stage.record_output(&dir.join("fit_manifest.json")).map_err(numerical)?;
    // record a few posterior files as outputs (hashing thousands would be
    // slow; the manifest plus spot checksums guard staleness)
    for k in [0usize, k_count.saturating_sub(1)] {
        stage.record_output(&posterior_path(&dir, k)).map_err(numerical)?;
    }
    stage.finish(&dir).map_err(numerical)?;
    println!("fit: acceptance rates in [{acc_lo:.3}, {acc_hi:.3}]");
    Ok(())
}
