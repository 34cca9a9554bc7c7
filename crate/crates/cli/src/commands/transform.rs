//! Ingest, validate, transform, filter, compress, and persist the retained
//! basis with per-function coefficients.

use super::{numerical, validation, CmdResult, Options, Stages};
use crate::config::RunConfig;
use crate::manifest::StageWriter;
use spfmm::basis::{
    compress, energy_weights, reconstruction_errors, spike_filter, BasisSystem, TensorTransform,
};
use spfmm::io::{read_dataset, write_atomic, write_basis};

pub fn run(cfg: &RunConfig, _opts: &Options) -> CmdResult {
    let dir = Stages::transform(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| validation(anyhow::Error::from(e)))?;
    let mut stage =
        StageWriter::new(&cfg.run.output_dir, "transform", &cfg.content_hash(), cfg.run.seed);

    let manifest_path = Stages::dataset_manifest(cfg);
    let ds = read_dataset(&manifest_path).map_err(|e| validation(anyhow::Error::from(e)))?;
    stage.record_input(&manifest_path).map_err(validation)?;
    println!(
        "transform: {} functions, grid {}x{}, {} serial levels, units {}",
        ds.n(),
        ds.grid.n_meridional,
        ds.grid.n_circumferential,
        ds.serial_levels().len(),
        ds.unit_ids().len()
    );

    let spec = cfg.wavelet.to_spec().map_err(validation)?;
    let transform = TensorTransform::new(ds.grid.clone(), spec)
        .map_err(|e| validation(anyhow::Error::from(e)))?;
    let full = transform.analyze_dataset(&ds).map_err(|e| numerical(anyhow::Error::from(e)))?;

    let (kept, dropped) = spike_filter(&full, cfg.transform.spike_ratio);
    let filtered = full.select_columns(kept.iter());
    let ids: Vec<String> = ds.functions.iter().map(|f| f.id.clone()).collect();
    let compression = compress(&filtered, cfg.transform.energy_threshold, &ids, transform.k_full())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    // map back to full tensor indices
    let retained: Vec<usize> = compression.retained.iter().map(|&j| kept[j]).collect();
    let retained_cols = filtered.select_columns(compression.retained.iter());
    let weights = energy_weights(&retained_cols).map_err(|e| numerical(anyhow::Error::from(e)))?;

    let wavelet_basis = BasisSystem::from_wavelet(&transform, retained.clone(), weights)
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    // analysis coefficients through the least-squares operator
    let coeffs_wavelet =
        wavelet_basis.analyze_dataset(&ds).map_err(|e| numerical(anyhow::Error::from(e)))?;

    let (basis, coeffs) = match cfg.transform.pc_scree_threshold {
        None => (wavelet_basis, coeffs_wavelet),
        Some(threshold) => {
            let (pc, scores) = wavelet_basis
                .pc_basis(&coeffs_wavelet, threshold)
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            (pc, scores)
        }
    };

    let errors = reconstruction_errors(&ds, &basis).map_err(|e| numerical(anyhow::Error::from(e)))?;
    let max_err = errors.iter().cloned().fold(0.0f64, f64::max);
    let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;

    let basis_path = dir.join("basis.bin");
    write_basis(&basis_path, &basis).map_err(|e| numerical(anyhow::Error::from(e)))?;
    let coeff_path = dir.join("coeffs.bin");
    super::write_coeffs(&coeff_path, &coeffs).map_err(numerical)?;

    let min_fraction =
        compression.per_function_fraction.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean_fraction = compression.per_function_fraction.iter().sum::<f64>()
        / compression.per_function_fraction.len() as f64;
    let report = serde_json::json!({
        "k_full": transform.k_full(),
        "spike_dropped": dropped.len(),
        "retained": retained.len(),
        "basis_columns": basis.k(),
        "compression_ratio": compression.compression_ratio,
        "min_retained_energy": min_fraction,
        "mean_retained_energy": mean_fraction,
        "max_reconstruction_error": max_err,
        "mean_reconstruction_error": mean_err,
        "pc": cfg.transform.pc_scree_threshold.is_some(),
    });
    write_atomic(&dir.join("transform_report.json"), serde_json::to_string_pretty(&report).unwrap().as_bytes())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;

    for name in ["basis.bin", "coeffs.bin", "transform_report.json"] {
        stage.record_output(&dir.join(name)).map_err(numerical)?;
    }
    stage.finish(&dir).map_err(numerical)?;
    println!(
        "transform: K_full {} -> {} retained ({}:1), min energy {:.6}, mean {:.6}, max recon err {:.2e}",
        transform.k_full(),
        basis.k(),
        compression.compression_ratio.round(),
        min_fraction,
        mean_fraction,
        max_err
    );
    Ok(())
}
