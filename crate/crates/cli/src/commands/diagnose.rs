//! Convergence diagnostics over the fitted chains: Geweke z and p quantiles,
//! effective sample sizes, acceptance-rate ranges, and the worst offenders.

use super::{numerical, validation, CmdResult, Options, Stages};
use crate::config::RunConfig;
use crate::manifest::{verify_stage, StageWriter};
use spfmm::inference::diagnostics_summary;
use spfmm::io::write_atomic;
use spfmm::mcmc::store;
use std::fmt::Write as _;

pub fn run(cfg: &RunConfig, _opts: &Options) -> CmdResult {
    let dir = Stages::diagnose(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| validation(anyhow::Error::from(e)))?;
    let mut stage =
        StageWriter::new(&cfg.run.output_dir, "diagnose", &cfg.content_hash(), cfg.run.seed);
    let fdir = Stages::fit(cfg);
    verify_stage(&cfg.run.output_dir, &fdir).map_err(validation)?;

    let mut posteriors = Vec::new();
    let mut k = 0usize;
    loop {
        let path = super::fit::posterior_path(&fdir, k);
        if !path.exists() {
            break;
        }
        posteriors
            .push(store::read_posterior(&path).map_err(|e| validation(anyhow::Error::from(e)))?);
        k += 1;
    }
    if posteriors.is_empty() {
        return Err(validation(anyhow::anyhow!(
            "no posterior files under {}; run the fit stage first",
            fdir.display()
        )));
    }

    let summary = diagnostics_summary(&posteriors);
    let path = dir.join("diagnostics.json");
    write_atomic(&path, serde_json::to_string_pretty(&summary).unwrap().as_bytes())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    stage.record_output(&path).map_err(numerical)?;

    // worst Geweke offenders across all chains
    let mut rows: Vec<(f64, String)> = Vec::new();
    for p in &posteriors {
        for (i, name) in p.param_names.iter().enumerate() {
            rows.push((p.geweke_p[i], format!("k={} {}", p.k, name)));
        }
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut text = String::new();
    let _ = writeln!(text, "parameters: {}", summary.n_parameters);
    let _ = writeln!(text, "fraction with Geweke p < 0.05: {:.4}", summary.fraction_p_below_05);
    let _ = writeln!(
        text,
        "Geweke z quantiles (2.5%, 50%, 97.5%): {:.3} {:.3} {:.3}",
        summary.geweke_z_quantiles[0],
        summary.geweke_z_quantiles[1],
        summary.geweke_z_quantiles[2]
    );
    let _ = writeln!(text, "median ESS: {:.1}", summary.median_ess);
    let _ = writeln!(
        text,
        "MH acceptance range: [{:.3}, {:.3}]",
        summary.accept_rate_range.0, summary.accept_rate_range.1
    );
    let _ = writeln!(text, "\nworst Geweke p-values:");
    for (p, label) in rows.iter().take(15) {
        let _ = writeln!(text, "  {label:<40} p = {p:.5}");
    }
    let tpath = dir.join("diagnostics.txt");
    write_atomic(&tpath, text.as_bytes()).map_err(|e| numerical(anyhow::Error::from(e)))?;
    stage.record_output(&tpath).map_err(numerical)?;
    stage.finish(&dir).map_err(numerical)?;
    print!("{text}");
    Ok(())
}
