//! Model-selection stage: candidate structures from the config, energy-
//! weighted voting, both criteria reported side by side.

use super::{numerical, validation, CmdResult, Options, Stages};
use crate::config::RunConfig;
use crate::manifest::{verify_stage, StageWriter};
use spfmm::design::ModelSpec;
use spfmm::io::{read_basis, read_dataset, write_atomic};
use spfmm::lmm::FitOptions;
use spfmm::select::{
    fit_candidates, two_step_select, vote, CandidateModel, InfoCriterion, SelectionReport, Stage,
};
use std::fmt::Write as _;

fn criterion_of(cfg: &RunConfig) -> InfoCriterion {
    match cfg.select.criterion.as_str() {
        "aaic" => InfoCriterion::Aaic,
        _ => InfoCriterion::Abic,
    }
}

fn render_table(reports: &[(&str, &SelectionReport)]) -> String {
    let mut out = String::new();
    for (title, report) in reports {
        let _ = writeln!(out, "== {title} ({:?}, stage {:?})", report.criterion, report.stage);
        let _ = writeln!(out, "{:<28} {:>8}", "candidate", "P");
        for (i, id) in report.candidate_ids.iter().enumerate() {
            let marker = if i == report.winner { " <- selected" } else { "" };
            let _ = writeln!(out, "{:<28} {:>8.3}{}", id, report.p_scores[i], marker);
        }
        if !report.excluded.is_empty() {
            let _ = writeln!(out, "excluded coefficients: {:?}", report.excluded);
        }
        let _ = writeln!(out);
    }
    out
}

pub fn run(cfg: &RunConfig, _opts: &Options) -> CmdResult {
    let dir = Stages::select(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| validation(anyhow::Error::from(e)))?;
    let mut stage =
        StageWriter::new(&cfg.run.output_dir, "select", &cfg.content_hash(), cfg.run.seed);

    let tdir = Stages::transform(cfg);
    verify_stage(&cfg.run.output_dir, &tdir).map_err(validation)?;
    let ds = read_dataset(&Stages::dataset_manifest(cfg))
        .map_err(|e| validation(anyhow::Error::from(e)))?;
    let basis = read_basis(&tdir.join("basis.bin")).map_err(|e| validation(anyhow::Error::from(e)))?;
    let coeffs = super::read_coeffs(&tdir.join("coeffs.bin")).map_err(validation)?;
    stage.record_input(&tdir.join("basis.bin")).map_err(validation)?;
    stage.record_input(&tdir.join("coeffs.bin")).map_err(validation)?;

    let candidates: Vec<CandidateModel> = cfg
        .select
        .candidates
        .iter()
        .map(|c| Ok(CandidateModel::new(c.id.clone(), ModelSpec::parse(&c.formula)?)))
        .collect::<Result<_, spfmm::design::DesignError>>()
        .map_err(|e| validation(anyhow::Error::from(e)))?;
    let opts = FitOptions::default();
    let criterion = criterion_of(cfg);

    let mut json = serde_json::Map::new();
    let mut text_reports: Vec<(String, SelectionReport)> = Vec::new();
    match cfg.select.mode.as_str() {
        "two_step" => {
            let random_candidates: Vec<(String, Vec<spfmm::design::RandomTerm>)> = cfg
                .select
                .random_candidates
                .iter()
                .map(|c| {
                    let spec = ModelSpec::parse(&c.formula)?;
                    Ok((c.id.clone(), spec.random))
                })
                .collect::<Result<_, spfmm::design::DesignError>>()
                .map_err(|e| validation(anyhow::Error::from(e)))?;
            let (fixed_report, random_report) = two_step_select(
                &ds,
                &coeffs,
                &basis.weights,
                &candidates,
                &random_candidates,
                criterion,
                &opts,
            )
            .map_err(|e| numerical(anyhow::Error::from(e)))?;
            json.insert("fixed".into(), serde_json::to_value(&fixed_report).unwrap());
            json.insert("random".into(), serde_json::to_value(&random_report).unwrap());
            let winning_formula = cfg.select.candidates[fixed_report.winner].formula.clone();
            json.insert("selected_fixed_formula".into(), winning_formula.into());
            json.insert(
                "selected_random_id".into(),
                random_report.candidate_ids[random_report.winner].clone().into(),
            );
            text_reports.push(("fixed-effect structures".into(), fixed_report));
            text_reports.push(("random-effect structures".into(), random_report));
        }
        _ => {
            let (abic, aaic) = fit_candidates(&ds, &coeffs, &candidates, &opts)
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let ids: Vec<String> = candidates.iter().map(|c| c.id.clone()).collect();
            let rep_abic = vote(&ids, &abic, &basis.weights, Stage::Joint, InfoCriterion::Abic)
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let rep_aaic = vote(&ids, &aaic, &basis.weights, Stage::Joint, InfoCriterion::Aaic)
                .map_err(|e| numerical(anyhow::Error::from(e)))?;
            let primary = match criterion {
                InfoCriterion::Abic => &rep_abic,
                InfoCriterion::Aaic => &rep_aaic,
            };
            json.insert("selected_id".into(), primary.candidate_ids[primary.winner].clone().into());
            json.insert("abic".into(), serde_json::to_value(&rep_abic).unwrap());
            json.insert("aaic".into(), serde_json::to_value(&rep_aaic).unwrap());
            text_reports.push(("joint vote, aBIC".into(), rep_abic));
            text_reports.push(("joint vote, aAIC".into(), rep_aaic));
        }
    }

    let json_path = dir.join("selection.json");
    write_atomic(&json_path, serde_json::to_string_pretty(&json).unwrap().as_bytes())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    let table = render_table(
        &text_reports.iter().map(|(t, r)| (t.as_str(), r)).collect::<Vec<_>>(),
    );
    write_atomic(&dir.join("selection.txt"), table.as_bytes())
        .map_err(|e| numerical(anyhow::Error::from(e)))?;
    print!("{table}");

    stage.record_output(&json_path).map_err(numerical)?;
    stage.record_output(&dir.join("selection.txt")).map_err(numerical)?;
    stage.finish(&dir).map_err(numerical)?;
    Ok(())
}
