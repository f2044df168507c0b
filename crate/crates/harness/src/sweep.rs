//! Grids of runs and their summary table.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use condsep::classifier::ClassifierParams;
use condsep::synthdata::DatasetManifest;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::train::{train_recorded, RunRecord, RunStatus, RECORD_FILE};

pub fn run_id(index: usize) -> String {
    format!("run-{index:04}")
}

/// Trains every configuration in order, each in its own `run-XXXX`
/// directory under `out_dir`. A failed run is recorded and the sweep goes on.
pub fn sweep(
    grid: &[ExperimentConfig],
    manifest: &DatasetManifest,
    classifier: Option<&ClassifierParams>,
    out_dir: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    let mut records = Vec::with_capacity(grid.len());
    for (i, cfg) in grid.iter().enumerate() {
        let id = run_id(i);
        let dir = out_dir.map(|d| d.join(&id));
        let (record, result) = train_recorded(cfg, manifest, classifier, &id, dir.as_deref());
        if let Err(e) = result {
            log::warn!("{id} ({}) failed: {e}", cfg.setting);
        }
        records.push(record);
    }
    if let Some(d) = out_dir {
        write_summary(&summary(&records), &d.join("summary.csv"))?;
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub setting: String,
    pub basis: String,
    pub combine: String,
    pub sigmoid_kind: String,
    pub seed: u64,
    pub status: String,
    pub best_step: Option<usize>,
    pub validation_si_sdri: Option<f64>,
    pub validation_stage1: Option<f64>,
    pub validation_stage2: Option<f64>,
}

/// One row per run, best validation SI-SDRi first; failed runs last.
pub fn summary(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = records
        .iter()
        .map(|r| SummaryRow {
            run_id: r.run_id.clone(),
            setting: r.config.setting.to_string(),
            basis: r.config.basis.to_string(),
            combine: r.config.combine.to_string(),
            sigmoid_kind: r.config.sigmoid_kind.to_string(),
            seed: r.seed,
            status: match &r.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Failed(_) => "failed".into(),
            },
            best_step: r.best_step,
            validation_si_sdri: r.best_validation(),
            validation_stage1: r.eval.as_ref().map(|e| e.mean_stage1),
            validation_stage2: r.eval.as_ref().and_then(|e| e.mean_stage2),
        })
        .collect();
    rows.sort_by(|a, b| match (a.validation_si_sdri, b.validation_si_sdri) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.run_id.cmp(&b.run_id)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.run_id.cmp(&b.run_id),
    });
    rows
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every `record.json` one level below `runs_dir`.
pub fn collect_records(runs_dir: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs: Vec<_> = fs::read_dir(runs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RECORD_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| RunRecord::read(d)).collect()
}

/// Markdown table of a summary.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut out = String::from("| run | setting | basis | combine | sigmoid | seed | status | step | SI-SDRi | stage 1 | stage 2 |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run_id,
            r.setting,
            r.basis,
            r.combine,
            r.sigmoid_kind,
            r.seed,
            r.status,
            r.best_step.map_or("-".into(), |s| s.to_string()),
            fmt(r.validation_si_sdri),
            fmt(r.validation_stage1),
            fmt(r.validation_stage2),
        ));
    }
    out
}
