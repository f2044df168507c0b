//! Split evaluation: permutation-aligned SI-SDR improvement per source.

use std::path::Path;

use condsep::objectives::{best_permutation, si_sdr_improvement_eval};
use condsep::synthdata::{load_example, DatasetManifest, Split};
use condsep::frontend::BasisKind;
use condsep::AudioClip;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Setting;
use crate::error::{HarnessError, Result};
use crate::experiment::Experiment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    /// SI-SDRi per reference after alignment, stage 1.
    pub stage1: Vec<f64>,
    pub stage2: Option<Vec<f64>>,
}

impl ExampleScore {
    pub fn final_scores(&self) -> &[f64] {
        self.stage2.as_deref().unwrap_or(&self.stage1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub basis: BasisKind,
    pub split: Split,
    pub rows: Vec<ExampleScore>,
    pub mean_stage1: f64,
    pub median_stage1: f64,
    pub mean_stage2: Option<f64>,
    pub median_stage2: Option<f64>,
    /// Mean over the last stage.
    pub mean_si_sdri: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => 0.0,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

impl EvalReport {
    pub fn from_rows(setting: Setting, basis: BasisKind, split: Split, rows: Vec<ExampleScore>) -> Self {
        let stage1: Vec<f64> = rows.iter().flat_map(|r| r.stage1.iter().copied()).collect();
        let stage2: Option<Vec<f64>> = (!rows.is_empty() && rows.iter().all(|r| r.stage2.is_some()))
            .then(|| rows.iter().flat_map(|r| r.stage2.iter().flatten().copied()).collect());
        let mean_stage2 = stage2.as_deref().map(mean);
        EvalReport {
            setting,
            basis,
            split,
            mean_si_sdri: mean_stage2.unwrap_or(mean(&stage1)),
            mean_stage1: mean(&stage1),
            median_stage1: median(&stage1),
            mean_stage2,
            median_stage2: stage2.as_deref().map(median),
            rows,
        }
    }

    /// One row per example, source and stage.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "stage", "source", "si_sdri_db"])?;
        for r in &self.rows {
            for (stage, scores) in std::iter::once((1, &r.stage1)).chain(r.stage2.iter().map(|s| (2, s))) {
                for (k, v) in scores.iter().enumerate() {
                    w.write_record([r.id.clone(), stage.to_string(), k.to_string(), format!("{v:.6}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

/// SI-SDRi of each reference under the estimate assignment that maximizes
/// the total.
pub fn aligned_si_sdri(references: &[AudioClip], estimates: &[AudioClip], mixture: &AudioClip) -> Result<Vec<f64>> {
    if references.len() != estimates.len() {
        return Err(HarnessError::Config(format!("{} references, {} estimates", references.len(), estimates.len())));
    }
    // pair[i][j]: estimate i against reference j, negated for minimization
    let mut pair = vec![vec![0.0; references.len()]; estimates.len()];
    for (i, e) in estimates.iter().enumerate() {
        for (j, r) in references.iter().enumerate() {
            pair[i][j] = -si_sdr_improvement_eval(r, e, mixture)?;
        }
    }
    let (perm, _) = best_permutation(&pair);
    let mut out = vec![0.0; references.len()];
    for (i, &j) in perm.iter().enumerate() {
        out[j] = -pair[i][j];
    }
    Ok(out)
}

/// Runs `f` on a pool with `threads` workers (0 = all cores). Results keep
/// input order, so the outcome does not depend on the thread count.
pub(crate) fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Scores the first `limit` examples of `split` (all when `limit` is 0).
pub fn evaluate_experiment(exp: &Experiment, manifest: &DatasetManifest, split: Split, limit: usize) -> Result<EvalReport> {
    let mut ids = manifest.ids(split);
    if limit > 0 {
        ids.truncate(limit);
    }
    if ids.is_empty() {
        return Err(HarnessError::Config(format!("split {split} is empty")));
    }
    let rows = with_pool(exp.config.threads, || {
        ids.par_iter()
            .map(|id| {
                let ex = load_example(manifest, id)?;
                let sep = exp.separate(&ex.mixture, Some(&ex.sources))?;
                let stage1 = aligned_si_sdri(&ex.sources, &sep.stage1.estimates, &ex.mixture)?;
                let stage2 = sep
                    .stage2
                    .as_ref()
                    .map(|s| aligned_si_sdri(&ex.sources, &s.estimates, &ex.mixture))
                    .transpose()?;
                Ok(ExampleScore { id: id.clone(), stage1, stage2 })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(EvalReport::from_rows(exp.config.setting, exp.config.basis, split, rows))
}

pub fn evaluate(checkpoint: &Checkpoint, manifest: &DatasetManifest, split: Split, limit: usize) -> Result<EvalReport> {
    let exp = Experiment::from_checkpoint(checkpoint)?;
    if exp.data != (&manifest.info.config).into() {
        return Err(HarnessError::Config("checkpoint was trained for a different dataset layout".into()));
    }
    evaluate_experiment(&exp, manifest, split, limit)
}
