//! Training loop with periodic validation and best-checkpoint retention.

use std::fs;
use std::path::Path;
use std::time::Instant;

use autograd::{Adam, Binder, ParamStore, Tape, Var};
use condsep::classifier::ClassifierParams;
use condsep::objectives::LossBreakdown;
use condsep::synthdata::{load_example, DatasetManifest, Split};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate_experiment, EvalReport};
use crate::experiment::Experiment;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RECORD_FILE: &str = "record.json";

/// Batch-mean loss terms of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    /// Separation loss per stage.
    pub sep: Vec<f64>,
    pub ce_mixture_stage1: Option<f64>,
    pub ce_mixture_stage2: Option<f64>,
    pub ce_sources_stage2: Option<f64>,
}

impl StepRecord {
    fn mean(step: usize, parts: &[LossBreakdown]) -> Self {
        let n = parts.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            parts.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
        };
        let stages = parts[0].sep.len();
        StepRecord {
            step,
            total: parts.iter().map(|p| p.total).sum::<f64>() / n,
            sep: (0..stages).map(|k| parts.iter().map(|p| p.sep[k]).sum::<f64>() / n).collect(),
            ce_mixture_stage1: avg(&|p| p.ce_mixture_stage1),
            ce_mixture_stage2: avg(&|p| p.ce_mixture_stage2),
            ce_sources_stage2: avg(&|p| p.ce_sources_stage2),
        }
    }

    /// Cross-entropy terms present in this step.
    pub fn ce_terms(&self) -> usize {
        [self.ce_mixture_stage1, self.ce_mixture_stage2, self.ce_sources_stage2].iter().flatten().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub si_sdri: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "message")]
pub enum RunStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub status: RunStatus,
    pub trace: Vec<StepRecord>,
    pub validation: Vec<ValidationPoint>,
    pub best_step: Option<usize>,
    /// Validation report of the retained checkpoint.
    pub eval: Option<EvalReport>,
    /// Frozen parameters compared bit for bit after training.
    pub frozen_verified: bool,
    pub frozen_tensors: usize,
    /// Clean-source reads that fed conditioning inputs.
    pub conditioning_source_reads: usize,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn best_validation(&self) -> Option<f64> {
        self.eval.as_ref().map(|e| e.mean_si_sdri)
    }

    /// Writes `record.json` in `dir`; an existing record is never replaced.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RECORD_FILE);
        if path.exists() {
            return Err(HarnessError::Config(format!("{} already exists", path.display())));
        }
        crate::checkpoint::write_atomic(&path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(RECORD_FILE))?)?)
    }
}

fn frozen_snapshot(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in store.iter().filter(|(_, p)| !p.trainable) {
        out.insert(name.clone(), p.value.clone(), false);
    }
    out
}

fn frozen_unchanged(before: &ParamStore, after: &ParamStore) -> bool {
    before.iter().all(|(name, p)| {
        after.get(name).is_some_and(|q| {
            q.value.shape() == p.value.shape()
                && q.value.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    })
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
    pub experiment: Experiment,
}

/// Trains one configuration. With `run_dir`, writes `best.ckpt` and
/// `record.json` there (a failed run still writes its record).
pub fn train(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    classifier: Option<&ClassifierParams>,
    run_id: &str,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let (record, result) = train_recorded(config, manifest, classifier, run_id, run_dir);
    let (checkpoint, experiment) = result?;
    Ok(TrainOutcome { checkpoint, record, experiment })
}

/// Like [`train`] but always returns the run record, failed or not.
pub fn train_recorded(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    classifier: Option<&ClassifierParams>,
    run_id: &str,
    run_dir: Option<&Path>,
) -> (RunRecord, Result<(Checkpoint, Experiment)>) {
    let started = Instant::now();
    let mut record = RunRecord {
        run_id: run_id.to_string(),
        config: config.clone(),
        seed: config.seed,
        status: RunStatus::Completed,
        trace: Vec::new(),
        validation: Vec::new(),
        best_step: None,
        eval: None,
        frozen_verified: false,
        frozen_tensors: 0,
        conditioning_source_reads: 0,
        wall_clock_secs: 0.0,
    };
    let mut result = run(config, manifest, classifier, &mut record);
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Ok((_, exp)) = &result {
        record.conditioning_source_reads = exp.access.conditioning_reads();
    }
    if let Err(e) = &result {
        record.status = RunStatus::Failed(e.to_string());
    }
    if let Some(dir) = run_dir {
        let written = fs::create_dir_all(dir).map_err(HarnessError::from).and_then(|_| {
            if let Ok((ckpt, _)) = &result {
                ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            }
            record.write(dir)
        });
        if let (Err(e), true) = (written, result.is_ok()) {
            result = Err(e);
        }
    }
    (record, result)
}

fn run(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    classifier: Option<&ClassifierParams>,
    record: &mut RunRecord,
) -> Result<(Checkpoint, Experiment)> {
    let mut exp = Experiment::new(config, (&manifest.info.config).into(), classifier)?;
    let train_ids = manifest.ids(Split::Train);
    if config.setting.trainable() && config.max_steps > 0 && train_ids.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    let frozen = exp.model.as_ref().map(|m| frozen_snapshot(&m.store)).unwrap_or_default();
    record.frozen_tensors = frozen.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_ids.clone();
    let mut cursor = order.len();
    let mut adam = Adam::new(config.learning_rate);
    let mut best: Option<(f64, usize, Option<ParamStore>, EvalReport)> = None;
    let steps = if config.setting.trainable() { config.max_steps } else { 0 };
    for step in 0..=steps {
        if step > 0 {
            let model = exp.model.as_ref().expect("trainable setting has a model");
            let tape = Tape::new();
            let binder = Binder::new(&tape, &model.store);
            let mut losses = Vec::with_capacity(config.batch_size);
            let mut parts = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let ex = load_example(manifest, &order[cursor])?;
                cursor += 1;
                let (loss, breakdown) = exp.example_loss(&binder, &ex).map_err(|e| match e {
                    HarnessError::Core(condsep::CondsepError::Training(m)) => {
                        HarnessError::Training(format!("step {step}, example {}: {m}", ex.id))
                    }
                    other => other,
                })?;
                losses.push(loss);
                parts.push(breakdown);
            }
            let total = Var::sum_all(&losses)?.scale(1.0 / losses.len() as f64);
            let grads = binder.gradients(&tape.backward(total));
            drop(binder);
            let rec = StepRecord::mean(step, &parts);
            if !rec.total.is_finite() {
                return Err(HarnessError::Training(format!("non-finite loss at step {step}: {rec:?}")));
            }
            if config.log_every > 0 && step % config.log_every == 0 {
                log::info!("{} step {step}: loss {:.4}", config.setting, rec.total);
            }
            record.trace.push(rec);
            let model = exp.model.as_mut().expect("model");
            adam.step(&mut model.store, &grads);
            if !model.store.all_finite() {
                return Err(HarnessError::Training(format!("non-finite parameters after step {step}")));
            }
        }
        if step == steps || (step > 0 && step % config.eval_every == 0) {
            let report = evaluate_experiment(&exp, manifest, Split::Validation, config.eval_examples)?;
            log::info!("{} step {step}: validation SI-SDRi {:.3} dB", config.setting, report.mean_si_sdri);
            record.validation.push(ValidationPoint { step, si_sdri: report.mean_si_sdri });
            if best.as_ref().map_or(true, |(v, ..)| report.mean_si_sdri > *v) {
                let store = exp.model.as_ref().map(|m| m.store.clone());
                best = Some((report.mean_si_sdri, step, store, report));
            }
        }
    }
    if let Some(m) = &exp.model {
        if !frozen_unchanged(&frozen, &m.store) {
            return Err(HarnessError::Training("frozen parameters changed during training".into()));
        }
    }
    record.frozen_verified = true;
    let (_, best_step, store, report) = best.expect("validation runs at the last step");
    if let (Some(m), Some(s)) = (exp.model.as_mut(), store) {
        m.store = s;
    }
    record.best_step = Some(best_step);
    record.eval = Some(report);
    let checkpoint = exp.checkpoint(best_step as u64)?;
    Ok((checkpoint, exp))
}
