//! Wiring of each setting: model layout, conditioning inputs, guidance
//! targets and the per-example loss.

use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use autograd::{Binder, ParamStore, Tensor, Var};
use condsep::classifier::{classify, Classifier, ClassifierParams};
use condsep::embeddings::{assemble, soft_or, AssembleKind, EmbeddingKind, LogitsEmbedding};
use condsep::frontend::BasisConfig;
use condsep::objectives::{oracle_binary_mask, total_loss_var, GuidanceVars, LossBreakdown, LossConfig, StageVars};
use condsep::separator::{ModelSpec, SeparationModel, SeparatorConfig, SeparatorOutput, Stage1Conditioning, CLASSIFIER1_PREFIX};
use condsep::synthdata::{DatasetConfig, MixtureExample};
use condsep::AudioClip;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{ExperimentConfig, KvConfig, Setting};
use crate::error::{HarnessError, Result};

/// Prefix of the frozen reference classifier inside separation checkpoints.
pub const REFERENCE_PREFIX: &str = "reference/";

/// Counts reads of clean sources, split by purpose.
#[derive(Debug, Default)]
pub struct SourceAccess {
    /// Clean sources turned into conditioning inputs.
    pub conditioning: AtomicUsize,
    /// Clean sources turned into guidance targets.
    pub targets: AtomicUsize,
}

impl SourceAccess {
    pub fn conditioning_reads(&self) -> usize {
        self.conditioning.load(Ordering::Relaxed)
    }

    pub fn target_reads(&self) -> usize {
        self.targets.load(Ordering::Relaxed)
    }
}

/// Shape facts about the dataset a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub num_classes: usize,
    pub num_sources: usize,
    pub sample_rate: u32,
}

impl From<&DatasetConfig> for DataShape {
    fn from(c: &DatasetConfig) -> Self {
        DataShape { num_classes: c.num_classes, num_sources: c.sources_per_mixture, sample_rate: c.sample_rate }
    }
}

#[derive(Serialize, Deserialize)]
struct SeparationMeta {
    experiment: String,
    data: DataShape,
    model: Option<ModelSpec>,
}

/// Guidance targets from the frozen reference classifier.
pub struct Targets {
    pub v_or: LogitsEmbedding,
    pub v_sources: Vec<LogitsEmbedding>,
}

/// Estimates of one example.
#[derive(Clone, Debug)]
pub struct Separated {
    pub stage1: SeparatorOutput,
    pub stage2: Option<SeparatorOutput>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: DataShape,
    /// `None` for the training-free binary mask.
    pub model: Option<SeparationModel>,
    /// Frozen pretrained classifier for oracle inputs and guidance targets.
    pub reference: Option<ClassifierParams>,
    pub access: SourceAccess,
}

pub fn separator_config(config: &ExperimentConfig, data: DataShape) -> SeparatorConfig {
    SeparatorConfig {
        num_sources: data.num_sources,
        num_blocks: config.num_blocks,
        bottleneck: config.bottleneck,
        hidden: config.hidden,
        kernel_size: config.kernel_size,
        cond_channels: config.cond_channels,
        sigmoid_kind: config.sigmoid_kind,
        combine: config.combine,
        injection_sites: config.injection_sites,
        basis: BasisConfig::for_kind(config.basis),
    }
}

/// Model layout of a trainable setting.
pub fn model_spec(config: &ExperimentConfig, data: DataShape, classifier: Option<&ClassifierParams>) -> Result<ModelSpec> {
    let s = config.setting;
    let j = data.num_classes;
    let stage1 = match s {
        _ if s.classifier_conditioned() => Stage1Conditioning::MixtureClassifier,
        Setting::OracleAll => Stage1Conditioning::Given { channels: (data.num_sources + 1) * j },
        Setting::OracleSoftOr => Stage1Conditioning::Given { channels: j },
        _ => Stage1Conditioning::None,
    };
    Ok(ModelSpec {
        separator: separator_config(config, data),
        sample_rate: data.sample_rate,
        iterative: s.iterative(),
        stage1,
        stage2_conditioned: s.iterative() && s.classifier_conditioned(),
        classifier: classifier.map(|c| c.classifier.config.clone()),
        tie_classifier_weights: config.tie_classifier_weights,
    })
}

impl Experiment {
    /// Builds a freshly initialized experiment. Settings that use a
    /// classifier require the pretrained one.
    pub fn new(config: &ExperimentConfig, data: DataShape, classifier: Option<&ClassifierParams>) -> Result<Self> {
        config.validate()?;
        let s = config.setting;
        if s.needs_classifier() {
            let c = classifier.ok_or_else(|| {
                HarnessError::Config(format!("setting {s} needs a pretrained classifier checkpoint"))
            })?;
            if c.num_classes() != data.num_classes {
                return Err(HarnessError::Config(format!(
                    "classifier has {} classes, dataset {}",
                    c.num_classes(),
                    data.num_classes
                )));
            }
        }
        let classifier = classifier.filter(|_| s.needs_classifier());
        let model = if s.trainable() {
            let mut m = SeparationModel::new(model_spec(config, data, classifier)?, config.seed)?;
            if let Some(c) = classifier.filter(|_| s.classifier_conditioned()) {
                m.load_classifier(c)?;
            }
            m.set_classifier_policy(config.classifier_policy())?;
            Some(m)
        } else {
            None
        };
        let reference = classifier.filter(|_| s.oracle_conditioned() || s.guided()).cloned();
        Ok(Experiment { config: config.clone(), data, model, reference, access: SourceAccess::default() })
    }

    fn reference(&self) -> Result<&ClassifierParams> {
        self.reference.as_ref().ok_or_else(|| HarnessError::Config("reference classifier missing".into()))
    }

    fn source_logits(&self, sources: &[AudioClip]) -> Result<Vec<LogitsEmbedding>> {
        let r = self.reference()?;
        sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut e = classify(s, r)?;
                e.kind = EmbeddingKind::Source(i);
                Ok(e)
            })
            .collect()
    }

    /// Stage-1 conditioning computed outside the model (oracle settings only).
    pub fn stage1_input(&self, mixture: &AudioClip, sources: Option<&[AudioClip]>) -> Result<Option<LogitsEmbedding>> {
        let s = self.config.setting;
        if !s.oracle_conditioned() {
            return Ok(None);
        }
        let sources = sources.ok_or_else(|| HarnessError::Config(format!("{s} needs the clean sources at inference")))?;
        self.access.conditioning.fetch_add(sources.len(), Ordering::Relaxed);
        let per_source = self.source_logits(sources)?;
        Ok(Some(match s {
            Setting::OracleAll => {
                let m = classify(mixture, self.reference()?)?;
                assemble(AssembleKind::All, &m, &per_source)?
            }
            _ => soft_or(&per_source)?,
        }))
    }

    pub fn targets(&self, sources: &[AudioClip]) -> Result<Option<Targets>> {
        if !self.config.setting.guided() {
            return Ok(None);
        }
        self.access.targets.fetch_add(sources.len(), Ordering::Relaxed);
        let v_sources = self.source_logits(sources)?;
        Ok(Some(Targets { v_or: soft_or(&v_sources)?, v_sources }))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            ce_variant: self.config.ce_variant,
            ce_weight_mixture_stage1: self.config.ce_weight_mixture_stage1,
            ce_weight_mixture_stage2: self.config.ce_weight_mixture_stage2,
            ce_weight_sources_stage2: self.config.ce_weight_sources_stage2,
        }
    }

    /// Loss of one training example on the tape.
    pub fn example_loss<'t>(&self, binder: &Binder<'t, '_>, ex: &MixtureExample) -> Result<(Var<'t>, LossBreakdown)> {
        let model = self.model.as_ref().ok_or_else(|| HarnessError::Config("setting has nothing to train".into()))?;
        let tape = binder.tape();
        let given = self.stage1_input(&ex.mixture, Some(&ex.sources))?;
        let x = tape.constant(Tensor::vector(ex.mixture.samples().to_vec()));
        let out = model.forward(binder, x, given.as_ref())?;
        let refs: Vec<Rc<Tensor>> = ex.sources.iter().map(|s| Rc::new(Tensor::vector(s.samples().to_vec()))).collect();
        let mut stages = vec![StageVars { references: refs.clone(), estimates: out.stage1.estimates.clone() }];
        if let Some(s2) = &out.stage2 {
            stages.push(StageVars { references: refs, estimates: s2.estimates.clone() });
        }
        let targets = self.targets(&ex.sources)?;
        let guidance = targets.as_ref().map(|t| GuidanceVars {
            v_or: Rc::new(t.v_or.values.clone()),
            v_sources: t.v_sources.iter().map(|v| Rc::new(v.values.clone())).collect(),
            mixture_stage1: out.mixture_stage1,
            mixture_stage2: out.mixture_stage2,
            sources_stage2: out.sources_stage2.clone(),
        });
        let (loss, breakdown, _) = total_loss_var(&stages, guidance.as_ref(), &self.loss_config())?;
        Ok((loss, breakdown))
    }

    /// Separates a mixture. Oracle settings read `sources`; the others
    /// never touch them.
    pub fn separate(&self, mixture: &AudioClip, sources: Option<&[AudioClip]>) -> Result<Separated> {
        match &self.model {
            None => {
                let refs = sources.ok_or_else(|| HarnessError::Config("binary mask needs the clean sources".into()))?;
                let basis = BasisConfig::for_kind(self.config.basis);
                Ok(Separated { stage1: oracle_binary_mask(mixture, refs, &basis)?, stage2: None })
            }
            Some(model) => {
                let given = self.stage1_input(mixture, sources)?;
                let inf = model.infer(mixture, given.as_ref())?;
                Ok(Separated { stage1: inf.stage1, stage2: inf.stage2 })
            }
        }
    }

    /// Model parameters plus the reference classifier under [`REFERENCE_PREFIX`].
    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut store = self.model.as_ref().map(|m| m.store.clone()).unwrap_or_default();
        if let Some(r) = &self.reference {
            store.extend(r.store.renamed("", REFERENCE_PREFIX));
        }
        let meta = SeparationMeta {
            experiment: self.config.to_kv_string(),
            data: self.data,
            model: self.model.as_ref().map(|m| m.spec.clone()),
        };
        Ok(Checkpoint {
            kind: CheckpointKind::Separation,
            config_hash: self.config.hash(),
            step,
            config: serde_json::to_value(&meta)?,
            store,
        })
    }

    /// Rebuilds an experiment, validating every tensor against the layout
    /// its configuration implies.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Separation {
            return Err(HarnessError::Checkpoint("expected a separation checkpoint".into()));
        }
        let meta: SeparationMeta = serde_json::from_value(ckpt.config.clone())?;
        let config = ExperimentConfig::from_kv_str(&meta.experiment)?;
        if config.hash() != ckpt.config_hash {
            return Err(HarnessError::Checkpoint("configuration hash mismatch".into()));
        }
        let (mut model_store, mut reference_store) = (ParamStore::new(), ParamStore::new());
        for (name, p) in ckpt.store.iter() {
            match name.strip_prefix(REFERENCE_PREFIX) {
                Some(rest) => reference_store.insert(rest, p.value.clone(), p.trainable),
                None => model_store.insert(name.clone(), p.value.clone(), p.trainable),
            }
        }
        // weights of this placeholder are replaced below
        let placeholder = meta
            .model
            .as_ref()
            .and_then(|m| m.classifier.clone())
            .map(|cfg| Classifier::new(cfg, CLASSIFIER1_PREFIX).map(|c| c.init_params(0)))
            .transpose()?;
        let mut exp = Experiment::new(&config, meta.data, placeholder.as_ref())?;
        match (exp.reference.take(), placeholder) {
            (Some(_), Some(p)) => {
                Checkpoint { store: reference_store.clone(), ..ckpt.clone() }.check_against(&p.store)?;
                exp.reference = Some(ClassifierParams { classifier: p.classifier, store: reference_store });
            }
            _ if !reference_store.is_empty() => {
                return Err(HarnessError::Checkpoint("reference classifier stored for a setting without one".into()))
            }
            _ => {}
        }
        if let Some(m) = exp.model.as_mut() {
            if meta.model.as_ref() != Some(&m.spec) {
                return Err(HarnessError::Checkpoint("stored model layout differs from the configuration".into()));
            }
            Checkpoint { store: model_store.clone(), ..ckpt.clone() }.check_against(&m.store)?;
            m.store = model_store;
        } else if !model_store.is_empty() {
            return Err(HarnessError::Checkpoint("parameters stored for a training-free setting".into()));
        }
        Ok(exp)
    }
}
