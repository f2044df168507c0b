//! Flat `key = value` configuration files with environment overrides.
//!
//! Lines are `key = value`; `#` starts a comment. Every key can be
//! overridden by an environment variable named `CSEP_` followed by the key
//! in upper case, e.g. `CSEP_MAX_STEPS=500`.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use condsep::classifier::{PretrainConfig, TrainablePolicy};
use condsep::frontend::BasisKind;
use condsep::objectives::CeVariant;
use condsep::separator::{CombineMode, InjectionSites, SigmoidKind};
use condsep::synthdata::DatasetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const ENV_PREFIX: &str = "CSEP_";

/// Parses `key = value` lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(HarnessError::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| HarnessError::Config(format!("{key} = `{value}`: {e}")))
}

/// A configuration settable from flat key-value pairs.
pub trait KvConfig: Default {
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn pairs(&self) -> Vec<(&'static str, String)>;

    fn keys(&self) -> Vec<&'static str> {
        self.pairs().into_iter().map(|(k, _)| k).collect()
    }

    fn to_kv_string(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies `CSEP_<KEY>` entries from `vars`.
    fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let keys = self.keys();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = rest.to_ascii_lowercase();
            if keys.contains(&key.as_str()) {
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }
}

/// Reads a config file (or defaults when `path` is `None`) and applies the
/// process environment.
pub fn load_config<T: KvConfig>(path: Option<&Path>) -> Result<T> {
    let mut cfg = match path {
        Some(p) => T::from_kv_str(&std::fs::read_to_string(p)?)?,
        None => T::default(),
    };
    cfg.apply_env(std::env::vars())?;
    Ok(cfg)
}

/// The rows of the results table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    BaselineTdcn,
    BaselineItdcn,
    PretrainedMixture,
    FinetunedMixture,
    GuidedFinetunedMixture,
    PretrainedAllIter,
    FinetunedAllIter,
    GuidedFinetunedAllIter,
    OracleAll,
    OracleSoftOr,
    OracleBinaryMask,
}

impl Setting {
    pub const ALL: [Setting; 11] = [
        Setting::BaselineTdcn,
        Setting::BaselineItdcn,
        Setting::PretrainedMixture,
        Setting::FinetunedMixture,
        Setting::GuidedFinetunedMixture,
        Setting::PretrainedAllIter,
        Setting::FinetunedAllIter,
        Setting::GuidedFinetunedAllIter,
        Setting::OracleAll,
        Setting::OracleSoftOr,
        Setting::OracleBinaryMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::BaselineTdcn => "baseline_tdcn",
            Setting::BaselineItdcn => "baseline_itdcn",
            Setting::PretrainedMixture => "pretrained_mixture",
            Setting::FinetunedMixture => "finetuned_mixture",
            Setting::GuidedFinetunedMixture => "guided_finetuned_mixture",
            Setting::PretrainedAllIter => "pretrained_all_iter",
            Setting::FinetunedAllIter => "finetuned_all_iter",
            Setting::GuidedFinetunedAllIter => "guided_finetuned_all_iter",
            Setting::OracleAll => "oracle_all",
            Setting::OracleSoftOr => "oracle_soft_or",
            Setting::OracleBinaryMask => "oracle_binary_mask",
        }
    }

    pub fn iterative(self) -> bool {
        matches!(
            self,
            Setting::BaselineItdcn | Setting::PretrainedAllIter | Setting::FinetunedAllIter | Setting::GuidedFinetunedAllIter
        )
    }

    /// Conditioning comes from classifiers run inside the model.
    pub fn classifier_conditioned(self) -> bool {
        matches!(
            self,
            Setting::PretrainedMixture
                | Setting::FinetunedMixture
                | Setting::GuidedFinetunedMixture
                | Setting::PretrainedAllIter
                | Setting::FinetunedAllIter
                | Setting::GuidedFinetunedAllIter
        )
    }

    /// Conditioning embeddings are computed from clean references.
    pub fn oracle_conditioned(self) -> bool {
        matches!(self, Setting::OracleAll | Setting::OracleSoftOr)
    }

    pub fn needs_classifier(self) -> bool {
        self.classifier_conditioned() || self.oracle_conditioned()
    }

    pub fn finetuned(self) -> bool {
        matches!(
            self,
            Setting::FinetunedMixture | Setting::GuidedFinetunedMixture | Setting::FinetunedAllIter | Setting::GuidedFinetunedAllIter
        )
    }

    pub fn guided(self) -> bool {
        matches!(self, Setting::GuidedFinetunedMixture | Setting::GuidedFinetunedAllIter)
    }

    /// False only for the training-free binary mask.
    pub fn trainable(self) -> bool {
        self != Setting::OracleBinaryMask
    }
}

impl FromStr for Setting {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown setting `{s}`")))
    }
}

impl Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub basis: BasisKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validation interval in steps.
    pub eval_every: usize,
    /// Validation examples per evaluation (0 = the whole split).
    pub eval_examples: usize,
    /// Policy for the fine-tuned settings; the others always freeze.
    pub finetune: TrainablePolicy,
    pub seed: u64,
    pub num_blocks: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub cond_channels: usize,
    pub kernel_size: usize,
    pub sigmoid_kind: SigmoidKind,
    pub combine: CombineMode,
    pub injection_sites: InjectionSites,
    pub tie_classifier_weights: bool,
    pub ce_variant: CeVariant,
    pub ce_weight_mixture_stage1: f64,
    pub ce_weight_mixture_stage2: f64,
    pub ce_weight_sources_stage2: f64,
    /// Worker threads for evaluation (0 = all cores).
    pub threads: usize,
    pub log_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            setting: Setting::BaselineTdcn,
            basis: BasisKind::Stft,
            learning_rate: 1e-4,
            batch_size: 2,
            max_steps: 100_000,
            eval_every: 2000,
            eval_examples: 0,
            finetune: TrainablePolicy::LastK(3),
            seed: 1,
            num_blocks: 8,
            bottleneck: 128,
            hidden: 256,
            cond_channels: 128,
            kernel_size: 3,
            sigmoid_kind: SigmoidKind::Trainable,
            combine: CombineMode::Concat,
            injection_sites: InjectionSites::FirstLayerOnly,
            tie_classifier_weights: false,
            ce_variant: CeVariant::Full,
            ce_weight_mixture_stage1: 1.0,
            ce_weight_mixture_stage2: 1.0,
            ce_weight_sources_stage2: 1.0,
            threads: 1,
            log_every: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn for_setting(setting: Setting) -> Self {
        ExperimentConfig { setting, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(HarnessError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(HarnessError::Config("batch size and eval interval must be positive".into()));
        }
        if self.setting.finetuned() && self.finetune == TrainablePolicy::Frozen {
            return Err(HarnessError::Config(format!("{} needs a trainable fine-tune policy", self.setting)));
        }
        Ok(())
    }

    /// Classifier policy actually applied for this setting.
    pub fn classifier_policy(&self) -> TrainablePolicy {
        if self.setting.finetuned() {
            self.finetune
        } else {
            TrainablePolicy::Frozen
        }
    }

    /// SHA-256 of the canonical key-value form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl KvConfig for ExperimentConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "setting" => self.setting = v.parse()?,
            "basis" => self.basis = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_examples" => self.eval_examples = parse(key, v)?,
            "finetune" => self.finetune = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "num_blocks" => self.num_blocks = parse(key, v)?,
            "bottleneck" => self.bottleneck = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "cond_channels" => self.cond_channels = parse(key, v)?,
            "kernel_size" => self.kernel_size = parse(key, v)?,
            "sigmoid_kind" => self.sigmoid_kind = parse(key, v)?,
            "combine" => self.combine = parse(key, v)?,
            "injection_sites" => self.injection_sites = parse(key, v)?,
            "tie_classifier_weights" => self.tie_classifier_weights = parse(key, v)?,
            "ce_variant" => self.ce_variant = parse(key, v)?,
            "ce_weight_mixture_stage1" => self.ce_weight_mixture_stage1 = parse(key, v)?,
            "ce_weight_mixture_stage2" => self.ce_weight_mixture_stage2 = parse(key, v)?,
            "ce_weight_sources_stage2" => self.ce_weight_sources_stage2 = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown experiment key `{other}`"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("setting", self.setting.to_string()),
            ("basis", self.basis.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_examples", self.eval_examples.to_string()),
            ("finetune", self.finetune.to_string()),
            ("seed", self.seed.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("bottleneck", self.bottleneck.to_string()),
            ("hidden", self.hidden.to_string()),
            ("cond_channels", self.cond_channels.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("sigmoid_kind", self.sigmoid_kind.to_string()),
            ("combine", self.combine.to_string()),
            ("injection_sites", self.injection_sites.to_string()),
            ("tie_classifier_weights", self.tie_classifier_weights.to_string()),
            ("ce_variant", self.ce_variant.to_string()),
            ("ce_weight_mixture_stage1", self.ce_weight_mixture_stage1.to_string()),
            ("ce_weight_mixture_stage2", self.ce_weight_mixture_stage2.to_string()),
            ("ce_weight_sources_stage2", self.ce_weight_sources_stage2.to_string()),
            ("threads", self.threads.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
    }
}

/// Dataset generation keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataConfig(pub DatasetConfig);

impl KvConfig for DataConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.0;
        match key {
            "num_classes" => c.num_classes = parse(key, v)?,
            "sources_per_mixture" => c.sources_per_mixture = parse(key, v)?,
            "train" => c.train = parse(key, v)?,
            "validation" => c.validation = parse(key, v)?,
            "test" => c.test = parse(key, v)?,
            "seed" => c.seed = parse(key, v)?,
            "sample_rate" => c.sample_rate = parse(key, v)?,
            "duration" => c.duration = parse(key, v)?,
            "gain_db_range" => c.gain_db_range = parse(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown dataset key `{other}`"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let c = &self.0;
        vec![
            ("num_classes", c.num_classes.to_string()),
            ("sources_per_mixture", c.sources_per_mixture.to_string()),
            ("train", c.train.to_string()),
            ("validation", c.validation.to_string()),
            ("test", c.test.to_string()),
            ("seed", c.seed.to_string()),
            ("sample_rate", c.sample_rate.to_string()),
            ("duration", c.duration.to_string()),
            ("gain_db_range", c.gain_db_range.to_string()),
        ]
    }
}

/// Classifier pretraining keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassifierTrainConfig(pub PretrainConfig);

impl KvConfig for ClassifierTrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.0;
        match key {
            "steps" => c.steps = parse(key, v)?,
            "batch_size" => c.batch_size = parse(key, v)?,
            "learning_rate" => c.learning_rate = parse(key, v)?,
            "seed" => c.seed = parse(key, v)?,
            "include_mixtures" => c.include_mixtures = parse(key, v)?,
            "map_floor" => c.map_floor = parse(key, v)?,
            "validation_examples" => c.validation_examples = parse(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown classifier key `{other}`"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let c = &self.0;
        vec![
            ("steps", c.steps.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("learning_rate", c.learning_rate.to_string()),
            ("seed", c.seed.to_string()),
            ("include_mixtures", c.include_mixtures.to_string()),
            ("map_floor", c.map_floor.to_string()),
            ("validation_examples", c.validation_examples.to_string()),
        ]
    }
}

/// Expands a grid file into configurations. Values may be comma-separated
/// lists; the grid is their cartesian product in file order.
pub fn expand_grid(text: &str, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
    let mut grid = vec![base.clone()];
    for (key, value) in parse_pairs(text)? {
        let options: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if options.is_empty() {
            return Err(HarnessError::Config(format!("grid key `{key}` has no values")));
        }
        let mut next = Vec::with_capacity(grid.len() * options.len());
        for cfg in &grid {
            for o in &options {
                let mut c = cfg.clone();
                c.set(&key, o)?;
                next.push(c);
            }
        }
        grid = next;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overrides() {
        let text = "# run\nsetting = finetuned_all_iter\nbasis=learned\nmax_steps = 10 # short\nfinetune = last1\n";
        let mut cfg = ExperimentConfig::from_kv_str(text).unwrap();
        assert_eq!(cfg.setting, Setting::FinetunedAllIter);
        assert_eq!(cfg.basis, BasisKind::Learned);
        assert_eq!(cfg.finetune, TrainablePolicy::LastK(1));
        assert_eq!(ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
        cfg.apply_env([("CSEP_MAX_STEPS".to_string(), "7".to_string()), ("OTHER".into(), "x".into())]).unwrap();
        assert_eq!(cfg.max_steps, 7);
        assert!(ExperimentConfig::from_kv_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_kv_str("no equals sign").is_err());
    }

    #[test]
    fn defaults_and_consistency() {
        let d = ExperimentConfig::default();
        assert_eq!((d.learning_rate, d.batch_size, d.max_steps), (1e-4, 2, 100_000));
        let bad = ExperimentConfig { finetune: TrainablePolicy::Frozen, ..ExperimentConfig::for_setting(Setting::FinetunedMixture) };
        assert!(bad.validate().is_err());
        assert_eq!(ExperimentConfig::for_setting(Setting::PretrainedMixture).classifier_policy(), TrainablePolicy::Frozen);
        for s in Setting::ALL {
            assert_eq!(s.as_str().parse::<Setting>().unwrap(), s);
            assert!(!(s.guided() && !s.finetuned()));
        }
    }

    #[test]
    fn grid_expansion() {
        let grid = expand_grid("combine = concat, gate\nsigmoid_kind = fixed,trainable\n", &ExperimentConfig::default()).unwrap();
        assert_eq!(grid.len(), 4);
        assert_eq!(grid[1].combine, CombineMode::Concat);
        assert_eq!(grid[1].sigmoid_kind, SigmoidKind::Trainable);
        assert_ne!(grid[0].hash(), grid[1].hash());
    }
}
