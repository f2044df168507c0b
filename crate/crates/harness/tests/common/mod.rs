#![allow(dead_code)]

use std::path::Path;

use condsep::classifier::{pretrain, Classifier, ClassifierConfig, ClassifierParams, PretrainConfig};
use condsep::separator::CLASSIFIER1_PREFIX;
use condsep::synthdata::{build_dataset, DatasetConfig, DatasetManifest};
use harness::config::{ExperimentConfig, Setting};

pub const CLASSES: usize = 4;

/// Four examples per split, one-second clips.
pub fn tiny_data(dir: &Path) -> DatasetManifest {
    let cfg = DatasetConfig { num_classes: CLASSES, train: 4, validation: 4, test: 4, duration: 1.0, seed: 3, ..Default::default() };
    build_dataset(&cfg, dir).unwrap()
}

/// A narrow classifier after a few steps; good enough to produce logits.
pub fn tiny_classifier(manifest: &DatasetManifest) -> ClassifierParams {
    let config = ClassifierConfig { num_classes: CLASSES, widths: vec![4; 10] };
    let classifier = Classifier::new(config, CLASSIFIER1_PREFIX).unwrap();
    let pc = PretrainConfig { steps: 5, batch_size: 2, map_floor: 0.0, validation_examples: 2, ..Default::default() };
    pretrain(manifest, &classifier, &pc).unwrap().0
}

/// Reduced separator and a short schedule.
pub fn tiny_config(setting: Setting, steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        setting,
        max_steps: steps,
        eval_every: steps.max(1),
        eval_examples: 2,
        batch_size: 2,
        learning_rate: 1e-3,
        num_blocks: 2,
        bottleneck: 8,
        hidden: 12,
        cond_channels: 8,
        log_every: 0,
        ..Default::default()
    }
}
