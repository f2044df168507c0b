//! Depthwise-separable convolutional sound classifier producing one logit
//! vector per mel frame.
//!
//! Each 96-frame patch is classified by ten separable groups (valid along
//! time, so a patch shrinks to 76 frames) followed by global average pooling
//! and a linear head. Running the groups once over the whole padded log-mel
//! plane and taking a sliding 76-frame mean computes every patch's pooled
//! features in one pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use autograd::gradcheck::{check_param_coords, sample_coords, GradCheckReport};
use autograd::ops::{sigmoid, softplus};
use autograd::{Adam, Binder, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::embeddings::{EmbeddingKind, LogitsEmbedding};
use crate::error::{config_err, CondsepError, Result};
use crate::frontend::{MelFrontend, LOG_OFFSET, MEL_BANDS, PATCH_FRAMES};
use crate::synthdata::{load_example, DatasetManifest, Split};

pub const NUM_GROUPS: usize = 10;
pub const DEFAULT_WIDTHS: [usize; NUM_GROUPS] = [16, 32, 32, 48, 48, 64, 64, 64, 64, 64];
/// 1-based groups that halve the frequency axis.
pub const STRIDED_GROUPS: [usize; 3] = [2, 4, 6];
/// Frames left of a patch after the ten time-valid 3x3 convolutions.
pub const POOL_FRAMES: usize = PATCH_FRAMES - 2 * NUM_GROUPS;
/// Log-mel input is mapped through `(x - ln 1e-5) / INPUT_SCALE`.
pub const INPUT_SCALE: f64 = 8.0;
/// Layer count for last-k fine-tuning: the head plus every group.
pub const NUM_LAYERS: usize = NUM_GROUPS + 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub widths: Vec<usize>,
}

impl ClassifierConfig {
    pub fn new(num_classes: usize) -> Self {
        ClassifierConfig { num_classes, widths: DEFAULT_WIDTHS.to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != NUM_GROUPS {
            return Err(config_err(format!("classifier needs {NUM_GROUPS} group widths, got {}", self.widths.len())));
        }
        if self.num_classes == 0 || self.widths.contains(&0) {
            return Err(config_err("classifier widths and class count must be positive"));
        }
        Ok(())
    }
}

/// Which classifier layers receive gradient updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "k")]
pub enum TrainablePolicy {
    Frozen,
    /// The last `k` layers counting back from the head (head = 1).
    LastK(usize),
    All,
}

impl std::str::FromStr for TrainablePolicy {
    type Err = CondsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TrainablePolicy::Frozen),
            "all" => Ok(TrainablePolicy::All),
            _ => s
                .strip_prefix("last")
                .and_then(|k| k.trim_start_matches(['_', '-']).parse().ok())
                .map(TrainablePolicy::LastK)
                .ok_or_else(|| config_err(format!("unknown fine-tune policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for TrainablePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainablePolicy::Frozen => f.write_str("frozen"),
            TrainablePolicy::LastK(k) => write!(f, "last{k}"),
            TrainablePolicy::All => f.write_str("all"),
        }
    }
}

/// Network description; parameters live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub prefix: String,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Classifier { config, prefix: prefix.into() })
    }

    fn group_name(&self, g: usize, tensor: &str) -> String {
        format!("{}/group{:02}/{tensor}", self.prefix, g)
    }

    fn head_name(&self, tensor: &str) -> String {
        format!("{}/head/{tensor}", self.prefix)
    }

    /// Tensor names of layer `layer` counted from the output (head = 1).
    pub fn layer_names(&self, layer: usize) -> Vec<String> {
        if layer == 1 {
            vec![self.head_name("weight"), self.head_name("bias")]
        } else {
            let g = NUM_GROUPS + 2 - layer;
            ["depthwise", "pointwise", "bias"].iter().map(|t| self.group_name(g, t)).collect()
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        (1..=NUM_LAYERS).rev().flat_map(|l| self.layer_names(l)).collect()
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], bound: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
        };
        let mut c_in = 1;
        for (g, &c_out) in (1..=NUM_GROUPS).zip(&self.config.widths) {
            // variance preserving depthwise, He-scaled pointwise (followed by ReLU)
            store.insert(self.group_name(g, "depthwise"), uniform(&[3, 3, c_in], (3.0f64 / 9.0).sqrt()), true);
            store.insert(self.group_name(g, "pointwise"), uniform(&[c_in, c_out], (6.0 / c_in as f64).sqrt()), true);
            store.insert(self.group_name(g, "bias"), Tensor::zeros(&[c_out]), true);
            c_in = c_out;
        }
        let j = self.config.num_classes;
        store.insert(self.head_name("weight"), uniform(&[c_in, j], 1.0 / (c_in as f64).sqrt()), true);
        store.insert(self.head_name("bias"), Tensor::zeros(&[j]), true);
    }

    pub fn init_params(&self, seed: u64) -> ClassifierParams {
        let mut store = ParamStore::new();
        self.init(&mut store, seed);
        ClassifierParams { classifier: self.clone(), store }
    }

    /// Sets trainable flags under this classifier's prefix.
    pub fn set_trainable(&self, store: &mut ParamStore, policy: TrainablePolicy) -> Result<()> {
        let k = match policy {
            TrainablePolicy::Frozen => 0,
            TrainablePolicy::All => NUM_LAYERS,
            TrainablePolicy::LastK(k) if (1..=NUM_LAYERS).contains(&k) => k,
            TrainablePolicy::LastK(k) => {
                return Err(config_err(format!("last-k fine-tuning needs 1 <= k <= {NUM_LAYERS}, got {k}")))
            }
        };
        for layer in 1..=NUM_LAYERS {
            for name in self.layer_names(layer) {
                let p = store.get_mut(&name).ok_or_else(|| CondsepError::Config(format!("missing parameter {name}")))?;
                p.trainable = layer <= k;
            }
        }
        Ok(())
    }

    /// Logits `[T - 95, J]` of a padded, normalized-or-not log-mel plane `[T, 64]`.
    pub fn logits_var<'t>(&self, binder: &Binder<'t, '_>, padded_logmel: Var<'t>) -> Result<Var<'t>> {
        let shape = padded_logmel.shape();
        if shape.len() != 2 || shape[1] != MEL_BANDS || shape[0] < PATCH_FRAMES {
            return Err(CondsepError::Shape(format!("classifier input {shape:?}, need [>= {PATCH_FRAMES}, {MEL_BANDS}]")));
        }
        let (mut t, mut f) = (shape[0], MEL_BANDS);
        let mut x = padded_logmel.add_const(-LOG_OFFSET.ln()).scale(1.0 / INPUT_SCALE).reshape(&[t, f, 1])?;
        let mut c_in = 1;
        for (g, &c_out) in (1..=NUM_GROUPS).zip(&self.config.widths) {
            let stride = if STRIDED_GROUPS.contains(&g) { 2 } else { 1 };
            let dw = binder.get(&self.group_name(g, "depthwise"))?;
            x = x.depthwise_conv2d(dw, stride)?;
            t -= 2;
            f = f.div_ceil(stride);
            let pw = binder.get(&self.group_name(g, "pointwise"))?;
            let b = binder.get(&self.group_name(g, "bias"))?;
            x = x.reshape(&[t * f, c_in])?.matmul(pw)?.add_bias(b)?.relu().reshape(&[t, f, c_out])?;
            c_in = c_out;
        }
        let pooled = x.window_mean(POOL_FRAMES)?;
        let w = binder.get(&self.head_name("weight"))?;
        let b = binder.get(&self.head_name("bias"))?;
        Ok(pooled.matmul(w)?.add_bias(b)?)
    }

    /// Logits `[F, J]` of a waveform `[len]`.
    pub fn clip_logits_var<'t>(&self, binder: &Binder<'t, '_>, mel: &MelFrontend, signal: Var<'t>) -> Result<Var<'t>> {
        let logmel = mel.logmel_var(signal)?;
        self.logits_var(binder, MelFrontend::pad_var(logmel)?)
    }
}

/// A classifier together with its parameter values.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub classifier: Classifier,
    pub store: ParamStore,
}

impl ClassifierParams {
    pub fn num_classes(&self) -> usize {
        self.classifier.config.num_classes
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }
}

/// Per-frame logits of a clip.
pub fn classify(clip: &AudioClip, params: &ClassifierParams) -> Result<LogitsEmbedding> {
    let mel = MelFrontend::new(clip.sample_rate())?;
    let tape = Tape::new();
    let binder = Binder::new(&tape, &params.store);
    let x = tape.constant(Tensor::vector(clip.samples().to_vec()));
    let v = params.classifier.clip_logits_var(&binder, &mel, x)?;
    Ok(LogitsEmbedding::new(v.value().as_ref().clone(), EmbeddingKind::Mixture))
}

/// Sets trainable flags according to `policy`.
pub fn set_trainable(mut params: ClassifierParams, policy: TrainablePolicy) -> Result<ClassifierParams> {
    params.classifier.set_trainable(&mut params.store, policy)?;
    Ok(params)
}

/// Mean binary cross entropy (nats) of logits against a multi-hot label
/// broadcast to every row.
pub fn frame_bce_var<'t>(logits: Var<'t>, label: &[u8]) -> Result<Var<'t>> {
    let z = logits.value();
    if z.cols() != label.len() {
        return Err(CondsepError::Shape(format!("{} logits per frame for {} labels", z.cols(), label.len())));
    }
    let y: Vec<f64> = label.iter().map(|&v| v as f64).collect();
    let cols = y.len();
    let n = z.len() as f64;
    let value = z.data().iter().enumerate().map(|(i, &x)| softplus(x) - y[i % cols] * x).sum::<f64>() / n;
    Ok(logits.tape().op(Tensor::scalar(value), &[logits], move |g, _| {
        let k = g.item() / n;
        let data = z.data().iter().enumerate().map(|(i, &x)| k * (sigmoid(x) - y[i % cols])).collect();
        vec![Some(Tensor::new(z.shape().to_vec(), data))]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Also train on mixtures labeled with the union of their classes.
    pub include_mixtures: bool,
    /// Validation mean average precision required for success.
    pub map_floor: f64,
    /// Validation examples scored at the end (0 = the whole split).
    pub validation_examples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 1,
            include_mixtures: true,
            map_floor: 0.8,
            validation_examples: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub validation_accuracy: f64,
    pub validation_map: f64,
}

/// A labeled clip source for classifier training.
pub trait ClipSource {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<(AudioClip, Vec<u8>)>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClipSource for Vec<(AudioClip, Vec<u8>)> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn get(&self, index: usize) -> Result<(AudioClip, Vec<u8>)> {
        Ok(self[index].clone())
    }
}

/// Sources (and optionally mixtures) of one manifest split, loaded on demand.
pub struct ManifestClips<'a> {
    manifest: &'a DatasetManifest,
    /// `(example id, None for the mixture or Some(source index))`
    items: Vec<(String, Option<usize>)>,
}

impl<'a> ManifestClips<'a> {
    pub fn new(manifest: &'a DatasetManifest, split: Split, include_mixtures: bool, limit: usize) -> Self {
        let mut items = Vec::new();
        for (n, e) in manifest.split(split).enumerate() {
            if limit > 0 && n >= limit {
                break;
            }
            for k in 0..e.source_paths.len() {
                items.push((e.id.clone(), Some(k)));
            }
            if include_mixtures {
                items.push((e.id.clone(), None));
            }
        }
        ManifestClips { manifest, items }
    }
}

impl ClipSource for ManifestClips<'_> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn get(&self, index: usize) -> Result<(AudioClip, Vec<u8>)> {
        let (id, which) = &self.items[index];
        let ex = load_example(self.manifest, id)?;
        Ok(match which {
            Some(k) => (ex.sources[*k].clone(), ex.labels[*k].clone()),
            None => {
                let label = ex.mixture_label();
                (ex.mixture, label)
            }
        })
    }
}

/// Adam on per-frame binary cross entropy. Returns the per-step mean loss.
pub fn fit(params: &mut ClassifierParams, data: &dyn ClipSource, config: &PretrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() && config.steps > 0 {
        return Err(config_err("no training clips"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let mut mel: Option<MelFrontend> = None;
    for step in 0..config.steps {
        let tape = Tape::new();
        let binder = Binder::new(&tape, &params.store);
        let mut terms = Vec::new();
        for _ in 0..config.batch_size.max(1) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (clip, label) = data.get(order[cursor])?;
            cursor += 1;
            let mel = match &mel {
                Some(m) if m.sample_rate == clip.sample_rate() => m,
                _ => mel.insert(MelFrontend::new(clip.sample_rate())?),
            };
            let x = tape.constant(Tensor::vector(clip.into_samples()));
            let logits = params.classifier.clip_logits_var(&binder, mel, x)?;
            terms.push(frame_bce_var(logits, &label)?);
        }
        let loss = Var::sum_all(&terms)?.scale(1.0 / terms.len() as f64);
        let value = loss.item();
        if !value.is_finite() {
            return Err(CondsepError::Training(format!("classifier loss became {value} at step {step}")));
        }
        let grads = binder.gradients(&tape.backward(loss));
        adam.step(&mut params.store, &grads);
        if !params.store.all_finite() {
            return Err(CondsepError::Training(format!("non-finite classifier parameters after step {step}")));
        }
        losses.push(value);
    }
    Ok(losses)
}

/// Average precision of scores against binary targets.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Frame-level binary accuracy (threshold 0.5) and mean average precision.
pub fn evaluate_frames(params: &ClassifierParams, data: &dyn ClipSource) -> Result<(f64, f64)> {
    let j = params.num_classes();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); j];
    let mut targets: Vec<Vec<bool>> = vec![Vec::new(); j];
    let (mut correct, mut total) = (0usize, 0usize);
    for i in 0..data.len() {
        let (clip, label) = data.get(i)?;
        let logits = classify(&clip, params)?;
        for r in 0..logits.values.rows() {
            for (c, &z) in logits.values.row(r).iter().enumerate() {
                let positive = label[c] != 0;
                correct += ((z > 0.0) == positive) as usize;
                total += 1;
                scores[c].push(z);
                targets[c].push(positive);
            }
        }
    }
    if total == 0 {
        return Err(config_err("no validation clips"));
    }
    let aps: Vec<f64> = (0..j).filter_map(|c| average_precision(&scores[c], &targets[c])).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    Ok((correct as f64 / total as f64, map))
}

/// Trains a fresh classifier on the manifest's training split and checks
/// validation mean average precision against `config.map_floor`.
pub fn pretrain(
    manifest: &DatasetManifest,
    classifier: &Classifier,
    config: &PretrainConfig,
) -> Result<(ClassifierParams, PretrainReport)> {
    if classifier.config.num_classes != manifest.num_classes() {
        return Err(config_err(format!(
            "classifier has {} classes, dataset {}",
            classifier.config.num_classes,
            manifest.num_classes()
        )));
    }
    let mut params = classifier.init_params(config.seed);
    let train = ManifestClips::new(manifest, Split::Train, config.include_mixtures, 0);
    let losses = fit(&mut params, &train, config)?;
    let val = ManifestClips::new(manifest, Split::Validation, false, config.validation_examples);
    let (validation_accuracy, validation_map) = evaluate_frames(&params, &val)?;
    let report = PretrainReport { losses, validation_accuracy, validation_map };
    if validation_map < config.map_floor {
        return Err(CondsepError::Training(format!(
            "validation mAP {validation_map:.4} below the floor {:.4} (accuracy {validation_accuracy:.4})",
            config.map_floor
        )));
    }
    Ok((params, report))
}

/// Finite-difference check of parameter gradients for `sum(w * logits)` on
/// one `[96, 64]` log-mel patch, with `w` a fixed random projection.
pub fn grad_check(params: &ClassifierParams, patch: &Tensor, per_tensor: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a55);
    let rows = patch.rows() + 1 - PATCH_FRAMES;
    let w = Rc::new(Tensor::new(
        vec![rows, params.num_classes()],
        (0..rows * params.num_classes()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    ));
    let classifier = &params.classifier;
    let eval = |store: &ParamStore, want: bool| -> (f64, u64, Option<BTreeMap<String, Tensor>>) {
        let tape = Tape::with_branch_tracking();
        let binder = Binder::new(&tape, store);
        let x = tape.constant(patch.clone());
        let logits = classifier.logits_var(&binder, x).expect("grad-check forward");
        let loss = logits.mul_const(w.clone()).expect("projection shape").sum();
        let grads = want.then(|| binder.gradients(&tape.backward(loss)));
        (loss.item(), tape.branch_signature(), grads)
    };
    let names: Vec<String> = classifier.param_names().into_iter().filter(|n| params.store.get(n).is_some_and(|p| p.trainable)).collect();
    let coords = sample_coords(&params.store, &names, per_tensor, seed);
    Ok(check_param_coords(&params.store, &coords, 1e-5, &eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::mel_patches;

    fn small() -> ClassifierParams {
        Classifier::new(ClassifierConfig::new(5), "classifier").unwrap().init_params(3)
    }

    fn noise(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000)
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = small();
        let clip = noise(48000, 1);
        let a = classify(&clip, &p).unwrap();
        assert_eq!(a.values.shape(), &[301, 5]);
        assert_eq!(a, classify(&clip, &p).unwrap());
        let b = classify(&clip.scaled(0.5), &p).unwrap();
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn rows_equal_per_patch_application() {
        let p = small();
        let clip = noise(4000, 2);
        let full = classify(&clip, &p).unwrap();
        let patches = mel_patches(&clip).unwrap();
        for i in [0, 7, patches.num_patches() - 1] {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &p.store);
            let row = p.classifier.logits_var(&binder, tape.constant(patches.patch(i))).unwrap();
            assert_eq!(row.value().shape(), &[1, 5]);
            for (x, y) in row.value().data().iter().zip(full.values.row(i)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trainable_policies() {
        let p = small();
        let total = p.store.total_count();
        let frozen = set_trainable(p.clone(), TrainablePolicy::Frozen).unwrap();
        assert_eq!(frozen.trainable_count(), 0);
        let last1 = set_trainable(p.clone(), TrainablePolicy::LastK(1)).unwrap();
        assert_eq!(last1.trainable_count(), 64 * 5 + 5);
        let last3 = set_trainable(p.clone(), TrainablePolicy::LastK(3)).unwrap();
        let group = |c_in: usize, c_out: usize| 9 * c_in + c_in * c_out + c_out;
        assert_eq!(last3.trainable_count(), 64 * 5 + 5 + 2 * group(64, 64));
        assert!(last3.store.get("classifier/group09/pointwise").unwrap().trainable);
        assert!(!last3.store.get("classifier/group08/pointwise").unwrap().trainable);
        assert_eq!(set_trainable(p.clone(), TrainablePolicy::All).unwrap().trainable_count(), total);
        assert!(matches!(set_trainable(p.clone(), TrainablePolicy::LastK(0)), Err(CondsepError::Config(_))));
        assert!(set_trainable(p, TrainablePolicy::LastK(12)).is_err());
        assert_eq!("last3".parse::<TrainablePolicy>().unwrap(), TrainablePolicy::LastK(3));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = small();
        let patch = mel_patches(&noise(16000, 4)).unwrap().patch(40);
        let report = grad_check(&p, &patch, 5, 9).unwrap();
        assert!(report.checked >= 100, "{report:?}");
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        let again = grad_check(&p, &patch, 5, 9).unwrap();
        assert_eq!(report.max_rel_error, again.max_rel_error);
    }

    #[test]
    fn frozen_layers_get_zero_gradient() {
        let p = set_trainable(small(), TrainablePolicy::LastK(1)).unwrap();
        let tape = Tape::new();
        let binder = Binder::new(&tape, &p.store);
        let patch = mel_patches(&noise(2000, 5)).unwrap().patch(3);
        let loss = p.classifier.logits_var(&binder, tape.constant(patch)).unwrap().sum();
        let grads = binder.gradients(&tape.backward(loss));
        assert!(grads.keys().all(|k| k.starts_with("classifier/head")));
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let mut p = small();
        let before = p.store.clone();
        let data: Vec<(AudioClip, Vec<u8>)> = vec![(noise(1600, 1), vec![1, 0, 0, 0, 0])];
        let cfg = PretrainConfig { steps: 0, ..Default::default() };
        fit(&mut p, &data, &cfg).unwrap();
        assert_eq!(p.store, before);
    }

    #[test]
    fn single_example_overfits() {
        let mut p = small();
        let data: Vec<(AudioClip, Vec<u8>)> = vec![(noise(1600, 1), vec![0, 1, 0, 0, 1])];
        let cfg = PretrainConfig { steps: 60, batch_size: 1, learning_rate: 3e-3, ..Default::default() };
        let losses = fit(&mut p, &data, &cfg).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{:?}", losses);
    }

    #[test]
    fn average_precision_values() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.9], &[true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.1], &[false]), None);
    }
}
