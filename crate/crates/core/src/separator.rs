//! Masking separator built from dilated separable convolution blocks, with
//! optional conditioning on classifier embeddings and an optional second
//! stage that refines the first stage's estimates.

use std::rc::Rc;

use autograd::gradcheck::{check_param_coords, sample_coords, GradCheckReport};
use autograd::{Binder, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::classifier::{Classifier, ClassifierConfig, ClassifierParams, TrainablePolicy};
use crate::embeddings::{resample_index, resample_to_frames, EmbeddingKind, LogitsEmbedding};
use crate::error::{config_err, shape_err, CondsepError, Result};
use crate::frontend::{learned_analyze_var, learned_synthesize_var, BasisConfig, BasisKind, FrameGeometry, MelFrontend, StftBasis};
use crate::objectives::{total_loss_var, StageVars};

/// Epsilon of every global normalization; enters squared next to the variance.
pub const NORM_EPS: f64 = 1e-5;
/// Long-range residuals connect block `i` to blocks `i - 1 - 4k`.
pub const RESIDUAL_STRIDE: usize = 4;
/// Residual weight `a_ij` starts at `RESIDUAL_DECAY^k`.
pub const RESIDUAL_DECAY: f64 = 0.9;
pub const PRELU_INIT: f64 = 0.25;
/// Dilation cycles through `1, 2, ..., 2^(DILATION_CYCLE - 1)`.
pub const DILATION_CYCLE: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmoidKind {
    /// Logits pass through unchanged.
    NoneRaw,
    Fixed,
    /// `alpha * sigmoid(beta * (x - x0))` with learned scalars.
    #[default]
    Trainable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Concat,
    Gate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSites {
    /// Only the input of block 1, i.e. the bottleneck projection of the
    /// analysis coefficients.
    #[default]
    FirstLayerOnly,
    AllLayers,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = CondsepError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    other => Err(config_err(format!(concat!("unknown ", stringify!($ty), " `{}`"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $s,)+ })
            }
        }
    };
}

string_enum!(SigmoidKind { NoneRaw => "none_raw", Fixed => "fixed", Trainable => "trainable" });
string_enum!(CombineMode { Concat => "concat", Gate => "gate" });
string_enum!(InjectionSites { FirstLayerOnly => "first_layer_only", AllLayers => "all_layers" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub num_sources: usize,
    pub num_blocks: usize,
    /// Bottleneck width `B`.
    pub bottleneck: usize,
    /// Hidden width `H` inside each block.
    pub hidden: usize,
    pub kernel_size: usize,
    /// Conditioning width `B'` after projection.
    pub cond_channels: usize,
    pub sigmoid_kind: SigmoidKind,
    pub combine: CombineMode,
    pub injection_sites: InjectionSites,
    pub basis: BasisConfig,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            num_sources: 2,
            num_blocks: 8,
            bottleneck: 128,
            hidden: 256,
            kernel_size: 3,
            cond_channels: 128,
            sigmoid_kind: SigmoidKind::default(),
            combine: CombineMode::default(),
            injection_sites: InjectionSites::default(),
            basis: BasisConfig::stft(),
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        self.basis.validate(sample_rate)?;
        if self.num_sources == 0 || self.num_sources > crate::objectives::MAX_PIT_SOURCES {
            return Err(config_err(format!("{} sources unsupported", self.num_sources)));
        }
        if self.num_blocks == 0 || self.bottleneck == 0 || self.hidden == 0 || self.cond_channels == 0 {
            return Err(config_err("separator widths and block count must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(config_err(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.combine == CombineMode::Gate && self.cond_channels != self.bottleneck {
            return Err(config_err(format!(
                "gate combination needs conditioning width {} equal to bottleneck {}",
                self.cond_channels, self.bottleneck
            )));
        }
        Ok(())
    }

    fn is_site(&self, block: usize) -> bool {
        block == 1 || self.injection_sites == InjectionSites::AllLayers
    }

    pub fn dilation(block: usize) -> usize {
        1 << ((block - 1) % DILATION_CYCLE)
    }
}

/// Shape of one separation stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    /// 1 or 2.
    pub index: usize,
    /// Analysis channels fed to the network (`C` or `(N + 1) C`).
    pub input_channels: usize,
    /// Conditioning channels `J'`, or `None` when unconditioned.
    pub embedding_channels: Option<usize>,
}

impl StageSpec {
    pub fn prefix(&self) -> String {
        format!("separator/stage{}", self.index)
    }
}

/// Masks and synthesized estimates of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparatorOutput {
    /// One `[W, C]` mask per source, entries in `[0, 1]`.
    pub masks: Vec<Tensor>,
    pub estimates: Vec<AudioClip>,
    pub stage: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

fn insert_dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{name}/weight"), uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()), true);
    store.insert(format!("{name}/bias"), Tensor::zeros(&[fan_out]), true);
}

fn insert_norm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}/gamma"), Tensor::full(&[channels], 1.0), true);
    store.insert(format!("{name}/beta"), Tensor::zeros(&[channels]), true);
}

fn dense<'t>(binder: &Binder<'t, '_>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let w = binder.get(&format!("{name}/weight"))?;
    let b = binder.get(&format!("{name}/bias"))?;
    Ok(x.matmul(w)?.add_bias(b)?)
}

/// Global normalization with per-channel scale and shift.
fn norm<'t>(binder: &Binder<'t, '_>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let g = binder.get(&format!("{name}/gamma"))?;
    let b = binder.get(&format!("{name}/beta"))?;
    Ok(x.global_norm(NORM_EPS * NORM_EPS).mul_cols(g)?.add_bias(b)?)
}

fn residual_sources(block: usize) -> impl Iterator<Item = (usize, i32)> {
    (1..)
        .map(move |k| (block as i64 - 1 - (RESIDUAL_STRIDE * k) as i64, k as i32))
        .take_while(|(j, _)| *j >= 0)
        .map(|(j, k)| (j as usize, k))
}

fn site_prefix(stage: &str, block: usize) -> String {
    format!("{stage}/cond/site{block:02}")
}

fn block_prefix(stage: &str, block: usize) -> String {
    format!("{stage}/block{block:02}")
}

/// Adds the parameters of one stage to `store`.
pub fn init_stage(store: &mut ParamStore, config: &SeparatorConfig, spec: &StageSpec, sample_rate: u32, seed: u64) -> Result<()> {
    config.validate(sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (spec.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let p = spec.prefix();
    let (b, h, bc) = (config.bottleneck, config.hidden, config.cond_channels);
    let c = config.basis.num_coeffs;
    if config.basis.kind == BasisKind::Learned {
        let window = config.basis.window_samples(sample_rate);
        let bound = 1.0 / (window as f64).sqrt();
        store.insert(format!("{p}/encoder"), uniform(&mut rng, &[window, c], bound), true);
        store.insert(format!("{p}/decoder"), uniform(&mut rng, &[c, window], bound), true);
    }
    insert_norm(store, &format!("{p}/input_norm"), spec.input_channels);
    insert_dense(store, &mut rng, &format!("{p}/bottleneck"), spec.input_channels, b);
    for i in 1..=config.num_blocks {
        let bp = block_prefix(&p, i);
        let conditioned = spec.embedding_channels.is_some() && config.is_site(i);
        if let (true, Some(j)) = (conditioned, spec.embedding_channels) {
            let sp = site_prefix(&p, i);
            if config.sigmoid_kind == SigmoidKind::Trainable {
                store.insert(format!("{sp}/alpha"), Tensor::scalar(1.0), true);
                store.insert(format!("{sp}/beta"), Tensor::scalar(1.0), true);
                store.insert(format!("{sp}/x0"), Tensor::scalar(0.0), true);
            }
            insert_dense(store, &mut rng, &format!("{sp}/proj"), j, bc);
            insert_norm(store, &format!("{sp}/norm"), bc);
        }
        let m = if conditioned && config.combine == CombineMode::Concat { b + bc } else { b };
        for (j, k) in residual_sources(i) {
            store.insert(format!("{bp}/residual_from{j:02}"), Tensor::scalar(RESIDUAL_DECAY.powi(k)), true);
        }
        insert_dense(store, &mut rng, &format!("{bp}/in"), m, h);
        store.insert(format!("{bp}/prelu1"), Tensor::scalar(PRELU_INIT), true);
        insert_norm(store, &format!("{bp}/norm1"), h);
        let taps = config.kernel_size;
        store.insert(format!("{bp}/depthwise"), uniform(&mut rng, &[taps, h], 1.0 / (taps as f64).sqrt()), true);
        store.insert(format!("{bp}/prelu2"), Tensor::scalar(PRELU_INIT), true);
        insert_norm(store, &format!("{bp}/norm2"), h);
        insert_dense(store, &mut rng, &format!("{bp}/residual"), h, b);
        insert_dense(store, &mut rng, &format!("{bp}/skip"), h, b);
    }
    store.insert(format!("{p}/head/prelu"), Tensor::scalar(PRELU_INIT), true);
    insert_dense(store, &mut rng, &format!("{p}/head"), b, config.num_sources * c);
    Ok(())
}

/// Repeats embedding rows to `frames` rows; several blocks become channel groups.
pub fn resample_blocks<'t>(blocks: &[Var<'t>], frames: usize) -> Result<Var<'t>> {
    if blocks.is_empty() {
        return Err(shape_err("no embedding blocks"));
    }
    let parts = blocks
        .iter()
        .map(|b| {
            let f = b.value().rows();
            if f == 0 {
                return Err(shape_err("embedding has no frames"));
            }
            Ok(b.gather_rows(Rc::new(resample_index(f, frames)))?)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        Ok(Var::concat_cols(&parts)?)
    }
}

/// Sigmoid, 1x1 projection and normalization of an already resampled
/// embedding `[W, J']`, giving `[W, B']`.
pub fn condition_site<'t>(binder: &Binder<'t, '_>, config: &SeparatorConfig, site: &str, embedding: Var<'t>) -> Result<Var<'t>> {
    let z = match config.sigmoid_kind {
        SigmoidKind::NoneRaw => embedding,
        SigmoidKind::Fixed => embedding.sigmoid(),
        SigmoidKind::Trainable => {
            let alpha = binder.get(&format!("{site}/alpha"))?;
            let beta = binder.get(&format!("{site}/beta"))?;
            let x0 = binder.get(&format!("{site}/x0"))?;
            embedding.add_scalar(x0.scale(-1.0))?.mul_scalar(beta)?.sigmoid().mul_scalar(alpha)?
        }
    };
    norm(binder, dense(binder, z, &format!("{site}/proj"))?, &format!("{site}/norm"))
}

/// Maps embedding blocks (`[F, J]` each) to conditioning `[frames, B']` at
/// the parameters under `site`.
pub fn inject_conditioning<'t>(
    binder: &Binder<'t, '_>,
    config: &SeparatorConfig,
    site: &str,
    blocks: &[Var<'t>],
    frames: usize,
) -> Result<Var<'t>> {
    condition_site(binder, config, site, resample_blocks(blocks, frames)?)
}

/// Merges conditioning into a block input.
pub fn combine<'t>(mode: CombineMode, x: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
    match mode {
        CombineMode::Concat => Ok(Var::concat_cols(&[x, cond])?),
        CombineMode::Gate => Ok(x.mul(cond)?),
    }
}

/// Mask network of one stage: `input` `[W, Cin]` and resampled embedding
/// `[W, J']` to one `[W, C]` sigmoid mask per source.
pub fn stage_masks_var<'t>(
    binder: &Binder<'t, '_>,
    config: &SeparatorConfig,
    spec: &StageSpec,
    input: Var<'t>,
    embedding: Option<Var<'t>>,
) -> Result<Vec<Var<'t>>> {
    let shape = input.shape();
    if shape.len() != 2 || shape[1] != spec.input_channels {
        return Err(shape_err(format!("stage {} input {shape:?}, expected [W, {}]", spec.index, spec.input_channels)));
    }
    let w = shape[0];
    let embedding = match (spec.embedding_channels, embedding) {
        (None, _) => None,
        (Some(j), Some(e)) => {
            if e.shape() != [w, j] {
                return Err(shape_err(format!("conditioning {:?}, expected [{w}, {j}]", e.shape())));
            }
            Some(e)
        }
        (Some(_), None) => return Err(config_err(format!("stage {} is conditioned but got no embedding", spec.index))),
    };
    let p = spec.prefix();
    let y0 = dense(binder, norm(binder, input, &format!("{p}/input_norm"))?, &format!("{p}/bottleneck"))?;
    let mut ys = vec![y0];
    let mut skips = Vec::with_capacity(config.num_blocks);
    for i in 1..=config.num_blocks {
        let bp = block_prefix(&p, i);
        let mut x = ys[i - 1];
        for (j, _) in residual_sources(i) {
            let a = binder.get(&format!("{bp}/residual_from{j:02}"))?;
            x = x.add(ys[j].mul_scalar(a)?)?;
        }
        let u = match embedding {
            Some(e) if config.is_site(i) => {
                let cond = condition_site(binder, config, &site_prefix(&p, i), e)?;
                combine(config.combine, x, cond)?
            }
            _ => x,
        };
        let h = dense(binder, u, &format!("{bp}/in"))?.prelu(binder.get(&format!("{bp}/prelu1"))?)?;
        let h = norm(binder, h, &format!("{bp}/norm1"))?;
        let h = h
            .depthwise_conv1d(binder.get(&format!("{bp}/depthwise"))?, SeparatorConfig::dilation(i))?
            .prelu(binder.get(&format!("{bp}/prelu2"))?)?;
        let h = norm(binder, h, &format!("{bp}/norm2"))?;
        ys.push(x.add(dense(binder, h, &format!("{bp}/residual"))?)?);
        skips.push(dense(binder, h, &format!("{bp}/skip"))?);
    }
    let s = Var::sum_all(&skips)?.prelu(binder.get(&format!("{p}/head/prelu"))?)?;
    let m = dense(binder, s, &format!("{p}/head"))?.sigmoid();
    let c = config.basis.num_coeffs;
    (0..config.num_sources).map(|n| Ok(m.slice_cols(n * c, (n + 1) * c)?)).collect()
}

/// Analysis transform bound to one stage.
enum StageBasis<'t> {
    Stft(StftBasis),
    Learned { encoder: Var<'t>, decoder: Var<'t>, hop: usize },
}

struct Analyzed<'t> {
    coeffs: Var<'t>,
    geometry: FrameGeometry,
    phase: Option<(Rc<Tensor>, Rc<Tensor>)>,
}

impl<'t> StageBasis<'t> {
    fn new(binder: &Binder<'t, '_>, config: &BasisConfig, prefix: &str, rate: u32) -> Result<Self> {
        Ok(match config.kind {
            BasisKind::Stft => StageBasis::Stft(StftBasis::new(config, rate)?),
            BasisKind::Learned => StageBasis::Learned {
                encoder: binder.get(&format!("{prefix}/encoder"))?,
                decoder: binder.get(&format!("{prefix}/decoder"))?,
                hop: config.hop_samples(rate),
            },
        })
    }

    fn analyze(&self, signal: Var<'t>) -> Result<Analyzed<'t>> {
        match self {
            StageBasis::Stft(b) => {
                let a = b.analyze_var(signal)?;
                Ok(Analyzed { coeffs: a.magnitude, geometry: a.geometry, phase: Some((a.cos, a.sin)) })
            }
            StageBasis::Learned { encoder, hop, .. } => {
                let (coeffs, geometry) = learned_analyze_var(signal, *encoder, *hop)?;
                Ok(Analyzed { coeffs, geometry, phase: None })
            }
        }
    }

    fn synthesize(&self, coeffs: Var<'t>, mixture: &Analyzed<'t>) -> Result<Var<'t>> {
        match (self, &mixture.phase) {
            (StageBasis::Stft(b), Some((cos, sin))) => b.synthesize_var(coeffs, cos, sin, &mixture.geometry),
            (StageBasis::Learned { decoder, .. }, _) => learned_synthesize_var(coeffs, *decoder, &mixture.geometry),
            _ => Err(shape_err("stft synthesis needs the mixture phase")),
        }
    }
}

/// Differentiable output of one stage.
pub struct StageOutputVars<'t> {
    pub masks: Vec<Var<'t>>,
    pub estimates: Vec<Var<'t>>,
}

/// Runs one stage on a mixture waveform `[L]`, with `previous` estimates
/// appended to the analysis input for refinement stages.
pub fn run_stage<'t>(
    binder: &Binder<'t, '_>,
    config: &SeparatorConfig,
    spec: &StageSpec,
    mixture: Var<'t>,
    previous: &[Var<'t>],
    embedding_blocks: Option<&[Var<'t>]>,
    sample_rate: u32,
) -> Result<StageOutputVars<'t>> {
    let p = spec.prefix();
    let basis = StageBasis::new(binder, &config.basis, &p, sample_rate)?;
    let mix = basis.analyze(mixture)?;
    let input = if previous.is_empty() {
        mix.coeffs
    } else {
        let mut parts = vec![mix.coeffs];
        for e in previous {
            parts.push(basis.analyze(*e)?.coeffs);
        }
        Var::concat_cols(&parts)?
    };
    let w = mix.geometry.frames;
    let embedding = match (spec.embedding_channels, embedding_blocks) {
        (Some(_), Some(blocks)) => Some(resample_blocks(blocks, w)?),
        _ => None,
    };
    let masks = stage_masks_var(binder, config, spec, input, embedding)?;
    let estimates = masks
        .iter()
        .map(|m| basis.synthesize(m.mul(mix.coeffs)?, &mix))
        .collect::<Result<Vec<_>>>()?;
    Ok(StageOutputVars { masks, estimates })
}

/// Where stage 1 gets its conditioning from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Conditioning {
    #[default]
    None,
    /// Logits of the first classifier on the mixture.
    MixtureClassifier,
    /// An embedding supplied by the caller with this many channels.
    Given { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub separator: SeparatorConfig,
    pub sample_rate: u32,
    /// Adds a second stage conditioned on classifier logits of the mixture
    /// and stage-1 estimates when `stage2_conditioned`.
    pub iterative: bool,
    pub stage1: Stage1Conditioning,
    pub stage2_conditioned: bool,
    pub classifier: Option<ClassifierConfig>,
    /// Stage 2 reuses the first classifier's weights.
    pub tie_classifier_weights: bool,
}

impl ModelSpec {
    pub fn unconditioned(separator: SeparatorConfig, sample_rate: u32, iterative: bool) -> Self {
        ModelSpec {
            separator,
            sample_rate,
            iterative,
            stage1: Stage1Conditioning::None,
            stage2_conditioned: false,
            classifier: None,
            tie_classifier_weights: false,
        }
    }

    fn classes(&self) -> Result<usize> {
        self.classifier
            .as_ref()
            .map(|c| c.num_classes)
            .ok_or_else(|| config_err("classifier conditioning without a classifier"))
    }

    pub fn validate(&self) -> Result<()> {
        self.separator.validate(self.sample_rate)?;
        if let Some(c) = &self.classifier {
            c.validate()?;
        }
        if self.stage1 == Stage1Conditioning::MixtureClassifier || (self.iterative && self.stage2_conditioned) {
            self.classes()?;
        }
        if self.stage2_conditioned && !self.iterative {
            return Err(config_err("stage-2 conditioning requires the iterative model"));
        }
        if let Stage1Conditioning::Given { channels: 0 } = self.stage1 {
            return Err(config_err("given embedding needs channels"));
        }
        Ok(())
    }

    pub fn stage_specs(&self) -> Result<Vec<StageSpec>> {
        let c = self.separator.basis.num_coeffs;
        let n = self.separator.num_sources;
        let j1 = match self.stage1 {
            Stage1Conditioning::None => None,
            Stage1Conditioning::MixtureClassifier => Some(self.classes()?),
            Stage1Conditioning::Given { channels } => Some(channels),
        };
        let mut specs = vec![StageSpec { index: 1, input_channels: c, embedding_channels: j1 }];
        if self.iterative {
            let j2 = if self.stage2_conditioned { Some((n + 1) * self.classes()?) } else { None };
            specs.push(StageSpec { index: 2, input_channels: (n + 1) * c, embedding_channels: j2 });
        }
        Ok(specs)
    }

    pub fn uses_classifier1(&self) -> bool {
        self.stage1 == Stage1Conditioning::MixtureClassifier
    }

    pub fn uses_classifier2(&self) -> bool {
        self.iterative && self.stage2_conditioned
    }
}

pub const CLASSIFIER1_PREFIX: &str = "classifier";
pub const CLASSIFIER2_PREFIX: &str = "classifier2";

/// All trainable state of a separation system.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

/// Differentiable outputs of a full forward pass.
pub struct ForwardVars<'t> {
    pub stage1: StageOutputVars<'t>,
    pub stage2: Option<StageOutputVars<'t>>,
    /// First classifier on the mixture.
    pub mixture_stage1: Option<Var<'t>>,
    /// Second classifier on the mixture.
    pub mixture_stage2: Option<Var<'t>>,
    /// Second classifier on each stage-1 estimate.
    pub sources_stage2: Vec<Var<'t>>,
}

impl<'t> ForwardVars<'t> {
    pub fn final_stage(&self) -> &StageOutputVars<'t> {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }
}

/// Plain-valued result of [`SeparationModel::infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub stage1: SeparatorOutput,
    pub stage2: Option<SeparatorOutput>,
    pub mixture_stage1: Option<LogitsEmbedding>,
    pub stage2_embedding: Option<LogitsEmbedding>,
}

impl Inference {
    pub fn final_output(&self) -> &SeparatorOutput {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }
}

impl SeparationModel {
    /// Fresh parameters for every stage and classifier `spec` uses.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        for s in spec.stage_specs()? {
            init_stage(&mut store, &spec.separator, &s, spec.sample_rate, seed)?;
        }
        let mut model = SeparationModel { spec, store };
        if let Some(c) = model.classifier1() {
            c.init(&mut model.store, seed ^ 0x11);
        }
        if let Some(c) = model.classifier2() {
            if c.prefix != CLASSIFIER1_PREFIX {
                c.init(&mut model.store, seed ^ 0x22);
            }
        }
        Ok(model)
    }

    pub fn classifier1(&self) -> Option<Classifier> {
        let cfg = self.spec.classifier.clone()?;
        self.spec.uses_classifier1().then(|| Classifier { config: cfg, prefix: CLASSIFIER1_PREFIX.into() })
    }

    pub fn classifier2(&self) -> Option<Classifier> {
        let cfg = self.spec.classifier.clone()?;
        let prefix = if self.spec.tie_classifier_weights { CLASSIFIER1_PREFIX } else { CLASSIFIER2_PREFIX };
        self.spec.uses_classifier2().then(|| Classifier { config: cfg, prefix: prefix.into() })
    }

    fn classifiers(&self) -> Vec<Classifier> {
        let mut out: Vec<Classifier> = self.classifier1().into_iter().collect();
        if let Some(c) = self.classifier2() {
            if !out.iter().any(|o| o.prefix == c.prefix) {
                out.push(c);
            }
        }
        out
    }

    /// Copies pretrained classifier weights into every classifier slot.
    pub fn load_classifier(&mut self, pretrained: &ClassifierParams) -> Result<()> {
        let classifiers = self.classifiers();
        for c in classifiers {
            if c.config != pretrained.classifier.config {
                return Err(config_err("pretrained classifier configuration differs from the model's"));
            }
            let copy = pretrained.store.renamed(&format!("{}/", pretrained.classifier.prefix), &format!("{}/", c.prefix));
            self.store.extend(copy);
        }
        Ok(())
    }

    /// Applies a fine-tuning policy to every classifier in the model.
    pub fn set_classifier_policy(&mut self, policy: TrainablePolicy) -> Result<()> {
        for c in self.classifiers() {
            c.set_trainable(&mut self.store, policy)?;
        }
        Ok(())
    }

    /// Full forward pass on the tape. `given` is used for stage-1
    /// conditioning when present, overriding the first classifier.
    pub fn forward<'t>(
        &self,
        binder: &Binder<'t, '_>,
        mixture: Var<'t>,
        given: Option<&LogitsEmbedding>,
    ) -> Result<ForwardVars<'t>> {
        let tape = binder.tape();
        let specs = self.spec.stage_specs()?;
        let rate = self.spec.sample_rate;
        let cfg = &self.spec.separator;
        let mel = if self.classifiers().is_empty() { None } else { Some(MelFrontend::new(rate)?) };
        let mut mixture_stage1 = None;
        let blocks1: Option<Vec<Var<'t>>> = match (specs[0].embedding_channels, given) {
            (None, _) => None,
            (Some(j), Some(e)) => {
                let w = StageBasis::new(binder, &cfg.basis, &specs[0].prefix(), rate)?
                    .frames(mixture.value().len())?;
                let r = resample_to_frames(e, w)?;
                if r.values.cols() != j {
                    return Err(shape_err(format!("embedding has {} channels, stage 1 expects {j}", r.values.cols())));
                }
                Some(vec![tape.constant(r.values)])
            }
            (Some(_), None) => {
                let c = self.classifier1().ok_or_else(|| config_err("stage 1 needs an embedding"))?;
                let v = c.clip_logits_var(binder, mel.as_ref().expect("mel frontend"), mixture)?;
                mixture_stage1 = Some(v);
                Some(vec![v])
            }
        };
        let stage1 = run_stage(binder, cfg, &specs[0], mixture, &[], blocks1.as_deref(), rate)?;
        let (mut mixture_stage2, mut sources_stage2, mut stage2) = (None, Vec::new(), None);
        if let Some(spec2) = specs.get(1) {
            let blocks2 = match self.classifier2() {
                Some(c) => {
                    let mel = mel.as_ref().expect("mel frontend");
                    let m = c.clip_logits_var(binder, mel, mixture)?;
                    mixture_stage2 = Some(m);
                    for e in &stage1.estimates {
                        sources_stage2.push(c.clip_logits_var(binder, mel, *e)?);
                    }
                    let mut b = vec![m];
                    b.extend(sources_stage2.iter().copied());
                    Some(b)
                }
                None => None,
            };
            stage2 = Some(run_stage(binder, cfg, spec2, mixture, &stage1.estimates, blocks2.as_deref(), rate)?);
        }
        Ok(ForwardVars { stage1, stage2, mixture_stage1, mixture_stage2, sources_stage2 })
    }

    /// Plain-valued forward pass.
    pub fn infer(&self, mixture: &AudioClip, given: Option<&LogitsEmbedding>) -> Result<Inference> {
        if mixture.is_empty() {
            return Err(shape_err("empty mixture"));
        }
        if mixture.sample_rate() != self.spec.sample_rate {
            return Err(config_err(format!(
                "mixture rate {} differs from the model's {}",
                mixture.sample_rate(),
                self.spec.sample_rate
            )));
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &self.store);
        let x = tape.constant(Tensor::vector(mixture.samples().to_vec()));
        let out = self.forward(&binder, x, given)?;
        let rate = self.spec.sample_rate;
        let plain = |s: &StageOutputVars<'_>, stage| SeparatorOutput {
            masks: s.masks.iter().map(|m| m.value().as_ref().clone()).collect(),
            estimates: s.estimates.iter().map(|e| AudioClip::new(e.value().data().to_vec(), rate)).collect(),
            stage,
        };
        let stage2_embedding = out.mixture_stage2.map(|m| {
            let f = m.value().rows();
            let mut data = m.value().data().to_vec();
            for s in &out.sources_stage2 {
                data.extend_from_slice(s.value().data());
            }
            let n = out.sources_stage2.len();
            let mut e = LogitsEmbedding::new(Tensor::matrix((n + 1) * f, m.value().cols(), data), EmbeddingKind::All { sources: n });
            e.frames = f;
            e
        });
        Ok(Inference {
            stage1: plain(&out.stage1, 1),
            stage2: out.stage2.as_ref().map(|s| plain(s, 2)),
            mixture_stage1: out.mixture_stage1.map(|v| LogitsEmbedding::new(v.value().as_ref().clone(), EmbeddingKind::Mixture)),
            stage2_embedding,
        })
    }
}

impl StageBasis<'_> {
    fn frames(&self, len: usize) -> Result<usize> {
        let (window, hop) = match self {
            StageBasis::Stft(b) => (b.window, b.hop),
            StageBasis::Learned { encoder, hop, .. } => (encoder.value().rows(), *hop),
        };
        Ok(FrameGeometry::new(len, window, hop)?.frames)
    }
}

/// Single-stage separation: the first stage of `model`. The embedding is
/// ignored when the stage is unconditioned.
pub fn separate(mixture: &AudioClip, embedding: Option<&LogitsEmbedding>, model: &SeparationModel) -> Result<SeparatorOutput> {
    let mut single = model.clone();
    if single.spec.iterative {
        single.spec.iterative = false;
        single.spec.stage2_conditioned = false;
    }
    Ok(single.infer(mixture, embedding)?.stage1)
}

/// Both stages of an iterative model.
pub fn separate_iterative(mixture: &AudioClip, embedding: Option<&LogitsEmbedding>, model: &SeparationModel) -> Result<Inference> {
    if !model.spec.iterative {
        return Err(config_err("model has a single stage"));
    }
    model.infer(mixture, embedding)
}

/// Default central-difference step for [`grad_check_separator`].
///
/// Check at a generic parameter point, not at initialization: with zero
/// projection biases the normalization after each conditioning projection
/// makes `alpha` a pure scale, and its true gradient vanishes into rounding
/// noise.
pub const FD_STEP: f64 = 1e-5;

/// Finite-difference check of the separation loss gradient with respect
/// to `per_tensor` sampled coordinates of every trainable tensor.
pub fn grad_check_separator(
    model: &SeparationModel,
    mixture: &AudioClip,
    references: &[AudioClip],
    given: Option<&LogitsEmbedding>,
    per_tensor: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let refs: Vec<Rc<Tensor>> = references.iter().map(|r| Rc::new(Tensor::vector(r.samples().to_vec()))).collect();
    // validate once outside the closure so it can panic only on internal bugs
    model.infer(mixture, given)?;
    let eval = |store: &ParamStore, want: bool| {
        let tape = Tape::with_branch_tracking();
        let binder = Binder::new(&tape, store);
        let x = tape.constant(Tensor::vector(mixture.samples().to_vec()));
        let out = model.forward(&binder, x, given).expect("forward");
        let mut stages = vec![StageVars { references: refs.clone(), estimates: out.stage1.estimates.clone() }];
        if let Some(s2) = &out.stage2 {
            stages.push(StageVars { references: refs.clone(), estimates: s2.estimates.clone() });
        }
        let (loss, _, _) = total_loss_var(&stages, None, &Default::default()).expect("loss");
        let grads = want.then(|| binder.gradients(&tape.backward(loss)));
        (loss.item(), tape.branch_signature(), grads)
    };
    let names: Vec<String> = model.store.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    let coords = sample_coords(&model.store, &names, per_tensor, seed);
    Ok(check_param_coords(&model.store, &coords, step, &eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::analyze;

    fn tiny(kind: BasisKind) -> SeparatorConfig {
        SeparatorConfig {
            num_blocks: 2,
            bottleneck: 6,
            hidden: 8,
            cond_channels: 6,
            basis: BasisConfig::for_kind(kind),
            ..Default::default()
        }
    }

    fn signal(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16000)
    }

    fn given_model(cfg: SeparatorConfig, j: usize) -> SeparationModel {
        let spec = ModelSpec { stage1: Stage1Conditioning::Given { channels: j }, ..ModelSpec::unconditioned(cfg, 16000, false) };
        SeparationModel::new(spec, 5).unwrap()
    }

    fn embedding(frames: usize, j: usize, seed: u64) -> LogitsEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogitsEmbedding::new(Tensor::matrix(frames, j, (0..frames * j).map(|_| rng.gen_range(-4.0..4.0)).collect()), EmbeddingKind::Mixture)
    }

    #[test]
    fn masks_are_bounded_and_estimates_sum_correctly() {
        let model = SeparationModel::new(ModelSpec::unconditioned(tiny(BasisKind::Stft), 16000, false), 1).unwrap();
        let mix = signal(1600, 2);
        let out = separate(&mix, None, &model).unwrap();
        assert_eq!(out.masks.len(), 2);
        let coeffs = analyze(&mix, &model.spec.separator.basis, None).unwrap();
        for m in &out.masks {
            assert_eq!(m.shape(), coeffs.values.shape());
            assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for e in &out.estimates {
            assert_eq!(e.len(), mix.len());
            let ec = analyze(e, &model.spec.separator.basis, None).unwrap();
            // resynthesis is not a projection, so allow small leakage
            let excess = ec.values.data().iter().zip(coeffs.values.data()).map(|(a, b)| a - b).fold(f64::MIN, f64::max);
            assert!(excess < 0.05 * coeffs.values.data().iter().cloned().fold(0.0, f64::max) + 1e-9);
        }
    }

    #[test]
    fn unconditioned_ignores_embedding() {
        let model = SeparationModel::new(ModelSpec::unconditioned(tiny(BasisKind::Stft), 16000, false), 1).unwrap();
        let mix = signal(1200, 3);
        let a = separate(&mix, None, &model).unwrap();
        let b = separate(&mix, Some(&embedding(8, 4, 1)), &model).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_changes_output_and_checks_shapes() {
        let model = given_model(tiny(BasisKind::Stft), 4);
        let mix = signal(1200, 3);
        let a = separate(&mix, Some(&embedding(8, 4, 1)), &model).unwrap();
        let b = separate(&mix, Some(&embedding(8, 4, 2)), &model).unwrap();
        assert_ne!(a.masks, b.masks);
        assert!(matches!(separate(&mix, None, &model), Err(CondsepError::Config(_))));
        assert!(matches!(separate(&mix, Some(&embedding(8, 5, 1)), &model), Err(CondsepError::Shape(_))));
    }

    #[test]
    fn fixed_sigmoid_site_has_unit_spread() {
        let cfg = SeparatorConfig { sigmoid_kind: SigmoidKind::Fixed, ..tiny(BasisKind::Stft) };
        let model = given_model(cfg.clone(), 4);
        let tape = Tape::new();
        let binder = Binder::new(&tape, &model.store);
        let zeros = tape.constant(Tensor::zeros(&[3, 4]));
        let out = inject_conditioning(&binder, &cfg, "separator/stage1/cond/site01", &[zeros], 10).unwrap();
        let v = out.value();
        assert_eq!(v.shape(), &[10, 6]);
        let n = v.len() as f64;
        let mean = v.sum() / n;
        let sd = (v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1.0).abs() < 1e-5, "{sd}");
    }

    #[test]
    fn gate_requires_matching_widths() {
        let cfg = SeparatorConfig { combine: CombineMode::Gate, cond_channels: 5, ..tiny(BasisKind::Stft) };
        assert!(matches!(cfg.validate(16000), Err(CondsepError::Config(_))));
        let ok = SeparatorConfig { combine: CombineMode::Gate, ..tiny(BasisKind::Stft) };
        let model = given_model(ok, 3);
        separate(&signal(800, 1), Some(&embedding(6, 3, 1)), &model).unwrap();
    }

    #[test]
    fn first_layer_only_has_one_site() {
        let cfg = SeparatorConfig { injection_sites: InjectionSites::FirstLayerOnly, num_blocks: 3, ..tiny(BasisKind::Stft) };
        let model = given_model(cfg, 3);
        let sites: Vec<_> = model.store.names().filter(|n| n.ends_with("/proj/weight")).collect();
        assert_eq!(sites, vec!["separator/stage1/cond/site01/proj/weight"]);
        let all = given_model(SeparatorConfig { injection_sites: InjectionSites::AllLayers, ..tiny(BasisKind::Stft) }, 3);
        assert_eq!(all.store.names().filter(|n| n.ends_with("/proj/weight")).count(), 2);
    }

    #[test]
    fn residual_layout() {
        assert_eq!(residual_sources(4).count(), 0);
        assert_eq!(residual_sources(5).collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(residual_sources(9).collect::<Vec<_>>(), vec![(4, 1), (0, 2)]);
        assert_eq!(SeparatorConfig::dilation(1), 1);
        assert_eq!(SeparatorConfig::dilation(8), 128);
        assert_eq!(SeparatorConfig::dilation(9), 1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [BasisKind::Stft, BasisKind::Learned] {
            let cfg = SeparatorConfig { num_blocks: 5, ..tiny(kind) };
            let mut model = given_model(cfg, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for (_, p) in model.store.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
            let refs = [signal(400, 7), signal(400, 8)];
            let mix = AudioClip::new(refs[0].samples().iter().zip(refs[1].samples()).map(|(a, b)| a + b).collect(), 16000);
            let report = grad_check_separator(&model, &mix, &refs, Some(&embedding(3, 3, 4)), 2, 11, FD_STEP).unwrap();
            assert!(report.checked > 40, "{kind}: {report:?}");
            assert!(report.max_rel_error <= 1e-4, "{kind}: {report:?}");
        }
    }

    #[test]
    fn iterative_shapes() {
        let spec = ModelSpec::unconditioned(tiny(BasisKind::Learned), 16000, true);
        let model = SeparationModel::new(spec, 2).unwrap();
        let out = separate_iterative(&signal(900, 1), None, &model).unwrap();
        assert_eq!(out.stage1.estimates.len(), 2);
        assert_eq!(out.stage2.as_ref().unwrap().stage, 2);
        assert!(model.store.contains("separator/stage2/encoder"));
        assert_eq!(model.store.get("separator/stage2/bottleneck/weight").unwrap().value.shape(), &[3 * 256, 6]);
    }
}
