//! Losses and metrics: capped SNR, permutation-invariant separation loss,
//! sigmoid cross entropy on logit embeddings, the guided total loss,
//! SI-SDR(i) and the oracle binary-mask baseline.
//!
//! Training losses are tape operations; the plain-value functions evaluate
//! the same operations on a throwaway tape.

use std::f64::consts::LN_10;
use std::rc::Rc;

use autograd::ops::{sigmoid, softplus};
use autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::embeddings::LogitsEmbedding;
use crate::error::{config_err, shape_err, CondsepError, Result};
use crate::frontend::{BasisConfig, BasisKind, StftBasis};
use crate::separator::SeparatorOutput;

/// Ratios are capped at this many dB.
pub const DB_CAP: f64 = 60.0;
/// `10^(-DB_CAP / 10)`.
pub const CAP_EPS: f64 = 1e-6;
/// Largest source count handled by the exhaustive permutation search.
pub const MAX_PIT_SOURCES: usize = 4;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(format!("signals of {} and {} samples", a.len(), b.len())));
    }
    Ok(())
}

/// `10 log10(|s|^2 / max(|s - e|^2, eps |s|^2))`.
pub fn snr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_len(reference, estimate)?;
    let s = energy(reference);
    if s == 0.0 {
        return Err(CondsepError::Domain("SNR against an all-zero reference".into()));
    }
    let e: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(10.0 * (s / e.max(CAP_EPS * s)).log10())
}

pub fn snr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    snr_slices(reference.samples(), estimate.samples())
}

/// Negative capped SNR of `estimate` (`[len]`) against a constant reference.
pub fn neg_snr_var<'t>(reference: Rc<Tensor>, estimate: Var<'t>) -> Result<Var<'t>> {
    let est = estimate.value();
    check_len(reference.data(), est.data())?;
    let s = energy(reference.data());
    if s == 0.0 {
        return Err(CondsepError::Domain("SNR against an all-zero reference".into()));
    }
    let e: f64 = reference.data().iter().zip(est.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let capped = e < CAP_EPS * s;
    let tape = estimate.tape();
    tape.note_branch(capped as u64 + 0x51);
    let value = -10.0 * (s / e.max(CAP_EPS * s)).log10();
    Ok(tape.op(Tensor::scalar(value), &[estimate], move |g, _| {
        let gv = g.item();
        let grad = if capped {
            est.map(|_| 0.0)
        } else {
            let k = -20.0 / (LN_10 * e) * gv;
            reference.zip_map(&est, |a, b| k * (a - b))
        };
        vec![Some(grad)]
    }))
}

/// Chosen assignment of estimates to references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationAssignment {
    /// `perm[i]` is the reference matched to estimate `i`.
    pub perm: Vec<usize>,
    /// `pair_loss[i][j]` = negative SNR of estimate `i` against reference `j`.
    pub pair_loss: Vec<Vec<f64>>,
}

impl PermutationAssignment {
    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Minimizing permutation of a pair-loss matrix; the first (lexicographically
/// smallest) permutation wins ties.
pub fn best_permutation(pair_loss: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = pair_loss.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in permutations(n) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| pair_loss[i][j]).sum();
        let better = match &best {
            None => true,
            // sums of the same terms in another order may differ in the last bits
            Some((_, b)) => total < b - 1e-12 * b.abs().max(1.0),
        };
        if better {
            best = Some((p, total));
        }
    }
    best.unwrap_or((Vec::new(), 0.0))
}

fn check_counts(refs: usize, ests: usize) -> Result<()> {
    if refs != ests || refs == 0 {
        return Err(shape_err(format!("{refs} references vs {ests} estimates")));
    }
    if refs > MAX_PIT_SOURCES {
        return Err(config_err(format!("permutation search supports at most {MAX_PIT_SOURCES} sources")));
    }
    Ok(())
}

/// Mean negative SNR under the best assignment.
pub fn pit_loss_var<'t>(references: &[Rc<Tensor>], estimates: &[Var<'t>]) -> Result<(Var<'t>, PermutationAssignment)> {
    check_counts(references.len(), estimates.len())?;
    let n = references.len();
    let mut pair_loss = vec![vec![0.0; n]; n];
    for (i, est) in estimates.iter().enumerate() {
        let e = est.value();
        for (j, r) in references.iter().enumerate() {
            pair_loss[i][j] = -snr_slices(r.data(), e.data())?;
        }
    }
    let (perm, _) = best_permutation(&pair_loss);
    let tape = estimates[0].tape();
    tape.note_branch(perm.iter().fold(7u64, |h, &p| h * 31 + p as u64));
    let terms = estimates
        .iter()
        .zip(&perm)
        .map(|(est, &j)| neg_snr_var(references[j].clone(), *est))
        .collect::<Result<Vec<_>>>()?;
    let loss = Var::sum_all(&terms)?.scale(1.0 / n as f64);
    Ok((loss, PermutationAssignment { perm, pair_loss }))
}

fn clip_tensor(c: &AudioClip) -> Rc<Tensor> {
    Rc::new(Tensor::vector(c.samples().to_vec()))
}

pub fn pit_loss(references: &[AudioClip], estimates: &[AudioClip]) -> Result<(f64, PermutationAssignment)> {
    let tape = Tape::new();
    let refs: Vec<Rc<Tensor>> = references.iter().map(clip_tensor).collect();
    let ests: Vec<Var> = estimates.iter().map(|e| tape.constant(clip_tensor(e).as_ref().clone())).collect();
    let (loss, assignment) = pit_loss_var(&refs, &ests)?;
    Ok((loss.item(), assignment))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeVariant {
    /// Binary cross entropy with both terms.
    #[default]
    Full,
    /// Only the positive-class term.
    PositiveOnly,
}

impl std::str::FromStr for CeVariant {
    type Err = CondsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CeVariant::Full),
            "positive_only" => Ok(CeVariant::PositiveOnly),
            other => Err(config_err(format!("unknown cross-entropy variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for CeVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CeVariant::Full => "full",
            CeVariant::PositiveOnly => "positive_only",
        })
    }
}

/// Mean sigmoid cross entropy in bits between target logits and predicted logits.
pub fn sigmoid_ce_var<'t>(target: Var<'t>, pred: Var<'t>, variant: CeVariant) -> Result<Var<'t>> {
    let (t, p) = (target.value(), pred.value());
    if t.shape() != p.shape() {
        return Err(shape_err(format!("cross entropy between {:?} and {:?}", t.shape(), p.shape())));
    }
    let n = t.len() as f64;
    let mut total = 0.0;
    for (&a, &b) in t.data().iter().zip(p.data()) {
        let q = sigmoid(a);
        // -log sigma(b) = softplus(-b), -log(1 - sigma(b)) = softplus(b)
        total += match variant {
            CeVariant::Full => q * softplus(-b) + (1.0 - q) * softplus(b),
            CeVariant::PositiveOnly => q * softplus(-b),
        };
    }
    let value = total / (n * std::f64::consts::LN_2);
    let scale = 1.0 / (n * std::f64::consts::LN_2);
    Ok(target.tape().op(Tensor::scalar(value), &[target, pred], move |g, need| {
        let k = g.item() * scale;
        let gt = need[0].then(|| {
            t.zip_map(&p, |a, b| {
                let q = sigmoid(a);
                let dq = q * (1.0 - q);
                k * dq * match variant {
                    CeVariant::Full => -b,
                    CeVariant::PositiveOnly => softplus(-b),
                }
            })
        });
        let gp = need[1].then(|| {
            t.zip_map(&p, |a, b| {
                let q = sigmoid(a);
                k * match variant {
                    CeVariant::Full => sigmoid(b) - q,
                    CeVariant::PositiveOnly => -q * (1.0 - sigmoid(b)),
                }
            })
        });
        vec![gt, gp]
    }))
}

pub fn sigmoid_cross_entropy(target: &LogitsEmbedding, pred: &LogitsEmbedding, variant: CeVariant) -> Result<f64> {
    let tape = Tape::new();
    let t = tape.constant(target.values.clone());
    let p = tape.constant(pred.values.clone());
    Ok(sigmoid_ce_var(t, p, variant)?.item())
}

/// Loss terms of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Separation loss per stage.
    pub sep: Vec<f64>,
    /// Sum of the stage losses.
    pub isep: f64,
    pub ce_mixture_stage1: Option<f64>,
    pub ce_mixture_stage2: Option<f64>,
    pub ce_sources_stage2: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ce_terms(&self) -> Vec<f64> {
        [self.ce_mixture_stage1, self.ce_mixture_stage2, self.ce_sources_stage2].into_iter().flatten().collect()
    }
}

/// References and estimates of one separation stage.
pub struct StageVars<'t> {
    pub references: Vec<Rc<Tensor>>,
    pub estimates: Vec<Var<'t>>,
}

/// Embedding targets and predictions for the guided loss.
pub struct GuidanceVars<'t> {
    /// Soft-OR of the clean-source embeddings.
    pub v_or: Rc<Tensor>,
    /// Clean-source embeddings in reference order.
    pub v_sources: Vec<Rc<Tensor>>,
    pub mixture_stage1: Option<Var<'t>>,
    pub mixture_stage2: Option<Var<'t>>,
    /// Predicted source embeddings in estimate order.
    pub sources_stage2: Vec<Var<'t>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ce_variant: CeVariant,
    pub ce_weight_mixture_stage1: f64,
    pub ce_weight_mixture_stage2: f64,
    pub ce_weight_sources_stage2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_variant: CeVariant::Full,
            ce_weight_mixture_stage1: 1.0,
            ce_weight_mixture_stage2: 1.0,
            ce_weight_sources_stage2: 1.0,
        }
    }
}

/// Separation loss of every stage plus, when `guidance` is given, the
/// cross-entropy terms. Source targets are reordered by the last stage's
/// permutation.
pub fn total_loss_var<'t>(
    stages: &[StageVars<'t>],
    guidance: Option<&GuidanceVars<'t>>,
    config: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown, Vec<PermutationAssignment>)> {
    if stages.is_empty() || stages.len() > 2 {
        return Err(config_err(format!("{} separation stages", stages.len())));
    }
    let mut breakdown = LossBreakdown::default();
    let mut terms = Vec::new();
    let mut assignments = Vec::new();
    for st in stages {
        let (l, a) = pit_loss_var(&st.references, &st.estimates)?;
        breakdown.sep.push(l.item());
        terms.push(l);
        assignments.push(a);
    }
    breakdown.isep = breakdown.sep.iter().sum();
    if let Some(g) = guidance {
        let tape = terms[0].tape();
        let v_or = tape.constant(g.v_or.as_ref().clone());
        let ce = |pred: Var<'t>, target: Var<'t>, w: f64| -> Result<(Var<'t>, f64)> {
            let c = sigmoid_ce_var(target, pred, config.ce_variant)?;
            Ok((c.scale(w), c.item()))
        };
        let m1 = g.mixture_stage1.ok_or_else(|| config_err("guided loss needs the stage-1 mixture embedding"))?;
        let (t, v) = ce(m1, v_or, config.ce_weight_mixture_stage1)?;
        terms.push(t);
        breakdown.ce_mixture_stage1 = Some(v);
        if stages.len() == 2 {
            let m2 = g.mixture_stage2.ok_or_else(|| config_err("guided loss needs the stage-2 mixture embedding"))?;
            let (t, v) = ce(m2, v_or, config.ce_weight_mixture_stage2)?;
            terms.push(t);
            breakdown.ce_mixture_stage2 = Some(v);
            let perm = &assignments[1].perm;
            if g.sources_stage2.len() != perm.len() || g.v_sources.len() != perm.len() {
                return Err(config_err("guided loss needs one source embedding per estimate"));
            }
            let target = tape.constant(stack_rows(perm.iter().map(|&j| g.v_sources[j].as_ref()))?);
            let pred = Var::concat_rows(&g.sources_stage2)?;
            let (t, v) = ce(pred, target, config.ce_weight_sources_stage2)?;
            terms.push(t);
            breakdown.ce_sources_stage2 = Some(v);
        }
    }
    let total = Var::sum_all(&terms)?;
    breakdown.total = total.item();
    if !breakdown.total.is_finite() {
        return Err(CondsepError::Training(format!("non-finite loss: {breakdown:?}")));
    }
    Ok((total, breakdown, assignments))
}

fn stack_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for p in parts {
        if *cols.get_or_insert(p.cols()) != p.cols() {
            return Err(shape_err("stacked embeddings differ in class count"));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::matrix(rows, cols.unwrap_or(0), data))
}

/// Per-stage separation losses and their sum; each stage picks its own permutation.
pub fn iterative_loss(
    stage1: (&[AudioClip], &[AudioClip]),
    stage2: (&[AudioClip], &[AudioClip]),
) -> Result<(LossBreakdown, [PermutationAssignment; 2])> {
    let (l1, a1) = pit_loss(stage1.0, stage1.1)?;
    let (l2, a2) = pit_loss(stage2.0, stage2.1)?;
    let breakdown = LossBreakdown { sep: vec![l1, l2], isep: l1 + l2, total: l1 + l2, ..Default::default() };
    Ok((breakdown, [a1, a2]))
}

/// Embedding inputs of [`guided_total_loss`].
pub struct GuidedEmbeddings<'a> {
    pub v_or: &'a LogitsEmbedding,
    /// Clean-source embeddings in reference order.
    pub v_sources: &'a [LogitsEmbedding],
    pub mixture_stage1: Option<&'a LogitsEmbedding>,
    pub mixture_stage2: Option<&'a LogitsEmbedding>,
    /// Predicted source embeddings in estimate order.
    pub sources_stage2: &'a [LogitsEmbedding],
}

/// Separation loss over one or two `(references, estimates)` stages plus
/// the cross-entropy guidance terms.
pub fn guided_total_loss(
    stages: &[(&[AudioClip], &[AudioClip])],
    embeddings: &GuidedEmbeddings<'_>,
    config: &LossConfig,
) -> Result<(LossBreakdown, Vec<PermutationAssignment>)> {
    let tape = Tape::new();
    let st: Vec<StageVars> = stages
        .iter()
        .map(|(r, e)| StageVars {
            references: r.iter().map(clip_tensor).collect(),
            estimates: e.iter().map(|c| tape.constant(clip_tensor(c).as_ref().clone())).collect(),
        })
        .collect();
    let guidance = GuidanceVars {
        v_or: Rc::new(embeddings.v_or.values.clone()),
        v_sources: embeddings.v_sources.iter().map(|e| Rc::new(e.values.clone())).collect(),
        mixture_stage1: embeddings.mixture_stage1.map(|e| tape.constant(e.values.clone())),
        mixture_stage2: embeddings.mixture_stage2.map(|e| tape.constant(e.values.clone())),
        sources_stage2: embeddings.sources_stage2.iter().map(|e| tape.constant(e.values.clone())).collect(),
    };
    let (_, breakdown, assignments) = total_loss_var(&st, Some(&guidance), config)?;
    Ok((breakdown, assignments))
}

/// `10 log10(|g s|^2 / max(|g s - e|^2, eps |g s|^2))` with the optimal scale
/// `g`, limited to `[-DB_CAP, DB_CAP]`.
pub fn si_sdr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_len(reference, estimate)?;
    let s = energy(reference);
    if s == 0.0 {
        return Err(CondsepError::Domain("SI-SDR against an all-zero reference".into()));
    }
    if estimate.iter().all(|&v| v == 0.0) {
        return Err(CondsepError::Domain("SI-SDR of an all-zero estimate".into()));
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(a, b)| a * b).sum();
    let gamma = dot / s;
    let target = gamma * gamma * s;
    let err: f64 = reference.iter().zip(estimate).map(|(a, b)| (gamma * a - b).powi(2)).sum();
    if target == 0.0 {
        return Ok(-DB_CAP);
    }
    Ok((10.0 * (target / err.max(CAP_EPS * target)).log10()).max(-DB_CAP))
}

pub fn si_sdr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    si_sdr_slices(reference.samples(), estimate.samples())
}

pub fn si_sdr_improvement(reference: &AudioClip, estimate: &AudioClip, mixture: &AudioClip) -> Result<f64> {
    Ok(si_sdr(reference, estimate)? - si_sdr(reference, mixture)?)
}

/// SI-SDRi for evaluation: a silent estimate scores the floor instead of failing.
pub fn si_sdr_improvement_eval(reference: &AudioClip, estimate: &AudioClip, mixture: &AudioClip) -> Result<f64> {
    let est = if estimate.is_silent() { -DB_CAP } else { si_sdr(reference, estimate)? };
    Ok(est - si_sdr(reference, mixture)?)
}

/// Assigns every STFT bin to the reference with the largest magnitude (lowest
/// index on ties) and resynthesizes with the mixture phase.
pub fn oracle_binary_mask(mixture: &AudioClip, references: &[AudioClip], basis: &BasisConfig) -> Result<SeparatorOutput> {
    if basis.kind != BasisKind::Stft {
        return Err(config_err("the oracle binary mask is defined on the STFT basis"));
    }
    if references.is_empty() {
        return Err(shape_err("oracle mask needs at least one reference"));
    }
    for r in references {
        mixture.check_compatible(r)?;
    }
    let stft = StftBasis::new(basis, mixture.sample_rate())?;
    let tape = Tape::new();
    let analyze = |c: &AudioClip| stft.analyze_var(tape.constant(Tensor::vector(c.samples().to_vec())));
    let mix = analyze(mixture)?;
    let mags: Vec<Rc<Tensor>> = references
        .iter()
        .map(|r| analyze(r).map(|a| a.magnitude.value()))
        .collect::<Result<_>>()?;
    let shape = mags[0].shape().to_vec();
    let mut masks: Vec<Tensor> = references.iter().map(|_| Tensor::zeros(&shape)).collect();
    for b in 0..mags[0].len() {
        let mut best = 0;
        for i in 1..mags.len() {
            if mags[i].data()[b] > mags[best].data()[b] {
                best = i;
            }
        }
        masks[best].data_mut()[b] = 1.0;
    }
    let mix_mag = mix.magnitude.value();
    let estimates = masks
        .iter()
        .map(|m| {
            let y = tape.constant(m.zip_map(&mix_mag, |a, b| a * b));
            let out = stft.synthesize_var(y, &mix.cos, &mix.sin, &mix.geometry)?;
            Ok(AudioClip::new(out.value().data().to_vec(), mixture.sample_rate()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparatorOutput { masks, estimates, stage: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingKind;
    use autograd::gradcheck::check_input_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::new(v, 16000)
    }

    fn random_clip(len: usize, rng: &mut ChaCha8Rng) -> AudioClip {
        clip((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn emb(rows: usize, cols: usize, data: Vec<f64>) -> LogitsEmbedding {
        LogitsEmbedding::new(Tensor::matrix(rows, cols, data), EmbeddingKind::Mixture)
    }

    #[test]
    fn snr_examples() {
        let s = clip(vec![2.0, 0.0, 0.0, 0.0]);
        let e = clip(vec![1.0, 0.0, 0.0, 0.0]);
        assert!((snr(&s, &e).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(snr(&s, &s).unwrap(), 60.0);
        assert_eq!(snr(&s, &clip(vec![0.0; 4])).unwrap(), 0.0);
        assert!(matches!(snr(&clip(vec![0.0; 4]), &s), Err(CondsepError::Domain(_))));
        assert!(matches!(snr(&s, &clip(vec![0.0; 3])), Err(CondsepError::Shape(_))));
    }

    #[test]
    fn pit_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_clip(50, &mut rng);
        let b = random_clip(50, &mut rng);
        let (loss, p) = pit_loss(&[a.clone(), b.clone()], &[b.clone(), a.clone()]).unwrap();
        assert_eq!(p.perm, vec![1, 0]);
        assert_eq!(loss, -60.0);
        let (_, p) = pit_loss(&[a.clone(), b.clone()], &[a.clone(), a.clone()]).unwrap();
        assert_eq!(p.perm, vec![0, 1]);
        let c = random_clip(50, &mut rng);
        let (_, p) = pit_loss(&[a.clone(), b.clone(), c.clone()], &[c.clone(), c.clone(), c]).unwrap();
        assert_eq!(p.perm, vec![0, 1, 2]);
        assert!(pit_loss(&[a.clone()], &[a.clone(), b]).is_err());
    }

    fn brute_force(refs: &[AudioClip], ests: &[AudioClip]) -> f64 {
        permutations(refs.len())
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| -snr(&refs[j], &ests[i]).unwrap()).sum::<f64>() / refs.len() as f64)
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn pit_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 2..=4 {
            for _ in 0..20 {
                let refs: Vec<AudioClip> = (0..n).map(|_| random_clip(40, &mut rng)).collect();
                let ests: Vec<AudioClip> = (0..n).map(|_| random_clip(40, &mut rng)).collect();
                let (loss, _) = pit_loss(&refs, &ests).unwrap();
                assert!((loss - brute_force(&refs, &ests)).abs() < 1e-9);
            }
        }
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(3)[1], vec![0, 2, 1]);
    }

    #[test]
    fn iterative_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let refs = vec![random_clip(30, &mut rng), random_clip(30, &mut rng)];
        let mix: Vec<f64> = refs[0].samples().iter().zip(refs[1].samples()).map(|(a, b)| a + b).collect();
        let copies = vec![clip(mix.clone()), clip(mix)];
        let (l1, _) = pit_loss(&refs, &copies).unwrap();
        let (b, _) = iterative_loss((&refs, &copies), (&refs, &refs)).unwrap();
        assert!((b.isep - (l1 - 60.0)).abs() < 1e-12);
        let (b, _) = iterative_loss((&refs, &copies), (&refs, &copies)).unwrap();
        assert_eq!(b.isep, 2.0 * l1);
    }

    #[test]
    fn ce_examples() {
        let z = emb(2, 3, vec![0.0; 6]);
        assert!((sigmoid_cross_entropy(&z, &z, CeVariant::Full).unwrap() - 1.0).abs() < 1e-12);
        assert!((sigmoid_cross_entropy(&z, &z, CeVariant::PositiveOnly).unwrap() - 0.5).abs() < 1e-12);
        assert!(sigmoid_cross_entropy(&z, &emb(1, 3, vec![0.0; 3]), CeVariant::Full).is_err());
        for &v1 in &[-3.0, -0.5, 0.0, 1.2, 4.0] {
            let t = emb(1, 1, vec![v1]);
            let grid: Vec<f64> = (0..=1600).map(|i| -8.0 + i as f64 * 0.01).collect();
            let best = grid
                .iter()
                .map(|&v2| (v2, sigmoid_cross_entropy(&t, &emb(1, 1, vec![v2]), CeVariant::Full).unwrap()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!((best.0 - v1).abs() <= 0.011, "{v1} {best:?}");
        }
    }

    fn entropy_bits(v: &[f64]) -> f64 {
        v.iter()
            .map(|&x| {
                let p = sigmoid(x);
                -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
            })
            .sum::<f64>()
            / v.len() as f64
    }

    #[test]
    fn guided_total_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let refs = vec![random_clip(30, &mut rng), random_clip(30, &mut rng)];
        let ests = vec![random_clip(30, &mut rng), random_clip(30, &mut rng)];
        let mut rv = |n| (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (s1, s2) = (emb(4, 3, rv(12)), emb(4, 3, rv(12)));
        let v_or = crate::embeddings::soft_or(&[s1.clone(), s2.clone()]).unwrap();
        let (b, a) = iterative_loss((&refs, &ests), (&refs, &ests)).unwrap();
        let sources_pred: Vec<LogitsEmbedding> = a[1].perm.iter().map(|&j| [&s1, &s2][j].clone()).collect();
        let g = GuidedEmbeddings {
            v_or: &v_or,
            v_sources: &[s1.clone(), s2.clone()],
            mixture_stage1: Some(&v_or),
            mixture_stage2: Some(&v_or),
            sources_stage2: &sources_pred,
        };
        let (gb, _) = guided_total_loss(&[(&refs, &ests), (&refs, &ests)], &g, &LossConfig::default()).unwrap();
        let mut all = s1.values.data().to_vec();
        all.extend_from_slice(s2.values.data());
        let expected = b.isep + 2.0 * entropy_bits(v_or.values.data()) + entropy_bits(&all);
        assert!((gb.total - expected).abs() < 1e-9);
        assert_eq!(gb.ce_terms().len(), 3);

        // single stage: one CE term
        let g1 = GuidedEmbeddings { mixture_stage2: None, sources_stage2: &[], ..g };
        let (gb1, _) = guided_total_loss(&[(&refs, &ests)], &g1, &LossConfig::default()).unwrap();
        assert_eq!(gb1.ce_terms().len(), 1);
        let g_missing = GuidedEmbeddings { mixture_stage1: None, ..g1 };
        assert!(matches!(
            guided_total_loss(&[(&refs, &ests)], &g_missing, &LossConfig::default()),
            Err(CondsepError::Config(_))
        ));
    }

    #[test]
    fn guided_v_or_term_is_permutation_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let refs = vec![random_clip(30, &mut rng), random_clip(30, &mut rng)];
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let s = emb(2, 2, vec![0.3, -0.2, 1.0, 0.0]);
        let v_or = crate::embeddings::soft_or(&[s.clone(), s.clone()]).unwrap();
        let pred = emb(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let run = |ests: &[AudioClip]| {
            let g = GuidedEmbeddings {
                v_or: &v_or,
                v_sources: &[s.clone(), s.clone()],
                mixture_stage1: Some(&pred),
                mixture_stage2: Some(&pred),
                sources_stage2: &[pred.clone(), pred.clone()],
            };
            guided_total_loss(&[(&refs, ests), (&refs, ests)], &g, &LossConfig::default()).unwrap()
        };
        let (a, pa) = run(&refs);
        let (b, pb) = run(&swapped);
        assert!(pa[1].is_identity() && !pb[1].is_identity());
        assert_eq!(a.ce_mixture_stage1, b.ce_mixture_stage1);
        assert_eq!(a.ce_mixture_stage2, b.ce_mixture_stage2);
    }

    #[test]
    fn si_sdr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_clip(64, &mut rng);
        // noise orthogonal to s with a tenth of its energy
        let mut n: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let proj = n.iter().zip(s.samples()).map(|(a, b)| a * b).sum::<f64>() / s.energy();
        for (x, y) in n.iter_mut().zip(s.samples()) {
            *x -= proj * y;
        }
        let k = (s.energy() / (10.0 * energy(&n))).sqrt();
        let est = clip(s.samples().iter().zip(&n).map(|(a, b)| a + k * b).collect());
        assert!((si_sdr(&s, &est).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(si_sdr(&s, &s.scaled(3.7)).unwrap(), 60.0);
        assert!(matches!(si_sdr(&s, &clip(vec![0.0; 64])), Err(CondsepError::Domain(_))));
        let m = random_clip(64, &mut rng);
        assert_eq!(si_sdr_improvement(&s, &m, &m).unwrap(), 0.0);
    }

    #[test]
    fn oracle_mask_examples() {
        let tone = |f: f64| clip((0..8000).map(|i| 0.3 * (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()).collect());
        let (a, b) = (tone(200.0), tone(6000.0));
        let m = clip(a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect());
        let out = oracle_binary_mask(&m, &[a.clone(), b.clone()], &BasisConfig::stft()).unwrap();
        assert!(si_sdr_improvement(&a, &out.estimates[0], &m).unwrap() >= 20.0);
        assert!(si_sdr_improvement(&b, &out.estimates[1], &m).unwrap() >= 20.0);
        for k in 0..out.masks[0].len() {
            assert_eq!(out.masks[0].data()[k] + out.masks[1].data()[k], 1.0);
        }
        // exact ties go to the first source
        let out = oracle_binary_mask(&m, &[a.clone(), a.clone()], &BasisConfig::stft()).unwrap();
        assert!(out.masks[0].data().iter().all(|&v| v == 1.0));
        assert!(oracle_binary_mask(&m, &[a], &BasisConfig::learned()).is_err());
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let refs: Vec<Rc<Tensor>> = (0..3).map(|_| clip_tensor(&random_clip(20, &mut rng))).collect();
        let x = Tensor::new(vec![60], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = check_input_gradient(&x, 1e-5, |input, want| {
            let tape = Tape::with_branch_tracking();
            let v = tape.leaf(input.clone(), want);
            let ests: Vec<Var> = (0..3).map(|i| v.slice_cols(i * 20, (i + 1) * 20).unwrap().reshape(&[20]).unwrap()).collect();
            let (loss, _) = pit_loss_var(&refs, &ests).unwrap();
            let grad = want.then(|| tape.backward(loss).get(v).unwrap().clone());
            (loss.item(), tape.branch_signature(), grad)
        });
        assert!(report.max_rel_error < 1e-6 && report.checked > 50, "{report:?}");

        for variant in [CeVariant::Full, CeVariant::PositiveOnly] {
            let x = Tensor::new(vec![2, 6], (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect());
            let report = check_input_gradient(&x, 1e-5, |input, want| {
                let tape = Tape::new();
                let v = tape.leaf(input.clone(), want);
                let loss = sigmoid_ce_var(v.slice_cols(0, 3).unwrap(), v.slice_cols(3, 6).unwrap(), variant).unwrap();
                let grad = want.then(|| tape.backward(loss).get(v).unwrap().clone());
                (loss.item(), 0, grad)
            });
            assert!(report.max_rel_error < 1e-6, "{variant:?} {report:?}");
        }
    }

    proptest! {
        #[test]
        fn pit_invariant_to_joint_permutation(seed in 0u64..1000, n in 2usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let refs: Vec<AudioClip> = (0..n).map(|_| random_clip(16, &mut rng)).collect();
            let ests: Vec<AudioClip> = (0..n).map(|_| random_clip(16, &mut rng)).collect();
            let (l, _) = pit_loss(&refs, &ests).unwrap();
            let order: Vec<usize> = (0..n).rev().collect();
            let r2: Vec<AudioClip> = order.iter().map(|&i| refs[i].clone()).collect();
            let e2: Vec<AudioClip> = order.iter().map(|&i| ests[i].clone()).collect();
            let (l2, _) = pit_loss(&r2, &e2).unwrap();
            prop_assert!((l - l2).abs() < 1e-9);
        }

        #[test]
        fn si_sdr_scale_invariance(seed in 0u64..1000, a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_clip(32, &mut rng);
            let e = random_clip(32, &mut rng);
            let base = si_sdr(&s, &e).unwrap();
            prop_assert!((si_sdr(&s.scaled(a), &e.scaled(b)).unwrap() - base).abs() < 1e-6);
        }

        #[test]
        fn snr_decreases_with_noise(seed in 0u64..1000, k1 in 0.01f64..1.0, dk in 0.01f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_clip(32, &mut rng);
            let mut n: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let proj = n.iter().zip(s.samples()).map(|(a, b)| a * b).sum::<f64>() / s.energy();
            for (x, y) in n.iter_mut().zip(s.samples()) { *x -= proj * y; }
            let noisy = |k: f64| clip(s.samples().iter().zip(&n).map(|(a, b)| a + k * b).collect());
            let (lo, hi) = (snr(&s, &noisy(k1)).unwrap(), snr(&s, &noisy(k1 + dk)).unwrap());
            prop_assert!(lo <= DB_CAP && hi < lo);
        }

        #[test]
        fn full_ce_minimized_at_target(v1 in prop::collection::vec(-6.0f64..6.0, 4), v2 in prop::collection::vec(-6.0f64..6.0, 4)) {
            let t = emb(1, 4, v1);
            let p = emb(1, 4, v2);
            let at_target = sigmoid_cross_entropy(&t, &t, CeVariant::Full).unwrap();
            prop_assert!(sigmoid_cross_entropy(&t, &p, CeVariant::Full).unwrap() >= at_target - 1e-12);
        }
    }
}
