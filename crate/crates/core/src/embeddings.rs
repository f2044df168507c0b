//! Logit embeddings: probability conversion, soft-OR fusion, assembly of
//! the mixture / all / soft-OR variants, and resampling onto the
//! separator's frame grid.

use autograd::ops::sigmoid;
use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, CondsepError, Result};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum EmbeddingKind {
    Mixture,
    Source(usize),
    /// `[mixture; source 1; ...; source N]`.
    All { sources: usize },
    SoftOr,
}

/// Which embedding a conditioned separator consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssembleKind {
    Mixture,
    All,
    SoftOr,
}

impl std::str::FromStr for AssembleKind {
    type Err = CondsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(AssembleKind::Mixture),
            "all" => Ok(AssembleKind::All),
            "soft_or" => Ok(AssembleKind::SoftOr),
            other => Err(config_err(format!("unknown embedding kind `{other}`"))),
        }
    }
}

/// Frame-by-class logits.
///
/// For `All` the rows are either stacked blocks (`(N + 1) * frames` rows of
/// `J` classes) or, after [`resample_to_frames`], channel groups (`frames`
/// rows of `(N + 1) * J`).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsEmbedding {
    pub values: Tensor,
    pub kind: EmbeddingKind,
    /// Rows per block.
    pub frames: usize,
}

impl LogitsEmbedding {
    pub fn new(values: Tensor, kind: EmbeddingKind) -> Self {
        let frames = values.rows();
        LogitsEmbedding { values, kind, frames }
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    /// True for an `All` embedding laid out as channel groups.
    pub fn is_channel_grouped(&self) -> bool {
        matches!(self.kind, EmbeddingKind::All { .. }) && self.values.rows() == self.frames
    }

    fn blocks(&self) -> usize {
        match self.kind {
            EmbeddingKind::All { sources } if self.values.rows() == (sources + 1) * self.frames => sources + 1,
            _ => 1,
        }
    }
}

/// `F x J` probabilities strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTensor {
    pub values: Tensor,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn to_prob(embedding: &LogitsEmbedding) -> ProbTensor {
    ProbTensor { values: embedding.values.map(|x| clamp_prob(sigmoid(x))) }
}

/// Inverse of [`to_prob`]; values at or outside 0 and 1 are a domain error.
pub fn to_logits(prob: &ProbTensor, kind: EmbeddingKind) -> Result<LogitsEmbedding> {
    if prob.values.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(CondsepError::Domain("probability outside (0, 1)".into()));
    }
    Ok(LogitsEmbedding::new(prob.values.map(logit), kind))
}

/// `logit(1 - prod_i (1 - sigmoid(V_i)))` per frame and class.
pub fn soft_or(sources: &[LogitsEmbedding]) -> Result<LogitsEmbedding> {
    let first = sources.first().ok_or_else(|| shape_err("soft-OR of no embeddings"))?;
    if sources.iter().any(|s| s.values.shape() != first.values.shape()) {
        return Err(shape_err("soft-OR inputs differ in shape"));
    }
    let mut miss = Tensor::full(first.values.shape(), 1.0);
    for s in sources {
        let p = to_prob(s);
        for (m, q) in miss.data_mut().iter_mut().zip(p.values.data()) {
            *m *= 1.0 - q;
        }
    }
    let values = miss.map(|m| logit(clamp_prob(1.0 - m)));
    Ok(LogitsEmbedding { values, kind: EmbeddingKind::SoftOr, frames: first.frames })
}

pub fn assemble(kind: AssembleKind, mixture: &LogitsEmbedding, sources: &[LogitsEmbedding]) -> Result<LogitsEmbedding> {
    match kind {
        AssembleKind::Mixture => Ok(LogitsEmbedding { kind: EmbeddingKind::Mixture, ..mixture.clone() }),
        AssembleKind::SoftOr => {
            if sources.is_empty() {
                return Err(config_err("soft-OR embedding needs source embeddings"));
            }
            soft_or(sources)
        }
        AssembleKind::All => {
            if sources.is_empty() {
                return Err(config_err("all embedding needs source embeddings"));
            }
            if sources.iter().any(|s| s.values.shape() != mixture.values.shape()) {
                return Err(shape_err("source embeddings differ in shape from the mixture embedding"));
            }
            let mut data = mixture.values.data().to_vec();
            for s in sources {
                data.extend_from_slice(s.values.data());
            }
            let (f, j) = (mixture.values.rows(), mixture.values.cols());
            Ok(LogitsEmbedding {
                values: Tensor::matrix((sources.len() + 1) * f, j, data),
                kind: EmbeddingKind::All { sources: sources.len() },
                frames: f,
            })
        }
    }
}

/// `index[w] = floor(w * frames / w_out)`.
pub fn resample_index(frames: usize, w_out: usize) -> Vec<usize> {
    (0..w_out).map(|w| w * frames / w_out).collect()
}

/// Repeats rows to reach `w_out` frames. Stacked `All` blocks are resampled
/// independently and placed side by side as channel groups.
pub fn resample_to_frames(embedding: &LogitsEmbedding, w_out: usize) -> Result<LogitsEmbedding> {
    if w_out == 0 {
        return Err(shape_err("cannot resample to zero frames"));
    }
    let f = embedding.frames;
    if f == 0 {
        return Err(shape_err("embedding has no frames"));
    }
    let blocks = embedding.blocks();
    let j = embedding.classes();
    let index = resample_index(f, w_out);
    let mut data = Vec::with_capacity(w_out * blocks * j);
    for &src in &index {
        for b in 0..blocks {
            data.extend_from_slice(embedding.values.row(b * f + src));
        }
    }
    Ok(LogitsEmbedding { values: Tensor::matrix(w_out, blocks * j, data), kind: embedding.kind, frames: w_out })
}

/// Mean over frames in probability space, as a single row.
pub fn time_pool(embedding: &LogitsEmbedding) -> Result<LogitsEmbedding> {
    let (f, j) = (embedding.values.rows(), embedding.classes());
    if f == 0 {
        return Err(shape_err("cannot pool an embedding without frames"));
    }
    let p = to_prob(embedding);
    let mut mean = vec![0.0; j];
    for r in 0..f {
        for (m, q) in mean.iter_mut().zip(p.values.row(r)) {
            *m += q / f as f64;
        }
    }
    Ok(LogitsEmbedding {
        values: Tensor::matrix(1, j, mean.into_iter().map(|m| logit(clamp_prob(m))).collect()),
        kind: embedding.kind,
        frames: 1,
    })
}

/// The `k` classes with the highest mean probability, most probable first
/// (ties by class index).
pub fn top_classes(prob: &ProbTensor, k: usize) -> Vec<usize> {
    let (f, j) = (prob.values.rows(), prob.values.cols());
    let mut mean = vec![0.0; j];
    for r in 0..f {
        for (m, q) in mean.iter_mut().zip(prob.values.row(r)) {
            *m += q;
        }
    }
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
