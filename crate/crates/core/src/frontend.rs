//! Analysis/synthesis bases for the separator and the log-mel patch
//! frontend for the classifier.
//!
//! Both bases are expressed as matrix products over frames so that the same
//! code path runs on plain tensors and on the autodiff tape.

use std::f64::consts::PI;
use std::rc::Rc;

use autograd::ops::PAD;
use autograd::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{config_err, shape_err, Result};

/// Floor applied to the overlap-add window normalization.
const OLA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Stft,
    Learned,
}

impl std::str::FromStr for BasisKind {
    type Err = crate::CondsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stft" => Ok(BasisKind::Stft),
            "learned" => Ok(BasisKind::Learned),
            other => Err(config_err(format!("unknown basis `{other}`"))),
        }
    }
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BasisKind::Stft => "stft",
            BasisKind::Learned => "learned",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub kind: BasisKind,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub num_coeffs: usize,
    /// Only meaningful for the STFT basis.
    pub fft_size: usize,
}

impl BasisConfig {
    pub fn stft() -> Self {
        BasisConfig { kind: BasisKind::Stft, window_ms: 5.0, hop_ms: 2.5, num_coeffs: 65, fft_size: 128 }
    }

    pub fn learned() -> Self {
        BasisConfig { kind: BasisKind::Learned, window_ms: 5.0, hop_ms: 2.5, num_coeffs: 256, fft_size: 128 }
    }

    pub fn for_kind(kind: BasisKind) -> Self {
        match kind {
            BasisKind::Stft => Self::stft(),
            BasisKind::Learned => Self::learned(),
        }
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let (win, hop) = (self.window_samples(sample_rate), self.hop_samples(sample_rate));
        if win == 0 || hop == 0 || hop > win {
            return Err(config_err(format!("basis window {win} / hop {hop} samples invalid")));
        }
        if self.num_coeffs == 0 {
            return Err(config_err("basis needs at least one coefficient"));
        }
        if self.kind == BasisKind::Stft {
            if self.fft_size < win {
                return Err(config_err(format!("fft size {} shorter than window {win}", self.fft_size)));
            }
            if self.num_coeffs != self.fft_size / 2 + 1 {
                return Err(config_err(format!(
                    "stft with fft size {} has {} coefficients, not {}",
                    self.fft_size,
                    self.fft_size / 2 + 1,
                    self.num_coeffs
                )));
            }
        }
        Ok(())
    }
}

/// Framing of a signal: frame `w` covers samples `[w * hop, w * hop + window)`,
/// with zeros past the end of the signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub frames: usize,
    pub window: usize,
    pub hop: usize,
    pub signal_len: usize,
}

impl FrameGeometry {
    /// `1 + ceil((len - window) / hop)` frames; errors when `len < window`.
    pub fn new(signal_len: usize, window: usize, hop: usize) -> Result<Self> {
        if signal_len < window {
            return Err(shape_err(format!("signal of {signal_len} samples is shorter than one {window}-sample window")));
        }
        let frames = 1 + (signal_len - window).div_ceil(hop);
        Ok(FrameGeometry { frames, window, hop, signal_len })
    }

    /// Flat gather indices `[frames * window]` into the signal, [`PAD`] past the end.
    pub fn frame_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.frames * self.window);
        for f in 0..self.frames {
            for n in 0..self.window {
                let s = f * self.hop + n;
                idx.push(if s < self.signal_len { s } else { PAD });
            }
        }
        idx
    }

    pub fn frame_tensor(&self, x: &[f64]) -> Tensor {
        let data = self.frame_index().into_iter().map(|i| if i == PAD { 0.0 } else { x[i] }).collect();
        Tensor::matrix(self.frames, self.window, data)
    }
}

/// Synthesis side information.
#[derive(Clone, Debug, PartialEq)]
pub enum SideInfo {
    /// Unit phasor of every STFT bin (`(1, 0)` where the magnitude is zero).
    Phase { cos: Rc<Tensor>, sin: Rc<Tensor> },
    None,
}

/// `W x C` nonnegative coefficients plus what synthesis needs.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisCoeffs {
    pub values: Tensor,
    pub side: SideInfo,
    pub geometry: FrameGeometry,
    pub sample_rate: u32,
}

impl BasisCoeffs {
    pub fn frames(&self) -> usize {
        self.geometry.frames
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Same side-info with new values (e.g. masked coefficients).
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(shape_err(format!("coefficients {:?} vs {:?}", values.shape(), self.values.shape())));
        }
        Ok(BasisCoeffs { values, ..self.clone() })
    }
}

/// `sin^2(pi (n + 0.5) / len)`: a Hann window sampled at half-integer
/// points, so no tap is exactly zero.
pub fn analysis_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| (PI * (n as f64 + 0.5) / len as f64).sin().powi(2)).collect()
}

/// Windowed real DFT and its inverse as dense matrices.
#[derive(Clone, Debug)]
pub struct StftBasis {
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub sample_rate: u32,
    win: Vec<f64>,
    ana_re: Rc<Tensor>,
    ana_im: Rc<Tensor>,
    syn_re: Rc<Tensor>,
    syn_im: Rc<Tensor>,
}

/// Differentiable analysis output.
pub struct StftVars<'t> {
    pub magnitude: Var<'t>,
    pub cos: Rc<Tensor>,
    pub sin: Rc<Tensor>,
    pub geometry: FrameGeometry,
}

impl StftBasis {
    pub fn new(config: &BasisConfig, sample_rate: u32) -> Result<Self> {
        config.validate(sample_rate)?;
        let window = config.window_samples(sample_rate);
        let hop = config.hop_samples(sample_rate);
        let n_fft = config.fft_size;
        let bins = n_fft / 2 + 1;
        let win = analysis_window(window);
        let mut ana_re = vec![0.0; window * bins];
        let mut ana_im = vec![0.0; window * bins];
        let mut syn_re = vec![0.0; bins * window];
        let mut syn_im = vec![0.0; bins * window];
        for n in 0..window {
            for k in 0..bins {
                let ang = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                let (s, c) = ang.sin_cos();
                ana_re[n * bins + k] = win[n] * c;
                ana_im[n * bins + k] = -win[n] * s;
                let weight = if k == 0 || (n_fft % 2 == 0 && k == n_fft / 2) { 1.0 } else { 2.0 };
                syn_re[k * window + n] = weight * c * win[n] / n_fft as f64;
                syn_im[k * window + n] = -weight * s * win[n] / n_fft as f64;
            }
        }
        Ok(StftBasis {
            window,
            hop,
            fft_size: n_fft,
            sample_rate,
            win,
            ana_re: Rc::new(Tensor::matrix(window, bins, ana_re)),
            ana_im: Rc::new(Tensor::matrix(window, bins, ana_im)),
            syn_re: Rc::new(Tensor::matrix(bins, window, syn_re)),
            syn_im: Rc::new(Tensor::matrix(bins, window, syn_im)),
        })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn geometry(&self, len: usize) -> Result<FrameGeometry> {
        FrameGeometry::new(len, self.window, self.hop)
    }

    /// `1 / sum of squared windows` at every output sample.
    fn ola_inverse(&self, geometry: &FrameGeometry) -> Tensor {
        let mut norm = vec![0.0; geometry.signal_len];
        for f in 0..geometry.frames {
            for n in 0..self.window {
                let s = f * self.hop + n;
                if s < norm.len() {
                    norm[s] += self.win[n] * self.win[n];
                }
            }
        }
        Tensor::vector(norm.into_iter().map(|v| 1.0 / v.max(OLA_FLOOR)).collect())
    }

    /// Magnitude (differentiable) and phase (constant) of `signal` (`[len]`).
    pub fn analyze_var<'t>(&self, signal: Var<'t>) -> Result<StftVars<'t>> {
        let tape = signal.tape();
        let geometry = self.geometry(signal.value().len())?;
        let frames = signal.gather(Rc::new(geometry.frame_index()), &[geometry.frames, self.window])?;
        let re = frames.matmul(tape.constant(self.ana_re.as_ref().clone()))?;
        let im = frames.matmul(tape.constant(self.ana_im.as_ref().clone()))?;
        let (rv, iv) = (re.value(), im.value());
        let mut cos = rv.as_ref().clone();
        let mut sin = iv.as_ref().clone();
        for (c, s) in cos.data_mut().iter_mut().zip(sin.data_mut()) {
            let m = c.hypot(*s);
            if m > 0.0 {
                *c /= m;
                *s /= m;
            } else {
                *c = 1.0;
                *s = 0.0;
            }
        }
        let magnitude = Var::magnitude(re, im)?;
        Ok(StftVars { magnitude, cos: Rc::new(cos), sin: Rc::new(sin), geometry })
    }

    /// Inverse STFT of `magnitude` with the given phase, trimmed to the signal length.
    pub fn synthesize_var<'t>(
        &self,
        magnitude: Var<'t>,
        cos: &Rc<Tensor>,
        sin: &Rc<Tensor>,
        geometry: &FrameGeometry,
    ) -> Result<Var<'t>> {
        let tape = magnitude.tape();
        let re = magnitude.mul_const(cos.clone())?;
        let im = magnitude.mul_const(sin.clone())?;
        let frames = re
            .matmul(tape.constant(self.syn_re.as_ref().clone()))?
            .add(im.matmul(tape.constant(self.syn_im.as_ref().clone()))?)?;
        Ok(frames.overlap_add(self.hop, geometry.signal_len).mul_const(Rc::new(self.ola_inverse(geometry)))?)
    }
}

/// Learned encoder/decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedBasisParams {
    /// `[window, coeffs]`
    pub encoder: Tensor,
    /// `[coeffs, window]`
    pub decoder: Tensor,
}

impl LearnedBasisParams {
    /// Uniform in `[-1/sqrt(window), 1/sqrt(window)]`.
    pub fn init(config: &BasisConfig, sample_rate: u32, seed: u64) -> Result<Self> {
        config.validate(sample_rate)?;
        let window = config.window_samples(sample_rate);
        let c = config.num_coeffs;
        let bound = 1.0 / (window as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<_>>();
        Ok(LearnedBasisParams {
            encoder: Tensor::matrix(window, c, draw(window * c)),
            decoder: Tensor::matrix(c, window, draw(c * window)),
        })
    }
}

/// ReLU of framed signal times encoder.
pub fn learned_analyze_var<'t>(
    signal: Var<'t>,
    encoder: Var<'t>,
    hop: usize,
) -> Result<(Var<'t>, FrameGeometry)> {
    let window = encoder.value().rows();
    let geometry = FrameGeometry::new(signal.value().len(), window, hop)?;
    let frames = signal.gather(Rc::new(geometry.frame_index()), &[geometry.frames, window])?;
    Ok((frames.matmul(encoder)?.relu(), geometry))
}

/// Coefficients times decoder, overlap-added and trimmed.
pub fn learned_synthesize_var<'t>(
    coeffs: Var<'t>,
    decoder: Var<'t>,
    geometry: &FrameGeometry,
) -> Result<Var<'t>> {
    Ok(coeffs.matmul(decoder)?.overlap_add(geometry.hop, geometry.signal_len))
}

fn learned_params<'a>(params: Option<&'a LearnedBasisParams>, config: &BasisConfig, rate: u32) -> Result<&'a LearnedBasisParams> {
    let p = params.ok_or_else(|| config_err("learned basis requires encoder/decoder weights"))?;
    let window = config.window_samples(rate);
    if p.encoder.shape() != [window, config.num_coeffs] || p.decoder.shape() != [config.num_coeffs, window] {
        return Err(shape_err(format!(
            "learned basis weights {:?}/{:?} do not match {window}x{}",
            p.encoder.shape(),
            p.decoder.shape(),
            config.num_coeffs
        )));
    }
    Ok(p)
}

/// Analysis transform of a clip.
pub fn analyze(clip: &AudioClip, config: &BasisConfig, params: Option<&LearnedBasisParams>) -> Result<BasisCoeffs> {
    if clip.is_empty() {
        return Err(shape_err("cannot analyze an empty clip"));
    }
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(clip.samples().to_vec()));
    let rate = clip.sample_rate();
    match config.kind {
        BasisKind::Stft => {
            let basis = StftBasis::new(config, rate)?;
            let out = basis.analyze_var(x)?;
            Ok(BasisCoeffs {
                values: out.magnitude.value().as_ref().clone(),
                side: SideInfo::Phase { cos: out.cos, sin: out.sin },
                geometry: out.geometry,
                sample_rate: rate,
            })
        }
        BasisKind::Learned => {
            config.validate(rate)?;
            let p = learned_params(params, config, rate)?;
            let (coeffs, geometry) =
                learned_analyze_var(x, tape.constant(p.encoder.clone()), config.hop_samples(rate))?;
            Ok(BasisCoeffs {
                values: coeffs.value().as_ref().clone(),
                side: SideInfo::None,
                geometry,
                sample_rate: rate,
            })
        }
    }
}

/// Synthesis transform back to a clip of the analyzed length.
pub fn synthesize(masked: &BasisCoeffs, config: &BasisConfig, params: Option<&LearnedBasisParams>) -> Result<AudioClip> {
    let g = &masked.geometry;
    if masked.values.rows() != g.frames || masked.values.cols() != config.num_coeffs {
        return Err(shape_err(format!(
            "coefficients {:?} do not match {} frames x {} coefficients",
            masked.values.shape(),
            g.frames,
            config.num_coeffs
        )));
    }
    let rate = masked.sample_rate;
    if config.window_samples(rate) != g.window || config.hop_samples(rate) != g.hop {
        return Err(shape_err("frame geometry does not match the basis configuration"));
    }
    let tape = Tape::new();
    let y = tape.constant(masked.values.clone());
    let out = match config.kind {
        BasisKind::Stft => {
            let SideInfo::Phase { cos, sin } = &masked.side else {
                return Err(shape_err("stft synthesis needs phase side-info"));
            };
            if cos.shape() != masked.values.shape() {
                return Err(shape_err("phase and magnitude shapes differ"));
            }
            StftBasis::new(config, rate)?.synthesize_var(y, cos, sin, g)?
        }
        BasisKind::Learned => {
            let p = learned_params(params, config, rate)?;
            learned_synthesize_var(y, tape.constant(p.decoder.clone()), g)?
        }
    };
    Ok(AudioClip::new(out.value().data().to_vec(), rate))
}

pub const MEL_BANDS: usize = 64;
pub const MEL_WINDOW: usize = 400;
pub const MEL_HOP: usize = 160;
pub const MEL_FFT: usize = 512;
pub const MEL_FMIN: f64 = 125.0;
pub const MEL_FMAX: f64 = 7500.0;
pub const LOG_OFFSET: f64 = 1e-5;
pub const PATCH_FRAMES: usize = 96;
/// Frames of padding before / after each patch center.
pub const PATCH_PAD_BEFORE: usize = 47;
pub const PATCH_PAD_AFTER: usize = 48;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-mel frames and their patch view.
#[derive(Clone, Debug, PartialEq)]
pub struct MelPatchSet {
    /// `[F, 64]`
    pub mel_frames: Tensor,
}

impl MelPatchSet {
    pub fn frames(&self) -> usize {
        self.mel_frames.rows()
    }

    pub fn num_patches(&self) -> usize {
        self.frames()
    }

    /// Mel frames with `47` frames of silence before and `48` after.
    pub fn padded(&self) -> Tensor {
        pad_frames(&self.mel_frames)
    }

    /// The `96 x 64` patch centered on frame `i`.
    pub fn patch(&self, i: usize) -> Tensor {
        let padded = self.padded();
        let c = MEL_BANDS;
        Tensor::matrix(PATCH_FRAMES, c, padded.data()[i * c..(i + PATCH_FRAMES) * c].to_vec())
    }
}

fn pad_frames(mel: &Tensor) -> Tensor {
    let silence = LOG_OFFSET.ln();
    let c = mel.cols();
    let mut data = vec![silence; PATCH_PAD_BEFORE * c];
    data.extend_from_slice(mel.data());
    data.extend(std::iter::repeat(silence).take(PATCH_PAD_AFTER * c));
    Tensor::matrix(mel.rows() + PATCH_PAD_BEFORE + PATCH_PAD_AFTER, c, data)
}

/// Log-mel analysis matrices.
#[derive(Clone, Debug)]
pub struct MelFrontend {
    re: Rc<Tensor>,
    im: Rc<Tensor>,
    filterbank: Rc<Tensor>,
    pub sample_rate: u32,
}

impl MelFrontend {
    pub fn new(sample_rate: u32) -> Result<Self> {
        if (sample_rate as f64) / 2.0 <= MEL_FMAX {
            return Err(config_err(format!("sample rate {sample_rate} Hz too low for a {MEL_FMAX} Hz mel ceiling")));
        }
        let bins = MEL_FFT / 2 + 1;
        // periodic Hann
        let win: Vec<f64> =
            (0..MEL_WINDOW).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / MEL_WINDOW as f64).cos()).collect();
        let mut re = vec![0.0; MEL_WINDOW * bins];
        let mut im = vec![0.0; MEL_WINDOW * bins];
        for n in 0..MEL_WINDOW {
            for k in 0..bins {
                let ang = 2.0 * PI * ((k * n) % MEL_FFT) as f64 / MEL_FFT as f64;
                re[n * bins + k] = win[n] * ang.cos();
                im[n * bins + k] = -win[n] * ang.sin();
            }
        }
        Ok(MelFrontend {
            re: Rc::new(Tensor::matrix(MEL_WINDOW, bins, re)),
            im: Rc::new(Tensor::matrix(MEL_WINDOW, bins, im)),
            filterbank: Rc::new(mel_filterbank(sample_rate)),
            sample_rate,
        })
    }

    pub fn filterbank(&self) -> &Tensor {
        &self.filterbank
    }

    /// `1 + floor(len / 160)`.
    pub fn frame_count(len: usize) -> usize {
        1 + len / MEL_HOP
    }

    fn frame_index(len: usize) -> Vec<usize> {
        let pad = MEL_WINDOW / 2;
        let frames = Self::frame_count(len);
        let mut idx = Vec::with_capacity(frames * MEL_WINDOW);
        for f in 0..frames {
            for n in 0..MEL_WINDOW {
                // position in the reflect-padded signal, mapped back
                let p = (f * MEL_HOP + n) as isize - pad as isize;
                let last = len as isize - 1;
                let s = if p < 0 {
                    -p
                } else if p > last {
                    2 * last - p
                } else {
                    p
                };
                idx.push(s as usize);
            }
        }
        idx
    }

    /// `[F, 64]` log-mel energies of `signal` (`[len]`).
    pub fn logmel_var<'t>(&self, signal: Var<'t>) -> Result<Var<'t>> {
        let len = signal.value().len();
        if len < MEL_WINDOW {
            return Err(shape_err(format!("clip of {len} samples is shorter than the {MEL_WINDOW}-sample mel window")));
        }
        let tape = signal.tape();
        let frames = signal.gather(Rc::new(Self::frame_index(len)), &[Self::frame_count(len), MEL_WINDOW])?;
        let re = frames.matmul(tape.constant(self.re.as_ref().clone()))?;
        let im = frames.matmul(tape.constant(self.im.as_ref().clone()))?;
        let power = re.square().add(im.square())?;
        Ok(power.matmul(tape.constant(self.filterbank.as_ref().clone()))?.ln_eps(LOG_OFFSET))
    }

    /// Pads `[F, 64]` log-mel frames to `[F + 95, 64]` with silence.
    pub fn pad_var<'t>(logmel: Var<'t>) -> Result<Var<'t>> {
        let tape = logmel.tape();
        let c = logmel.value().cols();
        let silence = LOG_OFFSET.ln();
        let before = tape.constant(Tensor::full(&[PATCH_PAD_BEFORE, c], silence));
        let after = tape.constant(Tensor::full(&[PATCH_PAD_AFTER, c], silence));
        Ok(Var::concat_rows(&[before, logmel, after])?)
    }

    pub fn patches(&self, clip: &AudioClip) -> Result<MelPatchSet> {
        if clip.sample_rate() != self.sample_rate {
            return Err(shape_err(format!("clip at {} Hz, mel frontend at {} Hz", clip.sample_rate(), self.sample_rate)));
        }
        let tape = Tape::new();
        let mel = self.logmel_var(tape.constant(Tensor::vector(clip.samples().to_vec())))?;
        Ok(MelPatchSet { mel_frames: mel.value().as_ref().clone() })
    }
}

/// `[257, 64]` triangular HTK-mel filters, each normalized to unit sum.
pub fn mel_filterbank(sample_rate: u32) -> Tensor {
    let bins = MEL_FFT / 2 + 1;
    let (lo, hi) = (hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX));
    let edges: Vec<f64> =
        (0..MEL_BANDS + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BANDS + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / MEL_FFT as f64;
    let mut fb = vec![0.0; bins * MEL_BANDS];
    for b in 0..MEL_BANDS {
        let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
        let mut total = 0.0;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[k * MEL_BANDS + b] = w;
            total += w;
        }
        if total > 0.0 {
            for k in 0..bins {
                fb[k * MEL_BANDS + b] /= total;
            }
        } else {
            // narrower than one bin: take the nearest bin
            let k = ((c / bin_hz).round() as usize).min(bins - 1);
            fb[k * MEL_BANDS + b] = 1.0;
        }
    }
    Tensor::matrix(bins, MEL_BANDS, fb)
}

/// Log-mel frames of a clip at its own sample rate.
pub fn mel_patches(clip: &AudioClip) -> Result<MelPatchSet> {
    MelFrontend::new(clip.sample_rate())?.patches(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn tone(freq: f64, len: usize) -> AudioClip {
        AudioClip::new((0..len).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(), 16000)
    }

    fn noise(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000)
    }

    fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
        let s: f64 = reference.iter().map(|x| x * x).sum();
        let e: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
        10.0 * (s / e).log10()
    }

    #[test]
    fn stft_frame_count_and_zero_clip() {
        let c = analyze(&AudioClip::zeros(48000, 16000), &BasisConfig::stft(), None).unwrap();
        assert_eq!(c.values.shape(), &[1199, 65]);
        assert!(c.values.data().iter().all(|&v| v == 0.0));
        let out = synthesize(&c, &BasisConfig::stft(), None).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
        assert!(analyze(&AudioClip::zeros(0, 16000), &BasisConfig::stft(), None).is_err());
    }

    #[test]
    fn frame_count_formula() {
        for len in 80..400 {
            let g = FrameGeometry::new(len, 80, 40).unwrap();
            let last_start = (g.frames - 1) * 40;
            assert!(last_start < len && last_start + 80 >= len, "len {len}");
            if (len - 80) % 40 == 0 {
                assert_eq!(g.frames, 1 + (len - 80) / 40);
            }
        }
    }

    #[test]
    fn stft_matches_reference_fft() {
        let clip = noise(400, 3);
        let c = analyze(&clip, &BasisConfig::stft(), None).unwrap();
        let win = analysis_window(80);
        let fft = FftPlanner::new().plan_fft_forward(128);
        for f in [0, 3, c.frames() - 1] {
            let mut buf = vec![Complex::new(0.0, 0.0); 128];
            for n in 0..80 {
                if let Some(x) = clip.samples().get(f * 40 + n) {
                    buf[n] = Complex::new(x * win[n], 0.0);
                }
            }
            fft.process(&mut buf);
            for k in 0..65 {
                assert!((buf[k].norm() - c.values.row(f)[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tone_peaks_at_expected_bin() {
        let c = analyze(&tone(2000.0, 4000), &BasisConfig::stft(), None).unwrap();
        for f in 0..c.frames() - 1 {
            let row = c.values.row(f);
            let arg = (0..65).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, 16);
        }
    }

    #[test]
    fn stft_round_trip_and_half_mask() {
        let clip = noise(4817, 9);
        let config = BasisConfig::stft();
        let c = analyze(&clip, &config, None).unwrap();
        let out = synthesize(&c, &config, None).unwrap();
        assert_eq!(out.len(), clip.len());
        assert!(snr_db(clip.samples(), out.samples()) > 100.0);
        let half = c.with_values(c.values.map(|v| 0.5 * v)).unwrap();
        let out = synthesize(&half, &config, None).unwrap();
        let target: Vec<f64> = clip.samples().iter().map(|x| 0.5 * x).collect();
        assert!(snr_db(&target, out.samples()) > 100.0);
    }

    #[test]
    fn learned_basis_shapes_and_homogeneity() {
        let config = BasisConfig::learned();
        let p = LearnedBasisParams::init(&config, 16000, 4).unwrap();
        let bound = 1.0 / 80f64.sqrt();
        assert!(p.encoder.data().iter().all(|v| v.abs() <= bound));
        let clip = noise(1000, 5);
        let c = analyze(&clip, &config, Some(&p)).unwrap();
        assert_eq!(c.values.shape(), &[24, 256]);
        assert!(c.values.data().iter().all(|&v| v >= 0.0));
        let c2 = analyze(&clip.scaled(2.5), &config, Some(&p)).unwrap();
        for (a, b) in c.values.data().iter().zip(c2.values.data()) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
        assert_eq!(synthesize(&c, &config, Some(&p)).unwrap().len(), 1000);
        assert!(analyze(&clip, &config, None).is_err());
    }

    #[test]
    fn geometry_mismatch_is_a_shape_error() {
        let c = analyze(&noise(500, 1), &BasisConfig::stft(), None).unwrap();
        let bad = BasisCoeffs { values: Tensor::zeros(&[3, 65]), ..c };
        assert!(matches!(synthesize(&bad, &BasisConfig::stft(), None), Err(crate::CondsepError::Shape(_))));
    }

    #[test]
    fn basis_config_validation() {
        assert!(BasisConfig::stft().validate(16000).is_ok());
        let bad = BasisConfig { num_coeffs: 64, ..BasisConfig::stft() };
        assert!(bad.validate(16000).is_err());
        let bad = BasisConfig { hop_ms: 10.0, ..BasisConfig::stft() };
        assert!(bad.validate(16000).is_err());
    }

    #[test]
    fn mel_frames_and_silence() {
        let m = mel_patches(&AudioClip::zeros(48000, 16000)).unwrap();
        assert_eq!(m.mel_frames.shape(), &[301, 64]);
        assert_eq!(m.num_patches(), 301);
        assert!(m.mel_frames.data().iter().all(|&v| v == LOG_OFFSET.ln()));
        assert_eq!(m.patch(0).shape(), &[96, 64]);
        assert!(mel_patches(&AudioClip::zeros(399, 16000)).is_err());
    }

    #[test]
    fn mel_tone_argmax_is_stable() {
        let m = mel_patches(&tone(1000.0, 16000)).unwrap();
        let argmax = |r: usize| {
            let row = m.mel_frames.row(r);
            (0..64).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
        };
        let first = argmax(3);
        for r in 3..m.frames() - 3 {
            assert_eq!(argmax(r), first);
        }
        // the filter with the largest response at 1 kHz
        let fb = mel_filterbank(16000);
        let k = (1000.0 / (16000.0 / 512.0)) as usize;
        let best = (0..64).max_by(|&a, &b| fb.row(k)[a].partial_cmp(&fb.row(k)[b]).unwrap()).unwrap();
        assert!((first as isize - best as isize).abs() <= 1);
    }

    #[test]
    fn filterbank_rows_are_normalized() {
        let fb = mel_filterbank(16000);
        let centers: Vec<f64> = (0..64)
            .map(|b| {
                let col: Vec<f64> = (0..257).map(|k| fb.row(k)[b]).collect();
                assert!(col.iter().all(|&v| v >= 0.0));
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                col.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>()
            })
            .collect();
        let lo = hz_to_mel(MEL_FMIN);
        let hi = hz_to_mel(MEL_FMAX);
        let nominal: Vec<f64> = (1..=64).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / 65.0)).collect();
        assert!(nominal.windows(2).all(|w| w[1] > w[0]));
        assert!(centers.windows(2).all(|w| w[1] >= w[0]));
    }
}
