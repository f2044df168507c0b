//! Seeded synthetic sound classes, two-source mixtures, and the on-disk
//! dataset layout (PCM16 WAV files plus a newline-delimited JSON manifest).
//!
//! Every generated value is a pure function of `(config, seed)`: example
//! seeds are derived from the global seed, the split and the example index,
//! and source seeds from the example seed.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, DEFAULT_DURATION, DEFAULT_SAMPLE_RATE};
use crate::error::{config_err, shape_err, CondsepError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_FILE: &str = "dataset.json";

/// Peak level the mixture is normalized to.
pub const MIXTURE_PEAK: f64 = 0.9;

/// Inclusive parameter range in natural units (Hz, Hz of modulation, ...).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        ParamRange { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        ParamRange { lo: v, hi: v }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn validate(&self, what: &str, max: Option<f64>) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi || self.lo <= 0.0 {
            return Err(config_err(format!("{what}: invalid range [{}, {}]", self.lo, self.hi)));
        }
        if let Some(max) = max {
            if self.hi >= max {
                return Err(config_err(format!("{what}: {} Hz is not below Nyquist {max} Hz", self.hi)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    PureTone { freq: ParamRange },
    HarmonicStack { f0: ParamRange, harmonics: usize },
    Chirp { start: ParamRange, end: ParamRange },
    LowpassNoise { cutoff: ParamRange },
    BandpassNoise { center: ParamRange, bandwidth: ParamRange },
    HighpassNoise { cutoff: ParamRange },
    AmNoise { rate: ParamRange, cutoff: ParamRange },
    ClickTrain { rate: ParamRange, resonance: ParamRange },
    FmTone { carrier: ParamRange, rate: ParamRange, depth: ParamRange },
    TremoloTone { carrier: ParamRange, rate: ParamRange },
    NoiseBursts { center: ParamRange, bandwidth: ParamRange, rate: ParamRange },
    PulseTrain { f0: ParamRange },
    ChirpTrain { low: ParamRange, high: ParamRange, rate: ParamRange },
    Vibrato { f0: ParamRange, rate: ParamRange, harmonics: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundClassSpec {
    pub class_id: usize,
    pub name: String,
    pub generator: GeneratorKind,
}

impl SoundClassSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = Some(sample_rate as f64 / 2.0);
        let name = &self.name;
        match &self.generator {
            GeneratorKind::PureTone { freq } => freq.validate(name, nyq),
            GeneratorKind::HarmonicStack { f0, harmonics } => {
                if *harmonics == 0 {
                    return Err(config_err(format!("{name}: zero harmonics")));
                }
                f0.validate(name, nyq)
            }
            GeneratorKind::Chirp { start, end } => {
                start.validate(name, nyq)?;
                end.validate(name, nyq)
            }
            GeneratorKind::LowpassNoise { cutoff } | GeneratorKind::HighpassNoise { cutoff } => {
                cutoff.validate(name, nyq)
            }
            GeneratorKind::BandpassNoise { center, bandwidth } => {
                center.validate(name, nyq)?;
                bandwidth.validate(name, nyq)
            }
            GeneratorKind::AmNoise { rate, cutoff } => {
                rate.validate(name, nyq)?;
                cutoff.validate(name, nyq)
            }
            GeneratorKind::ClickTrain { rate, resonance } => {
                if rate.hi > 20.0 {
                    return Err(config_err(format!("{name}: click rate above 20 Hz")));
                }
                rate.validate(name, nyq)?;
                resonance.validate(name, nyq)
            }
            GeneratorKind::FmTone { carrier, rate, depth } => {
                rate.validate(name, nyq)?;
                depth.validate(name, nyq)?;
                carrier.validate(name, nyq.map(|n| n - depth.hi))
            }
            GeneratorKind::TremoloTone { carrier, rate } => {
                carrier.validate(name, nyq)?;
                rate.validate(name, nyq)
            }
            GeneratorKind::NoiseBursts { center, bandwidth, rate } => {
                center.validate(name, nyq)?;
                bandwidth.validate(name, nyq)?;
                rate.validate(name, nyq)
            }
            GeneratorKind::PulseTrain { f0 } => f0.validate(name, nyq),
            GeneratorKind::ChirpTrain { low, high, rate } => {
                low.validate(name, nyq)?;
                high.validate(name, nyq)?;
                rate.validate(name, nyq)
            }
            GeneratorKind::Vibrato { f0, rate, harmonics } => {
                if *harmonics == 0 {
                    return Err(config_err(format!("{name}: zero harmonics")));
                }
                f0.validate(name, nyq)?;
                rate.validate(name, nyq)
            }
        }
    }
}

/// The built-in class catalog; `num_classes` takes a prefix of it.
pub fn default_catalog(num_classes: usize) -> Result<Vec<SoundClassSpec>> {
    use GeneratorKind::*;
    let r = ParamRange::new;
    let all: Vec<(&str, GeneratorKind)> = vec![
        ("low-tone", PureTone { freq: r(120.0, 320.0) }),
        ("high-tone", PureTone { freq: r(1500.0, 3200.0) }),
        ("low-harmonic", HarmonicStack { f0: r(80.0, 180.0), harmonics: 8 }),
        ("bright-harmonic", HarmonicStack { f0: r(350.0, 700.0), harmonics: 6 }),
        ("rising-chirp", Chirp { start: r(200.0, 500.0), end: r(2500.0, 4000.0) }),
        ("falling-chirp", Chirp { start: r(3000.0, 5000.0), end: r(300.0, 700.0) }),
        ("rumble", LowpassNoise { cutoff: r(250.0, 600.0) }),
        ("band-noise", BandpassNoise { center: r(900.0, 1800.0), bandwidth: r(200.0, 500.0) }),
        ("hiss", HighpassNoise { cutoff: r(4500.0, 6000.0) }),
        ("pulsing-noise", AmNoise { rate: r(2.0, 6.0), cutoff: r(1500.0, 3000.0) }),
        ("clicks", ClickTrain { rate: r(8.0, 20.0), resonance: r(1000.0, 3000.0) }),
        ("fm-tone", FmTone { carrier: r(500.0, 1000.0), rate: r(3.0, 8.0), depth: r(50.0, 200.0) }),
        ("tremolo", TremoloTone { carrier: r(600.0, 1300.0), rate: r(4.0, 10.0) }),
        ("bursts", NoiseBursts { center: r(2500.0, 4000.0), bandwidth: r(500.0, 1200.0), rate: r(1.5, 4.0) }),
        ("buzz", PulseTrain { f0: r(90.0, 220.0) }),
        ("tweets", ChirpTrain { low: r(2000.0, 3000.0), high: r(4000.0, 6000.0), rate: r(3.0, 7.0) }),
        ("vibrato", Vibrato { f0: r(250.0, 450.0), rate: r(4.0, 7.0), harmonics: 4 }),
    ];
    if num_classes < 2 {
        return Err(config_err(format!("need at least 2 classes, got {num_classes}")));
    }
    if num_classes > all.len() {
        return Err(config_err(format!("catalog has {} classes, asked for {num_classes}", all.len())));
    }
    Ok(all
        .into_iter()
        .take(num_classes)
        .enumerate()
        .map(|(class_id, (name, generator))| SoundClassSpec { class_id, name: name.into(), generator })
        .collect())
}

/// Sample rate and duration of generated clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipFormat {
    pub sample_rate: u32,
    pub duration: f64,
}

impl Default for ClipFormat {
    fn default() -> Self {
        ClipFormat { sample_rate: DEFAULT_SAMPLE_RATE, duration: DEFAULT_DURATION }
    }
}

impl ClipFormat {
    pub fn len(&self) -> usize {
        AudioClip::len_for(self.sample_rate, self.duration)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Second-order IIR section (RBJ cookbook coefficients).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn new(kind: FilterKind, fc: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * fc / sr;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let (b0, b1, b2) = match kind {
            FilterKind::Low => ((1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0),
            FilterKind::High => ((1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0),
            FilterKind::Band => (alpha, 0.0, -alpha),
        };
        let a0 = 1.0 + alpha;
        Biquad { b: [b0 / a0, b1 / a0, b2 / a0], a: [-2.0 * c / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
enum FilterKind {
    Low,
    High,
    Band,
}

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn filtered_noise(rng: &mut ChaCha8Rng, n: usize, kind: FilterKind, fc: f64, q: f64, sr: f64) -> Vec<f64> {
    // two cascaded sections for a steeper skirt
    let f = Biquad::new(kind, fc, q, sr);
    f.run(&f.run(&noise(rng, n)))
}

/// Random active region covering 60-100% of the clip with 20 ms ramps.
fn gate(rng: &mut ChaCha8Rng, x: &mut [f64], sr: f64) {
    let n = x.len();
    let active = (rng.gen_range(0.6..=1.0) * n as f64) as usize;
    let start = rng.gen_range(0..=n - active);
    let ramp = ((0.02 * sr) as usize).max(1).min(active / 2);
    for (i, v) in x.iter_mut().enumerate() {
        let g = if i < start || i >= start + active {
            0.0
        } else {
            let from_start = i - start;
            let to_end = start + active - 1 - i;
            let d = from_start.min(to_end);
            if d < ramp {
                0.5 - 0.5 * (PI * d as f64 / ramp as f64).cos()
            } else {
                1.0
            }
        };
        *v *= g;
    }
}

fn class_seed(class_id: usize, seed: u64) -> u64 {
    splitmix(seed ^ splitmix(class_id as u64 + 0x5eed))
}

/// SplitMix64 finalizer; used to derive independent seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministically renders one clip of the given class.
pub fn generate_source(spec: &SoundClassSpec, seed: u64, format: &ClipFormat) -> Result<AudioClip> {
    spec.validate(format.sample_rate)?;
    let n = format.len();
    if n == 0 {
        return Err(shape_err("clip format has zero samples"));
    }
    let sr = format.sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(class_seed(spec.class_id, seed));
    let t = |i: usize| i as f64 / sr;
    let phase0: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut gated = true;
    let mut x: Vec<f64> = match &spec.generator {
        GeneratorKind::PureTone { freq } => {
            let f = freq.draw(&mut rng);
            (0..n).map(|i| (2.0 * PI * f * t(i) + phase0).sin()).collect()
        }
        GeneratorKind::HarmonicStack { f0, harmonics } => {
            let f = f0.draw(&mut rng);
            let phases: Vec<f64> = (0..*harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let rolloff: f64 = rng.gen_range(0.5..1.0);
            (0..n)
                .map(|i| {
                    (1..=*harmonics)
                        .filter(|&h| f * (h as f64) < sr / 2.0)
                        .map(|h| rolloff.powi(h as i32 - 1) * (2.0 * PI * f * h as f64 * t(i) + phases[h - 1]).sin())
                        .sum()
                })
                .collect()
        }
        GeneratorKind::Chirp { start, end } => {
            let (f_a, f_b) = (start.draw(&mut rng), end.draw(&mut rng));
            let dur = n as f64 / sr;
            // exponential sweep, phase = integral of instantaneous frequency
            let k = (f_b / f_a).ln() / dur;
            (0..n)
                .map(|i| (2.0 * PI * f_a * ((k * t(i)).exp() - 1.0) / k + phase0).sin())
                .collect()
        }
        GeneratorKind::LowpassNoise { cutoff } => {
            let fc = cutoff.draw(&mut rng);
            filtered_noise(&mut rng, n, FilterKind::Low, fc, 0.707, sr)
        }
        GeneratorKind::HighpassNoise { cutoff } => {
            let fc = cutoff.draw(&mut rng);
            filtered_noise(&mut rng, n, FilterKind::High, fc, 0.707, sr)
        }
        GeneratorKind::BandpassNoise { center, bandwidth } => {
            let (fc, bw) = (center.draw(&mut rng), bandwidth.draw(&mut rng));
            filtered_noise(&mut rng, n, FilterKind::Band, fc, fc / bw, sr)
        }
        GeneratorKind::AmNoise { rate, cutoff } => {
            let (fr, fc) = (rate.draw(&mut rng), cutoff.draw(&mut rng));
            let base = filtered_noise(&mut rng, n, FilterKind::Low, fc, 0.707, sr);
            base.iter()
                .enumerate()
                .map(|(i, v)| v * (0.5 + 0.5 * (2.0 * PI * fr * t(i) + phase0).sin()).powi(2))
                .collect()
        }
        GeneratorKind::ClickTrain { rate, resonance } => {
            gated = false;
            let fr = rate.draw(&mut rng);
            let f_res = resonance.draw(&mut rng);
            let tau = 0.002 * sr;
            let len = (0.008 * sr) as usize;
            let period = sr / fr;
            let mut x = vec![0.0; n];
            let mut pos = rng.gen_range(0.0..period);
            while (pos as usize) < n {
                let start = pos as usize;
                for j in 0..len.min(n - start) {
                    x[start + j] = (2.0 * PI * f_res * j as f64 / sr).sin() * (-(j as f64) / tau).exp();
                }
                pos += period * rng.gen_range(0.9..1.1);
            }
            x
        }
        GeneratorKind::FmTone { carrier, rate, depth } => {
            let (fc, fm, d) = (carrier.draw(&mut rng), rate.draw(&mut rng), depth.draw(&mut rng));
            (0..n)
                .map(|i| (2.0 * PI * fc * t(i) + d / fm * (2.0 * PI * fm * t(i)).sin() + phase0).sin())
                .collect()
        }
        GeneratorKind::TremoloTone { carrier, rate } => {
            let (fc, fr) = (carrier.draw(&mut rng), rate.draw(&mut rng));
            (0..n)
                .map(|i| {
                    (2.0 * PI * fc * t(i) + phase0).sin() * (0.6 + 0.4 * (2.0 * PI * fr * t(i)).sin())
                })
                .collect()
        }
        GeneratorKind::NoiseBursts { center, bandwidth, rate } => {
            let (fc, bw, fr) = (center.draw(&mut rng), bandwidth.draw(&mut rng), rate.draw(&mut rng));
            let base = filtered_noise(&mut rng, n, FilterKind::Band, fc, fc / bw, sr);
            let period = sr / fr;
            let burst = 0.4 * period;
            let offset = rng.gen_range(0.0..period);
            base.iter()
                .enumerate()
                .map(|(i, v)| {
                    let ph = (i as f64 + offset) % period;
                    if ph < burst {
                        v * (PI * ph / burst).sin()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        GeneratorKind::PulseTrain { f0 } => {
            let f = f0.draw(&mut rng);
            // band-limited square wave from odd harmonics
            (0..n)
                .map(|i| {
                    (1..)
                        .step_by(2)
                        .take_while(|&h| f * h as f64 <= 0.45 * sr)
                        .map(|h| (2.0 * PI * f * h as f64 * t(i) + phase0 * h as f64).sin() / h as f64)
                        .sum()
                })
                .collect()
        }
        GeneratorKind::ChirpTrain { low, high, rate } => {
            let (fl, fh, fr) = (low.draw(&mut rng), high.draw(&mut rng), rate.draw(&mut rng));
            let period = sr / fr;
            let len = 0.06 * sr;
            let offset = rng.gen_range(0.0..period);
            (0..n)
                .map(|i| {
                    let ph = (i as f64 + offset) % period;
                    if ph < len {
                        let u = ph / sr;
                        let k = (fh - fl) / (len / sr);
                        (2.0 * PI * (fl * u + 0.5 * k * u * u)).sin() * (PI * ph / len).sin()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        GeneratorKind::Vibrato { f0, rate, harmonics } => {
            let (f, fr) = (f0.draw(&mut rng), rate.draw(&mut rng));
            let depth = 0.03 * f;
            (0..n)
                .map(|i| {
                    let ph = 2.0 * PI * f * t(i) + depth / fr * (2.0 * PI * fr * t(i)).sin();
                    (1..=*harmonics).map(|h| (h as f64 * ph).sin() / h as f64).sum::<f64>()
                })
                .collect()
        }
    };
    if gated {
        gate(&mut rng, &mut x, sr);
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(CondsepError::Domain(format!("{}: generator produced silence", spec.name)));
    }
    let target = rng.gen_range(0.1..0.25);
    let mut gain = target / rms;
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())) * gain;
    if peak > 0.99 {
        gain *= 0.99 / peak;
    }
    for v in x.iter_mut() {
        *v *= gain;
    }
    Ok(AudioClip::new(x, format.sample_rate))
}

/// Gain-scaled sources and their exact sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: AudioClip,
    pub sources: Vec<AudioClip>,
}

/// Scales each source by its gain, then applies one common factor so the
/// mixture peaks at [`MIXTURE_PEAK`]. The mixture is the sum of the stored
/// (scaled) sources.
pub fn make_mixture(sources: &[AudioClip], gains_db: &[f64]) -> Result<Mixture> {
    let first = sources.first().ok_or_else(|| shape_err("no sources to mix"))?;
    if gains_db.len() != sources.len() {
        return Err(shape_err(format!("{} gains for {} sources", gains_db.len(), sources.len())));
    }
    for s in sources {
        first.check_compatible(s)?;
    }
    let scaled: Vec<Vec<f64>> = sources
        .iter()
        .zip(gains_db)
        .map(|(s, g)| {
            let k = 10f64.powf(g / 20.0);
            s.samples().iter().map(|x| x * k).collect()
        })
        .collect();
    let n = first.len();
    let peak = (0..n)
        .map(|i| scaled.iter().map(|s| s[i]).sum::<f64>().abs())
        .fold(0.0f64, f64::max);
    let common = if peak > 0.0 { MIXTURE_PEAK / peak } else { 1.0 };
    let stored: Vec<AudioClip> = scaled
        .into_iter()
        .map(|s| AudioClip::new(s.into_iter().map(|x| x * common).collect(), first.sample_rate()))
        .collect();
    let mut mix = vec![0.0; n];
    for s in &stored {
        for (m, x) in mix.iter_mut().zip(s.samples()) {
            *m += x;
        }
    }
    Ok(Mixture { mixture: AudioClip::new(mix, first.sample_rate()), sources: stored })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn index(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = CondsepError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(config_err(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One mixture with its references and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub id: String,
    pub mixture: AudioClip,
    pub sources: Vec<AudioClip>,
    /// Multi-hot class vector per source.
    pub labels: Vec<Vec<u8>>,
    pub gains_db: Vec<f64>,
    pub seed: u64,
    pub split: Split,
}

impl MixtureExample {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Union of the source labels.
    pub fn mixture_label(&self) -> Vec<u8> {
        let j = self.labels.first().map(|l| l.len()).unwrap_or(0);
        (0..j).map(|c| self.labels.iter().any(|l| l[c] != 0) as u8).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub sources_per_mixture: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration: f64,
    /// Source gains are drawn uniformly from `[-gain_db_range, +gain_db_range]`.
    pub gain_db_range: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 16,
            sources_per_mixture: 2,
            train: 2000,
            validation: 400,
            test: 200,
            seed: 1,
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration: DEFAULT_DURATION,
            gain_db_range: 5.0,
        }
    }
}

impl DatasetConfig {
    pub fn format(&self) -> ClipFormat {
        ClipFormat { sample_rate: self.sample_rate, duration: self.duration }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err("need at least 2 classes to draw distinct sources"));
        }
        if self.sources_per_mixture < 2 || self.sources_per_mixture > self.num_classes {
            return Err(config_err(format!(
                "sources_per_mixture must be in [2, {}], got {}",
                self.num_classes, self.sources_per_mixture
            )));
        }
        if self.train == 0 || self.validation == 0 || self.test == 0 {
            return Err(config_err("every split needs at least one example"));
        }
        if !(self.gain_db_range >= 0.0 && self.gain_db_range.is_finite()) {
            return Err(config_err("gain_db_range must be a finite non-negative number"));
        }
        if self.format().is_empty() {
            return Err(config_err("clip duration yields no samples"));
        }
        Ok(())
    }

    /// Seed of example `index` in `split`.
    pub fn example_seed(&self, split: Split, index: usize) -> u64 {
        splitmix(splitmix(self.seed) ^ splitmix((split.index() << 48) | index as u64))
    }
}

fn example_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.as_str())
}

/// Generates example `index` of `split` in memory.
pub fn generate_example(
    config: &DatasetConfig,
    catalog: &[SoundClassSpec],
    split: Split,
    index: usize,
) -> Result<MixtureExample> {
    let seed = config.example_seed(split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.sources_per_mixture;
    let classes = sample(&mut rng, catalog.len(), n).into_vec();
    let format = config.format();
    let mut sources = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    for &c in &classes {
        let source_seed: u64 = rng.gen();
        sources.push(generate_source(&catalog[c], source_seed, &format)?);
        let mut label = vec![0u8; catalog.len()];
        label[c] = 1;
        labels.push(label);
        let g = config.gain_db_range;
        gains.push(if g > 0.0 { rng.gen_range(-g..=g) } else { 0.0 });
    }
    let mixed = make_mixture(&sources, &gains)?;
    Ok(MixtureExample {
        id: example_id(split, index),
        mixture: mixed.mixture,
        sources: mixed.sources,
        labels,
        gains_db: gains,
        seed,
        split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub mixture_path: String,
    pub source_paths: Vec<String>,
    pub labels: Vec<Vec<u8>>,
    pub gains_db: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config: DatasetConfig,
    pub classes: Vec<SoundClassSpec>,
}

/// Loaded dataset description. Paths in entries are relative to `root`.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub entries: Vec<ManifestEntry>,
    index: BTreeMap<String, usize>,
}

impl DatasetManifest {
    fn new(root: PathBuf, info: DatasetInfo, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(CondsepError::Load(format!("duplicate example id `{}`", e.id)));
            }
        }
        let mut seen: BTreeMap<u64, Split> = BTreeMap::new();
        for e in &entries {
            if let Some(prev) = seen.insert(e.seed, e.split) {
                if prev != e.split {
                    return Err(CondsepError::Load(format!("seed {} shared by {} and {}", e.seed, prev, e.split)));
                }
            }
        }
        Ok(DatasetManifest { root, info, entries, index })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.info.config
    }

    pub fn num_classes(&self) -> usize {
        self.info.config.num_classes
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.split(split).map(|e| e.id.clone()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    /// Reads `dataset.json` and `manifest.jsonl` from `dir` and checks that
    /// every referenced file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let info: DatasetInfo = serde_json::from_reader(BufReader::new(
            fs::File::open(dir.join(DATASET_FILE))
                .map_err(|e| CondsepError::Load(format!("{}: {e}", dir.join(DATASET_FILE).display())))?,
        ))?;
        let file = fs::File::open(dir.join(MANIFEST_FILE))
            .map_err(|e| CondsepError::Load(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)?;
            for p in std::iter::once(&entry.mixture_path).chain(&entry.source_paths) {
                if !dir.join(p).is_file() {
                    return Err(CondsepError::Load(format!("missing file {p} for {}", entry.id)));
                }
            }
            entries.push(entry);
        }
        Self::new(dir.to_path_buf(), info, entries)
    }
}

/// Writes a mono PCM16 WAV file.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(BufWriter::new(fs::File::create(path)?), spec)?;
    for &x in clip.samples() {
        w.write_sample(quantize_pcm16(x))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn quantize_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Reads a mono 16-bit WAV file into `[-1, 1)` samples.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut r = hound::WavReader::open(path)
        .map_err(|e| CondsepError::Load(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(CondsepError::Load(format!("{}: expected mono PCM16", path.display())));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CondsepError::Load(format!("{}: {e}", path.display())))?;
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// Generates every split, writes WAV files under `out_dir/<split>/` and the
/// manifest files at the top of `out_dir`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let catalog = default_catalog(config.num_classes)?;
    for split in Split::ALL {
        fs::create_dir_all(out_dir.join(split.as_str()))?;
    }
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..config.count(s)).map(move |i| (s, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(split, i)| {
            let ex = generate_example(config, &catalog, split, i)?;
            let dir = split.as_str();
            let mixture_path = format!("{dir}/{}_mix.wav", ex.id);
            write_wav(&out_dir.join(&mixture_path), &ex.mixture)?;
            let mut source_paths = Vec::new();
            for (k, s) in ex.sources.iter().enumerate() {
                let p = format!("{dir}/{}_s{}.wav", ex.id, k + 1);
                write_wav(&out_dir.join(&p), s)?;
                source_paths.push(p);
            }
            Ok(ManifestEntry {
                id: ex.id,
                split,
                mixture_path,
                source_paths,
                labels: ex.labels,
                gains_db: ex.gains_db,
                seed: ex.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seeds = HashSet::new();
    if !entries.iter().all(|e| seeds.insert(e.seed)) {
        return Err(config_err("derived example seeds collided; choose another global seed"));
    }
    let info = DatasetInfo { config: config.clone(), classes: catalog };
    fs::write(out_dir.join(DATASET_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    let mut w = BufWriter::new(fs::File::create(out_dir.join(MANIFEST_FILE))?);
    for e in &entries {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    w.flush()?;
    DatasetManifest::new(out_dir.to_path_buf(), info, entries)
}

/// Loads one example's WAV files.
pub fn load_example(manifest: &DatasetManifest, id: &str) -> Result<MixtureExample> {
    let e = manifest.entry(id).ok_or_else(|| CondsepError::Load(format!("unknown example id `{id}`")))?;
    let mixture = read_wav(&manifest.root.join(&e.mixture_path))?;
    let sources = e
        .source_paths
        .iter()
        .map(|p| read_wav(&manifest.root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    for s in &sources {
        mixture.check_compatible(s).map_err(|err| CondsepError::Load(format!("{id}: {err}")))?;
    }
    Ok(MixtureExample {
        id: e.id.clone(),
        mixture,
        sources,
        labels: e.labels.clone(),
        gains_db: e.gains_db.clone(),
        seed: e.seed,
        split: e.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn spec(kind: GeneratorKind) -> SoundClassSpec {
        SoundClassSpec { class_id: 0, name: "t".into(), generator: kind }
    }

    #[test]
    fn pure_tone_peaks_at_its_frequency() {
        let s = spec(GeneratorKind::PureTone { freq: ParamRange::fixed(440.0) });
        let clip = generate_source(&s, 7, &ClipFormat::default()).unwrap();
        let n = clip.len();
        let mut buf: Vec<Complex<f64>> = clip.samples().iter().map(|&x| Complex::new(x, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let argmax = (0..n / 2)
            .max_by(|&a, &b| buf[a].norm().partial_cmp(&buf[b].norm()).unwrap())
            .unwrap();
        let nearest = (440.0 * n as f64 / 16000.0).round() as usize;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let format = ClipFormat::default();
        for s in default_catalog(17).unwrap() {
            let a = generate_source(&s, 7, &format).unwrap();
            let b = generate_source(&s, 7, &format).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 48_000);
            for seed in 0..6 {
                let c = generate_source(&s, seed, &format).unwrap();
                let rms = c.rms();
                assert!((0.05..=0.5).contains(&rms), "{} seed {seed}: rms {rms}", s.name);
                assert!(c.peak() <= 1.0 && c.is_finite());
            }
        }
    }

    #[test]
    fn click_train_is_sparse() {
        let s = default_catalog(16).unwrap().into_iter().find(|s| s.name == "clicks").unwrap();
        let clip = generate_source(&s, 3, &ClipFormat::default()).unwrap();
        let active = clip.samples().iter().filter(|x| x.abs() > 1e-4).count();
        assert!((active as f64) < 0.2 * clip.len() as f64, "{active}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = spec(GeneratorKind::PureTone { freq: ParamRange::fixed(9000.0) });
        assert!(matches!(generate_source(&s, 0, &ClipFormat::default()), Err(CondsepError::Config(_))));
        let s = spec(GeneratorKind::LowpassNoise { cutoff: ParamRange::new(500.0, 100.0) });
        assert!(s.validate(16000).is_err());
        assert!(default_catalog(1).is_err());
    }

    #[test]
    fn mixture_additivity_and_gains() {
        let format = ClipFormat { sample_rate: 16000, duration: 0.1 };
        let cat = default_catalog(4).unwrap();
        let a = generate_source(&cat[0], 1, &format).unwrap();
        let m = make_mixture(&[a.clone(), a.clone()], &[0.0, 0.0]).unwrap();
        let scale = MIXTURE_PEAK / (2.0 * a.peak());
        for k in 0..a.len() {
            assert!((m.mixture.samples()[k] - 2.0 * scale * a.samples()[k]).abs() < 1e-12);
            assert_eq!(m.mixture.samples()[k], m.sources[0].samples()[k] + m.sources[1].samples()[k]);
        }
        assert!(m.mixture.peak() <= MIXTURE_PEAK + 1e-12);

        let zero = AudioClip::zeros(a.len(), 16000);
        let m = make_mixture(&[a.clone(), zero], &[0.0, 0.0]).unwrap();
        assert_eq!(m.mixture, m.sources[0]);

        let unit = |c: &AudioClip| c.scaled(1.0 / c.rms());
        let b = generate_source(&cat[1], 2, &format).unwrap();
        let m = make_mixture(&[unit(&a), unit(&b)], &[-5.0, 5.0]).unwrap();
        let ratio = m.sources[1].rms() / m.sources[0].rms();
        assert!((ratio - 10f64.powf(0.5)).abs() < 1e-9, "{ratio}");

        let short = AudioClip::zeros(10, 16000);
        assert!(matches!(make_mixture(&[a.clone(), short], &[0.0, 0.0]), Err(CondsepError::Shape(_))));
        assert!(make_mixture(&[a.clone(), a], &[0.0]).is_err());
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig { num_classes: 6, train: 10, validation: 2, test: 2, duration: 0.25, ..Default::default() }
    }

    #[test]
    fn dataset_is_reproducible_and_loadable() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_dataset(&small_config(), d1.path()).unwrap();
        build_dataset(&small_config(), d2.path()).unwrap();
        assert_eq!(
            fs::read(d1.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(d2.path().join(MANIFEST_FILE)).unwrap()
        );
        for e in &m1.entries {
            for p in std::iter::once(&e.mixture_path).chain(&e.source_paths) {
                assert_eq!(fs::read(d1.path().join(p)).unwrap(), fs::read(d2.path().join(p)).unwrap());
            }
        }
        assert_eq!(m1.ids(Split::Train).len(), 10);

        let loaded = DatasetManifest::load(d1.path()).unwrap();
        let catalog = default_catalog(6).unwrap();
        let mut seeds: HashSet<u64> = HashSet::new();
        for e in &loaded.entries {
            assert!(seeds.insert(e.seed));
            let ex = load_example(&loaded, &e.id).unwrap();
            let idx: usize = e.id.rsplit('-').next().unwrap().parse().unwrap();
            let mem = generate_example(&small_config(), &catalog, e.split, idx).unwrap();
            let max_err = mem
                .mixture
                .samples()
                .iter()
                .zip(ex.mixture.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 2f64.powi(-15));
            for k in 0..ex.mixture.len() {
                let sum: f64 = ex.sources.iter().map(|s| s.samples()[k]).sum();
                assert!((ex.mixture.samples()[k] - sum).abs() <= 3.0 * 2f64.powi(-15));
            }
            for label in &ex.labels {
                assert_eq!(label.iter().map(|&v| v as usize).sum::<usize>(), 1);
            }
        }
        assert!(matches!(load_example(&loaded, "nope"), Err(CondsepError::Load(_))));
    }

    #[test]
    fn corrupt_or_missing_files_fail_to_load() {
        let d = tempfile::tempdir().unwrap();
        let m = build_dataset(&small_config(), d.path()).unwrap();
        let e = &m.entries[0];
        fs::write(d.path().join(&e.mixture_path), b"not a wav").unwrap();
        assert!(matches!(load_example(&m, &e.id), Err(CondsepError::Load(_))));
        fs::remove_file(d.path().join(&e.source_paths[0])).unwrap();
        assert!(matches!(DatasetManifest::load(d.path()), Err(CondsepError::Load(_))));
    }

    #[test]
    fn config_preconditions() {
        let mut c = small_config();
        c.num_classes = 1;
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(build_dataset(&c, d.path()), Err(CondsepError::Config(_))));
        let c = DatasetConfig { test: 0, ..small_config() };
        assert!(c.validate().is_err());
        assert_eq!(DatasetConfig::default().train, 2000);
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let d = tempfile::tempdir().unwrap();
        let blocker = d.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(matches!(build_dataset(&small_config(), &blocker), Err(CondsepError::Io(_))));
    }

    #[test]
    fn pcm16_quantization_bound() {
        for &x in &[0.0, 0.5, -0.5, 0.99999, -1.0, 1.0, 1e-6, 0.123456789] {
            let q = quantize_pcm16(x) as f64 / 32768.0;
            assert!((q - x).abs() <= 2f64.powi(-15), "{x}");
        }
    }
}
