//! Input generators, sparse echo paths, desired-signal synthesis and a PCM WAV reader.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("AR(1) pole must satisfy |pole| < 1, got {0}")]
    UnstablePole(f64),
    #[error("variance must be positive and finite, got {0}")]
    InvalidVariance(f64),
    #[error("requested zero samples")]
    NoSamples,
    #[error("{num_active} active taps requested for a path of length {length}")]
    TooManyActiveTaps { num_active: usize, length: usize },
    #[error("echo path must be non-empty, finite and not identically zero")]
    InvalidPath,
    #[error("input is identically zero; SNR is undefined")]
    AllZeroInput,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("truncated or malformed WAV chunk")]
    Truncated,
    #[error("unsupported encoding (format tag {0}); only integer PCM is read")]
    UnsupportedEncoding(u16),
    #[error("unsupported channel count {0}; only mono is read")]
    UnsupportedChannelCount(u16),
    #[error("unsupported bit depth {0}; only 16-bit PCM is read")]
    UnsupportedBitDepth(u16),
    #[error("empty audio")]
    EmptyAudio,
    #[error("cannot parse tap {index} in {path}: {text:?}")]
    BadTap { path: PathBuf, index: usize, text: String },
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `u(n) = pole·u(n−1) + v(n)` with unit-variance Gaussian innovation, `u(−1) = 0`.
pub fn gen_ar1(pole: f64, n_samples: usize, seed: u64) -> Result<Vec<f64>, SignalError> {
    if !(pole.abs() < 1.0) {
        return Err(SignalError::UnstablePole(pole));
    }
    if n_samples == 0 {
        return Err(SignalError::NoSamples);
    }
    let mut rng = seeded_rng(seed);
    let mut prev = 0.0;
    Ok((0..n_samples)
        .map(|_| {
            prev = pole * prev + gaussian(&mut rng);
            prev
        })
        .collect())
}

pub fn gen_white(variance: f64, n_samples: usize, seed: u64) -> Result<Vec<f64>, SignalError> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(SignalError::InvalidVariance(variance));
    }
    if n_samples == 0 {
        return Err(SignalError::NoSamples);
    }
    let std = variance.sqrt();
    let mut rng = seeded_rng(seed);
    Ok((0..n_samples).map(|_| std * gaussian(&mut rng)).collect())
}

/// Scaling applied to samples read from a file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Keep the `1/32768` PCM scaling.
    #[default]
    None,
    /// Rescale to unit sample variance.
    UnitVariance,
    /// Rescale so the largest magnitude is one.
    Peak,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalSource {
    Ar1 {
        pole: f64,
        innovation_variance: f64,
        seed: u64,
    },
    WhiteGaussian {
        variance: f64,
        seed: u64,
    },
    PcmFile {
        path: PathBuf,
        normalization: Normalization,
    },
}

impl SignalSource {
    /// Draws `n_samples` samples; a file source returns at most its own length.
    pub fn generate(&self, n_samples: usize) -> Result<Vec<f64>, SignalError> {
        match self {
            SignalSource::Ar1 {
                pole,
                innovation_variance,
                seed,
            } => {
                if !(*innovation_variance > 0.0 && innovation_variance.is_finite()) {
                    return Err(SignalError::InvalidVariance(*innovation_variance));
                }
                let scale = innovation_variance.sqrt();
                let mut u = gen_ar1(*pole, n_samples, *seed)?;
                u.iter_mut().for_each(|x| *x *= scale);
                Ok(u)
            }
            SignalSource::WhiteGaussian { variance, seed } => gen_white(*variance, n_samples, *seed),
            SignalSource::PcmFile { path, normalization } => {
                let audio = load_pcm_wav(path)?;
                let mut samples = audio.samples;
                samples.truncate(n_samples);
                normalize(&mut samples, *normalization);
                Ok(samples)
            }
        }
    }
}

fn normalize(samples: &mut [f64], normalization: Normalization) {
    let scale = match normalization {
        Normalization::None => return,
        Normalization::UnitVariance => {
            let mean_sq = samples.iter().map(|x| x * x).sum::<f64>() / samples.len().max(1) as f64;
            mean_sq.sqrt()
        }
        Normalization::Peak => samples.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
    };
    if scale > 0.0 {
        samples.iter_mut().for_each(|x| *x /= scale);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub num_active: usize,
    pub decay_rate: f64,
    pub seed: u64,
}

/// Impulse response `w_o` of the unknown system.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoPath {
    weights: Vec<f64>,
    profile: Option<SparsityProfile>,
}

impl EchoPath {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, SignalError> {
        if weights.is_empty() || !weights.iter().all(|w| w.is_finite()) || weights.iter().all(|&w| w == 0.0) {
            return Err(SignalError::InvalidPath);
        }
        Ok(EchoPath { weights, profile: None })
    }

    /// Unit impulse at lag 0.
    pub fn identity(length: usize) -> Self {
        let mut weights = vec![0.0; length.max(1)];
        weights[0] = 1.0;
        EchoPath { weights, profile: None }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn profile(&self) -> Option<&SparsityProfile> {
        self.profile.as_ref()
    }
}

/// Seeded synthetic sparse path: `num_active` signed Gaussian taps with an
/// exponential envelope `exp(−decay·m/M)`, placed inside the first `3M/4`
/// indices (or the whole path if more taps are requested), unit norm.
pub fn gen_sparse_echo_path(
    length: usize,
    num_active: usize,
    decay_rate: f64,
    seed: u64,
) -> Result<EchoPath, SignalError> {
    if num_active == 0 || length == 0 || !decay_rate.is_finite() {
        return Err(SignalError::InvalidPath);
    }
    if num_active > length {
        return Err(SignalError::TooManyActiveTaps { num_active, length });
    }
    let mut rng = seeded_rng(seed);
    let region = (3 * length / 4).max(num_active);
    let mut positions = index::sample(&mut rng, region, num_active).into_vec();
    positions.sort_unstable();
    let mut weights = vec![0.0; length];
    for &m in &positions {
        let mut g = gaussian(&mut rng);
        while g == 0.0 {
            g = gaussian(&mut rng);
        }
        weights[m] = g * (-decay_rate * m as f64 / length as f64).exp();
    }
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    weights.iter_mut().for_each(|w| *w /= norm);
    Ok(EchoPath {
        weights,
        profile: Some(SparsityProfile {
            num_active,
            decay_rate,
            seed,
        }),
    })
}

/// Reads taps separated by whitespace, commas or newlines; `#` starts a comment.
pub fn load_path_taps(path: &Path) -> Result<EchoPath, SignalError> {
    let text = std::fs::read_to_string(path).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut taps = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            let value = tok.parse::<f64>().map_err(|_| SignalError::BadTap {
                path: path.to_path_buf(),
                index: taps.len(),
                text: tok.to_string(),
            })?;
            taps.push(value);
        }
    }
    EchoPath::from_weights(taps)
}

pub fn flip_path(path: &EchoPath) -> EchoPath {
    EchoPath {
        weights: path.weights.iter().map(|w| -w).collect(),
        profile: path.profile,
    }
}

/// `clean(n) = Σ_m w_o[m] u(n−m)` with zero history before `n = 0`.
pub fn convolve_path(path: &EchoPath, input: &[f64]) -> Vec<f64> {
    let w = path.weights();
    (0..input.len())
        .map(|n| {
            let taps = w.len().min(n + 1);
            (0..taps).map(|m| w[m] * input[n - m]).sum()
        })
        .collect()
}

/// Input, clean echo, additive noise and desired signal of one simulated system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemRun {
    pub input: Vec<f64>,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub desired: Vec<f64>,
    pub noise_variance: f64,
    pub snr_db: f64,
}

/// Adds white Gaussian noise at `snr_db` relative to the batch power of `clean`.
/// `snr_db = +∞` is the noise-free mode.
pub fn add_noise(input: Vec<f64>, clean: Vec<f64>, snr_db: f64, seed: u64) -> Result<SystemRun, SignalError> {
    if input.is_empty() {
        return Err(SignalError::NoSamples);
    }
    if input.iter().all(|&x| x == 0.0) {
        return Err(SignalError::AllZeroInput);
    }
    let power = clean.iter().map(|x| x * x).sum::<f64>() / clean.len() as f64;
    let noise_variance = if snr_db == f64::INFINITY {
        0.0
    } else {
        power * 10f64.powf(-snr_db / 10.0)
    };
    let noise: Vec<f64> = if noise_variance > 0.0 {
        let std = noise_variance.sqrt();
        let mut rng = seeded_rng(seed);
        (0..clean.len()).map(|_| std * gaussian(&mut rng)).collect()
    } else {
        vec![0.0; clean.len()]
    };
    let desired = clean.iter().zip(&noise).map(|(c, e)| c + e).collect();
    Ok(SystemRun {
        input,
        clean,
        noise,
        desired,
        noise_variance,
        snr_db,
    })
}

pub fn synthesize_desired(path: &EchoPath, input: &[f64], snr_db: f64, seed: u64) -> Result<SystemRun, SignalError> {
    let clean = convolve_path(path, input);
    add_noise(input.to_vec(), clean, snr_db, seed)
}

/// Mono PCM samples scaled by `1/32768`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmAudio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmAudio {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn load_pcm_wav(path: &Path) -> Result<PcmAudio, SignalError> {
    let bytes = std::fs::read(path).map_err(|source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pcm_wav(&bytes)
}

fn le_u16(b: &[u8], at: usize) -> Result<u16, SignalError> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or(SignalError::Truncated)
}

fn le_u32(b: &[u8], at: usize) -> Result<u32, SignalError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or(SignalError::Truncated)
}

/// RIFF/WAVE, integer PCM, mono, 16 bit, little-endian.
pub fn parse_pcm_wav(bytes: &[u8]) -> Result<PcmAudio, SignalError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(SignalError::NotWave);
    }
    let mut at = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = le_u32(bytes, at + 4)? as usize;
        let body = at + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(SignalError::Truncated);
                }
                let tag = le_u16(bytes, body)?;
                let channels = le_u16(bytes, body + 2)?;
                let rate = le_u32(bytes, body + 4)?;
                let bits = le_u16(bytes, body + 14)?;
                // WAVE_FORMAT_EXTENSIBLE carries the real tag in its sub-format GUID.
                let tag = if tag == 0xFFFE && size >= 40 {
                    le_u16(bytes, body + 24)?
                } else {
                    tag
                };
                format = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = format.ok_or(SignalError::Truncated)?;
                if tag != 1 {
                    return Err(SignalError::UnsupportedEncoding(tag));
                }
                if channels != 1 {
                    return Err(SignalError::UnsupportedChannelCount(channels));
                }
                if bits != 16 {
                    return Err(SignalError::UnsupportedBitDepth(bits));
                }
                let data = bytes.get(body..body + size).ok_or(SignalError::Truncated)?;
                if data.len() < 2 {
                    return Err(SignalError::EmptyAudio);
                }
                let samples = data
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(PcmAudio {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        // chunks are padded to even sizes
        at = body + size + (size & 1);
    }
    Err(SignalError::Truncated)
}

#[cfg(test)]
pub(crate) fn wav_bytes(tag: u16, channels: u16, bits: u16, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&8000u32.to_le_bytes());
    let block = channels * bits / 8;
    out.extend_from_slice(&(8000 * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag1(x: &[f64]) -> f64 {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        cov / var
    }

    #[test]
    fn ar1_matches_stationary_statistics() {
        let u = gen_ar1(0.95, 1_000_000, 7).unwrap();
        let var = u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64;
        let theory = 1.0 / (1.0 - 0.95f64 * 0.95);
        assert!((var / theory - 1.0).abs() < 0.05, "{var} vs {theory}");
        assert!((lag1(&u) - 0.95).abs() < 0.01);
    }

    #[test]
    fn ar1_with_zero_pole_is_white() {
        let u = gen_ar1(0.0, 200_000, 3).unwrap();
        assert!(lag1(&u).abs() < 0.01);
    }

    #[test]
    fn ar1_rejects_unstable_pole() {
        assert!(matches!(gen_ar1(1.0, 10, 0), Err(SignalError::UnstablePole(_))));
        assert!(matches!(gen_ar1(-1.2, 10, 0), Err(SignalError::UnstablePole(_))));
        assert!(matches!(gen_ar1(f64::NAN, 10, 0), Err(SignalError::UnstablePole(_))));
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(gen_ar1(0.9, 100, 5).unwrap(), gen_ar1(0.9, 100, 5).unwrap());
        assert_ne!(gen_ar1(0.9, 100, 5).unwrap(), gen_ar1(0.9, 100, 6).unwrap());
        assert_eq!(
            gen_sparse_echo_path(64, 8, 1.0, 2).unwrap(),
            gen_sparse_echo_path(64, 8, 1.0, 2).unwrap()
        );
    }

    #[test]
    fn sparse_path_shape() {
        let p = gen_sparse_echo_path(512, 32, 4.0, 11).unwrap();
        assert_eq!(p.weights().iter().filter(|&&w| w == 0.0).count(), 480);
        assert!(p.weights()[384..].iter().all(|&w| w == 0.0));
        let norm: f64 = p.weights().iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let dense = gen_sparse_echo_path(8, 8, 0.0, 1).unwrap();
        assert!(dense.weights().iter().all(|&w| w != 0.0));
        assert!(matches!(
            gen_sparse_echo_path(8, 9, 0.0, 1),
            Err(SignalError::TooManyActiveTaps { .. })
        ));
    }

    #[test]
    fn flip_is_a_norm_preserving_involution() {
        let p = gen_sparse_echo_path(64, 8, 2.0, 4).unwrap();
        assert_eq!(flip_path(&flip_path(&p)), p);
        let n = |p: &EchoPath| p.weights().iter().map(|w| w * w).sum::<f64>();
        assert_eq!(n(&flip_path(&p)), n(&p));
    }

    #[test]
    fn identity_path_and_noise_free_mode() {
        let u = gen_white(1.0, 1000, 1).unwrap();
        let run = synthesize_desired(&EchoPath::identity(16), &u, f64::INFINITY, 2).unwrap();
        assert_eq!(run.clean, u);
        assert_eq!(run.desired, u);
        assert_eq!(run.noise_variance, 0.0);
    }

    #[test]
    fn noise_variance_follows_snr_definition() {
        let u = gen_ar1(0.95, 20_000, 1).unwrap();
        let p = gen_sparse_echo_path(64, 8, 2.0, 3).unwrap();
        let run = synthesize_desired(&p, &u, 30.0, 9).unwrap();
        let power = run.clean.iter().map(|x| x * x).sum::<f64>() / run.clean.len() as f64;
        assert!((run.noise_variance - power * 1e-3).abs() <= 1e-15 * power);
    }

    #[test]
    fn realized_snr_within_tolerance() {
        let u = gen_ar1(0.95, 1_000_000, 21).unwrap();
        let p = gen_sparse_echo_path(32, 4, 1.0, 22).unwrap();
        let run = synthesize_desired(&p, &u, 20.0, 23).unwrap();
        let pc = run.clean.iter().map(|x| x * x).sum::<f64>();
        let pn = run.noise.iter().map(|x| x * x).sum::<f64>();
        let snr = 10.0 * (pc / pn).log10();
        assert!((snr - 20.0).abs() < 0.2, "{snr}");
    }

    #[test]
    fn all_zero_input_is_rejected() {
        let p = EchoPath::identity(4);
        assert!(matches!(
            synthesize_desired(&p, &[0.0; 10], 30.0, 0),
            Err(SignalError::AllZeroInput)
        ));
    }

    #[test]
    fn convolution_by_hand() {
        let p = EchoPath::from_weights(vec![1.0, 0.5]).unwrap();
        assert_eq!(convolve_path(&p, &[1.0, 2.0, 3.0]), vec![1.0, 2.5, 4.0]);
    }

    #[test]
    fn wav_scaling_and_errors() {
        let data: Vec<u8> = [0i16, 16384, -16384].iter().flat_map(|s| s.to_le_bytes()).collect();
        let audio = parse_pcm_wav(&wav_bytes(1, 1, 16, &data)).unwrap();
        assert_eq!(audio.samples, vec![0.0, 0.5, -0.5]);
        assert_eq!(audio.sample_rate, 8000);

        assert!(matches!(
            parse_pcm_wav(&wav_bytes(1, 1, 16, &[])),
            Err(SignalError::EmptyAudio)
        ));
        assert!(matches!(
            parse_pcm_wav(&wav_bytes(1, 2, 16, &data)),
            Err(SignalError::UnsupportedChannelCount(2))
        ));
        assert!(matches!(
            parse_pcm_wav(&wav_bytes(3, 1, 32, &[0; 8])),
            Err(SignalError::UnsupportedEncoding(3))
        ));
        assert!(matches!(
            parse_pcm_wav(&wav_bytes(1, 1, 8, &[0; 8])),
            Err(SignalError::UnsupportedBitDepth(8))
        ));
        assert!(matches!(parse_pcm_wav(b"not a wave file"), Err(SignalError::NotWave)));
        assert!(matches!(
            load_pcm_wav(Path::new("/nonexistent/file.wav")),
            Err(SignalError::Io { .. })
        ));
    }

    #[test]
    fn pcm_source_truncates_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let data: Vec<u8> = [1000i16, -2000, 500, 0].iter().flat_map(|s| s.to_le_bytes()).collect();
        std::fs::write(&path, wav_bytes(1, 1, 16, &data)).unwrap();
        let src = SignalSource::PcmFile {
            path,
            normalization: Normalization::Peak,
        };
        let x = src.generate(3).unwrap();
        assert_eq!(x, vec![0.5, -1.0, 0.25]);
    }
}
